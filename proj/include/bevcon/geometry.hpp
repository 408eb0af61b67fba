// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

namespace bevcon {

using Vec3 = std::array<double, 3>;

// Coordinate conventions used throughout:
//   ego frame:    +x forward, +y left, +z up, origin at the ego vehicle.
//   camera frame: +x right, +y down, +z along the optical axis.
//   BEV grid:     +x maps to the column index, +y to the row index;
//                 continuous grid coords gx in [0, grid_w], gy in [0, grid_h].
// Yaw is the rotation about +z of the box length axis, kept in (-pi, pi].

double wrap_angle(double a);  // to (-pi, pi]

struct CameraModel {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  std::array<double, 9> rotation{};  // camera-to-ego, row major
  Vec3 translation{};                // camera position in ego frame, meters
  int image_width = 0, image_height = 0;

  bool valid(double tol = 1e-9) const;  // intrinsics positive, R orthonormal, det +1
};

struct BevSpec {
  double x_min = 0.0, x_max = 0.0, y_min = 0.0, y_max = 0.0;  // meters
  int grid_h = 0, grid_w = 0;

  double cell_size_x() const { return (x_max - x_min) / grid_w; }
  double cell_size_y() const { return (y_max - y_min) / grid_h; }
  bool contains(double x, double y) const {
    return x >= x_min && x < x_max && y >= y_min && y < y_max;
  }
};

struct Box3D {
  Vec3 center{};            // ego frame, meters
  double length = 0.0;      // along the yaw axis
  double width = 0.0;
  double height = 0.0;
  double yaw = 0.0;         // radians, (-pi, pi]
  int class_id = 0;
  int instance_id = 0;
};

struct Box2D {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;  // pixels
  int view_index = 0;
  int instance_id = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
};

// Rotation about +z, uniform scale, then axis flips, all about the ego origin.
struct BevSimilarity {
  double rotation = 0.0;  // radians
  double scale = 1.0;     // > 0
  bool flip_x = false;
  bool flip_y = false;

  static BevSimilarity identity() { return {}; }
  BevSimilarity inverse() const;

  // Applies F * S * R to an ego-frame point.
  Vec3 apply_point(const Vec3& p) const;
};

// Box footprint in continuous BEV grid coordinates.
struct RotatedBoxBev {
  double center_gx = 0.0, center_gy = 0.0;
  double len_gx = 0.0, len_gy = 0.0;
  double yaw = 0.0;
};

struct PixelPoint {
  double u = 0.0, v = 0.0;  // pixels
  double depth = 0.0;       // camera-frame z, meters
};

// Pinhole projection; nullopt when the point sits at or behind the camera
// plane (depth <= 1e-6).
std::optional<PixelPoint> project_point(const CameraModel& camera, const Vec3& point);

// Camera-frame ray direction of an image pixel, i.e. the point at depth 1.
Vec3 unproject_pixel(const CameraModel& camera, double u, double v, double depth);

std::array<Vec3, 8> box3d_corners(const Box3D& box);

// Axis-aligned rectangle of the projected corners, clipped to the image.
// Requires at least two corners in front of the camera and >= 4 px^2 of
// clipped area.
std::optional<Box2D> box3d_to_box2d(const CameraModel& camera, const Box3D& box);

RotatedBoxBev box3d_to_bev_rot_box(const Box3D& box, const BevSpec& spec);

Box3D apply_bev_similarity(const BevSimilarity& t, const Box3D& box);

// Overlap of two box footprints in the BEV plane (rotated-rectangle IoU).
double bev_iou(const Box3D& a, const Box3D& b);

}  // namespace bevcon
