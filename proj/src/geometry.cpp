// SPDX-License-Identifier: Apache-2.0
#include "bevcon/geometry.hpp"

#include <algorithm>
#include <limits>

namespace bevcon {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kMinDepth = 1e-6;

Vec3 mat3_mul(const std::array<double, 9>& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Vec3 mat3_tmul(const std::array<double, 9>& m, const Vec3& v) {
  return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
          m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
          m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}
}  // namespace

double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a <= 0.0) a += 2.0 * kPi;
  return a - kPi;
}

bool CameraModel::valid(double tol) const {
  if (!(fx > 0.0) || !(fy > 0.0)) return false;
  if (image_width <= 0 || image_height <= 0) return false;
  const auto& r = rotation;
  // R^T R == I
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = r[i] * r[j] + r[3 + i] * r[3 + j] + r[6 + i] * r[6 + j];
      double want = (i == j) ? 1.0 : 0.0;
      if (std::abs(dot - want) > tol) return false;
    }
  }
  double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
               r[2] * (r[3] * r[7] - r[4] * r[6]);
  return std::abs(det - 1.0) <= tol;
}

std::optional<PixelPoint> project_point(const CameraModel& camera, const Vec3& point) {
  Vec3 rel{point[0] - camera.translation[0], point[1] - camera.translation[1],
           point[2] - camera.translation[2]};
  Vec3 pc = mat3_tmul(camera.rotation, rel);  // ego -> camera
  if (pc[2] <= kMinDepth) return std::nullopt;
  PixelPoint out;
  out.u = camera.fx * pc[0] / pc[2] + camera.cx;
  out.v = camera.fy * pc[1] / pc[2] + camera.cy;
  out.depth = pc[2];
  return out;
}

Vec3 unproject_pixel(const CameraModel& camera, double u, double v, double depth) {
  Vec3 pc{(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth};
  Vec3 pe = mat3_mul(camera.rotation, pc);
  return {pe[0] + camera.translation[0], pe[1] + camera.translation[1],
          pe[2] + camera.translation[2]};
}

std::array<Vec3, 8> box3d_corners(const Box3D& box) {
  double c = std::cos(box.yaw), s = std::sin(box.yaw);
  double hl = 0.5 * box.length, hw = 0.5 * box.width, hh = 0.5 * box.height;
  std::array<Vec3, 8> out;
  int idx = 0;
  for (double sz : {-1.0, 1.0}) {
    for (double sy : {-1.0, 1.0}) {
      for (double sx : {-1.0, 1.0}) {
        double lx = sx * hl, ly = sy * hw;
        out[idx++] = {box.center[0] + c * lx - s * ly, box.center[1] + s * lx + c * ly,
                      box.center[2] + sz * hh};
      }
    }
  }
  return out;
}

std::optional<Box2D> box3d_to_box2d(const CameraModel& camera, const Box3D& box) {
  auto corners = box3d_corners(box);
  double x1 = std::numeric_limits<double>::infinity(), y1 = x1;
  double x2 = -x1, y2 = -x1;
  int visible = 0;
  for (const auto& corner : corners) {
    auto p = project_point(camera, corner);
    if (!p) continue;
    ++visible;
    x1 = std::min(x1, p->u);
    y1 = std::min(y1, p->v);
    x2 = std::max(x2, p->u);
    y2 = std::max(y2, p->v);
  }
  if (visible < 2) return std::nullopt;
  Box2D out;
  out.x1 = std::clamp(x1, 0.0, static_cast<double>(camera.image_width));
  out.y1 = std::clamp(y1, 0.0, static_cast<double>(camera.image_height));
  out.x2 = std::clamp(x2, 0.0, static_cast<double>(camera.image_width));
  out.y2 = std::clamp(y2, 0.0, static_cast<double>(camera.image_height));
  out.instance_id = box.instance_id;
  if (out.width() <= 0.0 || out.height() <= 0.0 || out.area() < 4.0) return std::nullopt;
  return out;
}

RotatedBoxBev box3d_to_bev_rot_box(const Box3D& box, const BevSpec& spec) {
  RotatedBoxBev out;
  out.center_gx = (box.center[0] - spec.x_min) / spec.cell_size_x();
  out.center_gy = (box.center[1] - spec.y_min) / spec.cell_size_y();
  out.len_gx = box.length / spec.cell_size_x();
  out.len_gy = box.width / spec.cell_size_y();
  out.yaw = box.yaw;
  return out;
}

Vec3 BevSimilarity::apply_point(const Vec3& p) const {
  double c = std::cos(rotation), s = std::sin(rotation);
  double x = scale * (c * p[0] - s * p[1]);
  double y = scale * (s * p[0] + c * p[1]);
  double z = scale * p[2];
  if (flip_x) x = -x;
  if (flip_y) y = -y;
  return {x, y, z};
}

BevSimilarity BevSimilarity::inverse() const {
  // (F S R)^-1 = R^-1 S^-1 F^-1. Flips commute with scaling and conjugate
  // the rotation, so the inverse is again of the F * S * R form.
  BevSimilarity inv;
  inv.flip_x = flip_x;
  inv.flip_y = flip_y;
  inv.scale = 1.0 / scale;
  inv.rotation = (flip_x == flip_y) ? -rotation : rotation;
  return inv;
}

Box3D apply_bev_similarity(const BevSimilarity& t, const Box3D& box) {
  Box3D out = box;
  out.center = t.apply_point(box.center);
  out.length = t.scale * box.length;
  out.width = t.scale * box.width;
  out.height = t.scale * box.height;
  double yaw = box.yaw + t.rotation;
  if (t.flip_x) yaw = kPi - yaw;
  if (t.flip_y) yaw = -yaw;
  out.yaw = wrap_angle(yaw);
  return out;
}

namespace {

using Poly = std::vector<std::array<double, 2>>;

Poly footprint(const Box3D& b) {
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  double hl = 0.5 * b.length, hw = 0.5 * b.width;
  Poly p(4);
  const double sx[4] = {-1, 1, 1, -1};
  const double sy[4] = {-1, -1, 1, 1};
  for (int i = 0; i < 4; ++i) {
    double lx = sx[i] * hl, ly = sy[i] * hw;
    p[i] = {b.center[0] + c * lx - s * ly, b.center[1] + s * lx + c * ly};
  }
  return p;
}

double poly_area(const Poly& p) {
  double a = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % p.size()];
    a += u[0] * v[1] - v[0] * u[1];
  }
  return 0.5 * std::abs(a);
}

// Sutherland-Hodgman clip of subject against convex clip polygon (CCW).
Poly clip_poly(const Poly& subject, const Poly& clip) {
  Poly out = subject;
  for (size_t i = 0; i < clip.size() && !out.empty(); ++i) {
    const auto& a = clip[i];
    const auto& b = clip[(i + 1) % clip.size()];
    Poly in;
    in.swap(out);
    auto side = [&](const std::array<double, 2>& p) {
      return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    };
    for (size_t j = 0; j < in.size(); ++j) {
      const auto& p = in[j];
      const auto& q = in[(j + 1) % in.size()];
      double sp = side(p), sq = side(q);
      if (sp >= 0.0) out.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) {
        double t = sp / (sp - sq);
        out.push_back({p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
      }
    }
  }
  return out;
}

Poly make_ccw(Poly p) {
  double a = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % p.size()];
    a += u[0] * v[1] - v[0] * u[1];
  }
  if (a < 0.0) std::reverse(p.begin(), p.end());
  return p;
}

}  // namespace

double bev_iou(const Box3D& a, const Box3D& b) {
  Poly pa = make_ccw(footprint(a));
  Poly pb = make_ccw(footprint(b));
  double inter = poly_area(clip_poly(pa, pb));
  double uni = poly_area(pa) + poly_area(pb) - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

}  // namespace bevcon
