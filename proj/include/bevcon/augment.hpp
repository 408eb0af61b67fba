// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bevcon/geometry.hpp"
#include "bevcon/image.hpp"
#include "bevcon/scenegen.hpp"

namespace bevcon {

// 2D affine on pixel coordinates, row-major [a b c; d e f]; maps source
// image coords to augmented coords.
struct ViewAffine {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  static ViewAffine identity() { return {}; }
  std::array<double, 2> apply(double u, double v) const {
    return {m[0] * u + m[1] * v + m[2], m[3] * u + m[4] * v + m[5]};
  }
  ViewAffine inverse() const;
  static ViewAffine compose(const ViewAffine& outer, const ViewAffine& inner);
};

struct PhotometricParams {
  double brightness = 0.0;  // additive
  double contrast = 1.0;    // about mid-gray
  double saturation = 1.0;  // toward luma
};

struct ViewAug {
  ViewAffine affine;
  PhotometricParams photo;
};

struct ImageAugConfig {
  double scale_min = 0.8, scale_max = 1.2;
  double rotation_max_deg = 10.0;
  double hflip_prob = 0.5;
  double crop_jitter_frac = 0.1;       // of each image dimension
  double photometric_strength = 0.2;
};

struct BevAugConfig {
  double rotation_max_deg = 22.5;
  double scale_min = 0.95, scale_max = 1.05;
  double flip_prob = 0.5;  // per axis
};

struct AugConfig {
  ImageAugConfig image;
  BevAugConfig bev;
  bool shared_bev_aug = false;  // force one BEV transform for both branches

  static AugConfig none();  // identity augmentation everywhere
};

struct AugmentedView {
  std::vector<Image> images;
  std::vector<ViewAug> view_augs;
  BevSimilarity bev_aug;
  std::vector<Box3D> boxes3d;               // BEV-augmented, extent-filtered
  std::vector<std::vector<Box2D>> boxes2d;  // per view, augmented-image frame
};

struct AugmentedPair {
  AugmentedView view_a;  // online branch
  AugmentedView view_b;  // EMA branch
  std::vector<int> shared_instance_ids;  // sorted
};

// Projected 2D box of a 3D box after remapping corners through the view
// affine (the augmented image frame); same visibility rule as box3d_to_box2d.
std::optional<Box2D> box3d_to_box2d_affine(const CameraModel& camera, const Box3D& box,
                                           const ViewAffine& affine);

Image warp_image(const Image& src, const ViewAffine& affine, const PhotometricParams& photo);

// Two independent draws of image-space and BEV-space augmentations. Pure in
// (scene, seed); branch draws come from forked streams so one branch's
// consumption never shifts the other's.
AugmentedPair augment_pair(const Scene& scene, const BevSpec& bev, std::uint64_t seed,
                           const AugConfig& cfg);

}  // namespace bevcon
