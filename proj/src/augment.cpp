// SPDX-License-Identifier: Apache-2.0
#include "bevcon/augment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "bevcon/rng.hpp"

namespace bevcon {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

ViewAffine ViewAffine::inverse() const {
  double det = m[0] * m[4] - m[1] * m[3];
  if (std::abs(det) < 1e-12) throw std::runtime_error("singular view affine");
  ViewAffine inv;
  inv.m[0] = m[4] / det;
  inv.m[1] = -m[1] / det;
  inv.m[3] = -m[3] / det;
  inv.m[4] = m[0] / det;
  inv.m[2] = -(inv.m[0] * m[2] + inv.m[1] * m[5]);
  inv.m[5] = -(inv.m[3] * m[2] + inv.m[4] * m[5]);
  return inv;
}

ViewAffine ViewAffine::compose(const ViewAffine& o, const ViewAffine& i) {
  ViewAffine r;
  r.m[0] = o.m[0] * i.m[0] + o.m[1] * i.m[3];
  r.m[1] = o.m[0] * i.m[1] + o.m[1] * i.m[4];
  r.m[2] = o.m[0] * i.m[2] + o.m[1] * i.m[5] + o.m[2];
  r.m[3] = o.m[3] * i.m[0] + o.m[4] * i.m[3];
  r.m[4] = o.m[3] * i.m[1] + o.m[4] * i.m[4];
  r.m[5] = o.m[3] * i.m[2] + o.m[4] * i.m[5] + o.m[5];
  return r;
}

AugConfig AugConfig::none() {
  AugConfig c;
  c.image = {1.0, 1.0, 0.0, 0.0, 0.0, 0.0};
  c.bev = {0.0, 1.0, 1.0, 0.0};
  return c;
}

std::optional<Box2D> box3d_to_box2d_affine(const CameraModel& camera, const Box3D& box,
                                           const ViewAffine& affine) {
  auto corners = box3d_corners(box);
  double x1 = std::numeric_limits<double>::infinity(), y1 = x1;
  double x2 = -x1, y2 = -x1;
  int visible = 0;
  for (const auto& corner : corners) {
    auto p = project_point(camera, corner);
    if (!p) continue;
    ++visible;
    auto q = affine.apply(p->u, p->v);
    x1 = std::min(x1, q[0]);
    y1 = std::min(y1, q[1]);
    x2 = std::max(x2, q[0]);
    y2 = std::max(y2, q[1]);
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

namespace {

double sample_bilinear(const Image& src, double u, double v, int c) {
  double xf = u - 0.5, yf = v - 0.5;
  int x0 = static_cast<int>(std::floor(xf));
  int y0 = static_cast<int>(std::floor(yf));
  double wx = xf - x0, wy = yf - y0;
  double out = 0.0;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      int x = x0 + dx, y = y0 + dy;
      if (x < 0 || x >= src.width || y < 0 || y >= src.height) continue;  // zero pad
      double w = (dx ? wx : 1.0 - wx) * (dy ? wy : 1.0 - wy);
      out += w * src.at(y, x, c);
    }
  }
  return out;
}

}  // namespace

Image warp_image(const Image& src, const ViewAffine& affine, const PhotometricParams& photo) {
  Image out(src.height, src.width);
  ViewAffine inv = affine.inverse();
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      auto s = inv.apply(x + 0.5, y + 0.5);
      double rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = sample_bilinear(src, s[0], s[1], c);
      double luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
      for (int c = 0; c < 3; ++c) {
        // forms chosen so identity parameters reproduce the input bit-exactly
        double v = photo.saturation * rgb[c] + (1.0 - photo.saturation) * luma;
        v = photo.contrast * v + 0.5 * (1.0 - photo.contrast) + photo.brightness;
        out.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

namespace {

ViewAug draw_view_aug(Rng& rng, const ImageAugConfig& cfg, int width, int height) {
  ViewAug aug;
  double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  double rot = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg) * kPi / 180.0;
  bool hflip = rng.bernoulli(cfg.hflip_prob);
  double jx = rng.uniform(-cfg.crop_jitter_frac, cfg.crop_jitter_frac) * width;
  double jy = rng.uniform(-cfg.crop_jitter_frac, cfg.crop_jitter_frac) * height;
  double s = cfg.photometric_strength;
  aug.photo.brightness = rng.uniform(-s, s);
  aug.photo.contrast = 1.0 + rng.uniform(-s, s);
  aug.photo.saturation = 1.0 + rng.uniform(-s, s);

  // About-center rotation+scale+flip, then crop-window shift.
  double cx = width / 2.0, cy = height / 2.0;
  double c = std::cos(rot), sn = std::sin(rot);
  double fx = hflip ? -1.0 : 1.0;
  ViewAffine a;
  a.m[0] = scale * c * fx;
  a.m[1] = -scale * sn;
  a.m[3] = scale * sn * fx;
  a.m[4] = scale * c;
  a.m[2] = cx + jx - (a.m[0] * cx + a.m[1] * cy);
  a.m[5] = cy + jy - (a.m[3] * cx + a.m[4] * cy);
  aug.affine = a;
  return aug;
}

BevSimilarity draw_bev_aug(Rng& rng, const BevAugConfig& cfg) {
  BevSimilarity t;
  t.rotation = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg) * kPi / 180.0;
  t.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  t.flip_x = rng.bernoulli(cfg.flip_prob);
  t.flip_y = rng.bernoulli(cfg.flip_prob);
  return t;
}

AugmentedView build_view(const Scene& scene, const BevSpec& bev, const AugConfig& cfg,
                         Rng branch_rng, const BevSimilarity& bev_aug) {
  AugmentedView view;
  view.bev_aug = bev_aug;
  const int n_views = static_cast<int>(scene.images.size());
  view.images.resize(n_views);
  view.view_augs.resize(n_views);
  view.boxes2d.resize(n_views);
  for (int k = 0; k < n_views; ++k) {
    Rng view_rng = branch_rng.fork(0x1111, k);
    view.view_augs[k] =
        draw_view_aug(view_rng, cfg.image, scene.images[k].width, scene.images[k].height);
    view.images[k] =
        warp_image(scene.images[k], view.view_augs[k].affine, view.view_augs[k].photo);
    for (const auto& box : scene.boxes) {
      auto b2 = box3d_to_box2d_affine(scene.cameras[k], box, view.view_augs[k].affine);
      if (b2) {
        b2->view_index = k;
        view.boxes2d[k].push_back(*b2);
      }
    }
  }
  for (const auto& box : scene.boxes) {
    Box3D t = apply_bev_similarity(bev_aug, box);
    if (bev.contains(t.center[0], t.center[1])) view.boxes3d.push_back(t);
  }
  return view;
}

}  // namespace

AugmentedPair augment_pair(const Scene& scene, const BevSpec& bev, std::uint64_t seed,
                           const AugConfig& cfg) {
  Rng base(seed);
  Rng rng_a = base.fork(0xa);
  Rng rng_b = base.fork(0xb);
  Rng rng_bev_a = base.fork(0xbe, 0xa);
  Rng rng_bev_b = base.fork(0xbe, 0xb);
  BevSimilarity bev_a = draw_bev_aug(rng_bev_a, cfg.bev);
  BevSimilarity bev_b = cfg.shared_bev_aug ? bev_a : draw_bev_aug(rng_bev_b, cfg.bev);

  AugmentedPair pair;
  pair.view_a = build_view(scene, bev, cfg, rng_a, bev_a);
  pair.view_b = build_view(scene, bev, cfg, rng_b, bev_b);

  std::set<int> ids_a, ids_b;
  for (const auto& b : pair.view_a.boxes3d) ids_a.insert(b.instance_id);
  for (const auto& b : pair.view_b.boxes3d) ids_b.insert(b.instance_id);
  std::set_intersection(ids_a.begin(), ids_a.end(), ids_b.begin(), ids_b.end(),
                        std::back_inserter(pair.shared_instance_ids));
  return pair;
}

}  // namespace bevcon
