// SPDX-License-Identifier: Apache-2.0
#include "bevcon/pooling.hpp"

#include <cmath>
#include <stdexcept>

#include "bevcon/telemetry.hpp"

namespace bevcon {

// Bilinear read at continuous grid coords (gx, gy) with cell centers at
// integer+0.5; out-of-range neighbors read as zero. Adds up to four taps with
// the given base weight.
static void bilinear_taps(int h, int w, double gx, double gy, double weight, PoolTaps& out) {
  const double u = gx - 0.5;
  const double v = gy - 0.5;
  const int x0 = static_cast<int>(std::floor(u));
  const int y0 = static_cast<int>(std::floor(v));
  const double fx = u - x0;
  const double fy = v - y0;
  const double wts[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  for (int i = 0; i < 4; ++i) {
    if (xs[i] < 0 || xs[i] >= w || ys[i] < 0 || ys[i] >= h) continue;
    if (wts[i] == 0.0) continue;
    out.taps.push_back({ys[i] * w + xs[i], weight * wts[i]});
  }
}

static Tensor gather_from_taps(const Tensor& map, const PoolTaps& taps) {
  const int c = map.dim(2);
  Tensor out({c});
  for (const auto& t : taps.taps) {
    const double* row = map.data() + static_cast<size_t>(t.cell) * c;
    for (int j = 0; j < c; ++j) out[j] += t.w * row[j];
  }
  return out;
}

static PoolTaps rotated_box_taps(int h, int w, const RotatedBoxBev& rbox, const PoolConfig& cfg) {
  PoolTaps taps;
  if (cfg.mode == PoolConfig::Mode::gather) {
    const int x = static_cast<int>(std::floor(rbox.center_gx));
    const int y = static_cast<int>(std::floor(rbox.center_gy));
    if (x >= 0 && x < w && y >= 0 && y < h) taps.taps.push_back({y * w + x, 1.0});
    return taps;
  }
  const int s = cfg.output_size;
  const int n = cfg.samples_per_bin;
  const double bin_x = rbox.len_gx / s;
  const double bin_y = rbox.len_gy / s;
  const double cy = std::cos(rbox.yaw), sy = std::sin(rbox.yaw);
  const double weight = 1.0 / (static_cast<double>(s) * s * n * n);
  for (int by = 0; by < s; ++by) {
    for (int bx = 0; bx < s; ++bx) {
      for (int iy = 0; iy < n; ++iy) {
        for (int ix = 0; ix < n; ++ix) {
          const double lx = -0.5 * rbox.len_gx + (bx + (ix + 0.5) / n) * bin_x;
          const double ly = -0.5 * rbox.len_gy + (by + (iy + 0.5) / n) * bin_y;
          const double gx = rbox.center_gx + lx * cy - ly * sy;
          const double gy = rbox.center_gy + lx * sy + ly * cy;
          bilinear_taps(h, w, gx, gy, weight, taps);
        }
      }
    }
  }
  return taps;
}

Tensor roi_align_bev(const Tensor& grid, const RotatedBoxBev& rbox, const PoolConfig& cfg,
                     PoolTaps* taps) {
  if (rbox.len_gx <= 0.0 || rbox.len_gy <= 0.0)
    throw std::runtime_error("roi_align_bev: non-positive box side");
  PoolTaps t = rotated_box_taps(grid.dim(0), grid.dim(1), rbox, cfg);
  Tensor out = gather_from_taps(grid, t);
  if (taps) *taps = std::move(t);
  return out;
}

Tensor roi_align_image(const Tensor& fmap, const Box2D& box, const PoolConfig& cfg,
                       PoolTaps* taps) {
  RotatedBoxBev rbox;
  rbox.center_gx = box.center_x();
  rbox.center_gy = box.center_y();
  rbox.len_gx = box.width();
  rbox.len_gy = box.height();
  rbox.yaw = 0.0;
  return roi_align_bev(fmap, rbox, cfg, taps);
}

void roi_align_scatter(const Tensor& dvec, const PoolTaps& taps, Tensor& dmap) {
  const int c = dmap.dim(2);
  for (const auto& t : taps.taps) {
    double* row = dmap.data() + static_cast<size_t>(t.cell) * c;
    for (int j = 0; j < c; ++j) row[j] += t.w * dvec[j];
  }
}

Box2D shrink_box2d(const Box2D& box, double gamma, bool* degenerate) {
  Box2D out = box;
  const double cx = box.center_x(), cy = box.center_y();
  const double hw = 0.5 * gamma * box.width();
  const double hh = 0.5 * gamma * box.height();
  out.x1 = cx - hw;
  out.x2 = cx + hw;
  out.y1 = cy - hh;
  out.y2 = cy + hh;
  if (degenerate) *degenerate = out.width() < 1.0 || out.height() < 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// instance pooling

static const double kMinFeatureNorm = 1e-8;

// Finishes a pooled batch: projection head (optional), L2 normalization, and
// the degenerate-norm drop. Rows surviving keep their taps/views alignment.
static void finish_pooled(PooledBatch& pb, const ProjectionMlp* head) {
  const int n = pb.pooled.dim(0);
  if (n == 0) {
    pb.feats.vectors = Tensor({0, 0});
    return;
  }
  pb.pre_norm = head ? projection_forward(*head, pb.pooled, &pb.proj) : pb.pooled;

  // drop rows whose feature collapsed (e.g. a box over an all-zero region)
  std::vector<int> keep;
  const int d = pb.pre_norm.dim(1);
  for (int i = 0; i < n; ++i) {
    double nrm = 0.0;
    for (int j = 0; j < d; ++j) nrm += pb.pre_norm.at2(i, j) * pb.pre_norm.at2(i, j);
    if (std::sqrt(nrm) >= kMinFeatureNorm) keep.push_back(i);
  }
  if (static_cast<int>(keep.size()) != n) {
    auto filter_rows = [&](const Tensor& t) {
      Tensor out({static_cast<int>(keep.size()), t.dim(1)});
      for (size_t r = 0; r < keep.size(); ++r)
        for (int j = 0; j < t.dim(1); ++j) out.at2(static_cast<int>(r), j) = t.at2(keep[r], j);
      return out;
    };
    std::vector<int> ids;
    std::vector<PoolTaps> taps;
    std::vector<int> views;
    for (int i : keep) {
      ids.push_back(pb.feats.ids[static_cast<size_t>(i)]);
      taps.push_back(std::move(pb.taps[static_cast<size_t>(i)]));
      if (!pb.views.empty()) views.push_back(pb.views[static_cast<size_t>(i)]);
    }
    pb.feats.ids = std::move(ids);
    pb.taps = std::move(taps);
    pb.views = std::move(views);
    pb.pooled = filter_rows(pb.pooled);
    pb.pre_norm = head ? projection_forward(*head, pb.pooled, &pb.proj) : pb.pooled;
  }
  pb.feats.vectors = l2_normalize_rows(pb.pre_norm);
}

static Tensor backward_to_pooled(const PooledBatch& pb, const Tensor& dvectors,
                                 const ProjectionMlp* head) {
  Tensor dpre = l2_normalize_rows_backward(dvectors, pb.pre_norm);
  return head ? projection_backward(*head, dpre, pb.proj) : dpre;
}

PooledBatch pool_instances_bev(const BevFeature& b, const std::vector<Box3D>& boxes,
                               const PoolConfig& cfg, const ProjectionMlp* head) {
  telemetry().contrast_pool_calls++;
  const int gh = b.grid.dim(0), gw = b.grid.dim(1), c = b.grid.dim(2);

  PooledBatch pb;
  pb.feats.source = "bev:" + std::to_string(b.layer_index);
  std::vector<RotatedBoxBev> kept;
  for (const Box3D& box : boxes) {
    RotatedBoxBev rbox = box3d_to_bev_rot_box(box, b.spec);
    if (rbox.len_gx < 0.25 || rbox.len_gy < 0.25) continue;
    // wholly outside the grid? check the rotated footprint's AABB
    const double hx = 0.5 * rbox.len_gx, hy = 0.5 * rbox.len_gy;
    const double ext = std::abs(hx * std::cos(rbox.yaw)) + std::abs(hy * std::sin(rbox.yaw));
    const double eyt = std::abs(hx * std::sin(rbox.yaw)) + std::abs(hy * std::cos(rbox.yaw));
    if (rbox.center_gx + ext < 0 || rbox.center_gx - ext > gw || rbox.center_gy + eyt < 0 ||
        rbox.center_gy - eyt > gh)
      continue;
    kept.push_back(rbox);
    pb.feats.ids.push_back(box.instance_id);
  }

  pb.pooled = Tensor({static_cast<int>(kept.size()), c});
  for (size_t i = 0; i < kept.size(); ++i) {
    PoolTaps taps;
    Tensor vec = roi_align_bev(b.grid, kept[i], cfg, &taps);
    for (int j = 0; j < c; ++j) pb.pooled.at2(static_cast<int>(i), j) = vec[j];
    pb.taps.push_back(std::move(taps));
  }
  finish_pooled(pb, head);
  return pb;
}

void pool_instances_bev_backward(const PooledBatch& pb, const Tensor& dvectors,
                                 const ProjectionMlp* head, Tensor* dgrid) {
  if (pb.feats.count() == 0) return;
  Tensor dpooled = backward_to_pooled(pb, dvectors, head);
  if (!dgrid) return;
  const int c = dpooled.dim(1);
  for (int i = 0; i < dpooled.dim(0); ++i) {
    Tensor dvec({c});
    for (int j = 0; j < c; ++j) dvec[j] = dpooled.at2(i, j);
    roi_align_scatter(dvec, pb.taps[static_cast<size_t>(i)], *dgrid);
  }
}

std::vector<PooledBatch> pool_instances_image(const FeaturePyramid& pyr,
                                              const std::vector<Box2D>& boxes2d, double gamma,
                                              const PoolConfig& cfg,
                                              const std::vector<ProjectionMlp>* heads) {
  telemetry().contrast_pool_calls++;
  std::vector<PooledBatch> out;
  for (int j = 0; j < pyr.n_levels(); ++j) {
    const auto ji = static_cast<size_t>(j);
    const double stride = pyr.strides[ji];
    PooledBatch pb;
    pb.feats.source = "img:" + std::to_string(j);

    std::vector<Box2D> kept;
    for (const Box2D& box : boxes2d) {
      bool degenerate = false;
      Box2D shrunk = shrink_box2d(box, gamma, &degenerate);
      if (degenerate) continue;
      Box2D feat = shrunk;
      feat.x1 /= stride;
      feat.x2 /= stride;
      feat.y1 /= stride;
      feat.y2 /= stride;
      kept.push_back(feat);
      pb.feats.ids.push_back(box.instance_id);
      pb.views.push_back(box.view_index);
    }

    const int c = pyr.features[ji].empty() ? 0 : pyr.features[ji][0].dim(2);
    pb.pooled = Tensor({static_cast<int>(kept.size()), c});
    for (size_t i = 0; i < kept.size(); ++i) {
      PoolTaps taps;
      const Tensor& fmap = pyr.features[ji][static_cast<size_t>(pb.views[i])];
      Tensor vec = roi_align_image(fmap, kept[i], cfg, &taps);
      for (int jj = 0; jj < c; ++jj) pb.pooled.at2(static_cast<int>(i), jj) = vec[jj];
      pb.taps.push_back(std::move(taps));
    }
    finish_pooled(pb, heads ? &(*heads)[ji] : nullptr);
    out.push_back(std::move(pb));
  }
  return out;
}

void pool_instances_image_backward(const PooledBatch& pb, const Tensor& dvectors,
                                   const ProjectionMlp* head, int level, FeaturePyramid* dpyr) {
  if (pb.feats.count() == 0) return;
  Tensor dpooled = backward_to_pooled(pb, dvectors, head);
  if (!dpyr) return;
  const int c = dpooled.dim(1);
  for (int i = 0; i < dpooled.dim(0); ++i) {
    Tensor dvec({c});
    for (int j = 0; j < c; ++j) dvec[j] = dpooled.at2(i, j);
    Tensor& dmap = dpyr->features[static_cast<size_t>(level)][static_cast<size_t>(pb.views[static_cast<size_t>(i)])];
    roi_align_scatter(dvec, pb.taps[static_cast<size_t>(i)], dmap);
  }
}

}  // namespace bevcon
