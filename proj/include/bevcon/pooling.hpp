// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "bevcon/geometry.hpp"
#include "bevcon/model.hpp"
#include "bevcon/tensor.hpp"

namespace bevcon {

struct PoolConfig {
  int output_size = 3;      // S x S bins
  int samples_per_bin = 2;  // per axis, so samples_per_bin^2 per bin
  double center_scale = 0.6;
  enum class Mode { align, gather } mode = Mode::align;
};

// Per-instance feature rows; `source` tags provenance ("bev:l" / "img:j").
// BEV pooling yields unique ids; image pooling may repeat an id across views.
struct InstanceFeatures {
  std::vector<int> ids;
  Tensor vectors;  // (n, d), rows L2-normalized
  std::string source;

  int count() const { return static_cast<int>(ids.size()); }
};

// Sparse taps recording how one pooled vector reads the feature map; the
// transpose of the pooling is a scatter-add through the same taps.
struct PoolTaps {
  struct Tap {
    std::int32_t cell;  // flat (row*width + col) index
    double w;
  };
  std::vector<Tap> taps;
};

// Rotated RoI align: S x S bins laid out in the box frame, samples_per_bin^2
// bilinear samples each (zero-padded outside), all samples mean-pooled to one
// C-vector. gather mode reads the single cell under the box center instead.
Tensor roi_align_bev(const Tensor& grid, const RotatedBoxBev& rbox, const PoolConfig& cfg,
                     PoolTaps* taps = nullptr);

// Axis-aligned variant over an image feature map; box in feature-map coords.
Tensor roi_align_image(const Tensor& fmap, const Box2D& box, const PoolConfig& cfg,
                       PoolTaps* taps = nullptr);

// d(loss)/d(map) += taps^T * dvec
void roi_align_scatter(const Tensor& dvec, const PoolTaps& taps, Tensor& dmap);

// Scale both sides by gamma about the center. Results under 1 px are returned
// but flagged so the caller can drop them.
Box2D shrink_box2d(const Box2D& box, double gamma, bool* degenerate = nullptr);

// ---------------------------------------------------------------------------
// instance pooling with projection head + normalization

struct PooledBatch {
  InstanceFeatures feats;
  // backward caches, rows parallel to feats.ids
  std::vector<PoolTaps> taps;
  std::vector<int> views;  // image pooling: source view per row
  Tensor pooled;           // raw pooled rows (n, C)
  ProjectionCache proj;
  Tensor pre_norm;
};

// Pools every annotation from a BEV grid: rotate to grid coords, RoI-align,
// optional projection head, L2-normalize. Boxes wholly outside the grid,
// thinner than 0.25 cells, or with degenerate feature norm are dropped.
PooledBatch pool_instances_bev(const BevFeature& b, const std::vector<Box3D>& boxes,
                               const PoolConfig& cfg, const ProjectionMlp* head);

// dvectors: d(loss)/d(feats.vectors). Accumulates projection-head param grads;
// when dgrid is non-null also the grid grads.
void pool_instances_bev_backward(const PooledBatch& pb, const Tensor& dvectors,
                                 const ProjectionMlp* head, Tensor* dgrid);

// Per level: shrink each 2D box by gamma (scale-aware), map to feature coords
// by the level stride, pool from that view's map, project, normalize.
std::vector<PooledBatch> pool_instances_image(const FeaturePyramid& pyr,
                                              const std::vector<Box2D>& boxes2d, double gamma,
                                              const PoolConfig& cfg,
                                              const std::vector<ProjectionMlp>* heads);

void pool_instances_image_backward(const PooledBatch& pb, const Tensor& dvectors,
                                   const ProjectionMlp* head, int level, FeaturePyramid* dpyr);

}  // namespace bevcon
