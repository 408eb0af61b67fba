// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <vector>

#include "bevcon/augment.hpp"
#include "bevcon/geometry.hpp"
#include "bevcon/image.hpp"
#include "bevcon/nn.hpp"
#include "bevcon/tensor.hpp"

namespace bevcon {

// ---------------------------------------------------------------------------
// configuration

struct ModelConfig {
  int image_height = 128;
  int image_width = 224;
  int n_views = 6;

  // Four stride-2 conv stages; stages 1..3 (strides 4/8/16) form the pyramid.
  std::array<int, 4> stage_channels = {16, 32, 64, 96};

  int bev_channels = 64;   // C_bev
  int depth_bins = 32;     // D
  double depth_min = 1.0;  // meters
  double depth_max = 40.0;

  int n_refine_layers = 3;  // residual BEV blocks; layer indices 1..N
  int head_channels = 32;
  int n_classes = 4;
  BevSpec bev;

  int proj_dim = 64;  // projection-head output width

  static constexpr int kNumLevels = 3;
  int level_stride(int level) const { return 4 << level; }
  int level_channels(int level) const { return stage_channels[static_cast<size_t>(level) + 1]; }
  int level_h(int level) const { return (image_height + level_stride(level) - 1) / level_stride(level); }
  int level_w(int level) const { return (image_width + level_stride(level) - 1) / level_stride(level); }
};

// ---------------------------------------------------------------------------
// feature containers

struct FeaturePyramid {
  std::vector<std::vector<Tensor>> features;  // [level][view], HWC
  std::vector<int> strides;                   // per level

  int n_levels() const { return static_cast<int>(features.size()); }
  int n_views() const { return features.empty() ? 0 : static_cast<int>(features[0].size()); }
};

struct BevFeature {
  Tensor grid;  // (grid_h, grid_w, C)
  BevSpec spec;
  int layer_index = 0;
};

struct DetectionOutput {
  Tensor class_logits;  // (grid_h, grid_w, n_classes)
  Tensor box_reg;       // (grid_h, grid_w, 7): dx, dy, z, log l, log w, sin yaw, cos yaw
};

// ---------------------------------------------------------------------------
// model

struct ConvLayer {
  Param* w = nullptr;
  Param* b = nullptr;
  ConvSpec spec;
};

struct LinearLayer {  // 1x1 conv applied to flattened (H*W, C) rows
  Param* w = nullptr;
  Param* b = nullptr;
};

struct Model {
  ModelConfig cfg;
  ParamStore store;

  std::array<ConvLayer, 4> stage;       // backbone
  LinearLayer depth_head;               // level-0 channels -> D
  LinearLayer bev_proj;                 // level-0 channels -> C_bev
  std::vector<ConvLayer> refine;  // 3x3, C_bev -> C_bev
  ConvLayer head_trunk;
  LinearLayer head_cls, head_reg;
  ProjectionMlp proj_bev;               // C_bev -> C_bev -> proj_dim
  std::vector<ProjectionMlp> proj_img;  // per level

  Model(const ModelConfig& cfg, std::uint64_t seed);

  // The EMA twin covers exactly these (the image backbone); the view
  // transform and heads are shared between branches.
  std::vector<Param*> backbone_params() const;
};

Tensor image_to_tensor(const Image& img);

// ---------------------------------------------------------------------------
// backbone

struct BackboneViewCache {
  Tensor input;
  std::array<ConvCache, 4> conv;
  std::array<Tensor, 4> act;  // relu outputs per stage
};

// `override_backbone`, when given, substitutes value tensors for the params in
// backbone_params() order (the EMA branch). `caches` enables backward.
FeaturePyramid backbone_forward(const Model& m, const std::vector<Tensor>& images,
                                const std::vector<Tensor>* override_backbone = nullptr,
                                std::vector<BackboneViewCache>* caches = nullptr);

// dpyr holds per-level per-view grads (zero tensors where unused). Accumulates
// into the backbone param grads.
void backbone_backward(const Model& m, const FeaturePyramid& dpyr,
                       const std::vector<BackboneViewCache>& caches);

// ---------------------------------------------------------------------------
// EMA twin

struct EmaState {
  std::vector<Tensor> target;  // aligned with Model::backbone_params()
  double momentum = 0.99;
};

EmaState ema_init(const Model& m, double momentum);
// target <- m*target + (1-m)*online
void ema_update(EmaState& state, const Model& m, double momentum);

// ---------------------------------------------------------------------------
// lift-splat view transform

// Precomputed scatter targets: for every (view, level-0 pixel, depth bin) the
// BEV cell index, or -1 when the ray point leaves the grid. Branch-specific:
// the augmented image affine is inverted per pixel and the branch's BEV
// similarity is applied to the ray point, so splatted features land where the
// transformed annotations say they should.
struct SplatGeometry {
  int n_views = 0, feat_h = 0, feat_w = 0, n_bins = 0;
  std::vector<double> bin_depths;
  std::vector<std::int32_t> cell;  // [view][pixel][bin]

  std::int32_t at(int view, int pix, int bin) const {
    return cell[(static_cast<size_t>(view) * feat_h * feat_w + pix) * n_bins + bin];
  }
};

SplatGeometry make_splat_geometry(const ModelConfig& cfg, const std::vector<CameraModel>& cameras,
                                  const std::vector<ViewAffine>* view_affines = nullptr,
                                  const BevSimilarity* bev_aug = nullptr);

struct LiftSplatCache {
  std::vector<Tensor> probs;  // per view: (feat_h*feat_w, D)
  Tensor scatter;             // (grid_h*grid_w, level-0 channels)
};

BevFeature lift_splat(const Model& m, const FeaturePyramid& pyr, const SplatGeometry& geo,
                      LiftSplatCache* cache = nullptr);

// dgrid: (grid_h, grid_w, C_bev). Accumulates into depth_head/bev_proj grads;
// when dpyr is non-null also accumulates the level-0 feature grads.
void lift_splat_backward(const Model& m, const Tensor& dgrid, const FeaturePyramid& pyr,
                         const SplatGeometry& geo, const LiftSplatCache& cache,
                         FeaturePyramid* dpyr);

// ---------------------------------------------------------------------------
// BEV refinement and detection head

struct RefineCache {
  std::vector<Tensor> relu;  // relu(B^{l-1}) per block
  std::vector<ConvCache> conv;
};

// Returns layers 1..N_layer; layer l = layer l-1 + conv3x3(relu(layer l-1)).
std::vector<BevFeature> bev_refine(const Model& m, const BevFeature& b0, RefineCache* cache = nullptr);

// dlayers[l] is the grad w.r.t. layer l+1 (may be zero tensors). Returns dB0.
Tensor bev_refine_backward(const Model& m, const std::vector<Tensor>& dlayers,
                           const RefineCache& cache);

struct HeadCache {
  ConvCache trunk;
  Tensor trunk_act;
};

DetectionOutput head_forward(const Model& m, const BevFeature& b, HeadCache* cache = nullptr);
Tensor head_backward(const Model& m, const Tensor& dcls, const Tensor& dreg, const HeadCache& cache);

}  // namespace bevcon
