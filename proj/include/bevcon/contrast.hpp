// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>
#include <vector>

#include "bevcon/model.hpp"
#include "bevcon/pooling.hpp"
#include "bevcon/tensor.hpp"

namespace bevcon {

struct ContrastConfig {
  double temperature = 0.2;
  double layer_scale = 0.5;  // epsilon in the multi-layer weighting
  bool include_positive_in_denominator = false;
  bool symmetric = true;
};

// Core InfoNCE over two row sets with instance-id grouping. For an anchor row
// of A with id g, every row of B sharing g is a positive and every other row
// of B is a negative; each (anchor, positive) ordered pair contributes
//   -s_p/tau + log( sum_negatives exp(s_j/tau) [+ exp(s_p/tau)] )
// with the positive excluded from the log by default. Anchors with no
// positive or no negative contribute nothing. When ids are unique this is
// exactly the per-pair loss with the remaining n-1 rows as negatives; with
// symmetric=true both directions are accumulated (2n anchors).
struct GroupedNceResult {
  double loss_sum = 0.0;
  int anchor_count = 0;
  Tensor grad_a, grad_b;  // d(loss_sum)/dA, d(loss_sum)/dB when requested
};

GroupedNceResult grouped_info_nce(const Tensor& fa, const std::vector<int>& ids_a,
                                  const Tensor& fb, const std::vector<int>& ids_b,
                                  const ContrastConfig& cfg, bool want_grad);

// Mean anchor loss over two id-aligned, unit-norm feature sets. Throws on id
// misalignment or rows off unit norm by more than 1e-5; returns 0 for n < 2.
double info_nce(const InstanceFeatures& f, const InstanceFeatures& f_prime,
                const ContrastConfig& cfg);

// weight(l) = 1 / eps^(n_layers - l) for l = 1..n_layers (index 0 = layer 1)
std::vector<double> multilayer_weights(int n_layers, double eps);

// Restrict two pooled sets to the ids present in both, preserving id order
// from `a` (unique-id sources). Appends index lists into each set.
void shared_rows(const std::vector<int>& ids_a, const std::vector<int>& ids_b,
                 std::vector<int>& ia, std::vector<int>& ib);

InstanceFeatures select_rows(const InstanceFeatures& f, const std::vector<int>& idx);

struct LayeredLoss {
  double total = 0.0;
  std::vector<double> per_part;  // per layer / per level
};

// Multi-layer instance contrast over (B^l, B'^l) pairs: pool branch-a boxes
// from B^l and branch-b boxes from B'^l, restrict to shared ids, InfoNCE per
// layer, then combine with multilayer_weights.
LayeredLoss instance_contrast_multilayer(
    const std::vector<std::pair<const BevFeature*, const BevFeature*>>& layers,
    const std::vector<Box3D>& boxes_a, const std::vector<Box3D>& boxes_b,
    const PoolConfig& pool_cfg, const ProjectionMlp* head, const ContrastConfig& cfg);

// Per-level scale-aware perspective contrast, averaged across levels. An
// instance contributes one feature per view where visible; same-id features
// across views are mutual positives.
LayeredLoss perspective_contrast(const FeaturePyramid& pyr_a, const FeaturePyramid& pyr_b,
                                 const std::vector<Box2D>& boxes2d_a,
                                 const std::vector<Box2D>& boxes2d_b, double gamma,
                                 const PoolConfig& pool_cfg,
                                 const std::vector<ProjectionMlp>* heads,
                                 const ContrastConfig& cfg);

// Ablation baseline: global-average-pool each view's finest map to one vector,
// normalize, same-view cross-branch pairs are positives, other views negatives.
double image_level_contrast(const FeaturePyramid& pyr_a, const FeaturePyramid& pyr_b,
                            const ContrastConfig& cfg);

}  // namespace bevcon
