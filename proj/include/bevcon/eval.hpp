// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "bevcon/geometry.hpp"
#include "bevcon/model.hpp"

namespace bevcon {

struct Prediction {
  Box3D box;  // class_id carried inside
  double score = 0.0;
  int scene_id = 0;
  int cell = 0;  // source grid cell, used as the deterministic tie-break
};

struct MetricsReport {
  double mAP = 0.0;
  double mATE = 0.0;  // meters, matches at 2 m
  double mAOE = 0.0;  // radians in [0, pi]
  std::vector<double> per_class_ap;  // mean over thresholds, -1 when no GT
  int n_scenes = 0;
  int n_gt = 0;
  int n_pred = 0;

  // one "name value" line per metric, 6 decimal digits
  std::string to_text() const;
};

// Per-cell focal classification (positive cell = cell containing a GT center,
// alpha 0.25, gamma 2) plus L1 on the 7-channel regression at positive cells,
// both normalized by the positive count; reg weight 1. When two boxes land in
// one cell the larger BEV footprint wins.
struct DetectionLossResult {
  double total = 0.0, cls = 0.0, reg = 0.0;
  int n_pos = 0;
  Tensor dcls, dreg;  // filled when want_grad
};

DetectionLossResult detection_loss(const DetectionOutput& out, const std::vector<Box3D>& boxes,
                                   const BevSpec& spec, bool want_grad);

// Per-cell argmax class + sigmoid score, regression decoded back to a metric
// Box3D (height from the class prior), greedy 0.5 m center NMS, top max_dets.
std::vector<Prediction> decode_predictions(const DetectionOutput& out, const BevSpec& spec,
                                           double score_threshold, int max_dets, int scene_id);

// Distance-threshold matching at {0.5, 1, 2, 4} m, greedy by descending score
// with (scene_id, cell) tie-break; 101-point interpolated AP per class and
// threshold; mATE/mAOE over the 2 m matches. Classes without GT are skipped.
MetricsReport evaluate(const std::vector<std::vector<Prediction>>& preds_per_scene,
                       const std::vector<std::vector<Box3D>>& gts_per_scene, int n_classes);

}  // namespace bevcon
