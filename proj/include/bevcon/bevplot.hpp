// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "bevcon/eval.hpp"
#include "bevcon/geometry.hpp"
#include "bevcon/image.hpp"

namespace bevcon {

struct BevPlotOptions {
  int scale = 8;          // pixels per BEV cell
  bool draw_grid = true;  // faint lines every 8 cells plus an ego cross
  bool draw_gt = true;    // green outlines
  bool draw_pred = true;  // blue outlines, brightness follows score
};

// Top-down render of a scene: ground truth and predictions as rotated box
// outlines with a heading tick from center to the front edge.
Image render_bev_plot(const BevSpec& spec, const std::vector<Box3D>& gt,
                      const std::vector<Prediction>& preds, const BevPlotOptions& opts = {});

}  // namespace bevcon
