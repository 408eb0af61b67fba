// SPDX-License-Identifier: Apache-2.0
#include "bevcon/bevplot.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace bevcon {

namespace {

struct Rgb {
  double r, g, b;
};

constexpr Rgb kBackground{0.08, 0.08, 0.10};
constexpr Rgb kGridLine{0.16, 0.16, 0.19};
constexpr Rgb kEgoMark{0.55, 0.55, 0.55};
constexpr Rgb kGtColor{0.15, 0.85, 0.25};
constexpr Rgb kPredColor{0.25, 0.55, 1.0};

void set_px(Image& img, int x, int y, const Rgb& c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  img.at(y, x, 0) = c.r;
  img.at(y, x, 1) = c.g;
  img.at(y, x, 2) = c.b;
}

void draw_line(Image& img, double x0, double y0, double x1, double y1, const Rgb& c) {
  const double steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  const int n = std::max(1, static_cast<int>(std::ceil(steps * 2.0)));
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    set_px(img, static_cast<int>(std::floor(x0 + t * (x1 - x0))),
           static_cast<int>(std::floor(y0 + t * (y1 - y0))), c);
  }
}

// BEV +x maps to columns, +y to rows; one cell covers `scale` pixels.
std::array<double, 2> to_px(const BevSpec& spec, double x, double y, int scale) {
  return {(x - spec.x_min) / spec.cell_size_x() * scale,
          (y - spec.y_min) / spec.cell_size_y() * scale};
}

void draw_box(Image& img, const BevSpec& spec, const Box3D& box, int scale, const Rgb& c) {
  const double hl = 0.5 * box.length, hw = 0.5 * box.width;
  const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
  const std::array<std::array<double, 2>, 4> local = {{{hl, hw}, {hl, -hw}, {-hl, -hw}, {-hl, hw}}};
  std::array<std::array<double, 2>, 4> px;
  for (size_t i = 0; i < 4; ++i) {
    const double wx = box.center[0] + cy * local[i][0] - sy * local[i][1];
    const double wy = box.center[1] + sy * local[i][0] + cy * local[i][1];
    px[i] = to_px(spec, wx, wy, scale);
  }
  for (size_t i = 0; i < 4; ++i) {
    const auto& a = px[i];
    const auto& b = px[(i + 1) % 4];
    draw_line(img, a[0], a[1], b[0], b[1], c);
  }
  // heading tick: center to the middle of the front edge
  const auto ctr = to_px(spec, box.center[0], box.center[1], scale);
  const auto front = to_px(spec, box.center[0] + cy * hl, box.center[1] + sy * hl, scale);
  draw_line(img, ctr[0], ctr[1], front[0], front[1], c);
}

}  // namespace

Image render_bev_plot(const BevSpec& spec, const std::vector<Box3D>& gt,
                      const std::vector<Prediction>& preds, const BevPlotOptions& opts) {
  const int h = spec.grid_h * opts.scale;
  const int w = spec.grid_w * opts.scale;
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) set_px(img, x, y, kBackground);

  if (opts.draw_grid) {
    for (int gx = 0; gx <= spec.grid_w; gx += 8) {
      const int x = std::min(gx * opts.scale, w - 1);
      for (int y = 0; y < h; ++y) set_px(img, x, y, kGridLine);
    }
    for (int gy = 0; gy <= spec.grid_h; gy += 8) {
      const int y = std::min(gy * opts.scale, h - 1);
      for (int x = 0; x < w; ++x) set_px(img, x, y, kGridLine);
    }
    const auto ego = to_px(spec, 0.0, 0.0, opts.scale);
    draw_line(img, ego[0] - 3, ego[1], ego[0] + 3, ego[1], kEgoMark);
    draw_line(img, ego[0], ego[1] - 3, ego[0], ego[1] + 3, kEgoMark);
  }

  if (opts.draw_gt)
    for (const Box3D& b : gt) draw_box(img, spec, b, opts.scale, kGtColor);

  if (opts.draw_pred)
    for (const Prediction& p : preds) {
      const double v = 0.4 + 0.6 * std::clamp(p.score, 0.0, 1.0);
      draw_box(img, spec, p.box, opts.scale,
               Rgb{kPredColor.r * v, kPredColor.g * v, kPredColor.b * v});
    }

  return img;
}

}  // namespace bevcon
