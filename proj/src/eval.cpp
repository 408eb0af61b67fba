// SPDX-License-Identifier: Apache-2.0
#include "bevcon/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "bevcon/scenegen.hpp"

namespace bevcon {

static const double kFocalAlpha = 0.25;
static const double kFocalGamma = 2.0;
static const double kNmsRadius = 0.5;                              // meters
static const std::vector<double> kApThresholds = {0.5, 1.0, 2.0, 4.0};  // meters
static const double kTpErrorThreshold = 2.0;

static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct CellTarget {
  int box_index = -1;
  double area = 0.0;
};

// cell -> owning box, larger footprint winning collisions
static std::vector<CellTarget> assign_cells(const std::vector<Box3D>& boxes, const BevSpec& spec) {
  std::vector<CellTarget> cells(static_cast<size_t>(spec.grid_h) * spec.grid_w);
  for (size_t b = 0; b < boxes.size(); ++b) {
    const Box3D& box = boxes[b];
    if (!spec.contains(box.center[0], box.center[1])) continue;
    const int ix = static_cast<int>((box.center[0] - spec.x_min) / spec.cell_size_x());
    const int iy = static_cast<int>((box.center[1] - spec.y_min) / spec.cell_size_y());
    if (ix < 0 || ix >= spec.grid_w || iy < 0 || iy >= spec.grid_h) continue;
    CellTarget& t = cells[static_cast<size_t>(iy) * spec.grid_w + ix];
    const double area = box.length * box.width;
    if (t.box_index < 0 || area > t.area) t = {static_cast<int>(b), area};
  }
  return cells;
}

DetectionLossResult detection_loss(const DetectionOutput& out, const std::vector<Box3D>& boxes,
                                   const BevSpec& spec, bool want_grad) {
  const int gh = out.class_logits.dim(0), gw = out.class_logits.dim(1);
  const int ncls = out.class_logits.dim(2);
  if (gh != spec.grid_h || gw != spec.grid_w)
    throw std::runtime_error("detection_loss: grid/spec mismatch");

  const std::vector<CellTarget> cells = assign_cells(boxes, spec);
  int n_pos = 0;
  for (const auto& c : cells)
    if (c.box_index >= 0) ++n_pos;
  const double norm = 1.0 / std::max(1, n_pos);

  DetectionLossResult res;
  res.n_pos = n_pos;
  if (want_grad) {
    res.dcls = Tensor(out.class_logits.shape);
    res.dreg = Tensor(out.box_reg.shape);
  }

  double cls_sum = 0.0, reg_sum = 0.0;
  for (int iy = 0; iy < gh; ++iy) {
    for (int ix = 0; ix < gw; ++ix) {
      const size_t ci = static_cast<size_t>(iy) * gw + ix;
      const int bi = cells[ci].box_index;
      for (int c = 0; c < ncls; ++c) {
        const double x = out.class_logits.at3(iy, ix, c);
        const double p = sigmoid(x);
        const bool positive = bi >= 0 && boxes[static_cast<size_t>(bi)].class_id == c;
        if (positive) {
          cls_sum += -kFocalAlpha * std::pow(1.0 - p, kFocalGamma) * std::log(std::max(p, 1e-12));
          if (want_grad)
            res.dcls.at3(iy, ix, c) =
                norm * (kFocalAlpha * kFocalGamma * p * std::pow(1.0 - p, kFocalGamma) *
                            std::log(std::max(p, 1e-12)) -
                        kFocalAlpha * std::pow(1.0 - p, kFocalGamma + 1.0));
        } else {
          cls_sum += -(1.0 - kFocalAlpha) * std::pow(p, kFocalGamma) * std::log(std::max(1.0 - p, 1e-12));
          if (want_grad)
            res.dcls.at3(iy, ix, c) =
                -norm * (1.0 - kFocalAlpha) * std::pow(p, kFocalGamma) *
                (kFocalGamma * (1.0 - p) * std::log(std::max(1.0 - p, 1e-12)) - p);
        }
      }
      if (bi >= 0) {
        const Box3D& box = boxes[static_cast<size_t>(bi)];
        const double gx = (box.center[0] - spec.x_min) / spec.cell_size_x();
        const double gy = (box.center[1] - spec.y_min) / spec.cell_size_y();
        const double target[7] = {gx - (ix + 0.5), gy - (iy + 0.5),      box.center[2],
                                  std::log(box.length), std::log(box.width),
                                  std::sin(box.yaw),    std::cos(box.yaw)};
        for (int c = 0; c < 7; ++c) {
          const double diff = out.box_reg.at3(iy, ix, c) - target[c];
          reg_sum += std::abs(diff);
          if (want_grad)
            res.dreg.at3(iy, ix, c) = norm * (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0));
        }
      }
    }
  }
  res.cls = cls_sum * norm;
  res.reg = reg_sum * norm;
  res.total = res.cls + res.reg;
  return res;
}

std::vector<Prediction> decode_predictions(const DetectionOutput& out, const BevSpec& spec,
                                           double score_threshold, int max_dets, int scene_id) {
  const int gh = out.class_logits.dim(0), gw = out.class_logits.dim(1);
  const int ncls = out.class_logits.dim(2);

  std::vector<Prediction> cand;
  for (int iy = 0; iy < gh; ++iy) {
    for (int ix = 0; ix < gw; ++ix) {
      int best = 0;
      for (int c = 1; c < ncls; ++c)
        if (out.class_logits.at3(iy, ix, c) > out.class_logits.at3(iy, ix, best)) best = c;
      const double score = sigmoid(out.class_logits.at3(iy, ix, best));
      if (score < score_threshold) continue;

      Prediction p;
      p.score = score;
      p.scene_id = scene_id;
      p.cell = iy * gw + ix;
      const double dx = out.box_reg.at3(iy, ix, 0);
      const double dy = out.box_reg.at3(iy, ix, 1);
      p.box.center[0] = spec.x_min + (ix + 0.5 + dx) * spec.cell_size_x();
      p.box.center[1] = spec.y_min + (iy + 0.5 + dy) * spec.cell_size_y();
      p.box.center[2] = out.box_reg.at3(iy, ix, 2);
      p.box.length = std::exp(std::clamp(out.box_reg.at3(iy, ix, 3), -3.0, 3.0));
      p.box.width = std::exp(std::clamp(out.box_reg.at3(iy, ix, 4), -3.0, 3.0));
      p.box.height = class_prototype_dims(best)[2];
      const double s = out.box_reg.at3(iy, ix, 5), c = out.box_reg.at3(iy, ix, 6);
      p.box.yaw = (s == 0.0 && c == 0.0) ? 0.0 : std::atan2(s, c);
      p.box.class_id = best;
      cand.push_back(p);
    }
  }

  std::sort(cand.begin(), cand.end(), [](const Prediction& a, const Prediction& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cell < b.cell;
  });

  std::vector<Prediction> kept;
  for (const Prediction& p : cand) {
    bool suppressed = false;
    for (const Prediction& k : kept) {
      const double ddx = p.box.center[0] - k.box.center[0];
      const double ddy = p.box.center[1] - k.box.center[1];
      if (std::sqrt(ddx * ddx + ddy * ddy) <= kNmsRadius) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(p);
    if (static_cast<int>(kept.size()) >= max_dets) break;
  }
  return kept;
}

static double center_dist(const Box3D& a, const Box3D& b) {
  const double dx = a.center[0] - b.center[0];
  const double dy = a.center[1] - b.center[1];
  return std::sqrt(dx * dx + dy * dy);
}

MetricsReport evaluate(const std::vector<std::vector<Prediction>>& preds_per_scene,
                       const std::vector<std::vector<Box3D>>& gts_per_scene, int n_classes) {
  if (preds_per_scene.size() != gts_per_scene.size())
    throw std::runtime_error("evaluate: scene count mismatch");
  const int n_scenes = static_cast<int>(gts_per_scene.size());

  MetricsReport rep;
  rep.n_scenes = n_scenes;
  for (const auto& s : gts_per_scene) rep.n_gt += static_cast<int>(s.size());
  for (const auto& s : preds_per_scene) rep.n_pred += static_cast<int>(s.size());

  double ap_total = 0.0;
  int ap_count = 0;
  std::vector<double> trans_errs, yaw_errs;

  for (int cls = 0; cls < n_classes; ++cls) {
    int n_gt_cls = 0;
    for (const auto& s : gts_per_scene)
      for (const auto& g : s)
        if (g.class_id == cls) ++n_gt_cls;
    if (n_gt_cls == 0) {
      rep.per_class_ap.push_back(-1.0);
      continue;
    }

    // all predictions of this class, sorted by (score desc, scene, cell)
    std::vector<const Prediction*> preds;
    for (const auto& s : preds_per_scene)
      for (const auto& p : s)
        if (p.box.class_id == cls) preds.push_back(&p);
    std::sort(preds.begin(), preds.end(), [](const Prediction* a, const Prediction* b) {
      if (a->score != b->score) return a->score > b->score;
      if (a->scene_id != b->scene_id) return a->scene_id < b->scene_id;
      return a->cell < b->cell;
    });

    double class_ap_sum = 0.0;
    for (double thr : kApThresholds) {
      std::vector<std::vector<bool>> used(static_cast<size_t>(n_scenes));
      for (int s = 0; s < n_scenes; ++s)
        used[static_cast<size_t>(s)].assign(gts_per_scene[static_cast<size_t>(s)].size(), false);

      std::vector<int> tp_flags;
      int tp = 0;
      for (const Prediction* p : preds) {
        const auto& gts = gts_per_scene[static_cast<size_t>(p->scene_id)];
        auto& u = used[static_cast<size_t>(p->scene_id)];
        int best = -1;
        double best_d = thr;
        for (size_t g = 0; g < gts.size(); ++g) {
          if (u[g] || gts[g].class_id != cls) continue;
          const double d = center_dist(p->box, gts[g]);
          if (d <= best_d) {
            best_d = d;
            best = static_cast<int>(g);
          }
        }
        if (best >= 0) {
          u[static_cast<size_t>(best)] = true;
          ++tp;
          tp_flags.push_back(1);
          if (thr == kTpErrorThreshold) {
            trans_errs.push_back(best_d);
            double dyaw = std::abs(wrap_angle(p->box.yaw - gts[static_cast<size_t>(best)].yaw));
            yaw_errs.push_back(dyaw);
          }
        } else {
          tp_flags.push_back(0);
        }
      }

      // precision at each recall point, then 101-point interpolation
      std::vector<double> precision, recall;
      int running_tp = 0;
      for (size_t i = 0; i < tp_flags.size(); ++i) {
        running_tp += tp_flags[i];
        precision.push_back(static_cast<double>(running_tp) / static_cast<double>(i + 1));
        recall.push_back(static_cast<double>(running_tp) / n_gt_cls);
      }
      double ap = 0.0;
      for (int r = 0; r <= 100; ++r) {
        const double rr = r / 100.0;
        double best_p = 0.0;
        for (size_t i = 0; i < precision.size(); ++i)
          if (recall[i] >= rr) best_p = std::max(best_p, precision[i]);
        ap += best_p;
      }
      ap /= 101.0;
      class_ap_sum += ap;
      ap_total += ap;
      ++ap_count;
    }
    rep.per_class_ap.push_back(class_ap_sum / static_cast<double>(kApThresholds.size()));
  }

  rep.mAP = ap_count > 0 ? ap_total / ap_count : 0.0;
  if (!trans_errs.empty()) {
    for (double e : trans_errs) rep.mATE += e;
    rep.mATE /= static_cast<double>(trans_errs.size());
    for (double e : yaw_errs) rep.mAOE += e;
    rep.mAOE /= static_cast<double>(yaw_errs.size());
  } else {
    rep.mATE = kTpErrorThreshold;  // no matches: report the worst plausible values
    rep.mAOE = M_PI;
  }
  return rep;
}

std::string MetricsReport::to_text() const {
  char buf[128];
  std::string out;
  auto line = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%s %.6f\n", name, v);
    out += buf;
  };
  line("mAP", mAP);
  line("mATE", mATE);
  line("mAOE", mAOE);
  for (size_t c = 0; c < per_class_ap.size(); ++c) {
    std::snprintf(buf, sizeof(buf), "AP_class%zu %.6f\n", c, per_class_ap[c]);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "n_scenes %d\nn_gt %d\nn_pred %d\n", n_scenes, n_gt, n_pred);
  out += buf;
  return out;
}

}  // namespace bevcon
