// SPDX-License-Identifier: Apache-2.0
//
// Python surface: the contrastive/pooling math on numpy arrays plus the
// end-to-end dataset/train/eval entry points.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "bevcon/config.hpp"
#include "bevcon/contrast.hpp"
#include "bevcon/pooling.hpp"
#include "bevcon/scenegen.hpp"
#include "bevcon/serialize.hpp"
#include "bevcon/telemetry.hpp"
#include "bevcon/trainer.hpp"

namespace py = pybind11;
using namespace bevcon;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from(const DoubleArray& arr) {
  Tensor t;
  t.shape.reserve(static_cast<size_t>(arr.ndim()));
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) t.shape.push_back(static_cast<int>(arr.shape(i)));
  t.v.assign(arr.data(), arr.data() + arr.size());
  return t;
}

py::array_t<double> array_from(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> out(shape);
  std::copy(t.v.begin(), t.v.end(), out.mutable_data());
  return out;
}

py::dict py_grouped_info_nce(const DoubleArray& a, const std::vector<int>& ids_a,
                             const DoubleArray& b, const std::vector<int>& ids_b,
                             double temperature, bool include_positive, bool symmetric,
                             bool want_grad) {
  ContrastConfig cfg;
  cfg.temperature = temperature;
  cfg.include_positive_in_denominator = include_positive;
  cfg.symmetric = symmetric;
  GroupedNceResult r =
      grouped_info_nce(tensor_from(a), ids_a, tensor_from(b), ids_b, cfg, want_grad);
  py::dict out;
  out["loss_sum"] = r.loss_sum;
  out["anchor_count"] = r.anchor_count;
  out["mean"] = r.anchor_count > 0 ? r.loss_sum / r.anchor_count : 0.0;
  if (want_grad) {
    out["grad_a"] = array_from(r.grad_a);
    out["grad_b"] = array_from(r.grad_b);
  }
  return out;
}

py::array_t<double> py_roi_align_bev(const DoubleArray& grid, double center_gx, double center_gy,
                                     double len_gx, double len_gy, double yaw, int output_size,
                                     int samples_per_bin, const std::string& mode) {
  if (grid.ndim() != 3) throw std::invalid_argument("grid must be (h, w, c)");
  PoolConfig cfg;
  cfg.output_size = output_size;
  cfg.samples_per_bin = samples_per_bin;
  if (mode == "align")
    cfg.mode = PoolConfig::Mode::align;
  else if (mode == "gather")
    cfg.mode = PoolConfig::Mode::gather;
  else
    throw std::invalid_argument("mode must be align or gather");
  RotatedBoxBev box;
  box.center_gx = center_gx;
  box.center_gy = center_gy;
  box.len_gx = len_gx;
  box.len_gy = len_gy;
  box.yaw = yaw;
  return array_from(roi_align_bev(tensor_from(grid), box, cfg, nullptr));
}

std::string py_generate_dataset(const std::string& root, int n_scenes,
                                const std::string& config_json, std::uint64_t seed) {
  SceneGenConfig cfg;
  if (!config_json.empty()) cfg = SceneGenConfig::from_json(nlohmann::json::parse(config_json));
  cfg.seed = seed;
  return generate_dataset(cfg, n_scenes, root).config_hash;
}

long py_train(const std::string& config_text, const std::string& out_dir,
              const std::vector<std::string>& overrides) {
  RunConfig cfg = RunConfig::from_text(config_text, overrides);
  Trainer t(cfg, out_dir);
  t.train();
  return t.step();
}

py::dict metrics_to_dict(const MetricsReport& m) {
  py::dict out;
  out["mAP"] = m.mAP;
  out["mATE"] = m.mATE;
  out["mAOE"] = m.mAOE;
  out["per_class_ap"] = m.per_class_ap;
  out["n_scenes"] = m.n_scenes;
  out["n_gt"] = m.n_gt;
  out["n_pred"] = m.n_pred;
  return out;
}

py::dict py_evaluate_checkpoint(const std::string& ckpt, const std::string& dataset,
                                const std::string& split) {
  return metrics_to_dict(evaluate_checkpoint(ckpt, dataset, split));
}

py::dict py_telemetry() {
  const Telemetry& t = telemetry();
  py::dict out;
  out["contrast_calls"] = t.contrast_calls;
  out["contrast_pool_calls"] = t.contrast_pool_calls;
  out["ema_forward_calls"] = t.ema_forward_calls;
  out["ema_update_calls"] = t.ema_update_calls;
  out["backbone_forward_calls"] = t.backbone_forward_calls;
  return out;
}

}  // namespace

PYBIND11_MODULE(_bevcon, m) {
  m.doc() = "Synthetic multi-camera BEV detection with dense contrastive training";

  m.def("multilayer_weights", &multilayer_weights, py::arg("n_layers"), py::arg("eps"),
        "Per-layer loss weights 1/eps^(n_layers - l), l = 1..n_layers");
  m.def("grouped_info_nce", &py_grouped_info_nce, py::arg("features_a"), py::arg("ids_a"),
        py::arg("features_b"), py::arg("ids_b"), py::arg("temperature") = 0.2,
        py::arg("include_positive") = false, py::arg("symmetric") = true,
        py::arg("want_grad") = false,
        "Cross-branch InfoNCE over unit-norm rows; same id = positive pair");
  m.def("roi_align_bev", &py_roi_align_bev, py::arg("grid"), py::arg("center_gx"),
        py::arg("center_gy"), py::arg("len_gx"), py::arg("len_gy"), py::arg("yaw") = 0.0,
        py::arg("output_size") = 3, py::arg("samples_per_bin") = 2, py::arg("mode") = "align",
        "Pool one rotated box from an (h, w, c) grid into a flat feature vector");
  m.def("shrink_box", [](double x1, double y1, double x2, double y2, double gamma) {
    Box2D b;
    b.x1 = x1;
    b.y1 = y1;
    b.x2 = x2;
    b.y2 = y2;
    Box2D s = shrink_box2d(b, gamma, nullptr);
    return py::make_tuple(s.x1, s.y1, s.x2, s.y2);
  }, py::arg("x1"), py::arg("y1"), py::arg("x2"), py::arg("y2"), py::arg("gamma"),
        "Scale a 2D box about its center");

  m.def("generate_dataset", &py_generate_dataset, py::arg("root"), py::arg("n_scenes"),
        py::arg("config_json") = "", py::arg("seed") = 0,
        "Write a synthetic dataset; returns the config hash");
  m.def("default_run_config", &RunConfig::documented_template,
        "Documented default training config text");
  m.def("train", &py_train, py::arg("config_text"), py::arg("out_dir"),
        py::arg("overrides") = std::vector<std::string>{},
        "Run the training loop; returns the final step count");
  m.def("evaluate_checkpoint", &py_evaluate_checkpoint, py::arg("checkpoint"), py::arg("dataset"),
        py::arg("split") = "val", "Detection metrics of a checkpoint on a dataset split");

  m.def("telemetry", &py_telemetry, "Global call counters (training vs inference paths)");
  m.def("telemetry_reset", [] { telemetry().reset(); });

  m.attr("__version__") = "0.1.0";
}
