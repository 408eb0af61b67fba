// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "bevcon/checkpoint.hpp"
#include "bevcon/config.hpp"
#include "bevcon/contrast.hpp"
#include "bevcon/eval.hpp"
#include "bevcon/scenegen.hpp"

namespace bevcon {

struct LossReport {
  long step = 0;
  double l_det = 0.0;
  double l_in = 0.0;    // weighted multi-layer total
  double l_pers = 0.0;  // level average
  double l_img = 0.0;   // image-level baseline term
  double l_total = 0.0;
  std::vector<double> l_in_layers;  // unweighted per-layer anchor means
  std::vector<double> l_pers_levels;
  double grad_norm = 0.0;
  double wall_ms = 0.0;  // in-memory only; kept out of the log so logs stay bit-stable
};

// Inference for one scene: online backbone only, no augmentation.
std::vector<Prediction> infer_scene(const Model& m, const Scene& scene, const SplatGeometry& geo,
                                    double score_threshold, int max_dets);

class Trainer {
 public:
  // Reads the dataset manifest; writes nothing until train() is called.
  Trainer(const RunConfig& cfg, std::string out_dir);
  ~Trainer();

  void train();

  // One optimizer step over the given manifest indices. Anchor losses are
  // summed across the whole batch and divided by the total anchor count, so
  // the batch is forwarded twice: once to fix the counts, once with caches
  // for the backward pass (keeps peak memory at one frame's activations).
  LossReport train_step(const std::vector<int>& scene_indices);

  MetricsReport evaluate_split(const std::vector<int>& scene_indices,
                               std::vector<std::vector<Prediction>>* preds_out = nullptr,
                               std::vector<std::vector<Box3D>>* gts_out = nullptr);

  std::vector<int> train_indices() const;
  std::vector<int> val_indices() const;

  Model& model() { return *model_; }
  const SplatGeometry& eval_geometry() const { return eval_geo_; }
  EmaState& ema_state() { return ema_; }
  AdamW& optimizer() { return *opt_; }
  const RunConfig& config() const { return cfg_; }
  const DatasetManifest& manifest() const { return manifest_; }
  long step() const { return step_; }

  // deterministic per-frame augmentation stream
  static std::uint64_t frame_aug_seed(std::uint64_t run_seed, long step, int slot);

 private:
  struct BatchStats;
  void forward_frame_stats(const Scene& scene, std::uint64_t aug_seed, BatchStats& stats);
  void backward_frame(const Scene& scene, std::uint64_t aug_seed, const BatchStats& stats);
  void append_log(const std::string& line);

  RunConfig cfg_;
  std::string out_dir_;
  DatasetManifest manifest_;
  std::unique_ptr<Model> model_;
  EmaState ema_;
  std::unique_ptr<AdamW> opt_;
  SplatGeometry eval_geo_;
  std::vector<CameraModel> rig_;
  long step_ = 0;
  std::string log_path_;
};

// Rebuilds the model recorded in the checkpoint and runs inference over the
// requested split ("val", "train", or "all"). The dataset must match the
// config hash pinned at training time.
MetricsReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& dataset_root,
                                  const std::string& split,
                                  std::vector<std::vector<Prediction>>* preds_out = nullptr,
                                  std::vector<std::vector<Box3D>>* gts_out = nullptr,
                                  std::vector<int>* scene_ids_out = nullptr);

}  // namespace bevcon
