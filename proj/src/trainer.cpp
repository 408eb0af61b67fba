// SPDX-License-Identifier: Apache-2.0
#include "bevcon/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "bevcon/augment.hpp"
#include "bevcon/rng.hpp"
#include "bevcon/serialize.hpp"

namespace bevcon {

using nlohmann::json;

namespace {

std::vector<Tensor> to_tensors(const std::vector<Image>& imgs) {
  std::vector<Tensor> out;
  out.reserve(imgs.size());
  for (const auto& im : imgs) out.push_back(image_to_tensor(im));
  return out;
}

std::vector<Box2D> flatten_boxes2d(const AugmentedView& v) {
  std::vector<Box2D> out;
  for (const auto& per_view : v.boxes2d) out.insert(out.end(), per_view.begin(), per_view.end());
  return out;
}

std::vector<ViewAffine> affines_of(const AugmentedView& v) {
  std::vector<ViewAffine> out;
  out.reserve(v.view_augs.size());
  for (const auto& va : v.view_augs) out.push_back(va.affine);
  return out;
}

// Global average pool per view over the finest pyramid level, pre-normalize.
Tensor gap_rows(const FeaturePyramid& pyr) {
  const int n_views = pyr.n_views();
  const Tensor& f0 = pyr.features[0][0];
  const int c = f0.dim(2);
  Tensor rows({n_views, c});
  for (int k = 0; k < n_views; ++k) {
    const Tensor& f = pyr.features[0][static_cast<size_t>(k)];
    const int cells = f.dim(0) * f.dim(1);
    for (int p = 0; p < cells; ++p)
      for (int j = 0; j < c; ++j) rows.at2(k, j) += f[static_cast<size_t>(p) * c + j];
    for (int j = 0; j < c; ++j) rows.at2(k, j) /= cells;
  }
  return rows;
}

// Everything one frame produces on the way to its losses. The EMA branch is
// forwarded without backbone caches -- its backbone is never differentiated.
struct FrameForward {
  AugmentedPair pair;
  std::vector<Box2D> boxes2d_a, boxes2d_b;

  std::vector<BackboneViewCache> bb_cache_a;
  FeaturePyramid pyr_a, pyr_b;
  SplatGeometry geo_a, geo_b;
  LiftSplatCache ls_cache_a, ls_cache_b;
  RefineCache ref_a, ref_b;
  std::vector<BevFeature> layers_a, layers_b;
  HeadCache head_a, head_b;
  DetectionOutput det_a, det_b;

  bool has_b_pyr = false;
  bool has_b_bev = false;
  bool has_b_bev_grads = false;  // caches kept for the prime BEV chain
};

void run_forward(const RunConfig& cfg, const Model& model, const EmaState& ema, const Scene& scene,
                 std::uint64_t aug_seed, bool with_caches, bool want_b_pyr, bool want_b_bev,
                 FrameForward& f) {
  f.pair = augment_pair(scene, cfg.model.bev, aug_seed, cfg.aug);
  f.boxes2d_a = flatten_boxes2d(f.pair.view_a);
  f.boxes2d_b = flatten_boxes2d(f.pair.view_b);

  const auto imgs_a = to_tensors(f.pair.view_a.images);
  f.pyr_a = backbone_forward(model, imgs_a, nullptr, with_caches ? &f.bb_cache_a : nullptr);

  const auto affines_a = affines_of(f.pair.view_a);
  f.geo_a = make_splat_geometry(cfg.model, scene.cameras, &affines_a, &f.pair.view_a.bev_aug);
  BevFeature b0_a = lift_splat(model, f.pyr_a, f.geo_a, with_caches ? &f.ls_cache_a : nullptr);
  f.layers_a = bev_refine(model, b0_a, with_caches ? &f.ref_a : nullptr);
  f.det_a = head_forward(model, f.layers_a.back(), with_caches ? &f.head_a : nullptr);

  if (!want_b_pyr) return;
  const auto imgs_b = to_tensors(f.pair.view_b.images);
  f.pyr_b = backbone_forward(model, imgs_b, &ema.target, nullptr);
  f.has_b_pyr = true;

  if (!want_b_bev) return;
  const auto affines_b = affines_of(f.pair.view_b);
  f.geo_b = make_splat_geometry(cfg.model, scene.cameras, &affines_b, &f.pair.view_b.bev_aug);
  // The shared view transform and refine stack still receive gradients from
  // this branch unless detached; detection on the prime branch keeps them too.
  f.has_b_bev_grads = with_caches && (!cfg.detach_prime_bev || cfg.det_on_both_branches);
  BevFeature b0_b = lift_splat(model, f.pyr_b, f.geo_b, f.has_b_bev_grads ? &f.ls_cache_b : nullptr);
  f.layers_b = bev_refine(model, b0_b, f.has_b_bev_grads ? &f.ref_b : nullptr);
  f.has_b_bev = true;
  if (cfg.det_on_both_branches)
    f.det_b = head_forward(model, f.layers_b.back(), with_caches ? &f.head_b : nullptr);
}

FeaturePyramid zeros_like(const FeaturePyramid& pyr) {
  FeaturePyramid d;
  d.strides = pyr.strides;
  d.features.resize(pyr.features.size());
  for (size_t l = 0; l < pyr.features.size(); ++l)
    for (const Tensor& f : pyr.features[l]) d.features[l].emplace_back(Tensor(f.shape));
  return d;
}

void check_finite(double v, const char* component, long step) {
  if (std::isfinite(v)) return;
  throw std::runtime_error("non-finite " + std::string(component) + " loss at step " +
                           std::to_string(step));
}

}  // namespace

// ---------------------------------------------------------------------------
// batch bookkeeping

// Loss sums and anchor counts for one batch. Anchor losses are normalized by
// the batch-total anchor count per layer/level, not per frame, so the counts
// have to be known before any gradient can be scaled.
struct Trainer::BatchStats {
  bool want_instance = false, want_pers = false, want_img = false;
  bool want_b_pyr = false, want_b_bev = false;

  std::vector<int> active_layers;      // refine layer indices in play
  std::vector<double> layer_weights;   // parallel to active_layers
  std::vector<double> in_sum, in_cnt;  // per active layer
  std::vector<double> pers_sum, pers_cnt;  // per pyramid level
  double img_sum = 0.0, img_cnt = 0.0;
  double det_sum = 0.0;
  int n_frames = 0;

  // filled by finalize()
  double l_det = 0.0, l_in = 0.0, l_pers = 0.0, l_img = 0.0, l_total = 0.0;
  std::vector<double> in_mean, pers_mean;

  void finalize(const RunConfig& cfg) {
    l_det = det_sum / n_frames;
    l_in = 0.0;
    in_mean.assign(active_layers.size(), 0.0);
    for (size_t t = 0; t < active_layers.size(); ++t) {
      in_mean[t] = in_cnt[t] > 0.0 ? in_sum[t] / in_cnt[t] : 0.0;
      l_in += layer_weights[t] * in_mean[t];
    }
    l_pers = 0.0;
    pers_mean.assign(pers_sum.size(), 0.0);
    for (size_t j = 0; j < pers_sum.size(); ++j) {
      pers_mean[j] = pers_cnt[j] > 0.0 ? pers_sum[j] / pers_cnt[j] : 0.0;
      l_pers += pers_mean[j];
    }
    if (!pers_sum.empty()) l_pers /= static_cast<double>(pers_sum.size());
    l_img = img_cnt > 0.0 ? img_sum / img_cnt : 0.0;
    l_total = l_det + (want_instance ? cfg.lambda_in * l_in : 0.0) +
              (want_pers ? cfg.lambda_pers * l_pers : 0.0) +
              (want_img ? cfg.lambda_img * l_img : 0.0);
  }
};

// ---------------------------------------------------------------------------
// construction

Trainer::Trainer(const RunConfig& cfg, std::string out_dir)
    : cfg_(cfg), out_dir_(std::move(out_dir)) {
  manifest_ = load_manifest(cfg_.dataset);
  if (!cfg_.dataset_hash.empty() && cfg_.dataset_hash != manifest_.config_hash)
    throw std::runtime_error("dataset hash mismatch: config pins " + cfg_.dataset_hash +
                             " but " + cfg_.dataset + " has " + manifest_.config_hash);
  cfg_.dataset_hash = manifest_.config_hash;  // pin whatever we trained on

  const SceneGenConfig& sc = manifest_.config;
  cfg_.model.image_height = sc.image_height;
  cfg_.model.image_width = sc.image_width;
  cfg_.model.n_views = sc.n_views;
  cfg_.model.bev = sc.bev;
  cfg_.model.n_classes = sc.n_classes;

  model_ = std::make_unique<Model>(cfg_.model, cfg_.seed);
  ema_ = ema_init(*model_, cfg_.ema_momentum);
  opt_ = std::make_unique<AdamW>(cfg_.optim, model_->store);
  rig_ = make_camera_rig(sc);
  eval_geo_ = make_splat_geometry(cfg_.model, rig_, nullptr, nullptr);
  if (!out_dir_.empty()) log_path_ = out_dir_ + "/metrics.jsonl";
}

Trainer::~Trainer() = default;

std::uint64_t Trainer::frame_aug_seed(std::uint64_t run_seed, long step, int slot) {
  return Rng(run_seed ^ 0xb5e7c0a11dull)
      .fork(static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(slot))
      .next_u64();
}

std::vector<int> Trainer::train_indices() const {
  std::vector<int> out;
  for (size_t i = 0; i < manifest_.scenes.size(); ++i)
    if (manifest_.scenes[i].scene_id % cfg_.val_modulo != cfg_.val_modulo - 1)
      out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Trainer::val_indices() const {
  std::vector<int> out;
  for (size_t i = 0; i < manifest_.scenes.size(); ++i)
    if (manifest_.scenes[i].scene_id % cfg_.val_modulo == cfg_.val_modulo - 1)
      out.push_back(static_cast<int>(i));
  return out;
}

// ---------------------------------------------------------------------------
// one frame, phase A: losses and anchor counts only

void Trainer::forward_frame_stats(const Scene& scene, std::uint64_t aug_seed, BatchStats& st) {
  FrameForward f;
  run_forward(cfg_, *model_, ema_, scene, aug_seed, /*with_caches=*/false, st.want_b_pyr,
              st.want_b_bev, f);

  double det = detection_loss(f.det_a, f.pair.view_a.boxes3d, cfg_.model.bev, false).total;
  if (cfg_.det_on_both_branches && f.has_b_bev)
    det = 0.5 * (det + detection_loss(f.det_b, f.pair.view_b.boxes3d, cfg_.model.bev, false).total);
  st.det_sum += det;

  const ProjectionMlp* bev_head = cfg_.use_projection_head ? &model_->proj_bev : nullptr;
  if (st.want_instance && f.has_b_bev) {
    for (size_t t = 0; t < st.active_layers.size(); ++t) {
      const size_t l = static_cast<size_t>(st.active_layers[t]);
      PooledBatch pa = pool_instances_bev(f.layers_a[l], f.pair.view_a.boxes3d, cfg_.pool, bev_head);
      PooledBatch pb = pool_instances_bev(f.layers_b[l], f.pair.view_b.boxes3d, cfg_.pool, bev_head);
      std::vector<int> ia, ib;
      shared_rows(pa.feats.ids, pb.feats.ids, ia, ib);
      InstanceFeatures sa = select_rows(pa.feats, ia);
      InstanceFeatures sb = select_rows(pb.feats, ib);
      GroupedNceResult r =
          grouped_info_nce(sa.vectors, sa.ids, sb.vectors, sb.ids, cfg_.contrast, false);
      st.in_sum[t] += r.loss_sum;
      st.in_cnt[t] += r.anchor_count;
    }
  }

  if (st.want_pers && f.has_b_pyr) {
    const double gamma = cfg_.scale_aware ? cfg_.pool.center_scale : 1.0;
    const std::vector<ProjectionMlp>* heads = cfg_.use_projection_head ? &model_->proj_img : nullptr;
    auto pa = pool_instances_image(f.pyr_a, f.boxes2d_a, gamma, cfg_.pool, heads);
    auto pb = pool_instances_image(f.pyr_b, f.boxes2d_b, gamma, cfg_.pool, heads);
    for (size_t j = 0; j < pa.size(); ++j) {
      GroupedNceResult r = grouped_info_nce(pa[j].feats.vectors, pa[j].feats.ids,
                                            pb[j].feats.vectors, pb[j].feats.ids, cfg_.contrast,
                                            false);
      st.pers_sum[j] += r.loss_sum;
      st.pers_cnt[j] += r.anchor_count;
    }
  }

  if (st.want_img && f.has_b_pyr) {
    Tensor ra = l2_normalize_rows(gap_rows(f.pyr_a));
    Tensor rb = l2_normalize_rows(gap_rows(f.pyr_b));
    std::vector<int> ids(static_cast<size_t>(ra.dim(0)));
    for (size_t k = 0; k < ids.size(); ++k) ids[k] = static_cast<int>(k);
    GroupedNceResult r = grouped_info_nce(ra, ids, rb, ids, cfg_.contrast, false);
    st.img_sum += r.loss_sum;
    st.img_cnt += r.anchor_count;
  }

  ++st.n_frames;
}

// ---------------------------------------------------------------------------
// one frame, phase B: re-forward with caches, push scaled grads back

void Trainer::backward_frame(const Scene& scene, std::uint64_t aug_seed, const BatchStats& st) {
  FrameForward f;
  run_forward(cfg_, *model_, ema_, scene, aug_seed, /*with_caches=*/true, st.want_b_pyr,
              st.want_b_bev, f);

  const int n_layers = static_cast<int>(f.layers_a.size());
  std::vector<Tensor> dlayers_a, dlayers_b;
  for (int l = 0; l < n_layers; ++l) dlayers_a.emplace_back(f.layers_a[static_cast<size_t>(l)].grid.shape);
  if (f.has_b_bev_grads)
    for (int l = 0; l < n_layers; ++l) dlayers_b.emplace_back(f.layers_b[static_cast<size_t>(l)].grid.shape);
  FeaturePyramid dpyr_a = zeros_like(f.pyr_a);

  // detection: mean over frames (and over branches when both carry the head)
  const double det_scale =
      (cfg_.det_on_both_branches && f.has_b_bev ? 0.5 : 1.0) / static_cast<double>(st.n_frames);
  {
    DetectionLossResult dl = detection_loss(f.det_a, f.pair.view_a.boxes3d, cfg_.model.bev, true);
    dl.dcls.scale_(det_scale);
    dl.dreg.scale_(det_scale);
    dlayers_a[static_cast<size_t>(n_layers) - 1].add_(
        head_backward(*model_, dl.dcls, dl.dreg, f.head_a));
  }
  if (cfg_.det_on_both_branches && f.has_b_bev) {
    DetectionLossResult dl = detection_loss(f.det_b, f.pair.view_b.boxes3d, cfg_.model.bev, true);
    dl.dcls.scale_(det_scale);
    dl.dreg.scale_(det_scale);
    dlayers_b[static_cast<size_t>(n_layers) - 1].add_(
        head_backward(*model_, dl.dcls, dl.dreg, f.head_b));
  }

  const ProjectionMlp* bev_head = cfg_.use_projection_head ? &model_->proj_bev : nullptr;
  if (st.want_instance && f.has_b_bev) {
    for (size_t t = 0; t < st.active_layers.size(); ++t) {
      if (st.in_cnt[t] <= 0.0) continue;
      const size_t l = static_cast<size_t>(st.active_layers[t]);
      PooledBatch pa = pool_instances_bev(f.layers_a[l], f.pair.view_a.boxes3d, cfg_.pool, bev_head);
      PooledBatch pb = pool_instances_bev(f.layers_b[l], f.pair.view_b.boxes3d, cfg_.pool, bev_head);
      std::vector<int> ia, ib;
      shared_rows(pa.feats.ids, pb.feats.ids, ia, ib);
      InstanceFeatures sa = select_rows(pa.feats, ia);
      InstanceFeatures sb = select_rows(pb.feats, ib);
      GroupedNceResult r =
          grouped_info_nce(sa.vectors, sa.ids, sb.vectors, sb.ids, cfg_.contrast, true);
      if (r.anchor_count == 0) continue;
      const double s = cfg_.lambda_in * st.layer_weights[t] / st.in_cnt[t];
      const int d = sa.vectors.dim(1);
      Tensor dva({pa.feats.count(), d}), dvb({pb.feats.count(), d});
      for (size_t k = 0; k < ia.size(); ++k)
        for (int j = 0; j < d; ++j) {
          dva.at2(ia[k], j) += s * r.grad_a.at2(static_cast<int>(k), j);
          dvb.at2(ib[k], j) += s * r.grad_b.at2(static_cast<int>(k), j);
        }
      pool_instances_bev_backward(pa, dva, bev_head, &dlayers_a[l]);
      pool_instances_bev_backward(pb, dvb, bev_head,
                                  !cfg_.detach_prime_bev && f.has_b_bev_grads ? &dlayers_b[l]
                                                                              : nullptr);
    }
  }

  if (st.want_pers && f.has_b_pyr) {
    const double gamma = cfg_.scale_aware ? cfg_.pool.center_scale : 1.0;
    const std::vector<ProjectionMlp>* heads = cfg_.use_projection_head ? &model_->proj_img : nullptr;
    auto pa = pool_instances_image(f.pyr_a, f.boxes2d_a, gamma, cfg_.pool, heads);
    auto pb = pool_instances_image(f.pyr_b, f.boxes2d_b, gamma, cfg_.pool, heads);
    for (size_t j = 0; j < pa.size(); ++j) {
      if (st.pers_cnt[j] <= 0.0) continue;
      GroupedNceResult r = grouped_info_nce(pa[j].feats.vectors, pa[j].feats.ids,
                                            pb[j].feats.vectors, pb[j].feats.ids, cfg_.contrast,
                                            true);
      if (r.anchor_count == 0) continue;
      const double s = cfg_.lambda_pers / (static_cast<double>(pa.size()) * st.pers_cnt[j]);
      Tensor dva = r.grad_a, dvb = r.grad_b;
      dva.scale_(s);
      dvb.scale_(s);
      const ProjectionMlp* head_j = heads ? &(*heads)[j] : nullptr;
      pool_instances_image_backward(pa[j], dva, head_j, static_cast<int>(j), &dpyr_a);
      // prime-branch image features stop at the EMA backbone; only the shared
      // projection head picks up gradient from this side
      pool_instances_image_backward(pb[j], dvb, head_j, static_cast<int>(j), nullptr);
    }
  }

  if (st.want_img && f.has_b_pyr && st.img_cnt > 0.0) {
    Tensor pre_a = gap_rows(f.pyr_a);
    Tensor ra = l2_normalize_rows(pre_a);
    Tensor rb = l2_normalize_rows(gap_rows(f.pyr_b));
    std::vector<int> ids(static_cast<size_t>(ra.dim(0)));
    for (size_t k = 0; k < ids.size(); ++k) ids[k] = static_cast<int>(k);
    GroupedNceResult r = grouped_info_nce(ra, ids, rb, ids, cfg_.contrast, true);
    if (r.anchor_count > 0) {
      r.grad_a.scale_(cfg_.lambda_img / st.img_cnt);
      Tensor dpre = l2_normalize_rows_backward(r.grad_a, pre_a);
      const int c = dpre.dim(1);
      for (int k = 0; k < dpre.dim(0); ++k) {
        Tensor& dmap = dpyr_a.features[0][static_cast<size_t>(k)];
        const int cells = dmap.dim(0) * dmap.dim(1);
        for (int p = 0; p < cells; ++p)
          for (int j = 0; j < c; ++j)
            dmap[static_cast<size_t>(p) * c + j] += dpre.at2(k, j) / cells;
      }
    }
  }

  Tensor db0_a = bev_refine_backward(*model_, dlayers_a, f.ref_a);
  lift_splat_backward(*model_, db0_a, f.pyr_a, f.geo_a, f.ls_cache_a, &dpyr_a);
  if (f.has_b_bev_grads) {
    Tensor db0_b = bev_refine_backward(*model_, dlayers_b, f.ref_b);
    lift_splat_backward(*model_, db0_b, f.pyr_b, f.geo_b, f.ls_cache_b, nullptr);
  }
  backbone_backward(*model_, dpyr_a, f.bb_cache_a);
}

// ---------------------------------------------------------------------------
// step / epoch loops

LossReport Trainer::train_step(const std::vector<int>& scene_indices) {
  if (scene_indices.empty()) throw std::runtime_error("train_step: empty batch");
  const auto t0 = std::chrono::steady_clock::now();

  BatchStats st;
  st.want_instance = cfg_.enable_instance;
  st.want_pers = cfg_.enable_perspective;
  st.want_img = cfg_.enable_image_level;
  st.want_b_bev = st.want_instance || cfg_.det_on_both_branches;
  st.want_b_pyr = st.want_b_bev || st.want_pers || st.want_img;
  if (cfg_.multilayer) {
    st.layer_weights = multilayer_weights(cfg_.model.n_refine_layers, cfg_.contrast.layer_scale);
    for (int l = 0; l < cfg_.model.n_refine_layers; ++l) st.active_layers.push_back(l);
  } else {
    st.active_layers = {cfg_.model.n_refine_layers - 1};
    st.layer_weights = {1.0};
  }
  st.in_sum.assign(st.active_layers.size(), 0.0);
  st.in_cnt.assign(st.active_layers.size(), 0.0);
  st.pers_sum.assign(ModelConfig::kNumLevels, 0.0);
  st.pers_cnt.assign(ModelConfig::kNumLevels, 0.0);

  std::vector<Scene> scenes;
  std::vector<std::uint64_t> seeds;
  for (size_t i = 0; i < scene_indices.size(); ++i) {
    scenes.push_back(load_scene(cfg_.dataset, manifest_, scene_indices[i]));
    seeds.push_back(frame_aug_seed(cfg_.seed, step_, static_cast<int>(i)));
  }

  for (size_t i = 0; i < scenes.size(); ++i) forward_frame_stats(scenes[i], seeds[i], st);
  st.finalize(cfg_);
  check_finite(st.l_det, "detection", step_);
  check_finite(st.l_in, "instance contrast", step_);
  check_finite(st.l_pers, "perspective contrast", step_);
  check_finite(st.l_img, "image-level contrast", step_);

  model_->store.zero_grads();
  for (size_t i = 0; i < scenes.size(); ++i) backward_frame(scenes[i], seeds[i], st);
  const double grad_norm = opt_->step(model_->store);
  ema_update(ema_, *model_, cfg_.ema_momentum);

  LossReport rep;
  rep.step = step_;
  rep.l_det = st.l_det;
  rep.l_in = st.l_in;
  rep.l_pers = st.l_pers;
  rep.l_img = st.l_img;
  rep.l_total = st.l_total;
  rep.l_in_layers = st.in_mean;
  rep.l_pers_levels = st.pers_mean;
  rep.grad_norm = grad_norm;
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
  ++step_;
  return rep;
}

void Trainer::train() {
  if (out_dir_.empty()) throw std::runtime_error("train() needs an output directory");
  std::filesystem::create_directories(out_dir_);
  write_file_atomic(out_dir_ + "/config.txt", cfg_.canonical_text());
  {
    std::ofstream trunc(log_path_, std::ios::trunc);
    if (!trunc) throw std::runtime_error("cannot write " + log_path_);
  }

  const std::vector<int> train_set = train_indices();
  const std::vector<int> val_set = val_indices();
  if (cfg_.epochs > 0 && train_set.empty()) throw std::runtime_error("training split is empty");

  const auto run_eval = [&](int epoch) {
    save_checkpoint(out_dir_ + "/checkpoint.bin", *model_, ema_, *opt_, step_,
                    cfg_.canonical_text());
    const std::vector<int>& eval_set = val_set.empty() ? train_set : val_set;
    if (eval_set.empty()) return;
    MetricsReport m = evaluate_split(eval_set);
    json j;
    j["kind"] = "eval";
    j["step"] = step_;
    j["epoch"] = epoch;
    j["split"] = val_set.empty() ? "train" : "val";
    j["mAP"] = m.mAP;
    j["mATE"] = m.mATE;
    j["mAOE"] = m.mAOE;
    j["per_class_ap"] = m.per_class_ap;
    j["n_gt"] = m.n_gt;
    j["n_pred"] = m.n_pred;
    append_log(dump_json_17g(j, -1));
  };

  if (cfg_.epochs == 0) {
    run_eval(0);
    return;
  }

  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    std::vector<int> order = train_set;
    Rng shuffle_rng = Rng(cfg_.seed).fork(0xe90c4ull, static_cast<std::uint64_t>(epoch));
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);

    for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(cfg_.batch_size)) {
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg_.batch_size));
      const std::vector<int> batch(order.begin() + static_cast<long>(lo),
                                   order.begin() + static_cast<long>(hi));
      LossReport rep = train_step(batch);
      json j;
      j["kind"] = "loss";
      j["step"] = rep.step;
      j["epoch"] = epoch;
      j["l_det"] = rep.l_det;
      j["l_in"] = rep.l_in;
      j["l_pers"] = rep.l_pers;
      j["l_img"] = rep.l_img;
      j["l_total"] = rep.l_total;
      j["l_in_layers"] = rep.l_in_layers;
      j["l_pers_levels"] = rep.l_pers_levels;
      j["grad_norm"] = rep.grad_norm;
      append_log(dump_json_17g(j, -1));
    }

    const int every = std::max(1, cfg_.eval_every);
    if ((epoch + 1) % every == 0 || epoch + 1 == cfg_.epochs) run_eval(epoch);
  }
}

void Trainer::append_log(const std::string& line) {
  if (log_path_.empty()) return;
  std::ofstream out(log_path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + log_path_);
  out << line;
  if (line.empty() || line.back() != '\n') out << '\n';
}

// ---------------------------------------------------------------------------
// evaluation

std::vector<Prediction> infer_scene(const Model& m, const Scene& scene, const SplatGeometry& geo,
                                    double score_threshold, int max_dets) {
  const auto imgs = to_tensors(scene.images);
  FeaturePyramid pyr = backbone_forward(m, imgs, nullptr, nullptr);
  BevFeature b0 = lift_splat(m, pyr, geo, nullptr);
  std::vector<BevFeature> layers = bev_refine(m, b0, nullptr);
  DetectionOutput out = head_forward(m, layers.back(), nullptr);
  return decode_predictions(out, m.cfg.bev, score_threshold, max_dets, scene.scene_id);
}

MetricsReport Trainer::evaluate_split(const std::vector<int>& scene_indices,
                                      std::vector<std::vector<Prediction>>* preds_out,
                                      std::vector<std::vector<Box3D>>* gts_out) {
  std::vector<std::vector<Prediction>> preds;
  std::vector<std::vector<Box3D>> gts;
  for (size_t i = 0; i < scene_indices.size(); ++i) {
    Scene scene = load_scene(cfg_.dataset, manifest_, scene_indices[i]);
    std::vector<Prediction> p =
        infer_scene(*model_, scene, eval_geo_, cfg_.eval_score_threshold, cfg_.eval_max_dets);
    // the matcher indexes ground truth by scene_id, which here is the local row
    for (auto& pr : p) pr.scene_id = static_cast<int>(i);
    preds.push_back(std::move(p));
    gts.push_back(scene.boxes);
  }
  MetricsReport rep = evaluate(preds, gts, manifest_.config.n_classes);
  if (preds_out) *preds_out = std::move(preds);
  if (gts_out) *gts_out = std::move(gts);
  return rep;
}

MetricsReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& dataset_root,
                                  const std::string& split,
                                  std::vector<std::vector<Prediction>>* preds_out,
                                  std::vector<std::vector<Box3D>>* gts_out,
                                  std::vector<int>* scene_ids_out) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  RunConfig cfg = RunConfig::from_text(ck.config_text);
  cfg.dataset = dataset_root;
  Trainer t(cfg, "");  // re-validates the pinned dataset hash
  restore_model(ck, t.model());
  restore_ema(ck, t.ema_state());

  std::vector<int> idxs;
  if (split == "val") {
    idxs = t.val_indices();
  } else if (split == "train") {
    idxs = t.train_indices();
  } else if (split == "all") {
    for (size_t i = 0; i < t.manifest().scenes.size(); ++i) idxs.push_back(static_cast<int>(i));
  } else {
    throw std::runtime_error("unknown split '" + split + "' (want train, val, or all)");
  }
  if (scene_ids_out) {
    scene_ids_out->clear();
    for (int i : idxs) scene_ids_out->push_back(t.manifest().scenes[static_cast<size_t>(i)].scene_id);
  }
  return t.evaluate_split(idxs, preds_out, gts_out);
}

}  // namespace bevcon
