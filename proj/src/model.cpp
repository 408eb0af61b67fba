// SPDX-License-Identifier: Apache-2.0
#include "bevcon/model.hpp"

#include <cmath>
#include <stdexcept>

#include "bevcon/telemetry.hpp"

namespace bevcon {

static Tensor flat2d(const Tensor& t, int rows, int cols) {
  if (static_cast<std::int64_t>(rows) * cols != t.size())
    throw std::runtime_error("flat2d: size mismatch");
  Tensor r({rows, cols});
  r.v = t.v;
  return r;
}

// ---------------------------------------------------------------------------
// model wiring

Model::Model(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
  auto conv = [&](const std::string& name, int in_ch, int out_ch, int k, int stride) {
    ConvLayer l;
    l.spec = ConvSpec{in_ch, out_ch, k, stride, k / 2};
    l.w = store.add(name + ".w", {k * k * in_ch, out_ch});
    l.b = store.add(name + ".b", {out_ch});
    init_he_normal(*l.w, k * k * in_ch, seed);
    return l;
  };
  auto dense = [&](const std::string& name, int din, int dout, bool bias) {
    LinearLayer l;
    l.w = store.add(name + ".w", {din, dout});
    init_he_normal(*l.w, din, seed);
    if (bias) l.b = store.add(name + ".b", {dout});
    return l;
  };
  auto mlp = [&](const std::string& name, int din, int dout) {
    ProjectionMlp m;
    m.w1 = store.add(name + ".fc1.w", {din, din});
    m.b1 = store.add(name + ".fc1.b", {din});
    m.w2 = store.add(name + ".fc2.w", {din, dout});
    m.b2 = store.add(name + ".fc2.b", {dout});
    init_he_normal(*m.w1, din, seed);
    init_he_normal(*m.w2, din, seed);
    return m;
  };

  int in_ch = 3;
  for (int s = 0; s < 4; ++s) {
    stage[static_cast<size_t>(s)] = conv("backbone.stage" + std::to_string(s), in_ch,
                                         cfg.stage_channels[static_cast<size_t>(s)], 3, 2);
    in_ch = cfg.stage_channels[static_cast<size_t>(s)];
  }

  const int c0 = cfg.level_channels(0);
  depth_head = dense("view.depth", c0, cfg.depth_bins, true);
  bev_proj = dense("view.tobev", c0, cfg.bev_channels, false);  // bias-free: empty cells stay zero

  for (int l = 0; l < cfg.n_refine_layers; ++l)
    refine.push_back(conv("refine." + std::to_string(l), cfg.bev_channels, cfg.bev_channels, 3, 1));

  head_trunk = conv("head.trunk", cfg.bev_channels, cfg.head_channels, 3, 1);
  head_cls = dense("head.cls", cfg.head_channels, cfg.n_classes, true);
  head_reg = dense("head.reg", cfg.head_channels, 7, true);
  // rare-positive prior so early training is not swamped by background cells
  init_constant(*head_cls.b, -std::log(99.0));

  proj_bev = mlp("proj.bev", cfg.bev_channels, cfg.proj_dim);
  for (int j = 0; j < ModelConfig::kNumLevels; ++j)
    proj_img.push_back(mlp("proj.img" + std::to_string(j), cfg.level_channels(j), cfg.proj_dim));
}

std::vector<Param*> Model::backbone_params() const {
  std::vector<Param*> out;
  for (const auto& s : stage) {
    out.push_back(s.w);
    out.push_back(s.b);
  }
  return out;
}

Tensor image_to_tensor(const Image& img) {
  Tensor t({img.height, img.width, 3});
  t.v = img.px;
  return t;
}

// ---------------------------------------------------------------------------
// backbone

FeaturePyramid backbone_forward(const Model& m, const std::vector<Tensor>& images,
                                const std::vector<Tensor>* override_backbone,
                                std::vector<BackboneViewCache>* caches) {
  telemetry().backbone_forward_calls++;
  if (override_backbone) telemetry().ema_forward_calls++;

  const Tensor* w[4];
  const Tensor* b[4];
  for (int s = 0; s < 4; ++s) {
    const auto si = static_cast<size_t>(s);
    if (override_backbone) {
      w[s] = &(*override_backbone)[2 * si];
      b[s] = &(*override_backbone)[2 * si + 1];
    } else {
      w[s] = &m.stage[si].w->value;
      b[s] = &m.stage[si].b->value;
    }
  }

  FeaturePyramid pyr;
  pyr.features.resize(ModelConfig::kNumLevels);
  for (int j = 0; j < ModelConfig::kNumLevels; ++j) pyr.strides.push_back(m.cfg.level_stride(j));
  if (caches) caches->resize(images.size());

  for (size_t k = 0; k < images.size(); ++k) {
    const Tensor& img = images[k];
    if (img.dim(0) != m.cfg.image_height || img.dim(1) != m.cfg.image_width || img.dim(2) != 3)
      throw std::runtime_error("backbone_forward: image shape " + img.shape_str());
    BackboneViewCache* cache = caches ? &(*caches)[k] : nullptr;
    if (cache) cache->input = img;
    const Tensor* x = &img;
    Tensor act;
    for (int s = 0; s < 4; ++s) {
      const auto si = static_cast<size_t>(s);
      Tensor pre = conv2d_forward(*x, *w[s], *b[s], m.stage[si].spec,
                                  cache ? &cache->conv[si] : nullptr);
      act = relu_forward(pre);
      if (cache) cache->act[si] = act;
      if (s >= 1) pyr.features[static_cast<size_t>(s) - 1].push_back(act);
      x = cache ? &cache->act[si] : &act;
    }
  }
  return pyr;
}

void backbone_backward(const Model& m, const FeaturePyramid& dpyr,
                       const std::vector<BackboneViewCache>& caches) {
  for (size_t k = 0; k < caches.size(); ++k) {
    const BackboneViewCache& cache = caches[k];
    Tensor grad;  // grad w.r.t. current stage's relu output
    for (int s = 3; s >= 0; --s) {
      const auto si = static_cast<size_t>(s);
      if (s >= 1) {
        const Tensor& dl = dpyr.features[si - 1][k];
        if (grad.size() == 0) grad = dl;
        else grad.add_(dl);
      }
      Tensor dpre = relu_backward(grad, cache.act[si]);
      grad = conv2d_backward(dpre, m.stage[si].w->value, m.stage[si].spec, cache.conv[si],
                             &m.stage[si].w->grad, &m.stage[si].b->grad);
      if (s == 0) break;  // image input needs no grad
    }
  }
}

// ---------------------------------------------------------------------------
// EMA twin

EmaState ema_init(const Model& m, double momentum) {
  EmaState s;
  s.momentum = momentum;
  for (const Param* p : m.backbone_params()) s.target.push_back(p->value);
  return s;
}

void ema_update(EmaState& state, const Model& m, double momentum) {
  telemetry().ema_update_calls++;
  auto params = m.backbone_params();
  if (params.size() != state.target.size()) throw std::runtime_error("ema_update: shape mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& t = state.target[i];
    const Tensor& o = params[i]->value;
    if (!t.same_shape(o)) throw std::runtime_error("ema_update: shape mismatch");
    for (size_t j = 0; j < t.v.size(); ++j)
      t.v[j] = momentum * t.v[j] + (1.0 - momentum) * o.v[j];
  }
}

// ---------------------------------------------------------------------------
// lift-splat

SplatGeometry make_splat_geometry(const ModelConfig& cfg, const std::vector<CameraModel>& cameras,
                                  const std::vector<ViewAffine>* view_affines,
                                  const BevSimilarity* bev_aug) {
  SplatGeometry geo;
  geo.n_views = static_cast<int>(cameras.size());
  geo.feat_h = cfg.level_h(0);
  geo.feat_w = cfg.level_w(0);
  geo.n_bins = cfg.depth_bins;
  const double bin_w = (cfg.depth_max - cfg.depth_min) / cfg.depth_bins;
  for (int d = 0; d < cfg.depth_bins; ++d)
    geo.bin_depths.push_back(cfg.depth_min + (d + 0.5) * bin_w);
  geo.cell.assign(static_cast<size_t>(geo.n_views) * geo.feat_h * geo.feat_w * geo.n_bins, -1);

  const double stride = cfg.level_stride(0);
  for (int k = 0; k < geo.n_views; ++k) {
    ViewAffine inv;
    if (view_affines) inv = (*view_affines)[static_cast<size_t>(k)].inverse();
    std::int32_t* dst =
        geo.cell.data() + static_cast<size_t>(k) * geo.feat_h * geo.feat_w * geo.n_bins;
    for (int py = 0; py < geo.feat_h; ++py) {
      for (int px = 0; px < geo.feat_w; ++px) {
        double u = (px + 0.5) * stride;
        double v = (py + 0.5) * stride;
        if (view_affines) {
          auto [u0, v0] = inv.apply(u, v);
          u = u0;
          v = v0;
        }
        for (int d = 0; d < geo.n_bins; ++d, ++dst) {
          Vec3 p = unproject_pixel(cameras[static_cast<size_t>(k)], u, v, geo.bin_depths[static_cast<size_t>(d)]);
          if (bev_aug) p = bev_aug->apply_point(p);
          if (!cfg.bev.contains(p[0], p[1])) continue;
          const int gx = static_cast<int>((p[0] - cfg.bev.x_min) / cfg.bev.cell_size_x());
          const int gy = static_cast<int>((p[1] - cfg.bev.y_min) / cfg.bev.cell_size_y());
          if (gx < 0 || gx >= cfg.bev.grid_w || gy < 0 || gy >= cfg.bev.grid_h) continue;
          *dst = gy * cfg.bev.grid_w + gx;
        }
      }
    }
  }
  return geo;
}

BevFeature lift_splat(const Model& m, const FeaturePyramid& pyr, const SplatGeometry& geo,
                      LiftSplatCache* cache) {
  const int P = geo.feat_h * geo.feat_w;
  const int C0 = m.cfg.level_channels(0);
  const int D = geo.n_bins;
  const int G = m.cfg.bev.grid_h * m.cfg.bev.grid_w;

  Tensor scatter({G, C0});
  std::vector<Tensor> probs_all;
  for (int k = 0; k < geo.n_views; ++k) {
    const Tensor& fmap = pyr.features[0][static_cast<size_t>(k)];
    if (fmap.dim(0) != geo.feat_h || fmap.dim(1) != geo.feat_w)
      throw std::runtime_error("lift_splat: pyramid/geometry shape mismatch");
    Tensor feat = flat2d(fmap, P, C0);
    Tensor logits = linear_forward(feat, m.depth_head.w->value, m.depth_head.b->value);
    Tensor probs = softmax_rows(logits);
    for (int p = 0; p < P; ++p) {
      const double* pr = probs.data() + static_cast<size_t>(p) * D;
      const double* fr = feat.data() + static_cast<size_t>(p) * C0;
      for (int d = 0; d < D; ++d) {
        const std::int32_t c = geo.at(k, p, d);
        if (c < 0) continue;
        double* row = scatter.data() + static_cast<size_t>(c) * C0;
        const double w = pr[d];
        for (int j = 0; j < C0; ++j) row[j] += w * fr[j];
      }
    }
    if (cache) probs_all.push_back(std::move(probs));
  }

  Tensor empty_bias;
  Tensor flat = linear_forward(scatter, m.bev_proj.w->value, empty_bias);
  if (cache) {
    cache->probs = std::move(probs_all);
    cache->scatter = std::move(scatter);
  }

  BevFeature out;
  out.spec = m.cfg.bev;
  out.layer_index = 0;
  out.grid = Tensor({m.cfg.bev.grid_h, m.cfg.bev.grid_w, m.cfg.bev_channels});
  out.grid.v = flat.v;
  return out;
}

void lift_splat_backward(const Model& m, const Tensor& dgrid, const FeaturePyramid& pyr,
                         const SplatGeometry& geo, const LiftSplatCache& cache,
                         FeaturePyramid* dpyr) {
  const int P = geo.feat_h * geo.feat_w;
  const int C0 = m.cfg.level_channels(0);
  const int D = geo.n_bins;
  const int G = m.cfg.bev.grid_h * m.cfg.bev.grid_w;

  Tensor dflat = flat2d(dgrid, G, m.cfg.bev_channels);
  Tensor dscatter = linear_backward(dflat, cache.scatter, m.bev_proj.w->value,
                                    &m.bev_proj.w->grad, nullptr);

  for (int k = 0; k < geo.n_views; ++k) {
    const Tensor& fmap = pyr.features[0][static_cast<size_t>(k)];
    Tensor feat = flat2d(fmap, P, C0);
    const Tensor& probs = cache.probs[static_cast<size_t>(k)];
    Tensor dfeat({P, C0});
    Tensor dprobs({P, D});
    for (int p = 0; p < P; ++p) {
      const double* pr = probs.data() + static_cast<size_t>(p) * D;
      const double* fr = feat.data() + static_cast<size_t>(p) * C0;
      double* dfr = dfeat.data() + static_cast<size_t>(p) * C0;
      double* dpr = dprobs.data() + static_cast<size_t>(p) * D;
      for (int d = 0; d < D; ++d) {
        const std::int32_t c = geo.at(k, p, d);
        if (c < 0) continue;
        const double* g = dscatter.data() + static_cast<size_t>(c) * C0;
        double dot = 0.0;
        for (int j = 0; j < C0; ++j) {
          dfr[j] += pr[d] * g[j];
          dot += fr[j] * g[j];
        }
        dpr[d] = dot;
      }
    }
    Tensor dlogits = softmax_rows_backward(dprobs, probs);
    Tensor dfeat2 = linear_backward(dlogits, feat, m.depth_head.w->value,
                                    &m.depth_head.w->grad, &m.depth_head.b->grad);
    dfeat.add_(dfeat2);
    if (dpyr) {
      Tensor& dst = dpyr->features[0][static_cast<size_t>(k)];
      for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += dfeat[i];
    }
  }
}

// ---------------------------------------------------------------------------
// BEV refinement

std::vector<BevFeature> bev_refine(const Model& m, const BevFeature& b0, RefineCache* cache) {
  if (b0.layer_index != 0) throw std::runtime_error("bev_refine: expects layer 0");
  std::vector<BevFeature> out;
  const Tensor* x = &b0.grid;
  for (size_t l = 0; l < m.refine.size(); ++l) {
    Tensor r = relu_forward(*x);
    if (cache) cache->conv.emplace_back();
    Tensor delta = conv2d_forward(r, m.refine[l].w->value, m.refine[l].b->value, m.refine[l].spec,
                                  cache ? &cache->conv.back() : nullptr);
    if (cache) cache->relu.push_back(std::move(r));
    BevFeature b;
    b.spec = b0.spec;
    b.layer_index = static_cast<int>(l) + 1;
    b.grid = *x;
    b.grid.add_(delta);
    out.push_back(std::move(b));
    x = &out.back().grid;
  }
  return out;
}

Tensor bev_refine_backward(const Model& m, const std::vector<Tensor>& dlayers,
                           const RefineCache& cache) {
  const int n = static_cast<int>(m.refine.size());
  Tensor grad = dlayers[static_cast<size_t>(n) - 1];
  for (int l = n - 1; l >= 0; --l) {
    const auto li = static_cast<size_t>(l);
    Tensor dr = conv2d_backward(grad, m.refine[li].w->value, m.refine[li].spec, cache.conv[li],
                                &m.refine[li].w->grad, &m.refine[li].b->grad);
    Tensor dx = relu_backward(dr, cache.relu[li]);
    grad.add_(dx);  // identity path
    if (l > 0) grad.add_(dlayers[li - 1]);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// detection head

DetectionOutput head_forward(const Model& m, const BevFeature& b, HeadCache* cache) {
  const int G = b.spec.grid_h * b.spec.grid_w;
  Tensor pre = conv2d_forward(b.grid, m.head_trunk.w->value, m.head_trunk.b->value,
                              m.head_trunk.spec, cache ? &cache->trunk : nullptr);
  Tensor act = relu_forward(pre);
  Tensor rows = flat2d(act, G, m.cfg.head_channels);
  if (cache) cache->trunk_act = rows;

  DetectionOutput out;
  Tensor cls = linear_forward(rows, m.head_cls.w->value, m.head_cls.b->value);
  Tensor reg = linear_forward(rows, m.head_reg.w->value, m.head_reg.b->value);
  out.class_logits = Tensor({b.spec.grid_h, b.spec.grid_w, m.cfg.n_classes});
  out.class_logits.v = cls.v;
  out.box_reg = Tensor({b.spec.grid_h, b.spec.grid_w, 7});
  out.box_reg.v = reg.v;
  return out;
}

Tensor head_backward(const Model& m, const Tensor& dcls, const Tensor& dreg, const HeadCache& cache) {
  const int gh = dcls.dim(0), gw = dcls.dim(1);
  const int G = gh * gw;
  Tensor dcls2 = flat2d(dcls, G, m.cfg.n_classes);
  Tensor dreg2 = flat2d(dreg, G, 7);
  Tensor drows = linear_backward(dcls2, cache.trunk_act, m.head_cls.w->value,
                                 &m.head_cls.w->grad, &m.head_cls.b->grad);
  Tensor drows2 = linear_backward(dreg2, cache.trunk_act, m.head_reg.w->value,
                                  &m.head_reg.w->grad, &m.head_reg.b->grad);
  drows.add_(drows2);

  Tensor dact({gh, gw, m.cfg.head_channels});
  dact.v = drows.v;
  Tensor relu_out({gh, gw, m.cfg.head_channels});
  relu_out.v = cache.trunk_act.v;
  Tensor dpre = relu_backward(dact, relu_out);
  return conv2d_backward(dpre, m.head_trunk.w->value, m.head_trunk.spec, cache.trunk,
                         &m.head_trunk.w->grad, &m.head_trunk.b->grad);
}

}  // namespace bevcon
