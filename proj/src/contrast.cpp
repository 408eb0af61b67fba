// SPDX-License-Identifier: Apache-2.0
#include "bevcon/contrast.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bevcon/telemetry.hpp"

namespace bevcon {

// One direction of the grouped loss; accumulates grads w.r.t. anchors (ga)
// and candidates (gb) when non-null.
static void grouped_one_direction(const Tensor& fa, const std::vector<int>& ids_a,
                                  const Tensor& fb, const std::vector<int>& ids_b,
                                  const ContrastConfig& cfg, Tensor* ga, Tensor* gb,
                                  double& loss_sum, int& anchor_count) {
  const int na = fa.dim(0), nb = fb.dim(0);
  if (na == 0 || nb == 0) return;
  const int d = fa.dim(1);
  const double inv_tau = 1.0 / cfg.temperature;

  std::vector<double> z(static_cast<size_t>(nb));
  std::vector<double> w(static_cast<size_t>(nb));
  for (int i = 0; i < na; ++i) {
    const double* ai = fa.data() + static_cast<size_t>(i) * d;
    int n_pos = 0, n_neg = 0;
    for (int j = 0; j < nb; ++j) {
      const double* bj = fb.data() + static_cast<size_t>(j) * d;
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += ai[k] * bj[k];
      z[static_cast<size_t>(j)] = s * inv_tau;
      if (ids_b[static_cast<size_t>(j)] == ids_a[static_cast<size_t>(i)]) ++n_pos;
      else ++n_neg;
    }
    if (n_pos == 0 || n_neg == 0) continue;

    // negatives-only logsumexp pieces, shared by every positive of this anchor
    double zmax = -1e300;
    for (int j = 0; j < nb; ++j)
      if (ids_b[static_cast<size_t>(j)] != ids_a[static_cast<size_t>(i)])
        zmax = std::max(zmax, z[static_cast<size_t>(j)]);

    for (int p = 0; p < nb; ++p) {
      if (ids_b[static_cast<size_t>(p)] != ids_a[static_cast<size_t>(i)]) continue;
      const double zp = z[static_cast<size_t>(p)];
      const double m = cfg.include_positive_in_denominator ? std::max(zmax, zp) : zmax;
      double denom = 0.0;
      for (int j = 0; j < nb; ++j) {
        const bool is_neg = ids_b[static_cast<size_t>(j)] != ids_a[static_cast<size_t>(i)];
        const bool in_denom = is_neg || (cfg.include_positive_in_denominator && j == p);
        w[static_cast<size_t>(j)] = 0.0;
        if (!in_denom) continue;
        const double e = std::exp(z[static_cast<size_t>(j)] - m);
        w[static_cast<size_t>(j)] = e;
        denom += e;
      }
      loss_sum += -zp + m + std::log(denom);
      ++anchor_count;

      if (ga && gb) {
        const double* ai2 = fa.data() + static_cast<size_t>(i) * d;
        double* gai = ga->data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < nb; ++j) {
          double coeff = w[static_cast<size_t>(j)] / denom;  // softmax over the denominator set
          if (j == p) coeff -= 1.0;
          if (coeff == 0.0) continue;
          coeff *= inv_tau;
          const double* bj = fb.data() + static_cast<size_t>(j) * d;
          double* gbj = gb->data() + static_cast<size_t>(j) * d;
          for (int k = 0; k < d; ++k) {
            gai[k] += coeff * bj[k];
            gbj[k] += coeff * ai2[k];
          }
        }
      }
    }
  }
}

GroupedNceResult grouped_info_nce(const Tensor& fa, const std::vector<int>& ids_a,
                                  const Tensor& fb, const std::vector<int>& ids_b,
                                  const ContrastConfig& cfg, bool want_grad) {
  telemetry().contrast_calls++;
  if (cfg.temperature <= 0.0) throw std::runtime_error("grouped_info_nce: temperature <= 0");
  if (fa.dim(0) != static_cast<int>(ids_a.size()) || fb.dim(0) != static_cast<int>(ids_b.size()))
    throw std::runtime_error("grouped_info_nce: ids/rows mismatch");

  GroupedNceResult r;
  if (want_grad) {
    r.grad_a = Tensor(fa.shape);
    r.grad_b = Tensor(fb.shape);
  }
  Tensor* ga = want_grad ? &r.grad_a : nullptr;
  Tensor* gb = want_grad ? &r.grad_b : nullptr;
  grouped_one_direction(fa, ids_a, fb, ids_b, cfg, ga, gb, r.loss_sum, r.anchor_count);
  if (cfg.symmetric)
    grouped_one_direction(fb, ids_b, fa, ids_a, cfg, gb, ga, r.loss_sum, r.anchor_count);
  return r;
}

double info_nce(const InstanceFeatures& f, const InstanceFeatures& f_prime,
                const ContrastConfig& cfg) {
  if (f.ids != f_prime.ids) throw std::runtime_error("info_nce: instance ids misaligned");
  auto check_norms = [](const InstanceFeatures& x) {
    const int n = x.count();
    const int d = n > 0 ? x.vectors.dim(1) : 0;
    for (int i = 0; i < n; ++i) {
      double nrm = 0.0;
      for (int j = 0; j < d; ++j) nrm += x.vectors.at2(i, j) * x.vectors.at2(i, j);
      if (std::abs(std::sqrt(nrm) - 1.0) > 1e-5)
        throw std::runtime_error("info_nce: row " + std::to_string(i) + " is not unit-norm");
    }
  };
  check_norms(f);
  check_norms(f_prime);
  if (f.count() < 2) return 0.0;
  GroupedNceResult r = grouped_info_nce(f.vectors, f.ids, f_prime.vectors, f_prime.ids, cfg, false);
  return r.anchor_count > 0 ? r.loss_sum / r.anchor_count : 0.0;
}

std::vector<double> multilayer_weights(int n_layers, double eps) {
  if (eps <= 0.0) throw std::runtime_error("multilayer_weights: eps <= 0");
  std::vector<double> w(static_cast<size_t>(n_layers));
  for (int l = 1; l <= n_layers; ++l)
    w[static_cast<size_t>(l) - 1] = 1.0 / std::pow(eps, static_cast<double>(n_layers - l));
  return w;
}

void shared_rows(const std::vector<int>& ids_a, const std::vector<int>& ids_b,
                 std::vector<int>& ia, std::vector<int>& ib) {
  for (size_t i = 0; i < ids_a.size(); ++i) {
    for (size_t j = 0; j < ids_b.size(); ++j) {
      if (ids_a[i] == ids_b[j]) {
        ia.push_back(static_cast<int>(i));
        ib.push_back(static_cast<int>(j));
        break;
      }
    }
  }
}

InstanceFeatures select_rows(const InstanceFeatures& f, const std::vector<int>& idx) {
  InstanceFeatures out;
  out.source = f.source;
  const int d = f.count() > 0 ? f.vectors.dim(1) : 0;
  out.vectors = Tensor({static_cast<int>(idx.size()), d});
  for (size_t r = 0; r < idx.size(); ++r) {
    out.ids.push_back(f.ids[static_cast<size_t>(idx[r])]);
    for (int j = 0; j < d; ++j)
      out.vectors.at2(static_cast<int>(r), j) = f.vectors.at2(idx[r], j);
  }
  return out;
}

LayeredLoss instance_contrast_multilayer(
    const std::vector<std::pair<const BevFeature*, const BevFeature*>>& layers,
    const std::vector<Box3D>& boxes_a, const std::vector<Box3D>& boxes_b,
    const PoolConfig& pool_cfg, const ProjectionMlp* head, const ContrastConfig& cfg) {
  const int n_layers = static_cast<int>(layers.size());
  const std::vector<double> weights = multilayer_weights(n_layers, cfg.layer_scale);

  LayeredLoss out;
  for (int l = 0; l < n_layers; ++l) {
    PooledBatch pa = pool_instances_bev(*layers[static_cast<size_t>(l)].first, boxes_a, pool_cfg, head);
    PooledBatch pb = pool_instances_bev(*layers[static_cast<size_t>(l)].second, boxes_b, pool_cfg, head);
    std::vector<int> ia, ib;
    shared_rows(pa.feats.ids, pb.feats.ids, ia, ib);
    const double loss = info_nce(select_rows(pa.feats, ia), select_rows(pb.feats, ib), cfg);
    out.per_part.push_back(loss);
    out.total += weights[static_cast<size_t>(l)] * loss;
  }
  return out;
}

LayeredLoss perspective_contrast(const FeaturePyramid& pyr_a, const FeaturePyramid& pyr_b,
                                 const std::vector<Box2D>& boxes2d_a,
                                 const std::vector<Box2D>& boxes2d_b, double gamma,
                                 const PoolConfig& pool_cfg,
                                 const std::vector<ProjectionMlp>* heads,
                                 const ContrastConfig& cfg) {
  if (pyr_a.n_levels() != pyr_b.n_levels())
    throw std::runtime_error("perspective_contrast: level count mismatch");
  std::vector<PooledBatch> pa = pool_instances_image(pyr_a, boxes2d_a, gamma, pool_cfg, heads);
  std::vector<PooledBatch> pb = pool_instances_image(pyr_b, boxes2d_b, gamma, pool_cfg, heads);

  LayeredLoss out;
  for (size_t j = 0; j < pa.size(); ++j) {
    GroupedNceResult r = grouped_info_nce(pa[j].feats.vectors, pa[j].feats.ids,
                                          pb[j].feats.vectors, pb[j].feats.ids, cfg, false);
    out.per_part.push_back(r.anchor_count > 0 ? r.loss_sum / r.anchor_count : 0.0);
  }
  for (double v : out.per_part) out.total += v;
  if (!out.per_part.empty()) out.total /= static_cast<double>(out.per_part.size());
  return out;
}

double image_level_contrast(const FeaturePyramid& pyr_a, const FeaturePyramid& pyr_b,
                            const ContrastConfig& cfg) {
  const int n_views = pyr_a.n_views();
  if (n_views < 2) return 0.0;
  auto gap_rows = [&](const FeaturePyramid& pyr) {
    const int c = pyr.features[0][0].dim(2);
    Tensor rows({n_views, c});
    for (int k = 0; k < n_views; ++k) {
      const Tensor& f = pyr.features[0][static_cast<size_t>(k)];
      const std::int64_t cells = static_cast<std::int64_t>(f.dim(0)) * f.dim(1);
      for (std::int64_t i = 0; i < cells; ++i)
        for (int j = 0; j < c; ++j) rows.at2(k, j) += f[i * c + j];
      for (int j = 0; j < c; ++j) rows.at2(k, j) /= static_cast<double>(cells);
    }
    return l2_normalize_rows(rows);
  };
  std::vector<int> ids(static_cast<size_t>(n_views));
  for (int k = 0; k < n_views; ++k) ids[static_cast<size_t>(k)] = k;
  GroupedNceResult r = grouped_info_nce(gap_rows(pyr_a), ids, gap_rows(pyr_b), ids, cfg, false);
  return r.anchor_count > 0 ? r.loss_sum / r.anchor_count : 0.0;
}

}  // namespace bevcon
