// SPDX-License-Identifier: Apache-2.0
#include "bevcon/nn.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace bevcon {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

static MatMap as_mat(Tensor& t, std::int64_t rows, std::int64_t cols) {
  if (rows * cols != t.size()) throw std::runtime_error("as_mat: size mismatch " + t.shape_str());
  return MatMap(t.data(), rows, cols);
}
static CMatMap as_mat(const Tensor& t, std::int64_t rows, std::int64_t cols) {
  if (rows * cols != t.size()) throw std::runtime_error("as_mat: size mismatch " + t.shape_str());
  return CMatMap(t.data(), rows, cols);
}

// ---------------------------------------------------------------------------
// parameters

Param* ParamStore::add(const std::string& name, std::vector<int> shape) {
  if (find(name)) throw std::runtime_error("duplicate param: " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value = Tensor(shape);
  p->grad = Tensor(shape);
  params_.push_back(std::move(p));
  return params_.back().get();
}

Param* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p->grad.zero();
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void init_he_normal(Param& p, int fan_in, std::uint64_t seed) {
  Rng rng(fnv1a64(p.name.data(), p.name.size(), seed ^ 0x9e3779b97f4a7c15ull));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : p.value.v) x = rng.normal() * std_dev;
}

void init_constant(Param& p, double value) { p.value.fill(value); }

// ---------------------------------------------------------------------------
// conv2d

static int conv_out_dim(int in, int k, int s, int pad) { return (in + 2 * pad - k) / s + 1; }

static void im2col(const Tensor& x, const ConvSpec& sp, Tensor& col, int out_h, int out_w) {
  const int H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const int k = sp.ksize;
  double* dst = col.data();
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const int y0 = oy * sp.stride - sp.pad;
      const int x0 = ox * sp.stride - sp.pad;
      for (int ky = 0; ky < k; ++ky) {
        const int y = y0 + ky;
        if (y < 0 || y >= H) {
          std::memset(dst, 0, sizeof(double) * static_cast<size_t>(k) * C);
          dst += static_cast<size_t>(k) * C;
          continue;
        }
        for (int kx = 0; kx < k; ++kx) {
          const int xx = x0 + kx;
          if (xx < 0 || xx >= W) {
            std::memset(dst, 0, sizeof(double) * C);
          } else {
            std::memcpy(dst, x.data() + (static_cast<size_t>(y) * W + xx) * C,
                        sizeof(double) * C);
          }
          dst += C;
        }
      }
    }
  }
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                      const ConvSpec& sp, ConvCache* cache) {
  if (x.shape.size() != 3 || x.dim(2) != sp.in_ch)
    throw std::runtime_error("conv2d: bad input shape " + x.shape_str());
  const int out_h = conv_out_dim(x.dim(0), sp.ksize, sp.stride, sp.pad);
  const int out_w = conv_out_dim(x.dim(1), sp.ksize, sp.stride, sp.pad);
  const int patch = sp.ksize * sp.ksize * sp.in_ch;

  Tensor local_col;
  Tensor& col = cache ? cache->col : local_col;
  col = Tensor({out_h * out_w, patch});
  im2col(x, sp, col, out_h, out_w);
  if (cache) {
    cache->in_h = x.dim(0);
    cache->in_w = x.dim(1);
    cache->out_h = out_h;
    cache->out_w = out_w;
  }

  Tensor y({out_h, out_w, sp.out_ch});
  auto ym = as_mat(y, static_cast<std::int64_t>(out_h) * out_w, sp.out_ch);
  ym.noalias() = as_mat(col, static_cast<std::int64_t>(out_h) * out_w, patch) *
                 as_mat(w, patch, sp.out_ch);
  if (b.size() > 0) ym.rowwise() += CMatMap(b.data(), 1, sp.out_ch).row(0);
  return y;
}

static void col2im(const Tensor& dcol, const ConvSpec& sp, Tensor& dx, int out_h, int out_w) {
  const int H = dx.dim(0), W = dx.dim(1), C = dx.dim(2);
  const int k = sp.ksize;
  const double* src = dcol.data();
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const int y0 = oy * sp.stride - sp.pad;
      const int x0 = ox * sp.stride - sp.pad;
      for (int ky = 0; ky < k; ++ky) {
        const int y = y0 + ky;
        if (y < 0 || y >= H) {
          src += static_cast<size_t>(k) * C;
          continue;
        }
        for (int kx = 0; kx < k; ++kx) {
          const int xx = x0 + kx;
          if (xx >= 0 && xx < W) {
            double* d = dx.data() + (static_cast<size_t>(y) * W + xx) * C;
            for (int c = 0; c < C; ++c) d[c] += src[c];
          }
          src += C;
        }
      }
    }
  }
}

Tensor conv2d_backward(const Tensor& dy, const Tensor& w, const ConvSpec& sp,
                       const ConvCache& cache, Tensor* dw, Tensor* db) {
  const int out_h = cache.out_h, out_w = cache.out_w;
  const int patch = sp.ksize * sp.ksize * sp.in_ch;
  const std::int64_t n = static_cast<std::int64_t>(out_h) * out_w;
  auto dym = as_mat(dy, n, sp.out_ch);

  if (dw) as_mat(*dw, patch, sp.out_ch).noalias() += as_mat(cache.col, n, patch).transpose() * dym;
  if (db) MatMap(db->data(), 1, sp.out_ch) += dym.colwise().sum();

  Tensor dcol({out_h * out_w, patch});
  as_mat(dcol, n, patch).noalias() = dym * as_mat(w, patch, sp.out_ch).transpose();

  Tensor dx({cache.in_h, cache.in_w, sp.in_ch});
  col2im(dcol, sp, dx, out_h, out_w);
  return dx;
}

// ---------------------------------------------------------------------------
// pointwise / dense

Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.v) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& dy, const Tensor& y) {
  Tensor dx = dy;
  for (size_t i = 0; i < dx.v.size(); ++i)
    if (y.v[i] <= 0.0) dx.v[i] = 0.0;
  return dx;
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  if (w.dim(0) != din) throw std::runtime_error("linear: shape mismatch");
  Tensor y({n, dout});
  auto ym = as_mat(y, n, dout);
  ym.noalias() = as_mat(x, n, din) * as_mat(w, din, dout);
  if (b.size() > 0) ym.rowwise() += CMatMap(b.data(), 1, dout).row(0);
  return y;
}

Tensor linear_backward(const Tensor& dy, const Tensor& x, const Tensor& w,
                       Tensor* dw, Tensor* db) {
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  auto dym = as_mat(dy, n, dout);
  if (dw) as_mat(*dw, din, dout).noalias() += as_mat(x, n, din).transpose() * dym;
  if (db) MatMap(db->data(), 1, dout) += dym.colwise().sum();
  Tensor dx({n, din});
  as_mat(dx, n, din).noalias() = dym * as_mat(w, din, dout).transpose();
  return dx;
}

Tensor softmax_rows(const Tensor& x) {
  const int n = x.dim(0), d = x.dim(1);
  Tensor y({n, d});
  for (int i = 0; i < n; ++i) {
    const double* xi = x.data() + static_cast<size_t>(i) * d;
    double* yi = y.data() + static_cast<size_t>(i) * d;
    double mx = xi[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    for (int j = 0; j < d; ++j) yi[j] /= sum;
  }
  return y;
}

Tensor softmax_rows_backward(const Tensor& dy, const Tensor& y) {
  const int n = y.dim(0), d = y.dim(1);
  Tensor dx({n, d});
  for (int i = 0; i < n; ++i) {
    const double* yi = y.data() + static_cast<size_t>(i) * d;
    const double* gi = dy.data() + static_cast<size_t>(i) * d;
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += yi[j] * gi[j];
    double* di = dx.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) di[j] = yi[j] * (gi[j] - dot);
  }
  return dx;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  const int n = x.dim(0), d = x.dim(1);
  Tensor y({n, d});
  for (int i = 0; i < n; ++i) {
    const double* xi = x.data() + static_cast<size_t>(i) * d;
    double nrm = 0.0;
    for (int j = 0; j < d; ++j) nrm += xi[j] * xi[j];
    nrm = std::max(std::sqrt(nrm), eps);
    double* yi = y.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) yi[j] = xi[j] / nrm;
  }
  return y;
}

Tensor l2_normalize_rows_backward(const Tensor& dy, const Tensor& x, double eps) {
  const int n = x.dim(0), d = x.dim(1);
  Tensor dx({n, d});
  for (int i = 0; i < n; ++i) {
    const double* xi = x.data() + static_cast<size_t>(i) * d;
    const double* gi = dy.data() + static_cast<size_t>(i) * d;
    double nrm = 0.0;
    for (int j = 0; j < d; ++j) nrm += xi[j] * xi[j];
    nrm = std::max(std::sqrt(nrm), eps);
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += xi[j] * gi[j];
    double* di = dx.data() + static_cast<size_t>(i) * d;
    const double inv = 1.0 / nrm, inv3 = 1.0 / (nrm * nrm * nrm);
    for (int j = 0; j < d; ++j) di[j] = gi[j] * inv - xi[j] * dot * inv3;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// projection head

Tensor projection_forward(const ProjectionMlp& mlp, const Tensor& x, ProjectionCache* cache) {
  Tensor h = relu_forward(linear_forward(x, mlp.w1->value, mlp.b1->value));
  Tensor out = linear_forward(h, mlp.w2->value, mlp.b2->value);
  if (cache) {
    cache->x = x;
    cache->hidden = h;
    cache->pre_norm = out;
  }
  return out;
}

Tensor projection_backward(const ProjectionMlp& mlp, const Tensor& dy, const ProjectionCache& cache) {
  Tensor dh = linear_backward(dy, cache.hidden, mlp.w2->value, &mlp.w2->grad, &mlp.b2->grad);
  dh = relu_backward(dh, cache.hidden);
  return linear_backward(dh, cache.x, mlp.w1->value, &mlp.w1->grad, &mlp.b1->grad);
}

// ---------------------------------------------------------------------------
// optimizer

AdamW::AdamW(AdamWConfig cfg, const ParamStore& store) : cfg_(cfg) {
  for (const auto& p : store.all()) {
    m_.emplace_back(p->value.shape);
    v_.emplace_back(p->value.shape);
  }
}

double AdamW::step(ParamStore& store) {
  const auto& params = store.all();
  if (params.size() != m_.size()) throw std::runtime_error("AdamW: store changed size");

  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p->grad.v) sq += g * g;
  const double norm = std::sqrt(sq);
  const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));

  for (size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (size_t i = 0; i < p.value.v.size(); ++i) {
      const double g = p.grad.v[i] * scale;
      m.v[i] = cfg_.beta1 * m.v[i] + (1.0 - cfg_.beta1) * g;
      v.v[i] = cfg_.beta2 * v.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m.v[i] / bc1;
      const double vhat = v.v[i] / bc2;
      // decoupled weight decay
      p.value.v[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.value.v[i]);
    }
  }
  return norm;
}

}  // namespace bevcon
