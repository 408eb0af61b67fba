// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "bevcon/rng.hpp"
#include "bevcon/tensor.hpp"

namespace bevcon {

// ---------------------------------------------------------------------------
// parameters

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Owns named parameters. Iteration order is construction order, which is fixed
// by the model wiring, so reductions over parameters are deterministic.
class ParamStore {
 public:
  Param* add(const std::string& name, std::vector<int> shape);
  Param* find(const std::string& name) const;
  const std::vector<std::unique_ptr<Param>>& all() const { return params_; }
  void zero_grads();
  std::int64_t total_size() const;

 private:
  std::vector<std::unique_ptr<Param>> params_;
};

// He-normal fill with a stream derived from (seed, param name); values do not
// depend on the order parameters were registered in.
void init_he_normal(Param& p, int fan_in, std::uint64_t seed);
void init_constant(Param& p, double value);

// ---------------------------------------------------------------------------
// layers (caffe-style explicit forward/backward with caches)

struct ConvSpec {
  int in_ch = 0;
  int out_ch = 0;
  int ksize = 1;
  int stride = 1;
  int pad = 0;
};

struct ConvCache {
  Tensor col;  // (out_h*out_w, k*k*in_ch)
  int in_h = 0, in_w = 0;
  int out_h = 0, out_w = 0;
};

// x: (H, W, in_ch), w: (k*k*in_ch, out_ch) with rows ordered (ky, kx, ic),
// b: (out_ch). Returns (out_h, out_w, out_ch).
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                      const ConvSpec& spec, ConvCache* cache);

// dy: (out_h, out_w, out_ch). Accumulates into dw/db when non-null and
// returns dx of the forward input shape.
Tensor conv2d_backward(const Tensor& dy, const Tensor& w, const ConvSpec& spec,
                       const ConvCache& cache, Tensor* dw, Tensor* db);

Tensor relu_forward(const Tensor& x);
// Uses the forward output as the mask (y > 0).
Tensor relu_backward(const Tensor& dy, const Tensor& y);

// x: (n, d_in), w: (d_in, d_out), b: (d_out) or empty for no bias.
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear_backward(const Tensor& dy, const Tensor& x, const Tensor& w,
                       Tensor* dw, Tensor* db);

// Row-wise softmax with the usual max shift; x: (n, d).
Tensor softmax_rows(const Tensor& x);
Tensor softmax_rows_backward(const Tensor& dy, const Tensor& y);

// Row-wise y_i = x_i / max(||x_i||, eps).
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);
Tensor l2_normalize_rows_backward(const Tensor& dy, const Tensor& x, double eps = 1e-12);

// ---------------------------------------------------------------------------
// two-layer projection head: fc -> relu -> fc, then l2-normalize

struct ProjectionMlp {
  Param* w1 = nullptr;
  Param* b1 = nullptr;
  Param* w2 = nullptr;
  Param* b2 = nullptr;
};

struct ProjectionCache {
  Tensor x;       // input rows
  Tensor hidden;  // relu output
  Tensor pre_norm;
};

Tensor projection_forward(const ProjectionMlp& mlp, const Tensor& x, ProjectionCache* cache);
// Returns dx; accumulates parameter grads.
Tensor projection_backward(const ProjectionMlp& mlp, const Tensor& dy, const ProjectionCache& cache);

// ---------------------------------------------------------------------------
// optimizer

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  double clip_norm = 35.0;  // global grad-norm clip; <= 0 disables
};

class AdamW {
 public:
  AdamW() = default;
  AdamW(AdamWConfig cfg, const ParamStore& store);

  // Applies one update from the accumulated grads. Returns the pre-clip
  // global grad norm.
  double step(ParamStore& store);

  long step_count() const { return step_count_; }
  const AdamWConfig& config() const { return cfg_; }

  // checkpoint plumbing
  std::vector<Tensor>& moment1() { return m_; }
  std::vector<Tensor>& moment2() { return v_; }
  void set_step_count(long n) { step_count_ = n; }

 private:
  AdamWConfig cfg_;
  long step_count_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace bevcon
