// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevcon {

// Dense row-major double tensor. Spatial maps are stored HWC.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(count(shape)), 0.0);
  }

  static std::int64_t count(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  double& operator[](std::int64_t i) { return v[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return v[static_cast<size_t>(i)]; }

  // 3D accessors (H, W, C)
  double& at3(int y, int x, int c) {
    return v[(static_cast<size_t>(y) * shape[1] + x) * shape[2] + c];
  }
  double at3(int y, int x, int c) const {
    return v[(static_cast<size_t>(y) * shape[1] + x) * shape[2] + c];
  }
  // 2D accessors (R, C)
  double& at2(int r, int c) { return v[static_cast<size_t>(r) * shape[1] + c]; }
  double at2(int r, int c) const { return v[static_cast<size_t>(r) * shape[1] + c]; }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }
  void zero() { fill(0.0); }

  void add_(const Tensor& o) {
    if (!same_shape(o)) throw std::runtime_error("tensor shape mismatch in add_");
    for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
  }
  void scale_(double a) {
    for (double& x : v) x *= a;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + ")";
  }
};

}  // namespace bevcon
