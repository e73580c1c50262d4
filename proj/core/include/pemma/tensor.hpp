// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "pemma/errors.hpp"
#include "pemma/rng.hpp"

namespace pemma {

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor. Gradients live next to the values; the autodiff
// tape accumulates into `grad` for leaves that ask for it.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;

  Tensor() = default;

  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    validate_shape();
    data.assign(static_cast<size_t>(numel()), fill);
  }

  Tensor(std::vector<int> s, std::vector<T> values)
      : shape(std::move(s)), data(std::move(values)) {
    validate_shape();
    if (static_cast<long long>(data.size()) != numel())
      throw ConfigError("tensor: data size does not match shape " + shape_to_string(shape));
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, T v) { return Tensor(std::move(s), v); }

  static Tensor randn(std::vector<int> s, Rng& rng, T sd = T(1), T mean = T(0)) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.gaussian()) * sd + mean;
    return t;
  }

  long long numel() const {
    long long n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  int ndim() const { return static_cast<int>(shape.size()); }

  // 2-D helpers; a 1-D tensor is treated as a single row.
  int rows() const {
    if (ndim() == 1) return 1;
    if (ndim() == 2) return shape[0];
    throw ConfigError("tensor: rows() on rank-" + std::to_string(ndim()) + " tensor");
  }
  int cols() const {
    if (ndim() == 1) return shape[0];
    if (ndim() == 2) return shape[1];
    throw ConfigError("tensor: cols() on rank-" + std::to_string(ndim()) + " tensor");
  }

  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  T at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() { grad.assign(data.size(), T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void validate_shape() const {
    if (shape.empty()) throw ConfigError("tensor: empty shape");
    for (int d : shape)
      if (d <= 0) throw ConfigError("tensor: non-positive extent in " + shape_to_string(shape));
  }
};

// FNV-1a over the raw value bytes; used for freeze-invariance checks and
// checkpoint comparisons.
template <typename T>
uint64_t hash_bytes(const Tensor<T>& t, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data.data());
  size_t n = t.data.size() * sizeof(T);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace pemma
