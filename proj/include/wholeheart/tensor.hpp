#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wholeheart/common.hpp"
#include "wholeheart/rng.hpp"

namespace wholeheart {

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor. The graph engine works on the float instantiation;
// the double one exists so finite-difference gradient checks are not drowned
// by single-precision forward noise.
template <typename T>
struct TensorT {
  std::vector<int64_t> shape;
  std::vector<T> data;

  TensorT() = default;

  TensorT(std::vector<int64_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    validate_shape();
    if (shape_numel(shape) != int64_t(data.size())) {
      throw ConfigError("tensor data size " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
  }

  static TensorT zeros(std::vector<int64_t> s) {
    TensorT t;
    t.shape = std::move(s);
    t.validate_shape();
    t.data.assign(size_t(shape_numel(t.shape)), T(0));
    return t;
  }

  static TensorT full(std::vector<int64_t> s, T v) {
    TensorT t = zeros(std::move(s));
    for (T& x : t.data) x = v;
    return t;
  }

  static TensorT scalar(T v) { return TensorT({1, 1}, {v}); }

  static TensorT randn(std::vector<int64_t> s, Rng& rng, double stddev) {
    TensorT t = zeros(std::move(s));
    for (T& x : t.data) x = T(rng.normal() * stddev);
    return t;
  }

  static TensorT trunc_normal(std::vector<int64_t> s, Rng& rng, double stddev) {
    TensorT t = zeros(std::move(s));
    for (T& x : t.data) x = T(rng.truncated_normal() * stddev);
    return t;
  }

  int64_t numel() const { return int64_t(data.size()); }
  int ndim() const { return int(shape.size()); }
  bool is_matrix() const { return shape.size() == 2; }
  bool is_scalar() const { return data.size() == 1; }

  int64_t rows() const { return shape.at(0); }
  int64_t cols() const { return shape.at(1); }

  T& at(int64_t r, int64_t c) { return data[size_t(r * cols() + c)]; }
  const T& at(int64_t r, int64_t c) const { return data[size_t(r * cols() + c)]; }

  T* row_ptr(int64_t r) { return data.data() + r * cols(); }
  const T* row_ptr(int64_t r) const { return data.data() + r * cols(); }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T x : data) {
      if (!std::isfinite(double(x))) return false;
    }
    return true;
  }

  void fill(T v) {
    for (T& x : data) x = v;
  }

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }

 private:
  void validate_shape() const {
    for (int64_t e : shape) {
      if (e <= 0) throw ConfigError("tensor extent must be positive, got " + shape_str(shape));
    }
  }
};

using Tensor = TensorT<float>;

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw ConfigError("max_abs_diff shape mismatch");
  double m = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
  }
  return m;
}

}  // namespace wholeheart
