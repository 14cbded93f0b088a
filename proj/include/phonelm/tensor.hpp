#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "phonelm/errors.hpp"
#include "phonelm/rng.hpp"

namespace phonelm {

// Dense row-major tensor. 32-bit scalars for training, 64-bit for
// gradient checking; value semantics throughout.
template <typename T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::vector<size_t> shape)
      : shape_(std::move(shape)), data_(numel(shape_), T{}) {}
  TensorT(std::vector<size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) {
      throw ConfigError("tensor data length does not match shape");
    }
  }

  static TensorT full(std::vector<size_t> shape, T value) {
    TensorT t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
  }

  static TensorT scalar(T value) { return TensorT({1}, {value}); }

  static TensorT randn(std::vector<size_t> shape, Rng& rng, T stddev) {
    TensorT t(std::move(shape));
    for (auto& x : t.data_) {
      x = static_cast<T>(rng.next_normal(0.0, static_cast<double>(stddev)));
    }
    return t;
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t dim(size_t i) const { return shape_[i]; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  // Rank-2 accessors (row-major).
  T& at(size_t r, size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(size_t r, size_t c) const { return data_[r * shape_[1] + c]; }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  void fill(T v) {
    for (auto& x : data_) x = v;
  }

  void add_scaled(const TensorT& o, T scale) {
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * o.data_[i];
  }

  bool all_finite() const {
    for (const auto& x : data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> d(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
    return TensorT<U>(shape_, std::move(d));
  }

  static size_t numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<size_t> shape_;
  std::vector<T> data_;
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace kern {

// c[n,m] += a[n,k] * b[k,m]
template <typename T>
void mm_nn_acc(const T* a, const T* b, T* c, size_t n, size_t k, size_t m) {
  for (size_t i = 0; i < n; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * m;
    for (size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * m;
      for (size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[n,m] += a[n,k] * b[m,k]^T
template <typename T>
void mm_nt_acc(const T* a, const T* b, T* c, size_t n, size_t k, size_t m) {
  for (size_t i = 0; i < n; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * m;
    for (size_t j = 0; j < m; ++j) {
      const T* brow = b + j * k;
      T acc{};
      for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[k,m] += a[n,k]^T * b[n,m]
template <typename T>
void mm_tn_acc(const T* a, const T* b, T* c, size_t n, size_t k, size_t m) {
  for (size_t p = 0; p < n; ++p) {
    const T* arow = a + p * k;
    const T* brow = b + p * m;
    for (size_t i = 0; i < k; ++i) {
      const T av = arow[i];
      T* crow = c + i * m;
      for (size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kern

}  // namespace phonelm
