#pragma once

#include <Eigen/Core>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "eac/common.hpp"

namespace eac {

/// Dense row-major tensor, rank 1-4. Deliberately minimal: the toolkit only
/// ever needs contiguous storage plus a few indexed views for the math.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), T{});
  }

  Tensor(std::vector<std::size_t> shape, T value) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), value);
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, T value) {
    return Tensor(std::move(shape), value);
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size(std::size_t axis) const {
    assert(axis < shape_.size());
    return shape_[axis];
  }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& flat(std::size_t i) {
    assert(i < data_.size());
    return data_[i];
  }
  T flat(std::size_t i) const {
    assert(i < data_.size());
    return data_[i];
  }

  T& operator()(std::size_t i) {
    assert(ndim() == 1);
    return data_[i];
  }
  T operator()(std::size_t i) const {
    assert(ndim() == 1);
    return data_[i];
  }
  T& operator()(std::size_t i, std::size_t j) {
    assert(ndim() == 2);
    return data_[i * shape_[1] + j];
  }
  T operator()(std::size_t i, std::size_t j) const {
    assert(ndim() == 2);
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    assert(ndim() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T operator()(std::size_t i, std::size_t j, std::size_t k) const {
    assert(ndim() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    assert(ndim() == 4);
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  T operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    assert(ndim() == 4);
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  /// Reinterprets the shape; element count must be preserved.
  void reshape(std::vector<std::size_t> shape) {
    if (numel_of(shape) != data_.size())
      throw ContractError(msg("reshape changes element count: ", data_.size(),
                              " -> ", numel_of(shape)));
    shape_ = std::move(shape);
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = shape.empty() ? 0 : 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

namespace linalg {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatrixRM<T>>;

/// C (m x n) = alpha * op(A) * op(B) + beta * C, all row-major contiguous.
/// op(A) is m x k. Backed by Eigen's product kernels.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          T alpha, const T* a, const T* b, T beta, T* c) {
  using E = Eigen::Index;
  MapRM<T> cm(c, static_cast<E>(m), static_cast<E>(n));
  const auto run = [&](const auto& lhs, const auto& rhs) {
    if (beta == T{0}) {
      if (alpha == T{1})
        cm.noalias() = lhs * rhs;
      else
        cm.noalias() = alpha * (lhs * rhs);
    } else {
      if (beta != T{1}) cm *= beta;
      if (alpha == T{1})
        cm.noalias() += lhs * rhs;
      else
        cm.noalias() += alpha * (lhs * rhs);
    }
  };
  ConstMapRM<T> am(a, static_cast<E>(trans_a ? k : m), static_cast<E>(trans_a ? m : k));
  ConstMapRM<T> bm(b, static_cast<E>(trans_b ? n : k), static_cast<E>(trans_b ? k : n));
  if (!trans_a && !trans_b)
    run(am, bm);
  else if (trans_a && !trans_b)
    run(am.transpose(), bm);
  else if (!trans_a && trans_b)
    run(am, bm.transpose());
  else
    run(am.transpose(), bm.transpose());
}

/// C (m x n) = alpha * A * B + beta * C with explicit leading dimensions, for
/// column blocks of larger row-major buffers. No transposes.
template <typename T>
void gemm_strided(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
                  std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
                  std::size_t ldc) {
  using E = Eigen::Index;
  using Stride = Eigen::OuterStride<>;
  Eigen::Map<MatrixRM<T>, 0, Stride> cm(c, static_cast<E>(m), static_cast<E>(n),
                                        Stride(static_cast<E>(ldc)));
  Eigen::Map<const MatrixRM<T>, 0, Stride> am(a, static_cast<E>(m), static_cast<E>(k),
                                              Stride(static_cast<E>(lda)));
  Eigen::Map<const MatrixRM<T>, 0, Stride> bm(b, static_cast<E>(k), static_cast<E>(n),
                                              Stride(static_cast<E>(ldb)));
  if (beta == T{0}) {
    if (alpha == T{1})
      cm.noalias() = am * bm;
    else
      cm.noalias() = alpha * (am * bm);
  } else {
    if (beta != T{1}) cm *= beta;
    if (alpha == T{1})
      cm.noalias() += am * bm;
    else
      cm.noalias() += alpha * (am * bm);
  }
}

} // namespace linalg

/// Reverses the last axis. For images and attention maps the last axis is
/// width, so this is the horizontal mirror used throughout the toolkit.
template <typename T>
Tensor<T> flip_last_axis(const Tensor<T>& t) {
  if (t.ndim() == 0 || t.numel() == 0) return t;
  Tensor<T> out(t.shape());
  const std::size_t w = t.shape().back();
  const std::size_t rows = t.numel() / w;
  const T* src = t.data();
  T* dst = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = src + r * w;
    T* d = dst + r * w;
    for (std::size_t i = 0; i < w; ++i) d[i] = s[w - 1 - i];
  }
  return out;
}

} // namespace eac
