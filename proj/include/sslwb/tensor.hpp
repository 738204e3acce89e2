#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "sslwb/common.hpp"

namespace sslwb {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Dense row-major n-d array. Images are [H,W,3], batches [B,H,W,3],
/// token stacks [B,N,D]. Heavy algebra goes through Eigen maps on the
/// flat storage.
template <class T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T(0))
      : shape(std::move(s)), data(count(shape), fill) {}

  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t(1), std::multiplies<>());
  }

  std::size_t numel() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at(std::size_t i, std::size_t j) {
    assert(ndim() == 2);
    return data[i * shape[1] + j];
  }
  const T& at(std::size_t i, std::size_t j) const {
    assert(ndim() == 2);
    return data[i * shape[1] + j];
  }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    assert(ndim() == 3);
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    assert(ndim() == 3);
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  T& at(std::size_t b, std::size_t i, std::size_t j, std::size_t k) {
    assert(ndim() == 4);
    return data[((b * shape[1] + i) * shape[2] + j) * shape[3] + k];
  }
  const T& at(std::size_t b, std::size_t i, std::size_t j, std::size_t k) const {
    assert(ndim() == 4);
    return data[((b * shape[1] + i) * shape[2] + j) * shape[3] + k];
  }

  void set_zero() { std::fill(data.begin(), data.end(), T(0)); }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  /// View the flat storage as a rows x cols row-major matrix.
  MatMap<T> mat(std::size_t rows, std::size_t cols) {
    assert(rows * cols == numel());
    return MatMap<T>(data.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
  }
  ConstMatMap<T> mat(std::size_t rows, std::size_t cols) const {
    assert(rows * cols == numel());
    return ConstMatMap<T>(data.data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(cols));
  }

  /// 2-d view using the trailing dimension as columns.
  MatMap<T> mat2d() { return mat(numel() / shape.back(), shape.back()); }
  ConstMatMap<T> mat2d() const { return mat(numel() / shape.back(), shape.back()); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (std::size_t i = 0; i < numel(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool is_finite() const { return all_finite(data.data(), data.size()); }
};

}  // namespace sslwb
