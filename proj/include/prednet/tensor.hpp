// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "prednet/errors.hpp"

namespace prednet {

using shape_t = std::vector<std::size_t>;

inline std::size_t shape_size(const shape_t& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const shape_t& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/**
 * Dense row-major n-dimensional array.
 *
 * A tensor is a plain value: copying copies the data. Gradients live on the
 * tape (see tape.hpp), not on the tensor, so a tensor can be shared by several
 * independent tapes.
 */
template <typename T>
class basic_tensor {
 public:
  using value_type = T;

  basic_tensor() = default;

  explicit basic_tensor(shape_t shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    validate_shape();
  }

  basic_tensor(shape_t shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_size(shape_)) {
      throw dimension_error("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + to_string(shape_));
    }
  }

  static basic_tensor zeros(shape_t shape) { return basic_tensor(std::move(shape), T{0}); }
  static basic_tensor ones(shape_t shape) { return basic_tensor(std::move(shape), T{1}); }
  static basic_tensor full(shape_t shape, T v) { return basic_tensor(std::move(shape), v); }

  const shape_t& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // NCHW accessor for rank-4 tensors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  basic_tensor reshaped(shape_t shape) const& {
    return basic_tensor(std::move(shape), data_);
  }
  basic_tensor reshaped(shape_t shape) && {
    return basic_tensor(std::move(shape), std::move(data_));
  }

  template <typename U>
  basic_tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return basic_tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const basic_tensor& a, const basic_tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (auto d : shape_) {
      if (d == 0) throw dimension_error("tensor shape entries must be positive: " + to_string(shape_));
    }
  }

  shape_t shape_;
  std::vector<T> data_;
};

using tensor = basic_tensor<float>;

template <typename T>
void require_same_shape(const basic_tensor<T>& a, const basic_tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw dimension_error(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                          to_string(b.shape()));
  }
}

template <typename T>
void require_rank(const basic_tensor<T>& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw dimension_error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                          to_string(a.shape()));
  }
}

}  // namespace prednet
