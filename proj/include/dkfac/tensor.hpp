// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace dkfac {

/// Dense n-dimensional array of doubles, row-major (last index fastest).
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_))
      throw std::invalid_argument("Tensor: data size does not match shape");
  }

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  /// Size of one slice along the leading axis (one sample for N-first tensors).
  std::size_t stride0() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }
  std::span<double> slice(std::size_t i) { return {data_.data() + i * stride0(), stride0()}; }
  std::span<const double> slice(std::size_t i) const {
    return {data_.data() + i * stride0(), stride0()};
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void clear() {
    shape_.clear();
    data_.clear();
  }
  void reshape(std::vector<std::size_t> shape) {
    if (element_count(shape) != data_.size())
      throw std::invalid_argument("Tensor::reshape: element count changes");
    shape_ = std::move(shape);
  }

  bool operator==(const Tensor&) const = default;

private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

} // namespace dkfac
