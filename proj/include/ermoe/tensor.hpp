// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ermoe/errors.hpp"

namespace ermoe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles. Rank 0 is a scalar (one element).
///
/// Plain value type: copyable, no autodiff state. Differentiability lives in
/// the tape (see tape.hpp), which stores Tensors at its nodes.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor identity(std::size_t d);

  std::size_t rank() const { return shape_.size(); }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool is_scalar() const { return shape_.empty(); }

  double item() const;

  double at(std::size_t i) const { return data_[i]; }
  double& at(std::size_t i) { return data_[i]; }
  double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  /// Throws Error if any entry is NaN/Inf. Call on tensors built from
  /// external input (files, configs); internal kernels skip the check.
  void require_finite(const std::string& what) const;

  void fill(double v);

private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace ermoe
