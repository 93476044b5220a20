// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "maskgru/errors.hpp"

namespace maskgru {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/**
 * Dense row-major array of doubles with an optional gradient slot.
 *
 * Storage is owned and never aliased: copies are deep. A scalar is a
 * tensor of shape {1}.
 */
class Tensor {
 public:
  Tensor() : Tensor(Shape{1}) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Row-major element access for rank-3 tensors (channel, row, column).
  double at(std::size_t c, std::size_t y, std::size_t x) const;
  double& at(std::size_t c, std::size_t y, std::size_t x);

  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return !grad_.empty(); }
  std::span<const double> grad() const { return grad_; }
  /// Allocates a zeroed gradient buffer on first use.
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad() { grad_.clear(); }

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  /// Exact (bitwise) equality of shape and data.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::vector<double> grad_;
};

void require_shape(const Tensor& t, const Shape& expected, const char* what);

}  // namespace maskgru
