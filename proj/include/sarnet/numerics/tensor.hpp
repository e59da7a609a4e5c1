#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sarnet/errors.hpp"

namespace sarnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array of doubles. Everything the model computes on is a Tensor;
/// the differentiable ops work on rank-2 tensors (a scalar is 1x1).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    require(shape_size(shape_) == values_.size(),
            "tensor shape " + shape_string(shape_) + " does not match " + std::to_string(values_.size()) +
                " values");
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  /// 1 x n row vector.
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  /// n x 1 column vector.
  static Tensor column(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n, 1}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::size_t rows() const {
    require(rank() == 2, "rows() on rank-" + std::to_string(rank()) + " tensor");
    return shape_[0];
  }
  std::size_t cols() const {
    require(rank() == 2, "cols() on rank-" + std::to_string(rank()) + " tensor");
    return shape_[1];
  }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  double item() const {
    require(values_.size() == 1, "item() on tensor with " + std::to_string(values_.size()) + " values");
    return values_[0];
  }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }
  std::span<double> row_span(std::size_t r) { return std::span<double>(values_).subspan(r * cols(), cols()); }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor& operator+=(const Tensor& other) {
    require(shape_ == other.shape_, "tensor += shape mismatch " + shape_string(shape_) + " vs " +
                                        shape_string(other.shape_));
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<double> values_;
};

}  // namespace sarnet
