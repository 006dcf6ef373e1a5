#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smi/error.hpp"

namespace smi {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Rank-0 tensors are 1x1; rank-1 tensors are a single row; higher ranks fold
// every leading dimension into rows so the last dimension is always columns.
inline std::pair<Index, Index> matrix_extent(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  const Index cols = shape.back();
  return {cols == 0 ? 0 : shape_numel(shape) / cols, cols};
}

/// Dense row-major tensor. Storage is an Eigen matrix whose column count is the
/// last dimension, so every op that works along the last axis maps directly
/// onto Eigen row operations.
template <typename Scalar>
class BasicTensor {
 public:
  using Matrix = RowMatrix<Scalar>;

  BasicTensor() : BasicTensor(Shape{}) {}

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    const auto [r, c] = matrix_extent(shape_);
    data_ = Matrix::Zero(r, c);
  }

  BasicTensor(Shape shape, Matrix data) : shape_(std::move(shape)), data_(std::move(data)) {
    const auto [r, c] = matrix_extent(shape_);
    if (data_.rows() != r || data_.cols() != c) {
      throw Error(ErrorCode::ShapeMismatch, "data does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor from_matrix(Matrix m) {
    Shape s{m.rows(), m.cols()};
    return BasicTensor(std::move(s), std::move(m));
  }

  static BasicTensor scalar(Scalar v) {
    BasicTensor t;
    t.data_(0, 0) = v;
    return t;
  }

  static BasicTensor from_values(Shape shape, std::span<const Scalar> values) {
    BasicTensor t(std::move(shape));
    if (static_cast<Index>(values.size()) != t.numel()) {
      throw Error(ErrorCode::ShapeMismatch, "value count does not match shape");
    }
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index numel() const noexcept { return data_.size(); }

  Matrix& mat() noexcept { return data_; }
  const Matrix& mat() const noexcept { return data_; }

  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }
  std::span<Scalar> values() noexcept { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const noexcept {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Scalar& operator[](Index flat) { return data_.data()[flat]; }
  Scalar operator[](Index flat) const { return data_.data()[flat]; }

  Scalar item() const {
    if (numel() != 1) throw Error(ErrorCode::ShapeMismatch, "item() on non-scalar tensor");
    return data_(0, 0);
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    const auto [r, c] = matrix_extent(shape);
    Matrix m = Eigen::Map<const Matrix>(data_.data(), r, c);
    return BasicTensor(std::move(shape), std::move(m));
  }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(shape_, data_.template cast<Other>());
  }

  // Optional gradient slot, same shape as the tensor when present.
  std::optional<Matrix> grad;
  // Handle of the graph node this tensor was read from, if any.
  std::optional<std::int64_t> node_id;

 private:
  Shape shape_;
  Matrix data_;
};

using Tensor = BasicTensor<double>;

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                    [](double x, double y) {
                      return std::memcmp(&x, &y, sizeof(double)) == 0;
                    });
}

}  // namespace smi
