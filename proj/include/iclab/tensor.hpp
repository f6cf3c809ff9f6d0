#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "iclab/errors.hpp"

namespace iclab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense n-dimensional real array, row-major. The universal value type for
/// activations, weights and gradients. Values are immutable from the point
/// of view of other operations: every op returns a fresh tensor, so shared
/// reads are thread-safe.
template <typename Scalar>
class Tensor {
  static_assert(std::is_floating_point_v<Scalar>, "Tensor requires a floating-point scalar");

public:
  using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  // Aligned storage keeps SIMD peel boundaries identical across allocations,
  // which keeps every floating-point result bit-stable from run to run.
  using Storage = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(check_dims(shape_), fill) {}

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)) {
    if (data.size() != check_dims(shape_))
      throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape_));
    data_.assign(data.begin(), data.end());
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }
  static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }

  std::size_t rank() const { return shape_.size(); }
  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  /// Row-major multi-index access: t.at(n, c, h, w).
  template <typename... Ix>
  Scalar& at(Ix... idx) {
    return data_[flat_index(idx...)];
  }
  template <typename... Ix>
  Scalar at(Ix... idx) const {
    return data_[flat_index(idx...)];
  }

  /// Same data viewed under a new shape (element count must match).
  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != data_.size())
      throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " +
                       shape_str(new_shape));
    Tensor out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
  }

  /// Eigen map of the flat data as a rows x cols row-major matrix.
  Eigen::Map<MatrixRM> as_matrix(std::size_t rows, std::size_t cols) {
    if (rows * cols != data_.size())
      throw ShapeError("as_matrix: " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " view does not cover " + shape_str(shape_));
    return Eigen::Map<MatrixRM>(data_.data(), static_cast<Eigen::Index>(rows),
                                static_cast<Eigen::Index>(cols));
  }
  Eigen::Map<const MatrixRM> as_matrix(std::size_t rows, std::size_t cols) const {
    if (rows * cols != data_.size())
      throw ShapeError("as_matrix: " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " view does not cover " + shape_str(shape_));
    return Eigen::Map<const MatrixRM>(data_.data(), static_cast<Eigen::Index>(rows),
                                      static_cast<Eigen::Index>(cols));
  }

  Eigen::Map<ArrayX> as_array() {
    return Eigen::Map<ArrayX>(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }
  Eigen::Map<const ArrayX> as_array() const {
    return Eigen::Map<const ArrayX>(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Lossy scalar-type conversion (verification paths promote to double).
  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return Tensor<Other>(shape_, std::move(out));
  }

private:
  static std::size_t check_dims(const Shape& shape) {
    if (shape.empty()) throw ShapeError("Tensor: empty shape");
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("Tensor: zero dimension in shape " + shape_str(shape));
    return shape_numel(shape);
  }

  template <typename... Ix>
  std::size_t flat_index(Ix... idx) const {
    const std::size_t ix[] = {static_cast<std::size_t>(idx)...};
    constexpr std::size_t n = sizeof...(Ix);
    if (n != shape_.size())
      throw ShapeError("at: " + std::to_string(n) + " indices into rank-" +
                       std::to_string(shape_.size()) + " tensor");
    std::size_t flat = 0;
    for (std::size_t a = 0; a < n; ++a) {
      if (ix[a] >= shape_[a])
        throw ShapeError("at: index " + std::to_string(ix[a]) + " out of range for axis " +
                         std::to_string(a) + " of " + shape_str(shape_));
      flat = flat * shape_[a] + ix[a];
    }
    return flat;
  }

  Shape shape_;
  Storage data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace iclab
