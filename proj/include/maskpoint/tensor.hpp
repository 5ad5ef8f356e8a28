#pragma once

#include <Eigen/Dense>

#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "maskpoint/common.hpp"

namespace maskpoint {

/// Dense N-dimensional array with row-major semantics, backed by a flat
/// Eigen array. Rank is dynamic; shapes used in practice are rank 1..4.
template <typename Scalar>
class TensorT {
 public:
  using Index = Eigen::Index;
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap =
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  TensorT() = default;

  explicit TensorT(std::vector<Index> shape)
      : shape_(std::move(shape)), data_(Storage::Zero(count(shape_))) {}

  TensorT(std::initializer_list<Index> shape) : TensorT(std::vector<Index>(shape)) {}

  static TensorT zeros(std::vector<Index> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<Index> shape, Scalar v) {
    TensorT t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static TensorT from_values(std::vector<Index> shape, std::vector<Scalar> values) {
    TensorT t;
    t.shape_ = std::move(shape);
    if (static_cast<Index>(values.size()) != count(t.shape_))
      throw ShapeError("from_values: element count does not match shape");
    t.data_ = Eigen::Map<const Storage>(values.data(), values.size());
    return t;
  }

  Index rank() const { return static_cast<Index>(shape_.size()); }
  const std::vector<Index>& shape() const { return shape_; }
  Index extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  Scalar& operator()(Index i) { return data_[i]; }
  Scalar operator()(Index i) const { return data_[i]; }
  Scalar& operator()(Index i, Index j) { return data_[i * shape_[1] + j]; }
  Scalar operator()(Index i, Index j) const { return data_[i * shape_[1] + j]; }
  Scalar& operator()(Index i, Index j, Index k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  Scalar operator()(Index i, Index j, Index k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  Scalar& operator()(Index i, Index j, Index k, Index l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  Scalar operator()(Index i, Index j, Index k, Index l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  /// Same storage viewed under a different shape (element count preserved).
  TensorT reshaped(std::vector<Index> new_shape) const {
    if (count(new_shape) != size()) throw ShapeError("reshape: element count mismatch");
    TensorT t = *this;
    t.shape_ = std::move(new_shape);
    return t;
  }

  MatrixMap matrix(Index rows, Index cols) {
    if (rows * cols != size()) throw ShapeError("matrix view: element count mismatch");
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    if (rows * cols != size()) throw ShapeError("matrix view: element count mismatch");
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  bool all_finite() const { return data_.isFinite().all(); }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ']';
    return os.str();
  }

  static Index count(const std::vector<Index>& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<Index>());
  }

 private:
  std::vector<Index> shape_;
  Storage data_;
};

using Tensor = TensorT<double>;

}  // namespace maskpoint
