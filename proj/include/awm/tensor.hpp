#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace awm {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Raised when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for numerically invalid states (non-finite loss, undefined statistics).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline Index element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major N-dimensional array. Feature maps use B x C x H x W.
template <typename Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(element_count(shape_)), fill);
  }

  BasicTensor(Shape shape, const std::vector<Scalar>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    validate_shape();
    if (static_cast<Index>(data_.size()) != element_count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
    }
  }

  static BasicTensor zeros_like(const BasicTensor& other) { return BasicTensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const noexcept { return static_cast<Index>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }
  std::span<Scalar> values() noexcept { return data_; }
  std::span<const Scalar> values() const noexcept { return data_; }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const Scalar& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar& operator()(Index i, Index j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  const Scalar& operator()(Index i, Index j) const {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  Scalar& operator()(Index b, Index c, Index h, Index w) { return data_[offset(b, c, h, w)]; }
  const Scalar& operator()(Index b, Index c, Index h, Index w) const { return data_[offset(b, c, h, w)]; }

  /// Flat view as an Eigen column vector.
  Eigen::Map<Vector> flat() { return Eigen::Map<Vector>(data_.data(), size()); }
  Eigen::Map<const Vector> flat() const { return Eigen::Map<const Vector>(data_.data(), size()); }

  /// Row-major matrix view with the first axis as rows.
  Eigen::Map<RowMatrix> matrix() { return Eigen::Map<RowMatrix>(data_.data(), shape_.at(0), size() / shape_.at(0)); }
  Eigen::Map<const RowMatrix> matrix() const {
    return Eigen::Map<const RowMatrix>(data_.data(), shape_.at(0), size() / shape_.at(0));
  }

  BasicTensor reshaped(Shape shape) const {
    if (element_count(shape) != size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    BasicTensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  void fill(Scalar value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(static_cast<double>(v)); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(Index b, Index c, Index h, Index w) const {
    return static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w);
  }

  void validate_shape() const {
    for (Index d : shape_) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape_));
    }
  }

  Shape shape_;
  // Vectorized Eigen reductions peel according to the runtime address; a fixed alignment keeps
  // their summation order, and therefore every result, independent of where the heap puts data.
  std::vector<Scalar, Eigen::aligned_allocator<Scalar>> data_;
};

using Tensor = BasicTensor<double>;

inline void require_rank(const auto& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                     to_string(t.shape()));
  }
}

inline void require_same_shape(const auto& a, const auto& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

}  // namespace awm
