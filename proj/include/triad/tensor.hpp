#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cstring>
#include <cmath>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace triad {

using Index = Eigen::Index;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when tensor extents or parameter widths disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

/// Extents of a rank-1..4 tensor. For rank 4 the axes are (N, C, H, W).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> dims) {
    require_shape(dims.size() >= 1 && dims.size() <= 4, "tensor rank must be in [1, 4]");
    rank_ = static_cast<int>(dims.size());
    std::copy(dims.begin(), dims.end(), dims_.begin());
    for (int i = 0; i < rank_; ++i)
      require_shape(dims_[i] >= 1, "extent of axis " + std::to_string(i) + " must be >= 1");
  }

  int rank() const { return rank_; }
  Index operator[](int axis) const { return dims_[static_cast<std::size_t>(axis)]; }

  Index size() const {
    if (rank_ == 0) return 0;
    Index n = 1;
    for (int i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  /// Row-major stride of an axis.
  Index stride(int axis) const {
    Index s = 1;
    for (int i = rank_ - 1; i > axis; --i) s *= dims_[i];
    return s;
  }

  Shape with(int axis, Index extent) const {
    Shape s = *this;
    require_shape(extent >= 1, "extent must be >= 1");
    s.dims_[static_cast<std::size_t>(axis)] = extent;
    return s;
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    for (int i = 0; i < a.rank_; ++i)
      if (a.dims_[i] != b.dims_[i]) return false;
    return true;
  }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  std::array<Index, 4> dims_{1, 1, 1, 1};
  int rank_ = 0;
};

/// Dense row-major tensor. Storage is an Eigen column vector so whole-tensor
/// arithmetic goes through Eigen expressions via vec().
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Vector::Zero(shape.size())) {}
  Tensor(const Shape& shape, Scalar fill) : shape_(shape), data_(Vector::Constant(shape.size(), fill)) {}
  Tensor(const Shape& shape, std::initializer_list<Scalar> values) : shape_(shape) {
    require_shape(static_cast<Index>(values.size()) == shape.size(),
                  "initializer has " + std::to_string(values.size()) + " values for shape " + shape.str());
    data_.resize(shape.size());
    std::copy(values.begin(), values.end(), data_.data());
  }
  Tensor(const Shape& shape, Vector data) : shape_(shape), data_(std::move(data)) {
    require_shape(data_.size() == shape.size(), "data length does not match shape " + shape.str());
  }

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor constant(const Shape& shape, Scalar v) { return Tensor(shape, v); }
  static Tensor zeros_like(const Tensor& t) { return t.empty() ? Tensor() : Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  int rank() const { return shape_.rank(); }
  Index dim(int axis) const { return shape_[axis]; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  template <typename... Idx>
  Scalar& operator()(Idx... idx) { return data_[offset(idx...)]; }
  template <typename... Idx>
  Scalar operator()(Idx... idx) const { return data_[offset(idx...)]; }

  template <typename... Idx>
  Index offset(Idx... idx) const {
    static_assert(sizeof...(Idx) >= 1 && sizeof...(Idx) <= 4);
    const std::array<Index, sizeof...(Idx)> ix{static_cast<Index>(idx)...};
    eigen_assert(static_cast<int>(sizeof...(Idx)) == shape_.rank());
    Index off = 0;
    for (std::size_t a = 0; a < ix.size(); ++a) off = off * shape_[static_cast<int>(a)] + ix[a];
    return off;
  }

  /// Metadata-only reinterpretation; element order is unchanged.
  Tensor reshaped(const Shape& s) const {
    require_shape(s.size() == size(), "cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  void set_zero() { data_.setZero(); }

  Tensor& operator+=(const Tensor& o) {
    require_shape(o.shape_ == shape_, "add: shape " + o.shape_.str() + " vs " + shape_.str());
    data_ += o.data_;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator*(Scalar s, Tensor a) {
    a.data_ *= s;
    return a;
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  Shape shape_;
  Vector data_;
};

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

/// Bit-exact equality of shape and contents.
template <typename Scalar>
bool identical(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data(), a.data() + a.size(), b.data(), b.data() + b.size(),
                    [](Scalar x, Scalar y) { return std::memcmp(&x, &y, sizeof(Scalar)) == 0; });
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_shape(a.shape() == b.shape(), "max_abs_diff: shape " + a.shape().str() + " vs " + b.shape().str());
  if (a.size() == 0) return Scalar(0);
  return (a.vec() - b.vec()).cwiseAbs().maxCoeff();
}

}  // namespace triad
