#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "coa/errors.hpp"

namespace coa {

using Index = Eigen::Index;

/// Logical (batch, channel, height, width) extent of a rank-4 tensor.
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index numel() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Rank-4 dense tensor.
///
/// Indexing is (n, c, h, w) but storage is channel-major: all samples of
/// channel 0, then channel 1, and so on. With that layout an im2col matrix
/// holding every sample of the batch times a weight matrix produces the
/// output directly, so a convolution over the whole batch is one GEMM.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using PlaneMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstPlaneMap =
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Array::Zero(shape.numel())) {}
  Tensor(Index n, Index c, Index h, Index w) : Tensor(Shape{n, c, h, w}) {}

  static Tensor constant(const Shape& shape, Scalar value) {
    Tensor t(shape);
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index numel() const { return shape_.numel(); }
  bool empty() const { return shape_.numel() == 0; }

  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  /// Contiguous block of every sample for one channel (n*h*w values).
  Scalar* channel(Index c) { return data_.data() + c * shape_.n * shape_.plane(); }
  const Scalar* channel(Index c) const { return data_.data() + c * shape_.n * shape_.plane(); }

  PlaneMap plane(Index n, Index c) { return PlaneMap(data_.data() + offset(n, c, 0, 0), shape_.h, shape_.w); }
  ConstPlaneMap plane(Index n, Index c) const {
    return ConstPlaneMap(data_.data() + offset(n, c, 0, 0), shape_.h, shape_.w);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.array() = data_.template cast<Other>();
    return out;
  }

  /// Copies sample `n` into a batch-of-one tensor.
  Tensor sample(Index n) const {
    Tensor out(Shape{1, shape_.c, shape_.h, shape_.w});
    for (Index c = 0; c < shape_.c; ++c) out.plane(0, c) = plane(n, c);
    return out;
  }

  /// Writes a batch-of-one tensor into slot `n`.
  void set_sample(Index n, const Tensor& src) {
    if (src.shape_.n != 1 || src.shape_.c != shape_.c || src.shape_.h != shape_.h || src.shape_.w != shape_.w) {
      throw DimensionError("set_sample: " + src.shape_.str() + " does not fit into " + shape_.str());
    }
    for (Index c = 0; c < shape_.c; ++c) plane(n, c) = src.plane(0, c);
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  Index offset(Index n, Index c, Index h, Index w) const {
    return ((c * shape_.n + n) * shape_.h + h) * shape_.w + w;
  }

  Shape shape_;
  Array data_;
};

using Image = Tensor<float>;

template <typename Scalar>
inline void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

/// Stacks batch-of-one tensors along the batch axis.
template <typename Scalar>
Tensor<Scalar> stack(const std::vector<Tensor<Scalar>>& items) {
  if (items.empty()) throw InputError("stack: no tensors");
  const Shape s = items.front().shape();
  Tensor<Scalar> out(Shape{static_cast<Index>(items.size()), s.c, s.h, s.w});
  for (std::size_t i = 0; i < items.size(); ++i) out.set_sample(static_cast<Index>(i), items[i]);
  return out;
}

}  // namespace coa
