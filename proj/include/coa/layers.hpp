#pragma once

#include <Eigen/Core>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "coa/tensor.hpp"

namespace coa {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Named view of one trainable array: its value, its gradient accumulator and
/// the logical shape used in checkpoints.
template <typename Scalar>
struct ParamRef {
  std::string name;
  std::vector<Index> shape;
  Scalar* value = nullptr;
  Scalar* grad = nullptr;
  Index size = 0;

  Eigen::Map<VectorX<Scalar>> values() const { return {value, size}; }
  Eigen::Map<VectorX<Scalar>> grads() const { return {grad, size}; }
};

template <typename Scalar>
using ParamList = std::vector<ParamRef<Scalar>>;

template <typename Scalar>
Index total_size(const ParamList<Scalar>& params) {
  Index n = 0;
  for (const auto& p : params) n += p.size;
  return n;
}

template <typename Scalar>
void zero_grads(const ParamList<Scalar>& params) {
  for (const auto& p : params) p.grads().setZero();
}

/// Order-stable flat copy of all parameter values.
template <typename Scalar>
VectorX<Scalar> flatten(const ParamList<Scalar>& params) {
  VectorX<Scalar> out(total_size(params));
  Index at = 0;
  for (const auto& p : params) {
    out.segment(at, p.size) = p.values();
    at += p.size;
  }
  return out;
}

template <typename Scalar>
VectorX<Scalar> flatten_grads(const ParamList<Scalar>& params) {
  VectorX<Scalar> out(total_size(params));
  Index at = 0;
  for (const auto& p : params) {
    out.segment(at, p.size) = p.grads();
    at += p.size;
  }
  return out;
}

template <typename Scalar>
void unflatten(const ParamList<Scalar>& params, const Eigen::Ref<const VectorX<Scalar>>& flat) {
  if (flat.size() != total_size(params)) throw DimensionError("unflatten: size mismatch");
  Index at = 0;
  for (const auto& p : params) {
    p.values() = flat.segment(at, p.size);
    at += p.size;
  }
}

enum class Activation { silu, leaky_relu, identity };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

template <typename Scalar>
Tensor<Scalar> activate(Activation a, const Tensor<Scalar>& pre) {
  Tensor<Scalar> out(pre.shape());
  const auto& x = pre.array();
  switch (a) {
    case Activation::silu:
      out.array() = x / (Scalar(1) + (-x).exp());
      break;
    case Activation::leaky_relu:
      out.array() = (x > Scalar(0)).select(x, Scalar(0.1) * x);
      break;
    case Activation::identity:
      out.array() = x;
      break;
  }
  return out;
}

/// dL/dpre given dL/dout and the stored pre-activation.
template <typename Scalar>
Tensor<Scalar> activate_backward(Activation a, const Tensor<Scalar>& pre, const Tensor<Scalar>& dout) {
  Tensor<Scalar> din(pre.shape());
  const auto& x = pre.array();
  switch (a) {
    case Activation::silu: {
      const typename Tensor<Scalar>::Array s = Scalar(1) / (Scalar(1) + (-x).exp());
      din.array() = dout.array() * (s * (Scalar(1) + x * (Scalar(1) - s)));
      break;
    }
    case Activation::leaky_relu:
      din.array() = (x > Scalar(0)).select(dout.array(), Scalar(0.1) * dout.array());
      break;
    case Activation::identity:
      din.array() = dout.array();
      break;
  }
  return din;
}

/// Square-kernel 2-D convolution with "same" padding (k/2) and integer stride.
///
/// The weight is held as a (Cin*k*k) x Cout column-major matrix; its memory
/// is therefore identical to a row-major (Cout, Cin, k, k) array.
template <typename Scalar>
class Conv2d {
 public:
  using Matrix = MatrixX<Scalar>;
  using Vector = VectorX<Scalar>;

  Conv2d() = default;
  Conv2d(Index in_channels, Index out_channels, Index kernel, Index stride = 1)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride) {
    weight = Matrix::Zero(in_ * k_ * k_, out_);
    bias = Vector::Zero(out_);
    grad_weight = Matrix::Zero(weight.rows(), weight.cols());
    grad_bias = Vector::Zero(out_);
  }

  Index in_channels() const { return in_; }
  Index out_channels() const { return out_; }
  Index kernel() const { return k_; }
  Index stride() const { return stride_; }
  Index param_count() const { return weight.size() + bias.size(); }

  /// Uniform He initialisation scaled by `gain`; bias zero.
  void init(std::mt19937_64& rng, double gain = 1.0) {
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(in_ * k_ * k_));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Index i = 0; i < weight.size(); ++i) weight.data()[i] = static_cast<Scalar>(dist(rng));
    bias.setZero();
  }

  /// Sets the centre tap to the identity map (requires in == out).
  void set_identity() {
    if (in_ != out_) throw ConfigError("Conv2d::set_identity needs in == out");
    weight.setZero();
    bias.setZero();
    const Index centre = (k_ / 2) * k_ + k_ / 2;
    for (Index c = 0; c < out_; ++c) weight(c * k_ * k_ + centre, c) = Scalar(1);
  }

  Shape output_shape(const Shape& in) const {
    const Index pad = k_ / 2;
    return {in.n, out_, (in.h + 2 * pad - k_) / stride_ + 1, (in.w + 2 * pad - k_) / stride_ + 1};
  }

  /// Multiply-accumulate count for one forward pass.
  Index macs(const Shape& in) const {
    const Shape o = output_shape(in);
    return o.n * o.h * o.w * out_ * in_ * k_ * k_;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    check_input(x);
    const Shape o = output_shape(x.shape());
    Tensor<Scalar> y(o);
    const Index rows = o.n * o.h * o.w;
    Eigen::Map<Matrix> out(y.data(), rows, out_);
    if (pointwise()) {
      Eigen::Map<const Matrix> col(x.data(), rows, in_);
      out.noalias() = col * weight;
    } else {
      const Matrix col = im2col(x, o);
      out.noalias() = col * weight;
    }
    out.rowwise() += bias.transpose();
    return y;
  }

  /// Backpropagates `dy` through the layer. Accumulates into grad_weight and
  /// grad_bias when `param_grads` is set; returns dL/dx when `input_grad` is set.
  Tensor<Scalar> backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy, bool param_grads = true,
                          bool input_grad = true) {
    const Shape o = output_shape(x.shape());
    if (dy.shape() != o) throw DimensionError("Conv2d::backward: gradient shape " + dy.shape().str());
    const Index rows = o.n * o.h * o.w;
    Eigen::Map<const Matrix> dout(dy.data(), rows, out_);
    Tensor<Scalar> dx;
    if (pointwise()) {
      Eigen::Map<const Matrix> col(x.data(), rows, in_);
      if (param_grads) {
        grad_weight.noalias() += col.transpose() * dout;
        grad_bias += dout.colwise().sum().transpose();
      }
      if (input_grad) {
        dx = Tensor<Scalar>(x.shape());
        Eigen::Map<Matrix>(dx.data(), rows, in_).noalias() = dout * weight.transpose();
      }
      return dx;
    }
    if (param_grads) {
      const Matrix col = im2col(x, o);
      grad_weight.noalias() += col.transpose() * dout;
      grad_bias += dout.colwise().sum().transpose();
    }
    if (input_grad) {
      const Matrix dcol = dout * weight.transpose();
      dx = col2im(dcol, x.shape(), o);
    }
    return dx;
  }

  void append_params(ParamList<Scalar>& list, const std::string& prefix) {
    list.push_back({prefix + ".weight", {out_, in_, k_, k_}, weight.data(), grad_weight.data(), weight.size()});
    list.push_back({prefix + ".bias", {out_}, bias.data(), grad_bias.data(), bias.size()});
  }

  Matrix weight;
  Vector bias;
  Matrix grad_weight;
  Vector grad_bias;

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1; }

  void check_input(const Tensor<Scalar>& x) const {
    if (x.shape().c != in_) {
      throw DimensionError("Conv2d: expected " + std::to_string(in_) + " input channels, got " + x.shape().str());
    }
  }

  Matrix im2col(const Tensor<Scalar>& x, const Shape& o) const {
    const Shape s = x.shape();
    const Index pad = k_ / 2;
    const Index rows = o.n * o.h * o.w;
    Matrix col(rows, in_ * k_ * k_);
    for (Index ci = 0; ci < in_; ++ci) {
      const Scalar* src = x.channel(ci);
      for (Index ky = 0; ky < k_; ++ky) {
        for (Index kx = 0; kx < k_; ++kx) {
          Scalar* dst = col.data() + ((ci * k_ + ky) * k_ + kx) * rows;
          for (Index n = 0; n < o.n; ++n) {
            const Scalar* plane = src + n * s.h * s.w;
            for (Index oy = 0; oy < o.h; ++oy) {
              const Index iy = oy * stride_ + ky - pad;
              if (iy < 0 || iy >= s.h) {
                std::fill(dst, dst + o.w, Scalar(0));
                dst += o.w;
                continue;
              }
              const Scalar* row = plane + iy * s.w;
              for (Index ox = 0; ox < o.w; ++ox) {
                const Index ix = ox * stride_ + kx - pad;
                *dst++ = (ix >= 0 && ix < s.w) ? row[ix] : Scalar(0);
              }
            }
          }
        }
      }
    }
    return col;
  }

  Tensor<Scalar> col2im(const Matrix& dcol, const Shape& s, const Shape& o) const {
    const Index pad = k_ / 2;
    const Index rows = o.n * o.h * o.w;
    Tensor<Scalar> dx(s);
    for (Index ci = 0; ci < in_; ++ci) {
      Scalar* dst = dx.channel(ci);
      for (Index ky = 0; ky < k_; ++ky) {
        for (Index kx = 0; kx < k_; ++kx) {
          const Scalar* src = dcol.data() + ((ci * k_ + ky) * k_ + kx) * rows;
          for (Index n = 0; n < o.n; ++n) {
            Scalar* plane = dst + n * s.h * s.w;
            for (Index oy = 0; oy < o.h; ++oy) {
              const Index iy = oy * stride_ + ky - pad;
              if (iy < 0 || iy >= s.h) {
                src += o.w;
                continue;
              }
              Scalar* row = plane + iy * s.w;
              for (Index ox = 0; ox < o.w; ++ox, ++src) {
                const Index ix = ox * stride_ + kx - pad;
                if (ix >= 0 && ix < s.w) row[ix] += *src;
              }
            }
          }
        }
      }
    }
    return dx;
  }

  Index in_ = 0;
  Index out_ = 0;
  Index k_ = 1;
  Index stride_ = 1;
};

/// Nearest-neighbour 2x upsampling.
template <typename Scalar>
Tensor<Scalar> upsample2(const Tensor<Scalar>& x) {
  const Shape s = x.shape();
  Tensor<Scalar> y(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (Index c = 0; c < s.c; ++c)
    for (Index n = 0; n < s.n; ++n) {
      auto src = x.plane(n, c);
      auto dst = y.plane(n, c);
      for (Index i = 0; i < 2 * s.h; ++i)
        for (Index j = 0; j < 2 * s.w; ++j) dst(i, j) = src(i / 2, j / 2);
    }
  return y;
}

/// Adjoint of upsample2: 2x2 sum pooling.
template <typename Scalar>
Tensor<Scalar> upsample2_backward(const Tensor<Scalar>& dy) {
  const Shape s = dy.shape();
  Tensor<Scalar> dx(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (Index c = 0; c < s.c; ++c)
    for (Index n = 0; n < s.n; ++n) {
      auto src = dy.plane(n, c);
      auto dst = dx.plane(n, c);
      for (Index i = 0; i < s.h; ++i)
        for (Index j = 0; j < s.w; ++j) dst(i / 2, j / 2) += src(i, j);
    }
  return dx;
}

/// Channel concatenation; contiguous in channel-major storage.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw DimensionError("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  Tensor<Scalar> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  out.array().head(a.numel()) = a.array();
  out.array().tail(b.numel()) = b.array();
  return out;
}

/// Splits a channel-concatenated gradient back into its two parts.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> split_channels(const Tensor<Scalar>& x, Index first) {
  const Shape s = x.shape();
  Tensor<Scalar> a(Shape{s.n, first, s.h, s.w});
  Tensor<Scalar> b(Shape{s.n, s.c - first, s.h, s.w});
  a.array() = x.array().head(a.numel());
  b.array() = x.array().tail(b.numel());
  return {std::move(a), std::move(b)};
}

/// Bilinear resize with half-pixel centres (align_corners = false).
template <typename Scalar>
Tensor<Scalar> resize_bilinear(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  const Shape s = x.shape();
  if (s.h == out_h && s.w == out_w) return x;
  Tensor<Scalar> y(Shape{s.n, s.c, out_h, out_w});
  const double sy = static_cast<double>(s.h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(s.w) / static_cast<double>(out_w);
  for (Index c = 0; c < s.c; ++c)
    for (Index n = 0; n < s.n; ++n) {
      auto src = x.plane(n, c);
      auto dst = y.plane(n, c);
      for (Index i = 0; i < out_h; ++i) {
        const double fy = std::max(0.0, (i + 0.5) * sy - 0.5);
        const Index y0 = std::min<Index>(static_cast<Index>(fy), s.h - 1);
        const Index y1 = std::min<Index>(y0 + 1, s.h - 1);
        const Scalar wy = static_cast<Scalar>(fy - static_cast<double>(y0));
        for (Index j = 0; j < out_w; ++j) {
          const double fx = std::max(0.0, (j + 0.5) * sx - 0.5);
          const Index x0 = std::min<Index>(static_cast<Index>(fx), s.w - 1);
          const Index x1 = std::min<Index>(x0 + 1, s.w - 1);
          const Scalar wx = static_cast<Scalar>(fx - static_cast<double>(x0));
          dst(i, j) = (Scalar(1) - wy) * ((Scalar(1) - wx) * src(y0, x0) + wx * src(y0, x1)) +
                      wy * ((Scalar(1) - wx) * src(y1, x0) + wx * src(y1, x1));
        }
      }
    }
  return y;
}

}  // namespace coa
