#pragma once

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "coa/dehaze_net.hpp"
#include "coa/layers.hpp"
#include "coa/tensor.hpp"

namespace coa {

/// Balancing weights of the synthetic-domain loss.
struct LossWeights {
  double lambda_su = 1.0;
  double lambda_ss = 0.5;
  double lambda_pe = 0.1;

  void validate() const {
    if (lambda_su < 0 || lambda_ss < 0 || lambda_pe < 0) throw ConfigError("LossWeights: negative weight");
    if (lambda_su == 0 && lambda_ss == 0 && lambda_pe == 0) throw ConfigError("LossWeights: all weights zero");
  }
};

/// Per-stage weights of the context alignment loss.
struct AlignWeights {
  std::vector<double> w;

  static AlignWeights uniform(Index stages) {
    return {std::vector<double>(static_cast<std::size_t>(stages), 1.0 / static_cast<double>(stages))};
  }
  static AlignWeights zeros(Index stages) { return {std::vector<double>(static_cast<std::size_t>(stages), 0.0)}; }

  double sum() const { return std::accumulate(w.begin(), w.end(), 0.0); }
  bool all_zero() const { return sum() == 0.0; }

  void validate(Index stages) const {
    if (static_cast<Index>(w.size()) != stages) {
      throw ConfigError("AlignWeights: expected " + std::to_string(stages) + " weights, got " +
                        std::to_string(w.size()));
    }
    for (double v : w)
      if (v < 0 || !std::isfinite(v)) throw ConfigError("AlignWeights: weights must be finite and >= 0");
  }
};

struct SsimOptions {
  Index window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

/// Mean absolute error. Writes d/dpred into `dpred` when given (sign(0) = 0).
template <typename Scalar>
Scalar l1_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, Tensor<Scalar>* dpred = nullptr) {
  require_same_shape(pred, target, "l1_loss");
  const auto diff = pred.array() - target.array();
  const Scalar n = static_cast<Scalar>(pred.numel());
  if (dpred) {
    *dpred = Tensor<Scalar>(pred.shape());
    dpred->array() = diff.sign() / n;
  }
  return diff.abs().sum() / n;
}

/// Mean squared error.
template <typename Scalar>
Scalar mse_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, Tensor<Scalar>* dpred = nullptr) {
  require_same_shape(pred, target, "mse_loss");
  const auto diff = pred.array() - target.array();
  const Scalar n = static_cast<Scalar>(pred.numel());
  if (dpred) {
    *dpred = Tensor<Scalar>(pred.shape());
    dpred->array() = Scalar(2) * diff / n;
  }
  return diff.square().sum() / n;
}

namespace detail {

template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::vector<double> gaussian_window(Index size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const double centre = static_cast<double>(size - 1) / 2.0;
  double total = 0;
  for (Index i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - centre;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += g[i];
  }
  for (double& v : g) v /= total;
  return g;
}

/// Separable "valid" filtering with the outer product g g^T.
template <typename Scalar>
Plane<Scalar> filter_valid(const Plane<Scalar>& in, const std::vector<double>& g) {
  const Index k = static_cast<Index>(g.size());
  const Index h = in.rows(), w = in.cols();
  Plane<Scalar> tmp = Plane<Scalar>::Zero(h, w - k + 1);
  for (Index b = 0; b < k; ++b) tmp += static_cast<Scalar>(g[b]) * in.block(0, b, h, w - k + 1);
  Plane<Scalar> out = Plane<Scalar>::Zero(h - k + 1, w - k + 1);
  for (Index a = 0; a < k; ++a) out += static_cast<Scalar>(g[a]) * tmp.block(a, 0, h - k + 1, w - k + 1);
  return out;
}

/// Adjoint of filter_valid.
template <typename Scalar>
Plane<Scalar> filter_valid_adjoint(const Plane<Scalar>& gout, const std::vector<double>& g, Index h, Index w) {
  const Index k = static_cast<Index>(g.size());
  Plane<Scalar> tmp = Plane<Scalar>::Zero(h, w - k + 1);
  for (Index a = 0; a < k; ++a) tmp.block(a, 0, h - k + 1, w - k + 1) += static_cast<Scalar>(g[a]) * gout;
  Plane<Scalar> out = Plane<Scalar>::Zero(h, w);
  for (Index b = 0; b < k; ++b) out.block(0, b, h, w - k + 1) += static_cast<Scalar>(g[b]) * tmp;
  return out;
}

}  // namespace detail

/// Mean SSIM over every (sample, channel) plane, computed on the valid region
/// of a Gaussian window.
template <typename Scalar>
Scalar ssim_mean(const Tensor<Scalar>& x, const Tensor<Scalar>& y, Tensor<Scalar>* dx = nullptr,
                 const SsimOptions& opt = {}) {
  using detail::Plane;
  require_same_shape(x, y, "ssim");
  const Shape s = x.shape();
  if (s.h < opt.window || s.w < opt.window) {
    throw InputError("ssim: image " + s.str() + " smaller than window " + std::to_string(opt.window));
  }
  const auto g = detail::gaussian_window(opt.window, opt.sigma);
  const Scalar c1 = static_cast<Scalar>((opt.k1 * opt.range) * (opt.k1 * opt.range));
  const Scalar c2 = static_cast<Scalar>((opt.k2 * opt.range) * (opt.k2 * opt.range));
  const Index vh = s.h - opt.window + 1, vw = s.w - opt.window + 1;
  const Scalar count = static_cast<Scalar>(s.n * s.c * vh * vw);
  if (dx) *dx = Tensor<Scalar>(s);

  Scalar total = 0;
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Plane<Scalar> px = x.plane(n, c);
      const Plane<Scalar> py = y.plane(n, c);
      const Plane<Scalar> mx = detail::filter_valid<Scalar>(px, g);
      const Plane<Scalar> my = detail::filter_valid<Scalar>(py, g);
      const Plane<Scalar> exx = detail::filter_valid<Scalar>(px * px, g);
      const Plane<Scalar> eyy = detail::filter_valid<Scalar>(py * py, g);
      const Plane<Scalar> exy = detail::filter_valid<Scalar>(px * py, g);
      const Plane<Scalar> a1 = Scalar(2) * mx * my + c1;
      const Plane<Scalar> a2 = Scalar(2) * (exy - mx * my) + c2;
      const Plane<Scalar> b1 = mx * mx + my * my + c1;
      const Plane<Scalar> b2 = (exx - mx * mx) + (eyy - my * my) + c2;
      const Plane<Scalar> denom = b1 * b2;
      const Plane<Scalar> map = a1 * a2 / denom;
      total += map.sum();
      if (dx) {
        // partials of the SSIM map with respect to the filtered moments of x
        const Plane<Scalar> d_a1 = a2 / denom;
        const Plane<Scalar> d_a2 = a1 / denom;
        const Plane<Scalar> d_b1 = -map / b1;
        const Plane<Scalar> d_b2 = -map / b2;
        const Plane<Scalar> g_mx =
            Scalar(2) * my * d_a1 - Scalar(2) * my * d_a2 + Scalar(2) * mx * d_b1 - Scalar(2) * mx * d_b2;
        const Plane<Scalar> g_exx = d_b2;
        const Plane<Scalar> g_exy = Scalar(2) * d_a2;
        const Plane<Scalar> grad = detail::filter_valid_adjoint<Scalar>(g_mx, g, s.h, s.w) +
                                   Scalar(2) * px * detail::filter_valid_adjoint<Scalar>(g_exx, g, s.h, s.w) +
                                   py * detail::filter_valid_adjoint<Scalar>(g_exy, g, s.h, s.w);
        dx->plane(n, c) = grad / count;
      }
    }
  }
  return total / count;
}

/// 1 - mean SSIM; in [0, 2].
template <typename Scalar>
Scalar ssim_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, Tensor<Scalar>* dpred = nullptr,
                 const SsimOptions& opt = {}) {
  const Scalar value = Scalar(1) - ssim_mean(pred, target, dpred, opt);
  if (dpred) dpred->array() = -dpred->array();
  return value;
}

/// Mean squared feature distance under a frozen extractor, averaged over the
/// selected encoder stages (all when `stages` is empty).
template <typename Scalar>
Scalar perceptual_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, DehazeNet<Scalar>& extractor,
                       Tensor<Scalar>* dpred = nullptr, const std::vector<Index>& stages = {}) {
  require_same_shape(pred, target, "perceptual_loss");
  std::vector<Index> used = stages;
  if (used.empty()) {
    used.resize(static_cast<std::size_t>(extractor.stages()));
    std::iota(used.begin(), used.end(), Index(0));
  }
  for (Index i : used)
    if (i < 0 || i >= extractor.stages()) {
      throw ConfigError("perceptual_loss: stage " + std::to_string(i) + " outside extractor with " +
                        std::to_string(extractor.stages()) + " stages");
    }
  EncoderTrace<Scalar> trace;
  const FeatureTaps<Scalar> fp = extractor.encode(pred, dpred ? &trace : nullptr);
  const FeatureTaps<Scalar> ft = extractor.encode(target);
  const Scalar inv_stages = Scalar(1) / static_cast<Scalar>(used.size());
  Scalar value = 0;
  std::vector<Tensor<Scalar>> dtaps(static_cast<std::size_t>(extractor.stages()));
  for (Index i : used) {
    Tensor<Scalar> g;
    value += inv_stages * mse_loss(fp.per_stage[i], ft.per_stage[i], dpred ? &g : nullptr);
    if (dpred) {
      g.array() *= inv_stages;
      dtaps[i] = std::move(g);
    }
  }
  if (dpred) {
    for (Index i = 0; i < extractor.stages(); ++i)
      if (dtaps[i].empty()) dtaps[i] = Tensor<Scalar>(fp.per_stage[i].shape());
    *dpred = extractor.encode_backward(trace, dtaps, false);
  }
  return value;
}

/// Learned 1x1 maps from student tap widths to teacher tap widths.
template <typename Scalar>
class ContextProjections {
 public:
  ContextProjections() = default;

  /// Identity where widths agree, He-initialised otherwise.
  ContextProjections(const std::vector<Index>& student_widths, const std::vector<Index>& teacher_widths,
                     std::uint64_t seed = 0) {
    if (student_widths.size() != teacher_widths.size()) {
      throw ConfigError("ContextProjections: teacher and student stage counts differ");
    }
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < student_widths.size(); ++i) {
      Conv2d<Scalar> conv(student_widths[i], teacher_widths[i], 1, 1);
      if (student_widths[i] == teacher_widths[i]) {
        conv.set_identity();
      } else {
        conv.init(rng, 1.0);
      }
      convs_.push_back(std::move(conv));
    }
  }

  static ContextProjections identity(const std::vector<Index>& widths) { return ContextProjections(widths, widths); }

  Index stages() const { return static_cast<Index>(convs_.size()); }
  Conv2d<Scalar>& stage(Index i) { return convs_[i]; }

  ParamList<Scalar> params() {
    ParamList<Scalar> list;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].append_params(list, "proj." + std::to_string(i));
    return list;
  }

 private:
  std::vector<Conv2d<Scalar>> convs_;
};

/// Sum_i w_i * mean((T_i - P_i(S_i))^2). Teacher taps are constants; when
/// `dstudent` is given it receives dL/dS_i and the projection gradients
/// accumulate.
template <typename Scalar>
Scalar context_align_loss(const FeatureTaps<Scalar>& teacher, const FeatureTaps<Scalar>& student,
                          const AlignWeights& weights, ContextProjections<Scalar>& proj,
                          std::vector<Tensor<Scalar>>* dstudent = nullptr) {
  const Index stages = teacher.stages();
  if (student.stages() != stages || proj.stages() != stages) {
    throw ConfigError("context_align_loss: stage count mismatch (teacher " + std::to_string(stages) + ", student " +
                      std::to_string(student.stages()) + ", projections " + std::to_string(proj.stages()) + ")");
  }
  weights.validate(stages);
  if (!(weights.sum() > 0)) throw ConfigError("context_align_loss: weights sum to zero");
  if (dstudent) dstudent->assign(static_cast<std::size_t>(stages), {});
  Scalar value = 0;
  for (Index i = 0; i < stages; ++i) {
    const Scalar w = static_cast<Scalar>(weights.w[i]);
    const Tensor<Scalar>& s = student.per_stage[i];
    if (w == Scalar(0)) {
      if (dstudent) (*dstudent)[i] = Tensor<Scalar>(s.shape());
      continue;
    }
    const Tensor<Scalar> projected = proj.stage(i).forward(s);
    const Shape ps = projected.shape();
    const Tensor<Scalar> t = resize_bilinear(teacher.per_stage[i], ps.h, ps.w);
    Tensor<Scalar> g;
    value += w * mse_loss(projected, t, dstudent ? &g : nullptr);
    if (dstudent) {
      g.array() *= w;
      (*dstudent)[i] = proj.stage(i).backward(s, g, true, true);
    }
  }
  return value;
}

template <typename Scalar>
struct MocTerms {
  Scalar total = 0;
  Scalar su = 0;
  Scalar ss = 0;
  Scalar pe = 0;
  Scalar align = 0;
};

template <typename Scalar>
struct MocGrads {
  Tensor<Scalar> dout;
  std::vector<Tensor<Scalar>> dtaps;
};

/// lambda_su*l1 + lambda_ss*ssim + lambda_pe*perceptual + L_a. Components whose
/// weight is zero are skipped and reported as 0; `extractor` may be null when
/// lambda_pe is zero.
template <typename Scalar>
MocTerms<Scalar> moc_loss(const Tensor<Scalar>& out, const Tensor<Scalar>& target,
                          const FeatureTaps<Scalar>& teacher_taps, const FeatureTaps<Scalar>& student_taps,
                          const LossWeights& weights, const AlignWeights& align, DehazeNet<Scalar>* extractor,
                          ContextProjections<Scalar>* proj, MocGrads<Scalar>* grads = nullptr,
                          const SsimOptions& ssim_opt = {}) {
  if (weights.lambda_su < 0 || weights.lambda_ss < 0 || weights.lambda_pe < 0) {
    throw ConfigError("moc_loss: negative loss weight");
  }
  require_same_shape(out, target, "moc_loss");
  MocTerms<Scalar> terms;
  if (grads) grads->dout = Tensor<Scalar>(out.shape());
  Tensor<Scalar> g;
  Tensor<Scalar>* gp = grads ? &g : nullptr;
  if (weights.lambda_su > 0) {
    terms.su = l1_loss(out, target, gp);
    if (grads) grads->dout.array() += static_cast<Scalar>(weights.lambda_su) * g.array();
  }
  if (weights.lambda_ss > 0) {
    terms.ss = ssim_loss(out, target, gp, ssim_opt);
    if (grads) grads->dout.array() += static_cast<Scalar>(weights.lambda_ss) * g.array();
  }
  if (weights.lambda_pe > 0) {
    if (!extractor) throw ConfigError("moc_loss: perceptual weight set without an extractor");
    terms.pe = perceptual_loss(out, target, *extractor, gp);
    if (grads) grads->dout.array() += static_cast<Scalar>(weights.lambda_pe) * g.array();
  }
  align.validate(student_taps.stages());
  if (!align.all_zero()) {
    if (!proj) throw ConfigError("moc_loss: alignment weights set without projections");
    terms.align = context_align_loss(teacher_taps, student_taps, align, *proj, grads ? &grads->dtaps : nullptr);
  } else if (grads) {
    grads->dtaps.clear();
  }
  terms.total = static_cast<Scalar>(weights.lambda_su) * terms.su + static_cast<Scalar>(weights.lambda_ss) * terms.ss +
                static_cast<Scalar>(weights.lambda_pe) * terms.pe + terms.align;
  return terms;
}

}  // namespace coa
