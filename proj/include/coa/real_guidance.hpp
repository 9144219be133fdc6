#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "coa/layers.hpp"
#include "coa/tensor.hpp"

namespace coa {

/// Desk-scale stand-in for a vision-language image encoder: strided 3x3
/// convolutions, global average pooling, L2 normalisation. The embedding
/// dimension is the last width.
template <typename Scalar>
class EmbeddingBackend {
 public:
  using Matrix = MatrixX<Scalar>;

  struct Trace {
    std::vector<Tensor<Scalar>> inputs;
    std::vector<Tensor<Scalar>> pre;
    Matrix pooled;  // d x N
    Shape last;
  };

  EmbeddingBackend() = default;
  explicit EmbeddingBackend(std::vector<Index> widths, std::uint64_t seed = 0, Index in_channels = 3)
      : widths_(std::move(widths)) {
    if (widths_.empty()) throw ConfigError("EmbeddingBackend: at least one stage required");
    std::mt19937_64 rng(seed);
    Index in = in_channels;
    for (Index w : widths_) {
      if (w < 1) throw ConfigError("EmbeddingBackend: width < 1");
      convs_.emplace_back(in, w, 3, 2);
      convs_.back().init(rng, 1.0);
      in = w;
    }
  }

  static EmbeddingBackend desk_default(std::uint64_t seed = 0) { return EmbeddingBackend({8, 16, 32}, seed); }

  const std::vector<Index>& widths() const { return widths_; }
  Index dim() const { return widths_.back(); }
  Index in_channels() const { return convs_.front().in_channels(); }
  Index param_count() const {
    Index n = 0;
    for (const auto& c : convs_) n += c.param_count();
    return n;
  }

  /// Unit-norm embeddings, one column per sample.
  Matrix embed(const Tensor<Scalar>& x, Trace* trace = nullptr) const {
    if (x.shape().c != in_channels()) throw DimensionError("EmbeddingBackend: channel mismatch " + x.shape().str());
    Tensor<Scalar> h(x.shape());
    h.array() = x.array() - Scalar(0.5);
    if (trace) *trace = Trace{};
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      Tensor<Scalar> pre = convs_[i].forward(h);
      Tensor<Scalar> next = i + 1 < convs_.size() ? activate(Activation::silu, pre) : pre;
      if (trace) {
        trace->inputs.push_back(std::move(h));
        trace->pre.push_back(std::move(pre));
      }
      h = std::move(next);
    }
    const Shape s = h.shape();
    Matrix pooled(s.c, s.n);
    for (Index c = 0; c < s.c; ++c)
      for (Index n = 0; n < s.n; ++n) pooled(c, n) = h.plane(n, c).mean();
    Matrix out(s.c, s.n);
    for (Index n = 0; n < s.n; ++n) {
      const Scalar norm = pooled.col(n).norm();
      if (!(norm > Scalar(0)) || !std::isfinite(static_cast<double>(norm))) {
        throw NumericError("EmbeddingBackend: degenerate embedding norm for sample " + std::to_string(n));
      }
      out.col(n) = pooled.col(n) / norm;
    }
    if (trace) {
      trace->pooled = pooled;
      trace->last = s;
    }
    return out;
  }

  /// Backpropagates dL/d(embedding) to the input pixels.
  Tensor<Scalar> embed_backward(const Trace& trace, const Matrix& d_embed, bool param_grads = true) {
    const Shape s = trace.last;
    Tensor<Scalar> dh(s);
    for (Index n = 0; n < s.n; ++n) {
      const auto z = trace.pooled.col(n);
      const Scalar norm = z.norm();
      const VectorX<Scalar> u = z / norm;
      const VectorX<Scalar> dz = (d_embed.col(n) - u * u.dot(d_embed.col(n))) / norm;
      const Scalar inv_area = Scalar(1) / static_cast<Scalar>(s.h * s.w);
      for (Index c = 0; c < s.c; ++c) dh.plane(n, c).setConstant(dz(c) * inv_area);
    }
    for (std::size_t i = convs_.size(); i-- > 0;) {
      const Tensor<Scalar> dpre = i + 1 < convs_.size() ? activate_backward(Activation::silu, trace.pre[i], dh) : dh;
      dh = convs_[i].backward(trace.inputs[i], dpre, param_grads, true);
    }
    return dh;
  }

  ParamList<Scalar> params() {
    ParamList<Scalar> list;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].append_params(list, "backend." + std::to_string(i));
    return list;
  }

  template <typename Other>
  EmbeddingBackend<Other> cast() const {
    EmbeddingBackend<Other> out(widths_, 0, in_channels());
    auto dst = out.params();
    auto src = const_cast<EmbeddingBackend*>(this)->params();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].values() = src[i].values().template cast<Other>();
    return out;
  }

 private:
  std::vector<Index> widths_;
  std::vector<Conv2d<Scalar>> convs_;
};

/// Learnable haze/clear prompt embeddings.
struct PromptPair {
  Eigen::VectorXd haze_embed;
  Eigen::VectorXd clear_embed;
  bool trained = false;
  double holdout_accuracy = 0.0;
  std::uint64_t seed = 0;
  double temperature = 1.0;

  Index dim() const { return haze_embed.size(); }

  /// Unit-normal initialisation.
  static PromptPair random(Index dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    PromptPair p;
    p.haze_embed.resize(dim);
    p.clear_embed.resize(dim);
    for (Index i = 0; i < dim; ++i) p.haze_embed(i) = nd(rng);
    for (Index i = 0; i < dim; ++i) p.clear_embed(i) = nd(rng);
    p.seed = seed;
    return p;
  }

  void validate() const {
    if (haze_embed.size() != clear_embed.size() || haze_embed.size() == 0) {
      throw ConfigError("PromptPair: embeddings must be non-empty and equally sized");
    }
    if (!haze_embed.allFinite() || !clear_embed.allFinite()) throw NumericError("PromptPair: non-finite embedding");
  }
};

template <typename Derived1, typename Derived2>
typename Derived1::Scalar cosine_sim(const Eigen::MatrixBase<Derived1>& a, const Eigen::MatrixBase<Derived2>& b) {
  const auto na = a.norm();
  const auto nb = b.norm();
  if (!(na > 0) || !(nb > 0)) throw NumericError("cosine_sim: zero vector");
  return a.dot(b) / (na * nb);
}

/// exp(s_h/T) / (exp(s_h/T) + exp(s_c/T)) written as a logistic for stability.
inline double two_class_softmax(double sim_haze, double sim_clear, double temperature = 1.0) {
  return 1.0 / (1.0 + std::exp(-(sim_haze - sim_clear) / temperature));
}

template <typename Scalar>
struct PromptSims {
  VectorX<Scalar> haze;
  VectorX<Scalar> clear;
  VectorX<Scalar> prob;
};

/// Cosine similarities of each embedding column to both prompts and the
/// resulting haze probability.
template <typename Scalar>
PromptSims<Scalar> prompt_similarities(const MatrixX<Scalar>& embeddings, const PromptPair& prompts) {
  prompts.validate();
  if (embeddings.rows() != prompts.dim()) throw DimensionError("prompt dimension does not match embeddings");
  const VectorX<Scalar> h = prompts.haze_embed.cast<Scalar>().normalized();
  const VectorX<Scalar> c = prompts.clear_embed.cast<Scalar>().normalized();
  PromptSims<Scalar> out;
  out.haze = embeddings.transpose() * h;
  out.clear = embeddings.transpose() * c;
  const Scalar inv_t = static_cast<Scalar>(1.0 / prompts.temperature);
  out.prob = (Scalar(1) + (-(out.haze - out.clear).array() * inv_t).exp()).inverse().matrix();
  return out;
}

/// Per-image haze probabilities for a batch.
template <typename Scalar>
VectorX<Scalar> haze_probabilities(const Tensor<Scalar>& batch, const PromptPair& prompts,
                                   const EmbeddingBackend<Scalar>& backend) {
  return prompt_similarities(backend.embed(batch), prompts).prob;
}

/// Haze probability of a single image (batch of one).
template <typename Scalar>
Scalar haze_probability(const Tensor<Scalar>& image, const PromptPair& prompts,
                        const EmbeddingBackend<Scalar>& backend) {
  if (image.shape().n != 1) throw DimensionError("haze_probability expects a single image");
  return haze_probabilities(image, prompts, backend)(0);
}

/// Contrastive real-domain loss: mean haze probability over the batch. The
/// backend is frozen; gradients flow to the pixels only.
template <typename Scalar>
Scalar l_rea(const Tensor<Scalar>& batch, const PromptPair& prompts, EmbeddingBackend<Scalar>& backend,
             Tensor<Scalar>* dbatch = nullptr) {
  if (!prompts.trained) throw StateError("l_rea: prompts have not been trained");
  typename EmbeddingBackend<Scalar>::Trace trace;
  const MatrixX<Scalar> u = backend.embed(batch, dbatch ? &trace : nullptr);
  const PromptSims<Scalar> sims = prompt_similarities(u, prompts);
  const Index n = batch.shape().n;
  const Scalar value = sims.prob.mean();
  if (dbatch) {
    const VectorX<Scalar> h = prompts.haze_embed.cast<Scalar>().normalized();
    const VectorX<Scalar> c = prompts.clear_embed.cast<Scalar>().normalized();
    const Scalar scale = static_cast<Scalar>(1.0 / (prompts.temperature * static_cast<double>(n)));
    MatrixX<Scalar> du(u.rows(), n);
    for (Index i = 0; i < n; ++i) {
      const Scalar p = sims.prob(i);
      du.col(i) = scale * p * (Scalar(1) - p) * (h - c);
    }
    *dbatch = backend.embed_backward(trace, du, false);
  }
  return value;
}

struct PromptTrainOptions {
  long steps = 300;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  Index batch_size = 32;
  double holdout_fraction = 0.2;
  double temperature = 0.1;
};

struct PromptTrainResult {
  PromptPair prompts;
  std::vector<double> loss_history;
  double train_accuracy = 0.0;
  double mean_prob_hazy = 0.0;
  double mean_prob_clear = 0.0;
};

/// Jointly fits the backend and the prompt pair with binary cross-entropy
/// (hazy -> 1, clear -> 0) on an 80/20 split; the held-out accuracy at a 0.5
/// threshold is stored on the returned pair. The mean probabilities are over
/// the training split.
PromptTrainResult train_prompts(const std::vector<Image>& hazy, const std::vector<Image>& clear,
                                EmbeddingBackend<float>& backend, const PromptTrainOptions& opts);

/// BCE of one prediction. Exactly zero for a perfectly confident correct
/// prediction; log terms are floored at 1e-12.
inline double binary_cross_entropy(double p, double label) {
  const double eps = 1e-12;
  double value = 0.0;
  if (label > 0.0) value -= label * std::log(std::max(p, eps));
  if (label < 1.0) value -= (1.0 - label) * std::log(std::max(1.0 - p, eps));
  return value;
}

void save_prompts(const std::filesystem::path& file, const PromptPair& prompts);
PromptPair load_prompts(const std::filesystem::path& file);

}  // namespace coa
