#pragma once

#include <concepts>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "coa/layers.hpp"
#include "coa/tensor.hpp"

namespace coa {

/// Shape of the encoder-decoder family. Stage i of the encoder runs at
/// 1/2^i of the input resolution; decoder stage i mirrors it and receives a
/// skip connection from encoder stage i.
struct NetConfig {
  std::vector<Index> encoder_widths;
  std::vector<Index> decoder_widths;
  Index blocks_per_stage = 1;
  Index in_channels = 3;
  Activation activation = Activation::silu;
  /// Adds logit(x) before the output sigmoid so a zero head is the identity map.
  bool global_residual = true;

  Index stages() const { return static_cast<Index>(encoder_widths.size()); }

  void validate() const {
    if (encoder_widths.empty()) throw ConfigError("NetConfig: at least one stage required");
    if (encoder_widths.size() != decoder_widths.size()) {
      throw ConfigError("NetConfig: encoder and decoder must have the same number of stages");
    }
    for (Index w : encoder_widths)
      if (w < 1) throw ConfigError("NetConfig: encoder width < 1");
    for (Index w : decoder_widths)
      if (w < 1) throw ConfigError("NetConfig: decoder width < 1");
    if (blocks_per_stage < 1) throw ConfigError("NetConfig: blocks_per_stage must be >= 1");
    if (in_channels < 1) throw ConfigError("NetConfig: in_channels must be >= 1");
  }

  static NetConfig teacher_default() { return {{32, 64, 128, 256}, {32, 64, 128, 256}, 2}; }
  static NetConfig student_default() { return {{8, 16, 32, 64}, {8, 16, 32, 64}, 1}; }

  bool operator==(const NetConfig&) const = default;
};

enum class Role { teacher, student_syn, student_rea };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::teacher: return "teacher";
    case Role::student_syn: return "student-syn";
    case Role::student_rea: return "student-rea";
  }
  return "?";
}

inline Role role_from_string(const std::string& s) {
  if (s == "teacher") return Role::teacher;
  if (s == "student-syn") return Role::student_syn;
  if (s == "student-rea") return Role::student_rea;
  throw ConfigError("unknown role '" + s + "'");
}

/// Encoder feature maps, one per stage.
template <typename Scalar>
struct FeatureTaps {
  std::vector<Tensor<Scalar>> per_stage;

  Index stages() const { return static_cast<Index>(per_stage.size()); }
};

template <typename Scalar>
struct UnitTrace {
  Tensor<Scalar> input;
  Tensor<Scalar> pre;
};

template <typename Scalar>
struct EncoderTrace {
  Tensor<Scalar> x;
  std::vector<std::vector<UnitTrace<Scalar>>> stages;
};

/// Everything backward() needs from a forward pass. Held by the caller, so
/// concurrent forwards on a frozen model never share mutable state.
template <typename Scalar>
struct NetTrace {
  EncoderTrace<Scalar> encoder;
  std::vector<std::vector<UnitTrace<Scalar>>> decoder;
  UnitTrace<Scalar> head;
  Tensor<Scalar> y;
};

template <typename Scalar>
struct NetOutput {
  Tensor<Scalar> y;
  FeatureTaps<Scalar> taps;
};

/// Configurable U-Net style dehazing network.
///
/// Encoder stage: a 3x3 conv (stride 2 after the first stage) followed by
/// `blocks_per_stage` residual units h + act(conv(h)). Decoder stage i takes
/// upsample(decoder i+1) concatenated with encoder stage i. The head maps to
/// `in_channels` and ends in a sigmoid, so outputs are always in (0, 1).
template <typename Scalar>
class DehazeNet {
 public:
  DehazeNet() = default;

  explicit DehazeNet(NetConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    const Index stages = config_.stages();
    const auto& ew = config_.encoder_widths;
    const auto& dw = config_.decoder_widths;
    encoder_.resize(stages);
    decoder_.resize(stages);
    for (Index i = 0; i < stages; ++i) {
      const Index in = i == 0 ? config_.in_channels : ew[i - 1];
      encoder_[i].emplace_back(in, ew[i], 3, i == 0 ? 1 : 2);
      for (Index b = 0; b < config_.blocks_per_stage; ++b) encoder_[i].emplace_back(ew[i], ew[i], 3, 1);
    }
    for (Index i = stages - 1; i >= 0; --i) {
      const Index in = i == stages - 1 ? ew[i] : dw[i + 1] + ew[i];
      decoder_[i].emplace_back(in, dw[i], 3, 1);
      for (Index b = 0; b < config_.blocks_per_stage; ++b) decoder_[i].emplace_back(dw[i], dw[i], 3, 1);
    }
    head_ = Conv2d<Scalar>(dw[0], config_.in_channels, 3, 1);
    initialize(seed);
  }

  const NetConfig& config() const { return config_; }
  Index stages() const { return config_.stages(); }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& stage : encoder_)
      for (std::size_t u = 0; u < stage.size(); ++u) stage[u].init(rng, u == 0 ? 1.0 : 0.5);
    for (Index i = stages() - 1; i >= 0; --i)
      for (std::size_t u = 0; u < decoder_[i].size(); ++u) decoder_[i][u].init(rng, u == 0 ? 1.0 : 0.5);
    if (config_.global_residual) {
      head_.weight.setZero();
      head_.bias.setZero();
    } else {
      head_.init(rng, 1.0);
    }
  }

  /// Throws DimensionError unless `s` is a valid input shape.
  void check_input(const Shape& s) const {
    if (s.c != config_.in_channels) {
      throw DimensionError("DehazeNet: expected " + std::to_string(config_.in_channels) + " channels, got " +
                           s.str());
    }
    const Index div = Index(1) << (stages() - 1);
    if (s.h < div || s.w < div || s.h % div != 0 || s.w % div != 0) {
      throw DimensionError("DehazeNet: spatial dims of " + s.str() + " not divisible by " + std::to_string(div));
    }
  }

  FeatureTaps<Scalar> encode(const Tensor<Scalar>& x, EncoderTrace<Scalar>* trace = nullptr) const {
    check_input(x.shape());
    FeatureTaps<Scalar> taps;
    if (trace) {
      trace->x = x;
      trace->stages.assign(stages(), {});
    }
    Tensor<Scalar> h = x;
    for (Index i = 0; i < stages(); ++i) {
      h = run_stage(encoder_[i], std::move(h), trace ? &trace->stages[i] : nullptr);
      taps.per_stage.push_back(h);
    }
    return taps;
  }

  NetOutput<Scalar> forward(const Tensor<Scalar>& x, NetTrace<Scalar>* trace = nullptr) const {
    NetOutput<Scalar> out;
    out.taps = encode(x, trace ? &trace->encoder : nullptr);
    if (trace) trace->decoder.assign(stages(), {});
    const Index last = stages() - 1;
    Tensor<Scalar> d = run_stage(decoder_[last], out.taps.per_stage[last], trace ? &trace->decoder[last] : nullptr);
    for (Index i = last - 1; i >= 0; --i) {
      Tensor<Scalar> merged = concat_channels(upsample2(d), out.taps.per_stage[i]);
      d = run_stage(decoder_[i], std::move(merged), trace ? &trace->decoder[i] : nullptr);
    }
    Tensor<Scalar> z = head_.forward(d);
    if (trace) trace->head.input = d;
    if (config_.global_residual) z.array() += logit(x).array();
    out.y = Tensor<Scalar>(z.shape());
    out.y.array() = Scalar(1) / (Scalar(1) + (-z.array()).exp());
    if (trace) trace->y = out.y;
    return out;
  }

  /// Backpropagates through a traced forward pass. `dy` and/or `dtaps` may be
  /// null. Parameter gradients accumulate when `param_grads` is set; the
  /// return value is dL/dx.
  Tensor<Scalar> backward(const NetTrace<Scalar>& trace, const Tensor<Scalar>* dy,
                          const std::vector<Tensor<Scalar>>* dtaps, bool param_grads = true) {
    const Index last = stages() - 1;
    std::vector<Tensor<Scalar>> tap_grads(stages());
    for (Index i = 0; i < stages(); ++i) {
      tap_grads[i] = Tensor<Scalar>(trace.encoder.stages[i].back().pre.shape());
      if (dtaps) add_into(tap_grads[i], (*dtaps)[i]);
    }
    Tensor<Scalar> dx(trace.encoder.x.shape());
    if (dy) {
      require_same_shape(*dy, trace.y, "DehazeNet::backward");
      Tensor<Scalar> dz(dy->shape());
      dz.array() = dy->array() * trace.y.array() * (Scalar(1) - trace.y.array());
      if (config_.global_residual) {
        const Scalar eps = logit_eps();
        const auto& x = trace.encoder.x.array();
        dx.array() = ((x > eps) && (x < Scalar(1) - eps)).select(dz.array() / (x * (Scalar(1) - x)), Scalar(0));
      }
      Tensor<Scalar> dd = head_.backward(trace.head.input, dz, param_grads, true);
      // decoder 0 ran last, so unwind from it toward the bottleneck
      for (Index i = 0; i < last; ++i) {
        Tensor<Scalar> dmerged = stage_backward(decoder_[i], trace.decoder[i], std::move(dd), param_grads);
        auto [dup, dskip] = split_channels(dmerged, config_.decoder_widths[i + 1]);
        add_into(tap_grads[i], dskip);
        dd = upsample2_backward(dup);
      }
      Tensor<Scalar> dlast = stage_backward(decoder_[last], trace.decoder[last], std::move(dd), param_grads);
      add_into(tap_grads[last], dlast);
    }
    dx.array() += encode_backward(trace.encoder, tap_grads, param_grads).array();
    return dx;
  }

  /// Backward through the encoder only, given gradients on every tap.
  Tensor<Scalar> encode_backward(const EncoderTrace<Scalar>& trace, const std::vector<Tensor<Scalar>>& dtaps,
                                 bool param_grads = true) {
    if (static_cast<Index>(dtaps.size()) != stages()) throw ConfigError("encode_backward: tap count mismatch");
    Tensor<Scalar> dh;
    for (Index i = stages() - 1; i >= 0; --i) {
      if (dh.empty()) {
        dh = dtaps[i];
      } else if (!dtaps[i].empty()) {
        dh.array() += dtaps[i].array();
      }
      dh = stage_backward(encoder_[i], trace.stages[i], std::move(dh), param_grads);
    }
    return dh;
  }

  ParamList<Scalar> params() {
    ParamList<Scalar> list;
    for (Index i = 0; i < stages(); ++i)
      for (std::size_t u = 0; u < encoder_[i].size(); ++u)
        encoder_[i][u].append_params(list, "enc." + std::to_string(i) + "." + std::to_string(u));
    for (Index i = stages() - 1; i >= 0; --i)
      for (std::size_t u = 0; u < decoder_[i].size(); ++u)
        decoder_[i][u].append_params(list, "dec." + std::to_string(i) + "." + std::to_string(u));
    head_.append_params(list, "head");
    return list;
  }

  Index param_count() const {
    Index n = head_.param_count();
    for (const auto& stage : encoder_)
      for (const auto& conv : stage) n += conv.param_count();
    for (const auto& stage : decoder_)
      for (const auto& conv : stage) n += conv.param_count();
    return n;
  }

  /// 2 x multiply-accumulates over all convolutions for one forward pass.
  Index flops(const Shape& input) const {
    check_input(input);
    Index macs = 0;
    Shape s = input;
    std::vector<Shape> taps;
    for (const auto& stage : encoder_) {
      for (const auto& conv : stage) {
        macs += conv.macs(s);
        s = conv.output_shape(s);
      }
      taps.push_back(s);
    }
    for (Index i = stages() - 1; i >= 0; --i) {
      Shape in = taps[i];
      if (i != stages() - 1) in.c = config_.decoder_widths[i + 1] + taps[i].c;
      for (const auto& conv : decoder_[i]) {
        macs += conv.macs(in);
        in = conv.output_shape(in);
      }
    }
    Shape d = input;
    d.c = config_.decoder_widths[0];
    macs += head_.macs(d);
    return 2 * macs;
  }

  std::vector<std::vector<Conv2d<Scalar>>>& encoder() { return encoder_; }
  std::vector<std::vector<Conv2d<Scalar>>>& decoder() { return decoder_; }
  Conv2d<Scalar>& head() { return head_; }

  template <typename Other>
  DehazeNet<Other> cast() const {
    DehazeNet<Other> out(config_);
    auto dst = out.params();
    auto src = const_cast<DehazeNet*>(this)->params();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].values() = src[i].values().template cast<Other>();
    return out;
  }

 private:
  static Scalar logit_eps() { return Scalar(1e-4); }

  static Tensor<Scalar> logit(const Tensor<Scalar>& x) {
    const Scalar eps = logit_eps();
    Tensor<Scalar> out(x.shape());
    const auto c = x.array().max(eps).min(Scalar(1) - eps);
    out.array() = (c / (Scalar(1) - c)).log();
    return out;
  }

  static void add_into(Tensor<Scalar>& acc, const Tensor<Scalar>& g) {
    if (g.empty()) return;
    require_same_shape(acc, g, "gradient accumulation");
    acc.array() += g.array();
  }

  Tensor<Scalar> run_stage(const std::vector<Conv2d<Scalar>>& convs, Tensor<Scalar> h,
                           std::vector<UnitTrace<Scalar>>* trace) const {
    for (std::size_t u = 0; u < convs.size(); ++u) {
      Tensor<Scalar> pre = convs[u].forward(h);
      Tensor<Scalar> act = activate(config_.activation, pre);
      if (u > 0) act.array() += h.array();
      if (trace) trace->push_back({std::move(h), std::move(pre)});
      h = std::move(act);
    }
    return h;
  }

  Tensor<Scalar> stage_backward(std::vector<Conv2d<Scalar>>& convs, const std::vector<UnitTrace<Scalar>>& trace,
                                Tensor<Scalar> dh, bool param_grads) {
    for (std::size_t u = convs.size(); u-- > 0;) {
      const Tensor<Scalar> dpre = activate_backward(config_.activation, trace[u].pre, dh);
      Tensor<Scalar> din = convs[u].backward(trace[u].input, dpre, param_grads, true);
      if (u > 0) din.array() += dh.array();
      dh = std::move(din);
    }
    return dh;
  }

  NetConfig config_;
  std::vector<std::vector<Conv2d<Scalar>>> encoder_;
  std::vector<std::vector<Conv2d<Scalar>>> decoder_;
  Conv2d<Scalar> head_;
};

/// What the trainers need from a dehazing backbone. Alternative architectures
/// plug in by modelling this concept.
template <typename Model, typename Scalar = float>
concept DehazeBackbone = requires(Model m, const Model cm, const Tensor<Scalar>& x, NetTrace<Scalar>* trace) {
  { cm.forward(x, trace) } -> std::same_as<NetOutput<Scalar>>;
  { cm.encode(x) } -> std::same_as<FeatureTaps<Scalar>>;
  { m.params() } -> std::same_as<ParamList<Scalar>>;
  { cm.param_count() } -> std::same_as<Index>;
};

static_assert(DehazeBackbone<DehazeNet<float>, float>);

using ModelHandle = DehazeNet<float>;

inline Index param_count(const ModelHandle& model) { return model.param_count(); }
inline Index flops_estimate(const ModelHandle& model, const Shape& input) { return model.flops(input); }

}  // namespace coa
