#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "coa/layers.hpp"

namespace coa {

enum class OptimizerKind { adam, sgd };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Cosine annealing from `start` to `end` over `total` steps.
struct CosineSchedule {
  double start = 1e-4;
  double end = 1e-6;
  long total = 1;

  double at(long step) const {
    if (total <= 1) return start;
    const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
    return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

/// Adam or plain SGD. Holds only moment estimates, matched to the parameter
/// list by position, so it can be copied along with the model it updates.
template <typename Scalar>
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::adam, AdamOptions opts = {}) : kind_(kind), opts_(opts) {}

  OptimizerKind kind() const { return kind_; }
  long steps() const { return t_; }

  void step(const ParamList<Scalar>& params, double lr) {
    ++t_;
    if (kind_ == OptimizerKind::sgd) {
      for (const auto& p : params) p.values() -= static_cast<Scalar>(lr) * p.grads();
      return;
    }
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(VectorX<Scalar>::Zero(p.size));
        v_.push_back(VectorX<Scalar>::Zero(p.size));
      }
    }
    if (m_.size() != params.size()) throw ConfigError("Optimizer: parameter list changed between steps");
    const Scalar b1 = static_cast<Scalar>(opts_.beta1);
    const Scalar b2 = static_cast<Scalar>(opts_.beta2);
    const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(opts_.beta1, static_cast<double>(t_)));
    const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(opts_.beta2, static_cast<double>(t_)));
    const Scalar rate = static_cast<Scalar>(lr);
    const Scalar eps = static_cast<Scalar>(opts_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (m_[i].size() != params[i].size) throw ConfigError("Optimizer: parameter size changed between steps");
      auto g = params[i].grads();
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
      params[i].values().array() -= rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
  }

 private:
  OptimizerKind kind_;
  AdamOptions opts_;
  std::vector<VectorX<Scalar>> m_;
  std::vector<VectorX<Scalar>> v_;
  long t_ = 0;
};

}  // namespace coa
