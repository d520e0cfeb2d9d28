#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tada/nn.hpp"

namespace tada::optim {

struct OptimizerConfig {
  std::string kind = "rmsprop";  ///< "rmsprop" (no momentum) or "adam"
  double lr = 1e-3;
  double decay = 0.99;  ///< rmsprop squared-gradient decay
  double beta1 = 0.9;   ///< adam
  double beta2 = 0.999; ///< adam
  double eps = 1e-8;
  double clip_norm = 0.0;  ///< global gradient-norm clip, 0 disables
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, kind, lr, decay, beta1, beta2, eps, clip_norm)

/// Per-parameter state keyed by parameter name, so the trainable set may shrink
/// between stages without disturbing the remaining moments.
template <class T>
class Optimizer {
 public:
  struct Slot {
    std::vector<double> m, v;
    std::int64_t t = 0;
  };

  explicit Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.kind != "rmsprop" && cfg_.kind != "adam") throw std::invalid_argument("unknown optimizer '" + cfg_.kind + "'");
    if (!(cfg_.lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  }

  void step(const std::vector<nn::Param<T>*>& params) {
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (auto* p : params)
        for (T g : p->grad.vec()) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    for (auto* p : params) {
      Slot& s = slots_[p->name];
      const std::size_t n = p->value.size();
      if (s.v.size() != n) {
        s.v.assign(n, 0.0);
        if (cfg_.kind == "adam") s.m.assign(n, 0.0);
      }
      ++s.t;
      auto& val = p->value.vec();
      const auto& grad = p->grad.vec();
      if (cfg_.kind == "rmsprop") {
        for (std::size_t i = 0; i < n; ++i) {
          const double g = scale * grad[i];
          s.v[i] = cfg_.decay * s.v[i] + (1.0 - cfg_.decay) * g * g;
          val[i] -= static_cast<T>(cfg_.lr * g / (std::sqrt(s.v[i]) + cfg_.eps));
        }
      } else {
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
        for (std::size_t i = 0; i < n; ++i) {
          const double g = scale * grad[i];
          s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
          s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
          val[i] -= static_cast<T>(cfg_.lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + cfg_.eps));
        }
      }
    }
  }

  [[nodiscard]] const OptimizerConfig& config() const { return cfg_; }
  [[nodiscard]] std::map<std::string, Slot>& slots() { return slots_; }
  [[nodiscard]] const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Slot> slots_;
};

}  // namespace tada::optim
