#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <string>

#include "d2r/params.hpp"

namespace d2r {

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then cosine
/// annealing to 0 at step `total_steps - 1`.
inline double lr_at(std::size_t step, double base_lr, std::size_t warmup_steps, std::size_t total_steps) {
  if (step < warmup_steps) return base_lr * double(step) / double(warmup_steps);
  const std::size_t span = total_steps > warmup_steps + 1 ? total_steps - 1 - warmup_steps : 1;
  const double t = std::min(1.0, double(step - warmup_steps) / double(span));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// SGD with momentum and L2 weight decay:
///   g' = g + wd * p;  v = mu * v + g';  p -= lr * v
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  using Filter = std::function<bool(const std::string&)>;

  /// Updates every entry of `params` that has a gradient and passes `trainable`.
  void step(ParamSet& params, const ParamSet& grads, double lr, const Filter& trainable = {}) {
    for (auto& [name, p] : params) {
      if (trainable && !trainable(name)) continue;
      auto g = grads.find(name);
      if (g == grads.end()) continue;
      auto [it, fresh] = velocity_.try_emplace(name, p.shape());
      Tensor& v = it->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g->second[i] + weight_decay_ * p[i];
        v[i] = momentum_ * v[i] + gi;
        p[i] -= lr * v[i];
      }
    }
  }

  void step(Tensor& p, const Tensor& g, const std::string& name, double lr) {
    ParamSet ps{{name, std::move(p)}};
    step(ps, ParamSet{{name, g}}, lr);
    p = std::move(ps.begin()->second);
  }

 private:
  double momentum_;
  double weight_decay_;
  ParamSet velocity_;
};

}  // namespace d2r
