#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "d2r/layers.hpp"
#include "d2r/random.hpp"

namespace d2r {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool finite = true;
  std::string diagnostic;

  double max_rel_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed(double tol) const { return finite && max_rel_error() < tol; }
};

/// A scalar loss over a set of named parameter tensors, together with its
/// analytic gradient. `loss` and `gradients` read the tensors through the
/// pointers in `params`, which the checker perturbs in place.
struct ScalarObjective {
  std::function<double()> loss;
  std::function<std::map<std::string, Tensor>()> gradients;
  ParamRefs params;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every entry; otherwise a seeded subset per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

namespace detail {

// Elementwise relative error with a floor proportional to the tensor's scale,
// so entries whose true derivative is ~0 are judged against the tensor's
// magnitude rather than against rounding noise.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace detail

inline GradCheckReport grad_check(const ScalarObjective& obj, const GradCheckOptions& opt = {}) {
  if (!(opt.eps >= 1e-7 && opt.eps <= 1e-4))
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-4]");
  GradCheckReport report;
  const double base = obj.loss();
  if (!std::isfinite(base)) {
    report.finite = false;
    report.diagnostic = "loss is not finite at the check point";
    return report;
  }
  const auto analytic = obj.gradients();
  Rng rng(opt.seed);
  for (const auto& [name, tensor] : obj.params) {
    auto it = analytic.find(name);
    if (it == analytic.end()) {
      report.finite = false;
      report.diagnostic = "no analytic gradient for '" + name + "'";
      return report;
    }
    const Tensor& a = it->second;
    if (a.shape() != tensor->shape()) {
      report.finite = false;
      report.diagnostic = "gradient shape mismatch for '" + name + "'";
      return report;
    }
    std::vector<std::size_t> idx(tensor->size());
    std::iota(idx.begin(), idx.end(), 0);
    if (opt.max_entries_per_tensor && idx.size() > opt.max_entries_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries_per_tensor);
    }
    std::vector<double> numeric(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      double& v = (*tensor)[idx[j]];
      const double saved = v;
      v = saved + opt.eps;
      const double up = obj.loss();
      v = saved - opt.eps;
      const double down = obj.loss();
      v = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.finite = false;
        report.diagnostic = "non-finite loss while perturbing '" + name + "'";
        return report;
      }
      numeric[j] = (up - down) / (2 * opt.eps);
    }
    double scale = 0;
    for (std::size_t j = 0; j < idx.size(); ++j)
      scale = std::max({scale, std::abs(a[idx[j]]), std::abs(numeric[j])});
    const double floor = std::max(1e-3 * scale, 1e-12);
    // Central differences cannot resolve anything below the loss's own rounding
    // noise, a few ulps of |L| divided by eps; such differences count as agreement.
    const double noise = 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(base)) / opt.eps;
    GradCheckEntry e{name, 0, 0, idx.size()};
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double diff = std::abs(a[idx[j]] - numeric[j]);
      e.max_abs_error = std::max(e.max_abs_error, diff);
      if (diff > noise) e.max_rel_error = std::max(e.max_rel_error, detail::relative_error(a[idx[j]], numeric[j], floor));
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

/// Checks a layer's input and parameter gradients under the random linear
/// probe loss L = <r, layer(x)>, r ~ N(0, 1) seeded by `opt.seed`.
template <Differentiable L>
GradCheckReport grad_check(L& layer, const Tensor& point, const GradCheckOptions& opt = {}) {
  Tensor x = point;
  Rng rng(derive_seed(opt.seed, "probe"));
  const Tensor probe = random_normal(layer.forward(x).shape(), rng);
  ScalarObjective obj;
  obj.loss = [&] { return dot(probe.values(), layer.forward(x).values()); };
  obj.gradients = [&] {
    auto g = layer.backward(x, probe);
    auto out = std::move(g.param_grads);
    out.emplace("input", std::move(g.input_grad));
    return out;
  };
  obj.params = layer.parameters();
  obj.params.emplace_back("input", &x);
  return grad_check(obj, opt);
}

}  // namespace d2r
