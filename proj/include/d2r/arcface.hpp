#pragma once

// Additive angular margin (ArcFace) softmax loss over unit-norm descriptors.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "d2r/layers.hpp"
#include "d2r/random.hpp"

namespace d2r {

struct ArcFaceParams {
  Tensor weight;  // (classes, d), rows kept unit-norm
  double margin = 0.3;
  double scale = 30.0;

  static ArcFaceParams create(std::size_t classes, std::size_t dim, double margin, double scale, Rng& rng) {
    if (!(margin >= 0 && margin <= 0.5)) throw ConfigError("arcface: margin must lie in [0, 0.5]");
    if (!(scale > 0)) throw ConfigError("arcface: scale must be > 0");
    ArcFaceParams p{random_normal({classes, dim}, rng), margin, scale};
    p.renormalize();
    return p;
  }

  std::size_t classes() const { return weight.extent(0); }

  void renormalize() {
    const std::size_t C = weight.extent(0), D = weight.extent(1);
    for (std::size_t c = 0; c < C; ++c) {
      std::span<double> row(&weight(c, 0), D);
      const double n = l2_norm(row);
      if (n > 0)
        for (auto& v : row) v /= n;
    }
  }
};

struct ArcFaceResult {
  double loss = 0;
  Tensor d_descriptor;
  Tensor d_weight;
  std::vector<double> logits;
};

inline constexpr double kArcCosClamp = 1e-7;

inline ArcFaceResult arcface_loss(const Tensor& u, std::size_t class_id, const ArcFaceParams& p) {
  const std::size_t C = p.weight.extent(0), D = p.weight.extent(1);
  if (u.size() != D) throw ShapeError("arcface: descriptor dim " + std::to_string(u.size()) + " vs " + std::to_string(D));
  if (class_id >= C) throw DataError("arcface: class id " + std::to_string(class_id) + " out of range");

  std::vector<double> cosines(C), dlogit_dcos(C, p.scale);
  ArcFaceResult r;
  r.logits.resize(C);
  for (std::size_t j = 0; j < C; ++j) {
    cosines[j] = dot({&p.weight(j, 0), D}, u.values());
    r.logits[j] = p.scale * cosines[j];
  }
  {
    // cos(theta + m) = cos(theta) cos(m) - sin(theta) sin(m); the clamp only guards
    // the derivative, where sin(theta) is a divisor.
    const double c = std::clamp(cosines[class_id], -1.0, 1.0);
    const double cc = std::clamp(c, -1.0 + kArcCosClamp, 1.0 - kArcCosClamp);
    const double sin_m = std::sin(p.margin), cos_m = std::cos(p.margin);
    if (std::acos(c) + p.margin <= std::numbers::pi) {
      r.logits[class_id] = p.scale * (c * cos_m - std::sqrt(1.0 - c * c) * sin_m);
      dlogit_dcos[class_id] = p.scale * (cos_m + cc * sin_m / std::sqrt(1.0 - cc * cc));
    } else {
      // Past theta = pi - m, cos(theta + m) turns back up. Continue linearly in
      // cos(theta) instead, meeting the margin curve at -1 so the logit stays
      // continuous and monotone.
      r.logits[class_id] = p.scale * (c - (1.0 - cos_m));
    }
  }
  const double mx = *std::max_element(r.logits.begin(), r.logits.end());
  double z = 0;
  for (double l : r.logits) z += std::exp(l - mx);
  // log-sum-exp relative to the target logit keeps precision when the loss is tiny.
  double rest = 0;
  for (std::size_t j = 0; j < C; ++j)
    if (j != class_id) rest += std::exp(r.logits[j] - r.logits[class_id]);
  r.loss = r.logits[class_id] >= mx ? std::log1p(rest) : std::log(z) + mx - r.logits[class_id];

  r.d_descriptor = Tensor(u.shape());
  r.d_weight = Tensor(p.weight.shape());
  for (std::size_t j = 0; j < C; ++j) {
    const double prob = std::exp(r.logits[j] - mx) / z;
    const double dlogit = prob - (j == class_id ? 1.0 : 0.0);
    const double dcos = dlogit * dlogit_dcos[j];
    for (std::size_t k = 0; k < D; ++k) {
      r.d_descriptor[k] += dcos * p.weight(j, k);
      r.d_weight(j, k) = dcos * u[k];
    }
  }
  return r;
}

}  // namespace d2r
