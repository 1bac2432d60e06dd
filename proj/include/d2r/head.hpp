#pragma once

// Retrieval head: backbone enhancement (squeeze-excite), selective context
// (parallel dilated convolutions with learnable fusion), attentional
// localization (attention map -> thresholded masks -> learnable convex
// fusion), spatial pooling and projection to a unit-norm descriptor.
//
// All maps are (h, w, c); attention maps and masks are (h, w).

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "d2r/layers.hpp"
#include "d2r/params.hpp"
#include "d2r/random.hpp"

namespace d2r {

// ---------------------------------------------------------------------------
// Configuration

struct BackgroundMode {
  enum class Kind { Fixed, ClippedGaussian };
  Kind kind = Kind::ClippedGaussian;
  double value = 0.0;  // Fixed
  double mean = 0.1;   // ClippedGaussian
  double stddev = 0.9;

  static BackgroundMode fixed(double v) { return {Kind::Fixed, v, 0, 0}; }
  static BackgroundMode clipped_gaussian(double mean, double stddev) {
    return {Kind::ClippedGaussian, 0, mean, stddev};
  }
};

enum class PoolingVariant { MaskBased, AttentionBased };

/// How the backward pass treats the step function inside the masks.
/// Exact: the true derivative (zero almost everywhere), so the attention
/// branch receives no gradient through the masks.
/// StraightThrough: forward unchanged, backward uses the derivative of a
/// sigmoid of width `surrogate_temperature` centred on each threshold.
enum class MaskGradient { Exact, StraightThrough };

struct HeadConfig {
  std::size_t num_masks = 2;
  std::vector<double> thresholds;  // empty: uniform i / (T + 1)
  BackgroundMode background = BackgroundMode::clipped_gaussian(0.1, 0.9);
  double gem_p = 3.0;
  std::size_t embed_dim = 2048;
  bool use_backbone_enhancement = true;
  bool use_selective_context = true;
  PoolingVariant pooling = PoolingVariant::MaskBased;
  std::size_t context_branches = 3;  // dilations 1..B
  MaskGradient mask_gradient = MaskGradient::StraightThrough;
  double surrogate_temperature = 0.1;

  std::vector<double> resolved_thresholds() const {
    if (!thresholds.empty()) return thresholds;
    std::vector<double> t(num_masks);
    for (std::size_t i = 0; i < num_masks; ++i) t[i] = double(i + 1) / double(num_masks + 1);
    return t;
  }

  void validate() const {
    if (num_masks < 1) throw ConfigError("head: num_masks must be >= 1");
    if (embed_dim < 1) throw ConfigError("head: embed_dim must be >= 1");
    if (!(gem_p >= 1.0)) throw ConfigError("head: gem_p must be >= 1");
    if (context_branches < 2) throw ConfigError("head: selective context needs >= 2 branches");
    const auto t = resolved_thresholds();
    if (t.size() != num_masks) throw ConfigError("head: thresholds count must equal num_masks");
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!(t[i] >= 0.0 && t[i] < 1.0)) throw ConfigError("head: thresholds must lie in [0, 1)");
      if (i && !(t[i] > t[i - 1])) throw ConfigError("head: thresholds must be strictly increasing");
    }
    if (background.kind == BackgroundMode::Kind::Fixed && !(background.value >= 0 && background.value <= 1))
      throw ConfigError("head: fixed background must lie in [0, 1]");
    if (background.kind == BackgroundMode::Kind::ClippedGaussian && !(background.stddev >= 0))
      throw ConfigError("head: background stddev must be >= 0");
    if (!(surrogate_temperature > 0)) throw ConfigError("head: surrogate_temperature must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = nlohmann::json{
      {"num_masks", c.num_masks},
      {"thresholds", c.thresholds.empty() ? nlohmann::json("uniform") : nlohmann::json(c.thresholds)},
      {"gem_p", c.gem_p},
      {"embed_dim", c.embed_dim},
      {"use_backbone_enhancement", c.use_backbone_enhancement},
      {"use_selective_context", c.use_selective_context},
      {"pooling", c.pooling == PoolingVariant::MaskBased ? "mask" : "attention"},
      {"context_branches", c.context_branches},
      {"mask_gradient", c.mask_gradient == MaskGradient::Exact ? "exact" : "straight_through"},
      {"surrogate_temperature", c.surrogate_temperature},
  };
  if (c.background.kind == BackgroundMode::Kind::Fixed)
    j["background"] = {{"kind", "fixed"}, {"value", c.background.value}};
  else
    j["background"] = {{"kind", "clipped_gaussian"}, {"mean", c.background.mean}, {"std", c.background.stddev}};
}

inline void from_json(const nlohmann::json& j, HeadConfig& c) {
  static const std::vector<std::string> known = {
      "num_masks", "thresholds", "gem_p", "embed_dim", "use_backbone_enhancement", "use_selective_context",
      "pooling", "context_branches", "mask_gradient", "surrogate_temperature", "background"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("head config: unknown key '" + k + "'");
  c = HeadConfig{};
  c.num_masks = j.value("num_masks", c.num_masks);
  if (j.contains("thresholds") && !j["thresholds"].is_string())
    c.thresholds = j["thresholds"].get<std::vector<double>>();
  c.gem_p = j.value("gem_p", c.gem_p);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.use_backbone_enhancement = j.value("use_backbone_enhancement", c.use_backbone_enhancement);
  c.use_selective_context = j.value("use_selective_context", c.use_selective_context);
  const auto pooling = j.value("pooling", std::string("mask"));
  if (pooling != "mask" && pooling != "attention") throw ConfigError("head config: pooling must be mask|attention");
  c.pooling = pooling == "mask" ? PoolingVariant::MaskBased : PoolingVariant::AttentionBased;
  c.context_branches = j.value("context_branches", c.context_branches);
  const auto mg = j.value("mask_gradient", std::string("straight_through"));
  if (mg != "exact" && mg != "straight_through") throw ConfigError("head config: mask_gradient must be exact|straight_through");
  c.mask_gradient = mg == "exact" ? MaskGradient::Exact : MaskGradient::StraightThrough;
  c.surrogate_temperature = j.value("surrogate_temperature", c.surrogate_temperature);
  if (j.contains("background")) {
    const auto& b = j["background"];
    const auto kind = b.value("kind", std::string("clipped_gaussian"));
    if (kind == "fixed")
      c.background = BackgroundMode::fixed(b.value("value", 0.0));
    else if (kind == "clipped_gaussian")
      c.background = BackgroundMode::clipped_gaussian(b.value("mean", 0.1), b.value("std", 0.9));
    else
      throw ConfigError("head config: background.kind must be fixed|clipped_gaussian");
  }
  c.validate();
}

// ---------------------------------------------------------------------------
// Attention map

struct AttentionTrace {
  Tensor logits;  // (h, w) 1x1-conv output
  Tensor attention;
};

inline AttentionTrace attention_map_trace(const Tensor& features, const Tensor& weight, const Tensor& bias) {
  if (features.rank() != 3) throw ShapeError("attention_map: features must be rank 3 (h,w,c)");
  const Tensor conv = conv2d(features, weight, &bias, ConvSpec{});
  const Tensor logits = conv.reshaped({features.extent(0), features.extent(1)});
  return {logits, minmax_normalize(softplus(logits))};
}

/// A = minmax(softplus(conv1x1(F))). `weight` is (1, c, 1, 1), `bias` is (1).
inline Tensor attention_map(const Tensor& features, const Tensor& weight, const Tensor& bias) {
  return attention_map_trace(features, weight, bias).attention;
}

// ---------------------------------------------------------------------------
// Masks

inline double draw_clipped_gaussian(Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> nd(mean, stddev);
  return std::clamp(nd(rng), 0.0, 1.0);
}

/// Per-position, per-mask background values for one forward pass.
inline std::vector<Tensor> draw_background(const BackgroundMode& mode, std::size_t num_masks, const Shape& map_shape,
                                           Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(num_masks);
  for (std::size_t i = 0; i < num_masks; ++i) {
    if (mode.kind == BackgroundMode::Kind::Fixed) {
      out.emplace_back(map_shape, mode.value);
    } else {
      Tensor b(map_shape);
      for (auto& v : b.values()) v = draw_clipped_gaussian(rng, mode.mean, mode.stddev);
      out.push_back(std::move(b));
    }
  }
  return out;
}

/// M_i(p) = 1 if A(p) >= tau_i else beta_i(p).
inline std::vector<Tensor> threshold_masks(const Tensor& attention, std::span<const double> thresholds,
                                           std::span<const Tensor> background) {
  if (background.size() != thresholds.size()) throw ShapeError("threshold_masks: one background map per threshold");
  std::vector<Tensor> masks;
  masks.reserve(thresholds.size());
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    require_same_shape(attention, background[i], "threshold_masks");
    Tensor m(attention.shape());
    for (std::size_t p = 0; p < m.size(); ++p) m[p] = attention[p] >= thresholds[i] ? 1.0 : background[i][p];
    masks.push_back(std::move(m));
  }
  return masks;
}

inline std::vector<Tensor> make_masks(const Tensor& attention, std::span<const double> thresholds,
                                      const BackgroundMode& background, std::uint64_t seed) {
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1])) throw ShapeError("make_masks: thresholds must be strictly increasing");
  Rng rng(seed);
  const auto betas = draw_background(background, thresholds.size(), attention.shape(), rng);
  return threshold_masks(attention, thresholds, betas);
}

/// Binary foreground indicator A >= tau (background is 0 whatever beta was drawn).
inline Tensor foreground_map(const Tensor& attention, double threshold) {
  return map(attention, [threshold](double a) { return a >= threshold ? 1.0 : 0.0; });
}

/// M ⊙ F over spatial positions, broadcast over channels.
inline Tensor apply_mask(const Tensor& mask, const Tensor& features) {
  const std::size_t N = mask.size(), C = features.extent(2);
  if (features.extent(0) * features.extent(1) != N) throw ShapeError("apply_mask: spatial extents differ");
  Tensor out(features.shape());
  for (std::size_t p = 0; p < N; ++p)
    for (std::size_t c = 0; c < C; ++c) out[p * C + c] = mask[p] * features[p * C + c];
  return out;
}

// ---------------------------------------------------------------------------
// Learnable convex fusion: H = sum_i w_i F_i / sum_i w_i, w_i = softplus(alpha_i).

inline Tensor fusion_weights(const Tensor& alphas) { return softplus(alphas); }

inline Tensor fuse(std::span<const Tensor> tensors, const Tensor& alphas) {
  if (tensors.empty()) throw ShapeError("fuse: empty tensor list");
  if (alphas.size() != tensors.size())
    throw ShapeError("fuse: " + std::to_string(alphas.size()) + " alphas for " + std::to_string(tensors.size()) + " tensors");
  const Tensor w = fusion_weights(alphas);
  const double total = sum(w);
  Tensor out(tensors[0].shape());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    require_same_shape(tensors[0], tensors[i], "fuse");
    axpy(w[i] / total, tensors[i], out);
  }
  return out;
}

struct FuseGradients {
  std::vector<Tensor> inputs;
  Tensor alphas;
};

inline FuseGradients fuse_backward(std::span<const Tensor> tensors, const Tensor& alphas, const Tensor& dy) {
  const Tensor w = fusion_weights(alphas);
  const double total = sum(w);
  const Tensor fused = fuse(tensors, alphas);
  FuseGradients g{{}, Tensor(alphas.shape())};
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    g.inputs.push_back(scale(dy, w[i] / total));
    // dH/dw_i = (F_i - H) / S; dw_i/dalpha_i = sigmoid(alpha_i)
    double dw = 0;
    for (std::size_t k = 0; k < dy.size(); ++k) dw += dy[k] * (tensors[i][k] - fused[k]);
    g.alphas[i] = dw / total * sigmoid(alphas[i]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Backbone enhancement: squeeze-and-excitation channel gating.

inline std::size_t se_reduced_channels(std::size_t channels) {
  const std::size_t r = channels < 64 ? 4 : 16;
  return std::max<std::size_t>(1, channels / r);
}

struct SeTrace {
  Tensor squeezed;  // GAP(F), (c)
  Tensor hidden_pre;
  Tensor hidden;
  Tensor gates;
  Tensor output;
};

inline SeTrace se_enhance_trace(const Tensor& f, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2) {
  SeTrace t;
  t.squeezed = global_avg_pool(f);
  t.hidden_pre = linear(w1, &b1, t.squeezed.values());
  t.hidden = relu(t.hidden_pre);
  t.gates = sigmoid(linear(w2, &b2, t.hidden.values()));
  const std::size_t N = f.extent(0) * f.extent(1), C = f.extent(2);
  t.output = Tensor(f.shape());
  for (std::size_t p = 0; p < N; ++p)
    for (std::size_t c = 0; c < C; ++c) t.output[p * C + c] = f[p * C + c] * t.gates[c];
  return t;
}

inline Tensor se_enhance(const Tensor& f, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2) {
  return se_enhance_trace(f, w1, b1, w2, b2).output;
}

struct SeGradients {
  Tensor input, w1, b1, w2, b2;
};

inline SeGradients se_enhance_backward(const Tensor& f, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                                       const Tensor& b2, const Tensor& dy) {
  const SeTrace t = se_enhance_trace(f, w1, b1, w2, b2);
  const std::size_t N = f.extent(0) * f.extent(1), C = f.extent(2);
  SeGradients g;
  g.input = Tensor(f.shape());
  Tensor dgate({C});
  for (std::size_t p = 0; p < N; ++p)
    for (std::size_t c = 0; c < C; ++c) {
      g.input[p * C + c] = dy[p * C + c] * t.gates[c];
      dgate[c] += dy[p * C + c] * f[p * C + c];
    }
  Tensor dz2({C});
  for (std::size_t c = 0; c < C; ++c) dz2[c] = dgate[c] * t.gates[c] * (1.0 - t.gates[c]);
  auto l2 = linear_backward(w2, t.hidden.values(), dz2.values());
  const Tensor dz1 = relu_backward(t.hidden_pre, l2.input);
  auto l1 = linear_backward(w1, t.squeezed.values(), dz1.values());
  for (std::size_t p = 0; p < N; ++p)
    for (std::size_t c = 0; c < C; ++c) g.input[p * C + c] += l1.input[c] / double(N);
  g.w1 = std::move(l1.weight);
  g.b1 = std::move(l1.bias);
  g.w2 = std::move(l2.weight);
  g.b2 = std::move(l2.bias);
  return g;
}

// ---------------------------------------------------------------------------
// Selective context: B parallel 3x3 convolutions with dilation b+1, each
// followed by a per-channel affine normalization and relu, fused with the
// same learnable convex combination as the masks.

struct ContextBranch {
  const Tensor* kernel;  // (c, c, 3, 3)
  const Tensor* bias;    // (c)
  const Tensor* gamma;   // (c)
  const Tensor* shift;   // (c)
};

struct ContextTrace {
  std::vector<Tensor> conv;       // pre-normalization
  std::vector<Tensor> activated;  // post-relu branch outputs
  Tensor output;
};

inline Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& shift) {
  const std::size_t C = x.extent(2), N = x.size() / C;
  Tensor y(x.shape());
  for (std::size_t p = 0; p < N; ++p)
    for (std::size_t c = 0; c < C; ++c) y[p * C + c] = gamma[c] * x[p * C + c] + shift[c];
  return y;
}

inline ContextTrace selective_context_trace(const Tensor& f, std::span<const ContextBranch> branches, const Tensor& alphas) {
  ContextTrace t;
  for (std::size_t b = 0; b < branches.size(); ++b) {
    const ConvSpec spec{1, b + 1, b + 1};
    t.conv.push_back(conv2d(f, *branches[b].kernel, branches[b].bias, spec));
    t.activated.push_back(relu(channel_affine(t.conv.back(), *branches[b].gamma, *branches[b].shift)));
  }
  t.output = fuse(t.activated, alphas);
  return t;
}

inline Tensor selective_context(const Tensor& f, std::span<const ContextBranch> branches, const Tensor& alphas) {
  return selective_context_trace(f, branches, alphas).output;
}

struct ContextBranchGradients {
  Tensor kernel, bias, gamma, shift;
};

struct ContextGradients {
  Tensor input;
  std::vector<ContextBranchGradients> branches;
  Tensor alphas;
};

inline ContextGradients selective_context_backward(const Tensor& f, std::span<const ContextBranch> branches,
                                                   const Tensor& alphas, const Tensor& dy) {
  const ContextTrace t = selective_context_trace(f, branches, alphas);
  auto fg = fuse_backward(t.activated, alphas, dy);
  ContextGradients g{Tensor(f.shape()), {}, std::move(fg.alphas)};
  const std::size_t C = f.extent(2);
  for (std::size_t b = 0; b < branches.size(); ++b) {
    const Tensor& z = t.conv[b];
    const Tensor& gamma = *branches[b].gamma;
    const Tensor& shift = *branches[b].shift;
    ContextBranchGradients bg{{}, {}, Tensor({C}), Tensor({C})};
    Tensor dz(z.shape());
    for (std::size_t k = 0; k < z.size(); ++k) {
      const std::size_t c = k % C;
      const double pre = gamma[c] * z[k] + shift[c];
      if (pre <= 0) continue;
      const double d = fg.inputs[b][k];
      bg.gamma[c] += d * z[k];
      bg.shift[c] += d;
      dz[k] = d * gamma[c];
    }
    auto cg = conv2d_backward(f, *branches[b].kernel, dz, ConvSpec{1, b + 1, b + 1});
    axpy(1.0, cg.input, g.input);
    bg.kernel = std::move(cg.kernel);
    bg.bias = std::move(cg.bias);
    g.branches.push_back(std::move(bg));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Attention-based pooling baseline: a learnable query attends over positions,
// A = softmax_p(q . F(p)); positions are reweighted by N * A(p) and pooled with
// GeM. With p = 1 (GAP) the result is exactly sum_p A(p) F(p).

struct AttentionPoolTrace {
  Tensor weights;   // softmax over positions, (h, w)
  Tensor weighted;  // N * A(p) * F(p)
  Tensor pooled;
};

inline Tensor position_softmax(const Tensor& f, const Tensor& query) {
  const std::size_t C = f.extent(2), N = f.size() / C;
  if (query.size() != C) throw ShapeError("attention_pool: query size must equal channel count");
  Tensor logits({f.extent(0), f.extent(1)});
  for (std::size_t p = 0; p < N; ++p) logits[p] = dot({&f[p * C], C}, query.values());
  const double m = *std::max_element(logits.values().begin(), logits.values().end());
  double z = 0;
  for (auto& v : logits.values()) z += (v = std::exp(v - m));
  for (auto& v : logits.values()) v /= z;
  return logits;
}

inline AttentionPoolTrace attention_pool_trace(const Tensor& f, const Tensor& query, double p) {
  AttentionPoolTrace t;
  t.weights = position_softmax(f, query);
  const std::size_t N = t.weights.size();
  Tensor nw = scale(t.weights, double(N));
  t.weighted = apply_mask(nw, f);
  t.pooled = gem_pool(t.weighted, p);
  return t;
}

inline Tensor attention_pool_baseline(const Tensor& f, const Tensor& query, double p) {
  return attention_pool_trace(f, query, p).pooled;
}

struct AttentionPoolGradients {
  Tensor input;
  Tensor query;
};

inline AttentionPoolGradients attention_pool_backward(const Tensor& f, const Tensor& query, double p, const Tensor& dy) {
  const AttentionPoolTrace t = attention_pool_trace(f, query, p);
  const std::size_t C = f.extent(2), N = t.weights.size();
  const Tensor dweighted = gem_pool_backward(t.weighted, p, dy);
  AttentionPoolGradients g{Tensor(f.shape()), Tensor(query.shape())};
  std::vector<double> da(N, 0.0);
  for (std::size_t q = 0; q < N; ++q)
    for (std::size_t c = 0; c < C; ++c) {
      g.input[q * C + c] = double(N) * t.weights[q] * dweighted[q * C + c];
      da[q] += double(N) * dweighted[q * C + c] * f[q * C + c];
    }
  double mean_da = 0;
  for (std::size_t q = 0; q < N; ++q) mean_da += t.weights[q] * da[q];
  for (std::size_t q = 0; q < N; ++q) {
    const double dlogit = t.weights[q] * (da[q] - mean_da);
    for (std::size_t c = 0; c < C; ++c) {
      g.query[c] += dlogit * f[q * C + c];
      g.input[q * C + c] += dlogit * query[c];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Bounding boxes of 4-connected foreground components.

struct BoundingBox {
  std::size_t row_min, col_min, row_max, col_max;

  std::size_t area() const { return (row_max - row_min + 1) * (col_max - col_min + 1); }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline std::vector<BoundingBox> extract_boxes(const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("extract_boxes: mask must be rank 2");
  const std::size_t H = mask.extent(0), W = mask.extent(1);
  std::vector<char> seen(mask.size(), 0);
  std::vector<BoundingBox> boxes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (seen[start] || !(mask[start] >= 0.5)) continue;
    BoundingBox b{start / W, start % W, start / W, start % W};
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      const std::size_t r = cur / W, c = cur % W;
      b.row_min = std::min(b.row_min, r);
      b.row_max = std::max(b.row_max, r);
      b.col_min = std::min(b.col_min, c);
      b.col_max = std::max(b.col_max, c);
      auto visit = [&](std::size_t rr, std::size_t cc) {
        const std::size_t k = rr * W + cc;
        if (!seen[k] && mask[k] >= 0.5) {
          seen[k] = 1;
          stack.push_back(k);
        }
      };
      if (r > 0) visit(r - 1, c);
      if (r + 1 < H) visit(r + 1, c);
      if (c > 0) visit(r, c - 1);
      if (c + 1 < W) visit(r, c + 1);
    }
    boxes.push_back(b);
  }
  std::stable_sort(boxes.begin(), boxes.end(), [](const BoundingBox& a, const BoundingBox& b) {
    if (a.area() != b.area()) return a.area() > b.area();
    return std::tie(a.row_min, a.col_min) < std::tie(b.row_min, b.col_min);
  });
  return boxes;
}

}  // namespace d2r
