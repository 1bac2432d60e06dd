#pragma once

// Full head composition over a backbone feature map F:
//
//   F -> [SE] -> [selective context] -> attentional localization -> GeM
//     -> projection (d x c) -> L2 normalize
//
// or, for the attention-based pooling baseline, the localization and GeM
// stages are replaced by query-attention pooling. Parameters live in a
// ParamSet under the "head." prefix.

#include <string>
#include <vector>

#include "d2r/head.hpp"

namespace d2r {

namespace head_names {
inline const std::string se_w1 = "head.se.fc1.weight";
inline const std::string se_b1 = "head.se.fc1.bias";
inline const std::string se_w2 = "head.se.fc2.weight";
inline const std::string se_b2 = "head.se.fc2.bias";
inline const std::string sc_alpha = "head.sc.alpha";
inline const std::string al_weight = "head.al.attn.weight";
inline const std::string al_bias = "head.al.attn.bias";
inline const std::string al_alpha = "head.al.alpha";
inline const std::string pool_query = "head.pool.query";
inline const std::string proj = "head.proj.weight";
inline std::string sc_branch(std::size_t b, const char* what) {
  return "head.sc.b" + std::to_string(b) + "." + what;
}
}  // namespace head_names

inline ParamSet init_head_params(const HeadConfig& cfg, std::size_t channels, Rng& rng) {
  cfg.validate();
  namespace n = head_names;
  ParamSet ps;
  const std::size_t C = channels;
  if (cfg.use_backbone_enhancement) {
    const std::size_t R = se_reduced_channels(C);
    ps[n::se_w1] = random_normal({R, C}, rng, std::sqrt(2.0 / double(C)));
    ps[n::se_b1] = Tensor({R});
    ps[n::se_w2] = random_normal({C, R}, rng, std::sqrt(1.0 / double(R)));
    ps[n::se_b2] = Tensor({C});
  }
  if (cfg.use_selective_context) {
    for (std::size_t b = 0; b < cfg.context_branches; ++b) {
      ps[n::sc_branch(b, "weight")] = random_normal({C, C, 3, 3}, rng, std::sqrt(2.0 / double(9 * C)));
      ps[n::sc_branch(b, "bias")] = Tensor({C});
      ps[n::sc_branch(b, "gamma")] = Tensor({C}, 1.0);
      ps[n::sc_branch(b, "shift")] = Tensor({C});
    }
    ps[n::sc_alpha] = Tensor({cfg.context_branches});
  }
  if (cfg.pooling == PoolingVariant::MaskBased) {
    ps[n::al_weight] = random_normal({1, C, 1, 1}, rng, std::sqrt(1.0 / double(C)));
    ps[n::al_bias] = Tensor({1});
    ps[n::al_alpha] = Tensor({cfg.num_masks});
  } else {
    ps[n::pool_query] = random_normal({C}, rng, std::sqrt(1.0 / double(C)));
  }
  ps[n::proj] = random_normal({cfg.embed_dim, C}, rng, std::sqrt(1.0 / double(C)));
  return ps;
}

inline std::vector<ContextBranch> context_branches(const ParamSet& ps, std::size_t count) {
  std::vector<ContextBranch> out;
  for (std::size_t b = 0; b < count; ++b) {
    namespace n = head_names;
    out.push_back({&param(ps, n::sc_branch(b, "weight")), &param(ps, n::sc_branch(b, "bias")),
                   &param(ps, n::sc_branch(b, "gamma")), &param(ps, n::sc_branch(b, "shift"))});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attentional localization

inline Tensor attentional_localization(const Tensor& features, const Tensor& attn_weight, const Tensor& attn_bias,
                                       const Tensor& alphas, std::span<const double> thresholds,
                                       std::span<const Tensor> background) {
  const Tensor a = attention_map(features, attn_weight, attn_bias);
  const auto masks = threshold_masks(a, thresholds, background);
  std::vector<Tensor> masked;
  for (const auto& m : masks) masked.push_back(apply_mask(m, features));
  return fuse(masked, alphas);
}

/// Seeded form: background drawn from `cfg.background` with `seed`.
inline Tensor attentional_localization(const Tensor& features, const Tensor& attn_weight, const Tensor& attn_bias,
                                       const Tensor& alphas, const HeadConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto thresholds = cfg.resolved_thresholds();
  const auto bg = draw_background(cfg.background, thresholds.size(), {features.extent(0), features.extent(1)}, rng);
  return attentional_localization(features, attn_weight, attn_bias, alphas, thresholds, bg);
}

struct LocalizationGradients {
  Tensor input;
  Tensor attn_weight;
  Tensor attn_bias;
  Tensor alphas;
};

inline LocalizationGradients attentional_localization_backward(const Tensor& features, const Tensor& attn_weight,
                                                               const Tensor& attn_bias, const Tensor& alphas,
                                                               std::span<const double> thresholds,
                                                               std::span<const Tensor> background, const Tensor& dy,
                                                               MaskGradient mode, double temperature) {
  const std::size_t H = features.extent(0), W = features.extent(1), C = features.extent(2), N = H * W;
  const AttentionTrace at = attention_map_trace(features, attn_weight, attn_bias);
  const auto masks = threshold_masks(at.attention, thresholds, background);
  std::vector<Tensor> masked;
  for (const auto& m : masks) masked.push_back(apply_mask(m, features));
  auto fg = fuse_backward(masked, alphas, dy);

  LocalizationGradients g{Tensor(features.shape()), Tensor(attn_weight.shape()), Tensor(attn_bias.shape()),
                          std::move(fg.alphas)};
  Tensor d_attention({H, W});
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const Tensor& dmasked = fg.inputs[i];
    for (std::size_t p = 0; p < N; ++p) {
      double dm = 0;
      for (std::size_t c = 0; c < C; ++c) {
        g.input[p * C + c] += masks[i][p] * dmasked[p * C + c];
        dm += dmasked[p * C + c] * features[p * C + c];
      }
      if (mode == MaskGradient::StraightThrough) {
        const double s = sigmoid((at.attention[p] - thresholds[i]) / temperature);
        d_attention[p] += dm * (1.0 - background[i][p]) * s * (1.0 - s) / temperature;
      }
    }
  }
  if (mode == MaskGradient::StraightThrough) {
    const Tensor soft = softplus(at.logits);
    const Tensor dlogits = softplus_backward(at.logits, minmax_normalize_backward(soft, d_attention));
    auto cg = conv2d_backward(features, attn_weight, dlogits.reshaped({H, W, 1}), ConvSpec{});
    axpy(1.0, cg.input, g.input);
    g.attn_weight = std::move(cg.kernel);
    g.attn_bias = std::move(cg.bias);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Whole head

struct HeadTrace {
  Tensor input;
  Tensor enhanced;
  Tensor context;
  Tensor attention;               // MaskBased only
  std::vector<Tensor> background;  // beta maps used for this pass
  Tensor localized;               // MaskBased only
  Tensor pooled;
  Tensor projected;
  Tensor descriptor;
};

/// Background maps for one pass: resampled when training with a clipped
/// Gaussian background, zeros at inference; Fixed(v) is used as-is.
inline std::vector<Tensor> head_background(const HeadConfig& cfg, std::size_t h, std::size_t w, bool training,
                                           Rng* rng) {
  if (cfg.background.kind == BackgroundMode::Kind::ClippedGaussian && training) {
    if (!rng) throw std::invalid_argument("head_background: training draws need an rng");
    return draw_background(cfg.background, cfg.num_masks, {h, w}, *rng);
  }
  const double v = cfg.background.kind == BackgroundMode::Kind::Fixed ? cfg.background.value : 0.0;
  return std::vector<Tensor>(cfg.num_masks, Tensor({h, w}, v));
}

inline HeadTrace head_forward(const HeadConfig& cfg, const ParamSet& ps, const Tensor& features,
                              std::vector<Tensor> background) {
  namespace n = head_names;
  if (features.rank() != 3) throw ShapeError("head: features must be rank 3 (h,w,c)");
  HeadTrace t;
  t.input = features;
  t.enhanced = cfg.use_backbone_enhancement
                   ? se_enhance(features, param(ps, n::se_w1), param(ps, n::se_b1), param(ps, n::se_w2), param(ps, n::se_b2))
                   : features;
  if (cfg.use_selective_context) {
    const auto br = context_branches(ps, cfg.context_branches);
    t.context = selective_context(t.enhanced, br, param(ps, n::sc_alpha));
  } else {
    t.context = t.enhanced;
  }
  if (cfg.pooling == PoolingVariant::MaskBased) {
    const auto thresholds = cfg.resolved_thresholds();
    t.background = std::move(background);
    t.attention = attention_map(t.context, param(ps, n::al_weight), param(ps, n::al_bias));
    t.localized = attentional_localization(t.context, param(ps, n::al_weight), param(ps, n::al_bias),
                                           param(ps, n::al_alpha), thresholds, t.background);
    t.pooled = gem_pool(t.localized, cfg.gem_p);
  } else {
    t.pooled = attention_pool_baseline(t.context, param(ps, n::pool_query), cfg.gem_p);
  }
  t.projected = linear(param(ps, n::proj), nullptr, t.pooled.values());
  t.descriptor = l2_normalize(t.projected);
  return t;
}

/// Returns parameter gradients (head.* keys); writes dL/dF to `d_input` when given.
inline ParamSet head_backward(const HeadConfig& cfg, const ParamSet& ps, const HeadTrace& t, const Tensor& d_descriptor,
                              Tensor* d_input = nullptr) {
  namespace n = head_names;
  ParamSet g;
  const Tensor d_projected = l2_normalize_backward(t.projected, d_descriptor);
  auto lin = linear_backward(param(ps, n::proj), t.pooled.values(), d_projected.values());
  g[n::proj] = std::move(lin.weight);

  Tensor d_context;
  if (cfg.pooling == PoolingVariant::MaskBased) {
    const Tensor d_localized = gem_pool_backward(t.localized, cfg.gem_p, lin.input);
    const auto thresholds = cfg.resolved_thresholds();
    auto lg = attentional_localization_backward(t.context, param(ps, n::al_weight), param(ps, n::al_bias),
                                                param(ps, n::al_alpha), thresholds, t.background, d_localized,
                                                cfg.mask_gradient, cfg.surrogate_temperature);
    d_context = std::move(lg.input);
    g[n::al_weight] = std::move(lg.attn_weight);
    g[n::al_bias] = std::move(lg.attn_bias);
    g[n::al_alpha] = std::move(lg.alphas);
  } else {
    auto ag = attention_pool_backward(t.context, param(ps, n::pool_query), cfg.gem_p, lin.input);
    d_context = std::move(ag.input);
    g[n::pool_query] = std::move(ag.query);
  }

  Tensor d_enhanced;
  if (cfg.use_selective_context) {
    const auto br = context_branches(ps, cfg.context_branches);
    auto cg = selective_context_backward(t.enhanced, br, param(ps, n::sc_alpha), d_context);
    d_enhanced = std::move(cg.input);
    for (std::size_t b = 0; b < cfg.context_branches; ++b) {
      g[n::sc_branch(b, "weight")] = std::move(cg.branches[b].kernel);
      g[n::sc_branch(b, "bias")] = std::move(cg.branches[b].bias);
      g[n::sc_branch(b, "gamma")] = std::move(cg.branches[b].gamma);
      g[n::sc_branch(b, "shift")] = std::move(cg.branches[b].shift);
    }
    g[n::sc_alpha] = std::move(cg.alphas);
  } else {
    d_enhanced = std::move(d_context);
  }

  if (cfg.use_backbone_enhancement) {
    auto sg = se_enhance_backward(t.input, param(ps, n::se_w1), param(ps, n::se_b1), param(ps, n::se_w2),
                                  param(ps, n::se_b2), d_enhanced);
    g[n::se_w1] = std::move(sg.w1);
    g[n::se_b1] = std::move(sg.b1);
    g[n::se_w2] = std::move(sg.w2);
    g[n::se_b2] = std::move(sg.b2);
    if (d_input) *d_input = std::move(sg.input);
  } else if (d_input) {
    *d_input = std::move(d_enhanced);
  }
  return g;
}

}  // namespace d2r
