#pragma once

// Toy backbone and the full embedding model u = f(x), composing the
// backbone, enhancement, context, localization and pooling stages.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2r/ckt_io.hpp"
#include "d2r/image.hpp"
#include "d2r/retrieval_head.hpp"
#include "d2r/whitening.hpp"

namespace d2r {

inline constexpr std::size_t kMinImageExtent = 8;
inline const std::vector<double> kDefaultScales = {0.4, 0.5, 0.7, 1.0, 1.4};

struct ModelConfig {
  std::size_t channels = 32;  // backbone output width C
  HeadConfig head;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"channels", c.channels}, {"head", c.head}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  for (const auto& [k, v] : j.items())
    if (k != "channels" && k != "head") throw ConfigError("model config: unknown key '" + k + "'");
  c = ModelConfig{};
  c.channels = j.value("channels", c.channels);
  if (c.channels < 1) throw ConfigError("model config: channels must be >= 1");
  if (j.contains("head")) c.head = j["head"].get<HeadConfig>();
}

namespace backbone_names {
inline std::string weight(std::size_t block) { return "backbone.conv" + std::to_string(block + 1) + ".weight"; }
inline std::string bias(std::size_t block) { return "backbone.conv" + std::to_string(block + 1) + ".bias"; }
inline const std::string prefix = "backbone.";
}  // namespace backbone_names

inline std::vector<std::size_t> backbone_widths(std::size_t out_channels) { return {3, 16, 32, out_channels}; }

struct BackboneTrace {
  std::vector<Tensor> inputs;  // block inputs
  std::vector<Tensor> conv;    // pre-relu
  Tensor output;
};

/// Three blocks of 3x3 conv (pad 1) -> relu -> 2x2 stride-2 average pool.
inline BackboneTrace backbone_forward(const ParamSet& ps, const Tensor& image) {
  BackboneTrace t;
  Tensor x = image;
  for (std::size_t b = 0; b < 3; ++b) {
    t.inputs.push_back(x);
    t.conv.push_back(conv2d(x, param(ps, backbone_names::weight(b)), &param(ps, backbone_names::bias(b)), ConvSpec{1, 1, 1}));
    x = avg_pool2(relu(t.conv.back()));
  }
  t.output = std::move(x);
  return t;
}

inline ParamSet backbone_backward(const ParamSet& ps, const BackboneTrace& t, Tensor d_output) {
  ParamSet g;
  for (std::size_t b = 3; b-- > 0;) {
    const Tensor act = relu(t.conv[b]);
    const Tensor dz = relu_backward(t.conv[b], avg_pool2_backward(act, d_output));
    auto cg = conv2d_backward(t.inputs[b], param(ps, backbone_names::weight(b)), dz, ConvSpec{1, 1, 1}, b > 0);
    g[backbone_names::weight(b)] = std::move(cg.kernel);
    g[backbone_names::bias(b)] = std::move(cg.bias);
    d_output = std::move(cg.input);
  }
  return g;
}

struct ModelTrace {
  BackboneTrace backbone;
  HeadTrace head;
};

/// Mean of unit descriptors, re-L2-normalized.
inline Tensor mean_renormalized(std::span<const Tensor> descriptors) {
  if (descriptors.empty()) throw DataError("mean_renormalized: no descriptors");
  Tensor acc = descriptors[0];
  for (std::size_t i = 1; i < descriptors.size(); ++i) axpy(1.0, descriptors[i], acc);
  return l2_normalize(acc);
}

class EmbeddingModel {
 public:
  ModelConfig config;
  ParamSet params;
  bool frozen_backbone = false;
  std::optional<WhitenTransform> whitening;

  static EmbeddingModel create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.head.validate();
    EmbeddingModel m;
    m.config = cfg;
    Rng rng(derive_seed(seed, "model-init"));
    const auto widths = backbone_widths(cfg.channels);
    for (std::size_t b = 0; b < 3; ++b) {
      const double stddev = std::sqrt(2.0 / double(9 * widths[b]));
      m.params[backbone_names::weight(b)] = random_normal({widths[b + 1], widths[b], 3, 3}, rng, stddev);
      m.params[backbone_names::bias(b)] = Tensor({widths[b + 1]}, 0.01);
    }
    for (auto& [k, v] : init_head_params(cfg.head, cfg.channels, rng)) m.params.emplace(k, std::move(v));
    return m;
  }

  static void check_image(const Tensor& image) {
    if (image.rank() != 3 || image.extent(2) != 3)
      throw DataError("embed: image must be (h, w, 3), got " + shape_str(image.shape()));
    if (image.extent(0) < kMinImageExtent || image.extent(1) < kMinImageExtent)
      throw DataError("embed: image " + std::to_string(image.extent(1)) + "x" + std::to_string(image.extent(0)) +
                      " is smaller than the 8px minimum");
  }

  Tensor features(const Tensor& image) const {
    check_image(image);
    return backbone_forward(params, image).output;
  }

  /// Training-mode forward; `rng` supplies background draws.
  ModelTrace forward(const Tensor& image, bool training, Rng* rng) const {
    check_image(image);
    ModelTrace t;
    t.backbone = backbone_forward(params, image);
    const Tensor& f = t.backbone.output;
    auto bg = config.head.pooling == PoolingVariant::MaskBased
                  ? head_background(config.head, f.extent(0), f.extent(1), training, rng)
                  : std::vector<Tensor>{};
    t.head = head_forward(config.head, params, f, std::move(bg));
    return t;
  }

  /// Gradients for every parameter. With a frozen backbone the backbone
  /// entries are exact zeros and the backbone backward pass is skipped.
  ParamSet backward(const ModelTrace& t, const Tensor& d_descriptor) const {
    Tensor d_features;
    ParamSet g = head_backward(config.head, params, t.head, d_descriptor, frozen_backbone ? nullptr : &d_features);
    if (frozen_backbone) {
      for (const auto& [k, v] : params)
        if (k.starts_with(backbone_names::prefix)) g.emplace(k, Tensor(v.shape()));
    } else {
      for (auto& [k, v] : backbone_backward(params, t.backbone, std::move(d_features))) g.emplace(k, std::move(v));
    }
    return g;
  }

  /// Inference descriptor of the head, before whitening.
  Tensor raw_descriptor(const Tensor& image) const { return forward(image, false, nullptr).head.descriptor; }

  Tensor embed(const Tensor& image) const {
    Tensor u = raw_descriptor(image);
    return whitening ? whiten_apply(u, *whitening) : u;
  }

  /// Averages per-scale descriptors and re-normalizes. Scales that would make
  /// the image smaller than 8px are skipped with a warning on `log`.
  Tensor embed_multires(const Tensor& image, std::span<const double> scales, std::ostream* log = &std::cerr) const {
    check_image(image);
    std::vector<Tensor> per_scale;
    for (double s : scales) {
      if (!(s > 0)) throw ConfigError("embed_multires: scales must be > 0");
      const auto h = static_cast<std::size_t>(std::lround(double(image.extent(0)) * s));
      const auto w = static_cast<std::size_t>(std::lround(double(image.extent(1)) * s));
      if (h < kMinImageExtent || w < kMinImageExtent) {
        if (log) *log << "warning: scale " << s << " gives " << w << "x" << h << " < 8px, skipped\n";
        continue;
      }
      per_scale.push_back(raw_descriptor(h == image.extent(0) && w == image.extent(1) ? image : resize_bilinear(image, h, w)));
    }
    if (per_scale.empty()) throw DataError("embed_multires: every scale makes the image smaller than 8px");
    Tensor u = mean_renormalized(per_scale);
    return whitening ? whiten_apply(u, *whitening) : u;
  }

  std::size_t embed_dim() const { return config.head.embed_dim; }

  // -- checkpoint: <stem>.ckt (CKT1 records) + <stem>.json (manifest)

  void save(const std::filesystem::path& stem) const {
    nlohmann::json manifest;
    manifest["format"] = "d2r-model-1";
    manifest["config"] = config;
    manifest["frozen_backbone"] = frozen_backbone;
    std::vector<Tensor> records;
    auto& names = manifest["tensors"] = nlohmann::json::array();
    for (const auto& [k, v] : params) {
      names.push_back({{"name", k}, {"shape", v.shape()}});
      records.push_back(v);
    }
    if (whitening) {
      names.push_back({{"name", "whiten.mean"}, {"shape", whitening->mean.shape()}});
      records.push_back(whitening->mean);
      names.push_back({{"name", "whiten.projection"}, {"shape", whitening->projection.shape()}});
      records.push_back(whitening->projection);
    }
    ckt::save(stem.string() + ".ckt", records);
    std::ofstream os(stem.string() + ".json");
    if (!os) throw DataError("model: cannot write manifest " + stem.string() + ".json");
    os << manifest.dump(2) << '\n';
  }

  static EmbeddingModel load(const std::filesystem::path& stem) {
    std::ifstream is(stem.string() + ".json");
    if (!is) throw DataError("model: cannot open manifest " + stem.string() + ".json");
    nlohmann::json manifest;
    try {
      is >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("model: malformed manifest: ") + e.what());
    }
    EmbeddingModel m;
    m.config = manifest.at("config").get<ModelConfig>();
    m.frozen_backbone = manifest.value("frozen_backbone", false);
    const auto records = ckt::load(stem.string() + ".ckt");
    const auto& names = manifest.at("tensors");
    if (names.size() != records.size()) throw DataError("model: manifest lists " + std::to_string(names.size()) +
                                                        " tensors, container holds " + std::to_string(records.size()));
    std::optional<Tensor> wmean, wproj;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto name = names[i].at("name").get<std::string>();
      if (names[i].at("shape").get<Shape>() != records[i].shape()) throw DataError("model: shape mismatch for " + name);
      if (name == "whiten.mean")
        wmean = records[i];
      else if (name == "whiten.projection")
        wproj = records[i];
      else
        m.params.emplace(name, records[i]);
    }
    if (wmean && wproj) m.whitening = WhitenTransform{*wmean, *wproj};
    return m;
  }
};

}  // namespace d2r
