#pragma once

// End-to-end ArcFace training of an EmbeddingModel on a labelled image set,
// plus the two-stage fine-tuning regime (backbone classification, then head
// with the backbone frozen).

#include <cmath>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "d2r/arcface.hpp"
#include "d2r/dataset.hpp"
#include "d2r/model.hpp"
#include "d2r/optim.hpp"

namespace d2r {

enum class Stage1Loss { ArcFace, Softmax };

struct TrainConfig {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::size_t warmup_epochs = 3;
  std::size_t total_epochs = 30;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool finetune = false;
  std::size_t stage1_epochs = 0;  // fine-tuning only; 0 means total_epochs
  Stage1Loss stage1_loss = Stage1Loss::ArcFace;
  double arcface_margin = 0.3;
  double arcface_scale = 30.0;

  void validate() const {
    if (total_epochs == 0) throw ConfigError("train: total_epochs must be >= 1");
    if (warmup_epochs > total_epochs) throw ConfigError("train: warmup_epochs must be <= total_epochs");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("train: lr must be a finite value >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("train: weight_decay must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"warmup_epochs", c.warmup_epochs},
       {"total_epochs", c.total_epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"finetune", c.finetune},
       {"stage1_epochs", c.stage1_epochs},
       {"stage1_loss", c.stage1_loss == Stage1Loss::ArcFace ? "arcface" : "softmax"},
       {"arcface_margin", c.arcface_margin},
       {"arcface_scale", c.arcface_scale}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known = {"lr", "momentum", "weight_decay", "warmup_epochs", "total_epochs",
                                              "batch_size", "seed", "finetune", "stage1_epochs", "stage1_loss",
                                              "arcface_margin", "arcface_scale"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("train config: unknown key '" + k + "'");
  try {
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.total_epochs = j.value("total_epochs", c.total_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.finetune = j.value("finetune", c.finetune);
    c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
    c.arcface_margin = j.value("arcface_margin", c.arcface_margin);
    c.arcface_scale = j.value("arcface_scale", c.arcface_scale);
    const auto loss = j.value("stage1_loss", std::string("arcface"));
    if (loss == "arcface")
      c.stage1_loss = Stage1Loss::ArcFace;
    else if (loss == "softmax")
      c.stage1_loss = Stage1Loss::Softmax;
    else
      throw ConfigError("train config: stage1_loss must be 'arcface' or 'softmax'");
  } catch (const nlohmann::json::type_error& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
}

struct LabelledImage {
  const Tensor* image;
  std::size_t class_id;
  const Tensor* foreground_mask = nullptr;  // optional, metrics only
};

inline std::vector<LabelledImage> labelled_view(const std::vector<ToySample>& samples) {
  std::vector<LabelledImage> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({&s.image, s.class_id, &s.foreground_mask});
  return out;
}

// ---------------------------------------------------------------------------
// Attention mass inside the ground-truth foreground

/// Area-averages a binary (H, W) mask onto an (h, w) grid.
inline Tensor downsample_mask(const Tensor& mask, std::size_t h, std::size_t w) {
  const std::size_t H = mask.extent(0), W = mask.extent(1);
  Tensor out({h, w});
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t r0 = i * H / h, r1 = std::max(r0 + 1, (i + 1) * H / h);
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t c0 = j * W / w, c1 = std::max(c0 + 1, (j + 1) * W / w);
      double s = 0;
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) s += mask(r, c);
      out(i, j) = s / double((r1 - r0) * (c1 - c0));
    }
  }
  return out;
}

/// Spatial attention of the head at inference: the map A for mask-based
/// pooling, the position softmax for the attention-pool variant.
inline Tensor spatial_attention(const EmbeddingModel& m, const Tensor& image) {
  const auto t = m.forward(image, false, nullptr);
  if (m.config.head.pooling == PoolingVariant::MaskBased) return t.head.attention;
  return position_softmax(t.head.context, param(m.params, head_names::pool_query));
}

/// sum(A * fg) / sum(A); a map with no mass counts as uniform.
inline double attention_mass_in_foreground(const Tensor& attention, const Tensor& foreground_mask) {
  const Tensor fg = downsample_mask(foreground_mask, attention.extent(0), attention.extent(1));
  const double total = sum(attention);
  if (total <= 0) return sum(fg) / double(fg.size());
  return dot(attention.values(), fg.values()) / total;
}

inline double mean_attention_mass(const EmbeddingModel& m, std::span<const LabelledImage> data) {
  double acc = 0;
  std::size_t n = 0;
  for (const auto& s : data) {
    if (!s.foreground_mask) continue;
    acc += attention_mass_in_foreground(spatial_attention(m, *s.image), *s.foreground_mask);
    ++n;
  }
  return n ? acc / double(n) : std::nan("");
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  std::size_t epoch = 0;  // 1-based, continuous across fine-tuning stages
  int stage = 0;          // 0 single-stage, 1 backbone classification, 2 head with frozen backbone
  double loss = 0;  // mean over the epoch's steps
  double attn_iou = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  ArcFaceParams classifier;
  // Fine-tuning only: backbone checksum at the start and end of stage 2.
  std::uint64_t stage2_backbone_checksum_begin = 0;
  std::uint64_t stage2_backbone_checksum_end = 0;
};

inline void write_metrics_csv(std::ostream& os, const std::vector<EpochLog>& log) {
  os << "epoch,loss,attn_iou,lr\n";
  os << std::setprecision(10);
  for (const auto& e : log) os << e.epoch << ',' << e.loss << ',' << e.attn_iou << ',' << e.lr << '\n';
}

inline std::uint64_t backbone_checksum(const ParamSet& ps) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [k, v] : ps)
    if (k.starts_with(backbone_names::prefix)) h = (h ^ checksum(v)) * 1099511628211ull;
  return h;
}

namespace detail {

inline const std::string kStage1Proj = "stage1.proj.weight";

/// Stage-1 classifier path: GeM over backbone features, linear, L2.
struct Stage1Trace {
  BackboneTrace backbone;
  Tensor pooled, projected, descriptor;
};

inline Stage1Trace stage1_forward(const EmbeddingModel& m, const Tensor& image) {
  EmbeddingModel::check_image(image);
  Stage1Trace t;
  t.backbone = backbone_forward(m.params, image);
  t.pooled = gem_pool(t.backbone.output, m.config.head.gem_p);
  t.projected = linear(param(m.params, kStage1Proj), nullptr, t.pooled.values());
  t.descriptor = l2_normalize(t.projected);
  return t;
}

inline ParamSet stage1_backward(const EmbeddingModel& m, const Stage1Trace& t, const Tensor& d_desc) {
  const Tensor d_proj = l2_normalize_backward(t.projected, d_desc);
  auto lin = linear_backward(param(m.params, kStage1Proj), t.pooled.values(), d_proj.values());
  ParamSet g;
  g[kStage1Proj] = std::move(lin.weight);
  Tensor d_feat = gem_pool_backward(t.backbone.output, m.config.head.gem_p, lin.input);
  for (auto& [k, v] : backbone_backward(m.params, t.backbone, std::move(d_feat))) g.emplace(k, std::move(v));
  return g;
}

inline std::string short_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline Tensor resized_for_batch(const Tensor& img, const ImageBatch& b) {
  if (img.extent(0) == b.height && img.extent(1) == b.width) return img;
  return resize_bilinear(img, b.height, b.width);
}

}  // namespace detail

/// Runs `epochs` epochs of SGD on `model` (and `classifier`), appending to `log`.
/// stage: 0 full model, 1 backbone classifier, 2 head only.
inline void run_stage(EmbeddingModel& model, ArcFaceParams& classifier, std::span<const LabelledImage> data,
                      const TrainConfig& cfg, int stage, std::size_t epochs, std::vector<EpochLog>& log,
                      std::ostream* progress) {
  std::vector<std::pair<std::size_t, std::size_t>> sizes;
  for (const auto& s : data) sizes.emplace_back(s.image->extent(1), s.image->extent(0));
  const std::size_t batches_per_epoch = group_size_batches(sizes, cfg.batch_size, 0).size();
  const std::size_t total_steps = epochs * batches_per_epoch;
  const std::size_t warmup_steps = std::min(cfg.warmup_epochs, epochs) * batches_per_epoch;
  const bool softmax_only = stage == 1 && cfg.stage1_loss == Stage1Loss::Softmax;
  ArcFaceParams loss_params = classifier;
  if (softmax_only) loss_params.margin = 0.0;

  Sgd opt(cfg.momentum, cfg.weight_decay);
  Sgd cls_opt(cfg.momentum, cfg.weight_decay);
  Rng rng(derive_seed(cfg.seed, "train-background", static_cast<std::uint64_t>(stage)));
  const auto trainable = [&](const std::string& name) {
    const bool bb = name.starts_with(backbone_names::prefix);
    if (stage == 1) return bb || name == detail::kStage1Proj;
    if (stage == 2) return !bb;
    return !(bb && model.frozen_backbone);
  };

  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    const std::size_t epoch_no = log.size() + 1;
    const auto batches = group_size_batches(sizes, cfg.batch_size, derive_seed(cfg.seed, "batches", epoch_no));
    double loss_sum = 0;
    double lr = 0;
    for (const auto& batch : batches) {
      lr = lr_at(step++, cfg.lr, warmup_steps, total_steps);
      ParamSet grads;
      Tensor d_cls(classifier.weight.shape());
      const double inv = 1.0 / double(batch.indices.size());
      for (std::size_t idx : batch.indices) {
        const Tensor img = detail::resized_for_batch(*data[idx].image, batch);
        ParamSet g;
        ArcFaceResult r;
        if (stage == 1) {
          const auto t = detail::stage1_forward(model, img);
          r = arcface_loss(t.descriptor, data[idx].class_id, loss_params);
          g = detail::stage1_backward(model, t, r.d_descriptor);
        } else {
          const auto t = model.forward(img, true, &rng);
          r = arcface_loss(t.head.descriptor, data[idx].class_id, loss_params);
          g = model.backward(t, r.d_descriptor);
        }
        if (!std::isfinite(r.loss))
          throw NumericError("train: loss became non-finite at epoch " + std::to_string(epoch_no) + ", step " +
                             std::to_string(step) + " (lr " + detail::short_num(lr) + ")");
        loss_sum += r.loss;
        accumulate(grads, g, inv);
        axpy(inv, r.d_weight, d_cls);
      }
      for (const auto& [name, g] : grads)
        for (double v : g.values())
          if (!std::isfinite(v))
            throw NumericError("train: non-finite gradient for '" + name + "' at epoch " + std::to_string(epoch_no) +
                               ", step " + std::to_string(step) + " (lr " + detail::short_num(lr) + ")");
      opt.step(model.params, grads, lr, trainable);
      cls_opt.step(loss_params.weight, d_cls, "classifier", lr);
      loss_params.renormalize();
    }
    EpochLog row;
    row.epoch = epoch_no;
    row.stage = stage;
    row.loss = loss_sum / double(data.size());
    row.attn_iou = mean_attention_mass(model, data);
    row.lr = lr;
    log.push_back(row);
    if (progress)
      *progress << "epoch " << row.epoch << " stage " << stage << " loss " << row.loss << " attn_iou " << row.attn_iou
                << " lr " << row.lr << '\n';
  }
  classifier.weight = loss_params.weight;
}

inline TrainResult train(EmbeddingModel& model, std::span<const LabelledImage> data, const TrainConfig& cfg,
                         std::ostream* progress = nullptr) {
  cfg.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  std::size_t classes = 0;
  std::set<std::size_t> seen;
  for (const auto& s : data) {
    classes = std::max(classes, s.class_id + 1);
    seen.insert(s.class_id);
  }
  if (seen.size() < 2) throw DataError("train: dataset needs at least 2 classes");

  TrainResult res;
  Rng rng(derive_seed(cfg.seed, "classifier-init"));
  if (!cfg.finetune) {
    res.classifier = ArcFaceParams::create(classes, model.embed_dim(), cfg.arcface_margin, cfg.arcface_scale, rng);
    run_stage(model, res.classifier, data, cfg, 0, cfg.total_epochs, res.log, progress);
    return res;
  }

  // Stage 1: backbone + GeM/linear classifier, head bypassed.
  model.frozen_backbone = false;
  {
    const std::size_t C = model.config.channels;
    model.params[detail::kStage1Proj] = random_normal({model.embed_dim(), C}, rng, 1.0 / std::sqrt(double(C)));
    ArcFaceParams cls1 = ArcFaceParams::create(classes, model.embed_dim(), cfg.arcface_margin, cfg.arcface_scale, rng);
    run_stage(model, cls1, data, cfg, 1, cfg.stage1_epochs ? cfg.stage1_epochs : cfg.total_epochs, res.log, progress);
    model.params.erase(detail::kStage1Proj);
  }

  // Stage 2: frozen backbone, head trained with a fresh classifier.
  model.frozen_backbone = true;
  res.stage2_backbone_checksum_begin = backbone_checksum(model.params);
  res.classifier = ArcFaceParams::create(classes, model.embed_dim(), cfg.arcface_margin, cfg.arcface_scale, rng);
  run_stage(model, res.classifier, data, cfg, 2, cfg.total_epochs, res.log, progress);
  res.stage2_backbone_checksum_end = backbone_checksum(model.params);
  return res;
}

inline TrainResult train(EmbeddingModel& model, const std::vector<ToySample>& samples, const TrainConfig& cfg,
                         std::ostream* progress = nullptr) {
  const auto view = labelled_view(samples);
  return train(model, std::span<const LabelledImage>(view), cfg, progress);
}

}  // namespace d2r
