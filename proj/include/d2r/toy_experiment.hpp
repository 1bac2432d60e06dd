#pragma once

// Reference run on the synthetic shapes set: measures attention mass inside the
// ground-truth foreground and held-out retrieval mAP before and after training.

#include <chrono>
#include <ostream>

#include "d2r/eval.hpp"
#include "d2r/trainer.hpp"

namespace d2r {

struct ToyRunConfig {
  std::size_t classes = 3;
  std::size_t train_images = 64;
  std::size_t heldout_per_class = 10;
  std::size_t image_size = 64;
  double clutter = 0.5;
  std::uint64_t seed = 1;
  ModelConfig model = [] {
    ModelConfig m;
    m.head.embed_dim = 64;
    return m;
  }();
  TrainConfig train;
};

struct ToyRunReport {
  std::vector<EpochLog> log;
  double attention_before = 0, attention_after = 0;
  double map_before = 0, map_after = 0;
  double seconds = 0;

  double attention_ratio() const { return attention_before > 0 ? attention_after / attention_before : 0.0; }
  double map_gain() const { return map_after - map_before; }
  bool loss_strictly_decreasing() const {
    for (std::size_t i = 1; i < log.size(); ++i)
      if (!(log[i].loss < log[i - 1].loss)) return false;
    return !log.empty();
  }
};

/// First `n` samples of a balanced set (classes interleaved so every class is represented).
inline std::vector<ToySample> toy_training_set(std::size_t classes, std::size_t n, std::size_t size, double clutter,
                                               std::uint64_t seed) {
  const std::size_t per_class = (n + classes - 1) / classes;
  auto all = gen_toy_dataset(classes, per_class, size, clutter, seed);
  std::vector<ToySample> out;
  for (std::size_t i = 0; i < per_class && out.size() < n; ++i)
    for (std::size_t k = 0; k < classes && out.size() < n; ++k) out.push_back(std::move(all[k * per_class + i]));
  return out;
}

/// Base-protocol mAP where every held-out image queries the rest and same-class images are positives.
inline double heldout_map(const EmbeddingModel& model, const std::vector<ToySample>& samples) {
  DescriptorStore store(model.embed_dim());
  for (const auto& s : samples) store.add(s.id, model.embed(s.image), "class" + std::to_string(s.class_id));
  return evaluate(store, category_evaluation_set(store), Protocol::Base, {}).map;
}

inline ToyRunReport run_toy_reference(const ToyRunConfig& cfg, EmbeddingModel* trained = nullptr,
                                      std::ostream* progress = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto train_set = toy_training_set(cfg.classes, cfg.train_images, cfg.image_size, cfg.clutter,
                                          derive_seed(cfg.seed, "toy-train"));
  const auto heldout = gen_toy_dataset(cfg.classes, cfg.heldout_per_class, cfg.image_size, cfg.clutter,
                                       derive_seed(cfg.seed, "toy-heldout"));
  auto model = EmbeddingModel::create(cfg.model, derive_seed(cfg.seed, "toy-model"));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "toy-optim");

  ToyRunReport r;
  r.attention_before = mean_attention_mass(model, labelled_view(train_set));
  r.map_before = heldout_map(model, heldout);
  r.log = train(model, train_set, tc, progress).log;
  r.attention_after = mean_attention_mass(model, labelled_view(train_set));
  r.map_after = heldout_map(model, heldout);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (trained) *trained = std::move(model);
  return r;
}

}  // namespace d2r
