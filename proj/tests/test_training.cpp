#include <gtest/gtest.h>

#include <numbers>
#include <set>
#include <sstream>

#include "d2r/grad_check.hpp"
#include "d2r/trainer.hpp"

using namespace d2r;

namespace {

ArcFaceParams classifier(std::size_t classes, std::size_t dim, double margin, std::uint64_t seed) {
  Rng rng(seed);
  return ArcFaceParams::create(classes, dim, margin, 30.0, rng);
}

EmbeddingModel tiny_model(std::uint64_t seed) {
  ModelConfig mc;
  mc.channels = 8;
  mc.head.embed_dim = 8;
  return EmbeddingModel::create(mc, seed);
}

std::vector<ToySample> tiny_set(std::uint64_t seed) { return gen_toy_dataset(2, 4, 16, 0.3, seed); }

}  // namespace

// ---------------------------------------------------------------------------
// ArcFace

TEST(ArcFace, ZeroMarginIsScaledSoftmaxCrossEntropy) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    auto p = classifier(5, 7, 0.0, std::uint64_t(t));
    const Tensor u = l2_normalize(random_normal({7}, rng));
    const auto y = std::size_t(t % 5);
    std::vector<double> z(5);
    double mx = -1e300;
    for (std::size_t j = 0; j < 5; ++j) mx = std::max(mx, z[j] = 30.0 * dot({&p.weight(j, 0), 7}, u.values()));
    double s = 0;
    for (double v : z) s += std::exp(v - mx);
    EXPECT_NEAR(arcface_loss(u, y, p).loss, std::log(s) + mx - z[y], 1e-10);
  }
}

TEST(ArcFace, TargetLogitAtZeroAngle) {
  ArcFaceParams p{Tensor({2, 3}, std::vector<double>{1, 0, 0, 0, 1, 0}), 0.3, 30.0};
  const auto r = arcface_loss(Tensor({3}, std::vector<double>{1, 0, 0}), 0, p);
  EXPECT_NEAR(r.logits[0], 30.0 * std::cos(0.3), 1e-12);
  EXPECT_NEAR(r.logits[0], 28.66009, 1e-5);
  EXPECT_DOUBLE_EQ(r.logits[1], 0.0);
}

TEST(ArcFace, GradientCheck) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto p = classifier(4, 6, 0.3, seed + 100);
    Tensor u = l2_normalize(random_normal({6}, rng));
    const std::size_t y = seed % 4;
    ScalarObjective o;
    o.loss = [&] { return arcface_loss(u, y, p).loss; };
    o.gradients = [&] {
      auto r = arcface_loss(u, y, p);
      return std::map<std::string, Tensor>{{"u", r.d_descriptor}, {"w", r.d_weight}};
    };
    o.params = {{"u", &u}, {"w", &p.weight}};
    const auto rep = grad_check(o, {.eps = 1e-6});
    EXPECT_TRUE(rep.finite) << rep.diagnostic;
    EXPECT_LT(rep.max_rel_error(), 1e-4) << "seed " << seed;
  }
}

TEST(ArcFace, ContinuousAndMonotonePastPiMinusMargin) {
  const double m = 0.3;
  const ArcFaceParams p{Tensor({2, 2}, std::vector<double>{1, 0, 0, 1}), m, 30.0};
  const auto logit = [&](double theta) {
    return arcface_loss(Tensor({2}, std::vector<double>{std::cos(theta), std::sin(theta)}), 0, p).logits[0];
  };
  const double sw = std::numbers::pi - m;
  EXPECT_NEAR(logit(sw - 1e-9), -30.0, 1e-6);
  EXPECT_NEAR(logit(sw + 1e-9), -30.0, 1e-6);
  double prev = -1e300;
  for (double theta = std::numbers::pi; theta > 0.05; theta -= 0.01) {
    const double l = logit(theta);
    EXPECT_GT(l, prev) << theta;
    prev = l;
  }
}

TEST(ArcFace, RejectsBadParameters) {
  Rng rng(0);
  EXPECT_THROW(ArcFaceParams::create(3, 4, 0.6, 30, rng), ConfigError);
  EXPECT_THROW(ArcFaceParams::create(3, 4, 0.3, 0, rng), ConfigError);
  auto p = classifier(3, 4, 0.3, 0);
  EXPECT_THROW(arcface_loss(Tensor({5}, 0.2), 0, p), ShapeError);
  EXPECT_THROW(arcface_loss(Tensor({4}, 0.5), 3, p), DataError);
}

// ---------------------------------------------------------------------------
// Schedule and optimiser

TEST(Schedule, WarmupThenCosine) {
  const double lr = 0.01;
  const std::size_t warm = 30, total = 300;
  EXPECT_EQ(lr_at(0, lr, warm, total), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(15, lr, warm, total), 0.005);
  EXPECT_EQ(lr_at(warm, lr, warm, total), lr);
  EXPECT_LT(lr_at(total - 1, lr, warm, total), 1e-3 * lr);
  for (std::size_t s = warm + 1; s < total; ++s) EXPECT_LE(lr_at(s, lr, warm, total), lr_at(s - 1, lr, warm, total));
  EXPECT_EQ(lr_at(0, lr, 0, total), lr);
}

TEST(Sgd, WeightDecayShrinksByExactFactor) {
  const double lr = 0.1, wd = 0.01;
  Sgd opt(0.0, wd);
  ParamSet ps{{"w", Tensor({4}, std::vector<double>{1, -2, 3, 0.5})}};
  const Tensor start = ps["w"];
  const ParamSet zero{{"w", Tensor({4})}};
  for (int s = 1; s <= 5; ++s) {
    opt.step(ps, zero, lr);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(ps["w"][i], start[i] * std::pow(1 - lr * wd, s), 1e-15);
  }
}

TEST(Sgd, MomentumMatchesReference) {
  Sgd opt(0.9, 0.0);
  Tensor p({1}, 1.0);
  const Tensor g({1}, 1.0);
  // v1 = 1, v2 = 1.9, v3 = 2.71
  opt.step(p, g, "p", 0.1);
  opt.step(p, g, "p", 0.1);
  opt.step(p, g, "p", 0.1);
  EXPECT_NEAR(p[0], 1.0 - 0.1 * (1 + 1.9 + 2.71), 1e-12);
}

// ---------------------------------------------------------------------------
// Toy dataset

TEST(ToyDataset, DeterministicPerSeed) {
  const auto a = gen_toy_dataset(3, 4, 32, 0.5, 11), b = gen_toy_dataset(3, 4, 32, 0.5, 11);
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].foreground_mask, b[i].foreground_mask);
    EXPECT_EQ(a[i].class_id, i / 4);
  }
  EXPECT_NE(gen_toy_dataset(3, 4, 32, 0.5, 12)[0].image, a[0].image);
  EXPECT_THROW(gen_toy_dataset(1, 4, 32, 0.5, 0), ConfigError);
}

TEST(ToyDataset, MaskAreaWithinBounds) {
  for (const auto& s : gen_toy_dataset(5, 20, 48, 0.7, 3)) {
    ASSERT_EQ(s.foreground_mask.extent(0), 48u);
    ASSERT_EQ(s.foreground_mask.extent(1), 48u);
    const double area = sum(s.foreground_mask) / (48.0 * 48.0);
    EXPECT_GE(area, 0.05) << s.id;
    EXPECT_LE(area, 0.50) << s.id;
    for (double v : s.foreground_mask.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    for (double v : s.image.values()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(ToyDataset, IntraClassVariation) {
  const auto d = gen_toy_dataset(5, 6, 48, 0.5, 8);
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t i = 0; i + 1 < 6; ++i) {
      const auto& a = d[k * 6 + i].image.values();
      const auto& b = d[k * 6 + i + 1].image.values();
      EXPECT_LT(dot(a, b) / (l2_norm(a) * l2_norm(b)), 0.99);
    }
}

// ---------------------------------------------------------------------------
// Group-size batching

TEST(Batching, AllSquareIsOneBucketPartition) {
  std::vector<std::pair<std::size_t, std::size_t>> sizes(10, {64, 64});
  const auto b = group_size_batches(sizes, 4, 1);
  ASSERT_EQ(b.size(), 3u);
  std::multiset<std::size_t> seen;
  for (const auto& x : b) {
    EXPECT_EQ(x.bucket, AspectBucket::Square);
    seen.insert(x.indices.begin(), x.indices.end());
  }
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 10u);
}

TEST(Batching, ThreeBucketsOfFive) {
  std::vector<std::pair<std::size_t, std::size_t>> sizes;
  for (int i = 0; i < 5; ++i) sizes.push_back({40, 80}), sizes.push_back({64, 64}), sizes.push_back({90, 60});
  const auto b = group_size_batches(sizes, 5, 2);
  ASSERT_EQ(b.size(), 3u);
  std::set<AspectBucket> buckets;
  for (const auto& x : b) {
    ASSERT_EQ(x.indices.size(), 5u);
    buckets.insert(x.bucket);
    for (auto i : x.indices) EXPECT_EQ(aspect_bucket(sizes[i].first, sizes[i].second), x.bucket);
  }
  EXPECT_EQ(buckets.size(), 3u);
}

TEST(Batching, BucketEdges) {
  EXPECT_EQ(aspect_bucket(79, 100), AspectBucket::Portrait);
  EXPECT_EQ(aspect_bucket(80, 100), AspectBucket::Square);
  EXPECT_EQ(aspect_bucket(125, 100), AspectBucket::Square);
  EXPECT_EQ(aspect_bucket(126, 100), AspectBucket::Landscape);
}

TEST(Batching, RandomPartitionProperty) {
  Rng rng(5);
  std::uniform_int_distribution<std::size_t> side(20, 120), bs(1, 9), n(0, 60);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::pair<std::size_t, std::size_t>> sizes(n(rng));
    for (auto& s : sizes) s = {side(rng), side(rng)};
    const std::size_t B = bs(rng);
    std::vector<int> count(sizes.size(), 0);
    for (const auto& b : group_size_batches(sizes, B, std::uint64_t(t))) {
      EXPECT_LE(b.indices.size(), B);
      EXPECT_FALSE(b.indices.empty());
      EXPECT_EQ(aspect_bucket(b.width, b.height), b.bucket);
      for (auto i : b.indices) {
        ++count[i];
        EXPECT_EQ(aspect_bucket(sizes[i].first, sizes[i].second), b.bucket);
      }
    }
    for (int c : count) EXPECT_EQ(c, 1);
  }
}

// ---------------------------------------------------------------------------
// Config

TEST(TrainConfigJson, DefaultsAndRoundTrip) {
  const TrainConfig d;
  EXPECT_EQ(d.lr, 0.001);
  EXPECT_EQ(d.momentum, 0.9);
  EXPECT_EQ(d.weight_decay, 1e-5);
  EXPECT_EQ(d.warmup_epochs, 3u);
  EXPECT_EQ(d.arcface_margin, 0.3);
  EXPECT_EQ(d.batch_size, 16u);
  TrainConfig c;
  c.lr = 0.02, c.finetune = true, c.stage1_loss = Stage1Loss::Softmax;
  const auto back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(back.lr, 0.02);
  EXPECT_TRUE(back.finetune);
  EXPECT_EQ(back.stage1_loss, Stage1Loss::Softmax);
}

TEST(TrainConfigJson, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(nlohmann::json::parse(R"({"lr": 0.1, "lr_decay": 2})").get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"warmup_epochs": 5, "total_epochs": 4})").get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"lr": "fast"})").get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"stage1_loss": "triplet"})").get<TrainConfig>(), ConfigError);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Train, ZeroLearningRateLeavesParametersBitExact) {
  auto m = tiny_model(1);
  const ParamSet before = m.params;
  TrainConfig tc;
  tc.lr = 0.0, tc.total_epochs = 1, tc.warmup_epochs = 0, tc.batch_size = 4;
  const auto r = train(m, tiny_set(2), tc);
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(m.params.size(), before.size());
  for (const auto& [k, v] : before) EXPECT_EQ(m.params.at(k), v) << k;
}

TEST(Train, ClassifierRowsStayUnitNorm) {
  auto m = tiny_model(3);
  TrainConfig tc;
  tc.lr = 0.05, tc.total_epochs = 2, tc.warmup_epochs = 1, tc.batch_size = 4;
  const auto r = train(m, tiny_set(4), tc);
  for (std::size_t c = 0; c < r.classifier.classes(); ++c)
    EXPECT_NEAR(l2_norm(std::span<const double>(&r.classifier.weight(c, 0), 8)), 1.0, 1e-12);
}

TEST(Train, LogAndMetricsCsv) {
  auto m = tiny_model(5);
  TrainConfig tc;
  tc.total_epochs = 3, tc.warmup_epochs = 1, tc.batch_size = 4;
  const auto r = train(m, tiny_set(6), tc);
  ASSERT_EQ(r.log.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.log[i].epoch, i + 1);
    EXPECT_TRUE(std::isfinite(r.log[i].loss));
    EXPECT_GE(r.log[i].attn_iou, 0.0);
    EXPECT_LE(r.log[i].attn_iou, 1.0);
  }
  std::ostringstream os;
  write_metrics_csv(os, r.log);
  const std::string csv = os.str();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,loss,attn_iou,lr");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Train, SameSeedSameLog) {
  TrainConfig tc;
  tc.total_epochs = 2, tc.warmup_epochs = 1, tc.batch_size = 4, tc.seed = 9;
  auto a = tiny_model(7), b = tiny_model(7);
  const auto ra = train(a, tiny_set(8), tc), rb = train(b, tiny_set(8), tc);
  std::ostringstream sa, sb;
  write_metrics_csv(sa, ra.log);
  write_metrics_csv(sb, rb.log);
  EXPECT_EQ(sa.str(), sb.str());
  for (const auto& [k, v] : a.params) EXPECT_EQ(b.params.at(k), v);
}

TEST(Train, NeedsTwoClasses) {
  auto m = tiny_model(1);
  auto one = gen_toy_dataset(2, 3, 16, 0.2, 1);
  one.resize(3);
  EXPECT_THROW(train(m, one, TrainConfig{}), DataError);
}

TEST(Train, DivergenceAbortsWithNumericError) {
  auto m = tiny_model(1);
  m.params.at(backbone_names::weight(0))[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.total_epochs = 1, tc.warmup_epochs = 0, tc.batch_size = 4;
  EXPECT_THROW(train(m, tiny_set(1), tc), NumericError);
}

TEST(Train, FinetuneFreezesBackboneInStageTwo) {
  auto m = tiny_model(11);
  const auto head_before = m.params;
  TrainConfig tc;
  tc.finetune = true, tc.total_epochs = 2, tc.stage1_epochs = 2, tc.warmup_epochs = 1, tc.batch_size = 4, tc.lr = 0.01;
  const auto r = train(m, tiny_set(12), tc);
  ASSERT_EQ(r.log.size(), 4u);
  EXPECT_EQ(r.log[0].stage, 1);
  EXPECT_EQ(r.log[3].stage, 2);
  EXPECT_EQ(r.stage2_backbone_checksum_begin, r.stage2_backbone_checksum_end);
  EXPECT_EQ(r.stage2_backbone_checksum_end, backbone_checksum(m.params));
  EXPECT_TRUE(m.frozen_backbone);
  EXPECT_EQ(m.params.count(detail::kStage1Proj), 0u);
  // Stage 1 moved the backbone; stage 2 moved the head.
  EXPECT_NE(m.params.at(backbone_names::weight(0)), head_before.at(backbone_names::weight(0)));
  EXPECT_NE(m.params.at(head_names::proj), head_before.at(head_names::proj));

  // Head-only gradients are nonzero while backbone gradients are exact zeros.
  const auto s = tiny_set(13);
  Rng rng(1);
  const auto t = m.forward(s[0].image, true, &rng);
  Rng crng(2);
  const auto cls = ArcFaceParams::create(2, 8, 0.3, 30, crng);
  const auto g = m.backward(t, arcface_loss(t.head.descriptor, s[0].class_id, cls).d_descriptor);
  double head_mass = 0;
  for (const auto& [k, v] : g) {
    if (k.starts_with(backbone_names::prefix))
      EXPECT_EQ(max_abs(v), 0.0) << k;
    else
      head_mass += max_abs(v);
  }
  EXPECT_GT(head_mass, 0.0);
}

TEST(Train, Stage1SoftmaxOption) {
  auto m = tiny_model(2);
  TrainConfig tc;
  tc.finetune = true, tc.total_epochs = 1, tc.warmup_epochs = 0, tc.batch_size = 4, tc.stage1_loss = Stage1Loss::Softmax;
  const auto r = train(m, tiny_set(3), tc);
  EXPECT_EQ(r.log.size(), 2u);
}

// ---------------------------------------------------------------------------
// Attention metric

TEST(AttentionMass, KnownMaps) {
  Tensor a({2, 2}, std::vector<double>{1, 0, 0, 3});
  Tensor fg({4, 4});
  for (std::size_t y = 2; y < 4; ++y)
    for (std::size_t x = 2; x < 4; ++x) fg(y, x) = 1.0;
  EXPECT_DOUBLE_EQ(attention_mass_in_foreground(a, fg), 0.75);
  // Zero attention falls back to the foreground share.
  EXPECT_DOUBLE_EQ(attention_mass_in_foreground(Tensor({2, 2}), fg), 0.25);
  const Tensor d = downsample_mask(fg, 2, 2);
  EXPECT_EQ(d, Tensor({2, 2}, std::vector<double>{0, 0, 0, 1}));
}
