#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "d2r/arcface.hpp"
#include "d2r/grad_check.hpp"
#include "d2r/image.hpp"
#include "d2r/model.hpp"
#include "d2r/optim.hpp"

using namespace d2r;

namespace {

EmbeddingModel small_model(std::uint64_t seed, std::size_t dim = 16) {
  ModelConfig mc;
  mc.head.embed_dim = dim;
  return EmbeddingModel::create(mc, seed);
}

}  // namespace

TEST(Backbone, OutputExtentIsCeilEighth) {
  const auto m = small_model(1);
  Rng rng(1);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {16, 16}, {17, 9}, {33, 40}, {64, 48}}) {
    const Tensor f = m.features(random_uniform({h, w, 3}, rng, 0, 1));
    EXPECT_EQ(f.extent(0), (h + 7) / 8);
    EXPECT_EQ(f.extent(1), (w + 7) / 8);
    EXPECT_EQ(f.extent(2), 32u);
  }
}

TEST(Embed, UnitNormAndDeterministic) {
  const auto m = small_model(2);
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    const Tensor x = random_uniform({24 + std::size_t(t), 32, 3}, rng, 0, 1);
    const Tensor u = m.embed(x);
    ASSERT_EQ(u.size(), 16u);
    EXPECT_NEAR(l2_norm(u.values()), 1.0, 1e-6);
    EXPECT_EQ(m.embed(x), u);
  }
}

TEST(Embed, StableUnderTinyNoise) {
  const auto m = small_model(3);
  Rng rng(3);
  std::normal_distribution<double> N(0.0, 1e-4);
  for (int t = 0; t < 10; ++t) {
    const Tensor x = random_uniform({32, 32, 3}, rng, 0, 1);
    Tensor y = x;
    for (auto& v : y.values()) v += N(rng);
    EXPECT_GT(dot(m.embed(x).values(), m.embed(y).values()), 0.999);
  }
}

TEST(Embed, RejectsUndersizedOrWrongChannels) {
  const auto m = small_model(4);
  EXPECT_THROW(m.embed(Tensor({7, 20, 3})), DataError);
  EXPECT_THROW(m.embed(Tensor({20, 20, 1})), DataError);
  EXPECT_NO_THROW(m.embed(Tensor({8, 8, 3}, 0.5)));
}

TEST(Multires, SingleUnitScaleEqualsEmbed) {
  const auto m = small_model(5);
  Rng rng(5);
  const Tensor x = random_uniform({40, 30, 3}, rng, 0, 1);
  const std::vector<double> one = {1.0};
  EXPECT_EQ(m.embed_multires(x, one), m.embed(x));
}

TEST(Multires, OrthogonalPairAveragesToDiagonal) {
  const std::vector<Tensor> e = {Tensor({3}, std::vector<double>{1, 0, 0}), Tensor({3}, std::vector<double>{0, 1, 0})};
  const Tensor u = mean_renormalized(e);
  EXPECT_NEAR(u[0], 0.7071, 1e-4);
  EXPECT_NEAR(u[1], 0.7071, 1e-4);
  EXPECT_EQ(u[2], 0.0);
}

TEST(Multires, DefaultScalesAndSkipping) {
  EXPECT_EQ(kDefaultScales, (std::vector<double>{0.4, 0.5, 0.7, 1.0, 1.4}));
  const auto m = small_model(6);
  Rng rng(6);
  const Tensor x = random_uniform({16, 16, 3}, rng, 0, 1);
  std::ostringstream log;
  // 0.4 and 0.3 give 6x6 and 5x5: skipped with a warning; the rest average.
  const Tensor u = m.embed_multires(x, std::vector<double>{0.3, 0.4, 1.0, 1.4}, &log);
  EXPECT_NE(log.str().find("skipped"), std::string::npos);
  EXPECT_NEAR(l2_norm(u.values()), 1.0, 1e-12);
  const std::vector<Tensor> kept = {m.embed(resize_bilinear(x, 16, 16)), m.embed(resize_bilinear(x, 22, 22))};
  EXPECT_LT(max_abs_diff(u, mean_renormalized(kept)), 1e-12);
  EXPECT_THROW(m.embed_multires(x, std::vector<double>{0.1, 0.2}, &log), DataError);
  EXPECT_THROW(m.embed_multires(x, std::vector<double>{-1.0}, &log), ConfigError);
}

TEST(FullModel, GradientCheckAt16x16) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ModelConfig mc;
    mc.head.embed_dim = 6;
    mc.head.mask_gradient = MaskGradient::Exact;
    auto m = EmbeddingModel::create(mc, seed);
    Rng rng(seed + 50);
    Tensor x = random_uniform({16, 16, 3}, rng, 0, 1);
    const auto cls = ArcFaceParams::create(3, 6, 0.3, 30.0, rng);
    const std::size_t y = seed % 3;
    ScalarObjective o;
    o.loss = [&] { return arcface_loss(m.forward(x, false, nullptr).head.descriptor, y, cls).loss; };
    o.gradients = [&] {
      const auto t = m.forward(x, false, nullptr);
      const auto g = m.backward(t, arcface_loss(t.head.descriptor, y, cls).d_descriptor);
      return std::map<std::string, Tensor>(g.begin(), g.end());
    };
    o.params = refs(m.params);
    const auto rep = grad_check(o, {.eps = 1e-6, .max_entries_per_tensor = 12, .seed = seed});
    EXPECT_TRUE(rep.finite) << rep.diagnostic;
    EXPECT_LT(rep.max_rel_error(), 1e-4) << "seed " << seed;
  }
}

TEST(FullModel, FrozenBackboneGetsZeroGradsAndStaysBitIdentical) {
  auto m = small_model(7, 8);
  m.frozen_backbone = true;
  Rng rng(7);
  const Tensor x = random_uniform({24, 24, 3}, rng, 0, 1);
  const auto t = m.forward(x, true, &rng);
  const auto g = m.backward(t, random_normal({8}, rng));
  const ParamSet before = m.params;
  for (const auto& [k, v] : g)
    if (k.starts_with(backbone_names::prefix)) EXPECT_EQ(max_abs(v), 0.0) << k;
  Sgd opt(0.9, 1e-5);
  opt.step(m.params, g, 0.1, [&](const std::string& k) { return !k.starts_with(backbone_names::prefix); });
  for (const auto& [k, v] : before)
    if (k.starts_with(backbone_names::prefix))
      EXPECT_EQ(m.params.at(k), v) << k;
    else if (k == head_names::proj)
      EXPECT_NE(m.params.at(k), v);
}

TEST(Checkpoint, RoundTripPreservesEmbeddings) {
  auto m = small_model(8);
  m.frozen_backbone = true;
  const auto stem = std::filesystem::temp_directory_path() / "d2r_model_test";
  m.save(stem);
  const auto back = EmbeddingModel::load(stem);
  EXPECT_TRUE(back.frozen_backbone);
  EXPECT_EQ(back.params.size(), m.params.size());
  EXPECT_EQ(back.embed_dim(), 16u);
  Rng rng(8);
  const Tensor x = random_uniform({32, 32, 3}, rng, 0, 1);
  // Stored as float32.
  EXPECT_GT(dot(m.embed(x).values(), back.embed(x).values()), 1 - 1e-9);
  std::filesystem::remove(stem.string() + ".ckt");
  std::filesystem::remove(stem.string() + ".json");
  EXPECT_THROW(EmbeddingModel::load(stem), DataError);
}

TEST(ModelConfigJson, UnknownKeysRejected) {
  EXPECT_THROW(nlohmann::json::parse(R"({"channels": 8, "depth": 3})").get<ModelConfig>(), ConfigError);
  const auto c = nlohmann::json::parse(R"({"channels": 8, "head": {"embed_dim": 12}})").get<ModelConfig>();
  EXPECT_EQ(c.channels, 8u);
  EXPECT_EQ(c.head.embed_dim, 12u);
}
