#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>

#include "d2r/ann.hpp"
#include "d2r/eval.hpp"
#include "d2r/random.hpp"

using namespace d2r;

namespace {

std::vector<double> unit(std::size_t d, Rng& rng) {
  std::normal_distribution<double> N(0, 1);
  std::vector<double> v(d);
  for (auto& x : v) x = N(rng);
  const double n = l2_norm(v);
  for (auto& x : v) x /= n;
  return v;
}

std::vector<double> basis(std::size_t d, std::size_t i) {
  std::vector<double> v(d, 0.0);
  v[i] = 1.0;
  return v;
}

DescriptorStore random_store(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  DescriptorStore s(d);
  for (std::size_t i = 0; i < n; ++i) s.add({"img" + std::to_string(i), std::nullopt, unit(d, rng)});
  return s;
}

// AP straight from the definition: sum over ranks k of P@k * rel(k), each P@k recounted from scratch.
double brute_force_ap(const std::vector<std::string>& ranking, const std::unordered_set<std::string>& pos,
                      const std::unordered_set<std::string>& junk) {
  std::vector<std::string> clean;
  for (const auto& id : ranking)
    if (!junk.count(id)) clean.push_back(id);
  double total = 0;
  for (std::size_t k = 1; k <= clean.size(); ++k) {
    if (!pos.count(clean[k - 1])) continue;
    std::size_t rel = 0;
    for (std::size_t j = 0; j < k; ++j) rel += pos.count(clean[j]);
    total += double(rel) / double(k);
  }
  return total / double(pos.size());
}

struct ApInstance {
  std::vector<std::string> ranking;
  std::unordered_set<std::string> pos, junk;
};

ApInstance random_instance(Rng& rng) {
  std::uniform_int_distribution<int> len(1, 40);
  std::uniform_real_distribution<double> U(0, 1);
  ApInstance inst;
  const int n = len(rng);
  for (int i = 0; i < n; ++i) {
    std::string id = "x" + std::to_string(i);
    const double u = U(rng);
    if (u < 0.3)
      inst.pos.insert(id);
    else if (u < 0.45)
      inst.junk.insert(id);
    inst.ranking.push_back(std::move(id));
  }
  if (inst.pos.empty()) inst.pos.insert(inst.ranking.front()), inst.junk.erase(inst.ranking.front());
  if (U(rng) < 0.2) inst.pos.insert("unretrieved");
  std::shuffle(inst.ranking.begin(), inst.ranking.end(), rng);
  return inst;
}

}  // namespace

TEST(Store, RejectsNonUnitAndDuplicates) {
  DescriptorStore s(3);
  s.add({"a", std::nullopt, {1, 0, 0}});
  EXPECT_THROW(s.add({"b", std::nullopt, {1, 1, 0}}), DataError);
  EXPECT_THROW(s.add({"a", std::nullopt, {0, 1, 0}}), DataError);
  EXPECT_THROW(s.add({"c", std::nullopt, {1, 0}}), DataError);
}

TEST(Store, SaveLoadRoundTrip) {
  auto s = random_store(20, 8, 1);
  DescriptorStore withcat(2);
  const auto dir = std::filesystem::temp_directory_path() / "d2r_store_test";
  std::filesystem::create_directories(dir);
  s.save(dir / "s");
  const auto back = DescriptorStore::load(dir / "s");
  ASSERT_EQ(back.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(back[i].image_id, s[i].image_id);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(back[i].vector[k], s[i].vector[k], 1e-6);
  }
  withcat.add({"p", "cat7", {0.6, 0.8}});
  withcat.save(dir / "c");
  EXPECT_EQ(DescriptorStore::load(dir / "c")[0].category_id, std::optional<std::string>("cat7"));
  std::filesystem::remove_all(dir);
}

TEST(SearchExact, SelfMatchFirstWithScoreOne) {
  auto s = random_store(50, 16, 2);
  const auto hits = search_exact(s, s[17].vector, 5);
  ASSERT_EQ(hits.size(), 5u);
  EXPECT_EQ(hits[0].id, "img17");
  EXPECT_NEAR(hits[0].score, 1.0, 1e-12);
  for (std::size_t i = 1; i < hits.size(); ++i) EXPECT_GE(hits[i - 1].score, hits[i].score);
}

TEST(SearchExact, OrthogonalScoresZeroTiesByIdAndKClamped) {
  DescriptorStore s(4);
  s.add({"c", std::nullopt, basis(4, 1)});
  s.add({"a", std::nullopt, basis(4, 2)});
  s.add({"b", std::nullopt, basis(4, 3)});
  const auto hits = search_exact(s, basis(4, 0), 10);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].id, "a");
  EXPECT_EQ(hits[1].id, "b");
  EXPECT_EQ(hits[2].id, "c");
  for (const auto& h : hits) EXPECT_EQ(h.score, 0.0);
  EXPECT_THROW(search_exact(s, basis(4, 0), 0), ConfigError);
  EXPECT_THROW(search_exact(DescriptorStore(4), basis(4, 0), 1), DataError);
}

TEST(AveragePrecision, HandExamples) {
  const std::vector<std::string> r = {"p1", "n1", "p2", "n2"};
  EXPECT_NEAR(average_precision(r, {"p1", "p2"}), (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_NEAR(average_precision(r, {"p1", "p2"}), 0.83333, 1e-5);
  const std::vector<std::string> rj = {"p1", "j", "p2"};
  EXPECT_DOUBLE_EQ(average_precision(rj, {"p1", "p2"}, {"j"}), 1.0);
  // An unretrieved positive contributes zero.
  EXPECT_NEAR(average_precision(std::vector<std::string>{"p1"}, {"p1", "p9"}), 0.5, 1e-12);
  EXPECT_THROW(average_precision(r, {}), DataError);
}

TEST(AveragePrecision, MatchesBruteForceOn1000Instances) {
  Rng rng(11);
  for (int t = 0; t < 1000; ++t) {
    const auto inst = random_instance(rng);
    EXPECT_NEAR(average_precision(inst.ranking, inst.pos, inst.junk), brute_force_ap(inst.ranking, inst.pos, inst.junk),
                1e-12);
  }
}

TEST(AveragePrecision, JunkInsertionInvariance) {
  Rng rng(12);
  std::uniform_int_distribution<int> extra(1, 6);
  for (int t = 0; t < 1000; ++t) {
    auto inst = random_instance(rng);
    const double before = average_precision(inst.ranking, inst.pos, inst.junk);
    const int m = extra(rng);
    for (int j = 0; j < m; ++j) {
      std::uniform_int_distribution<std::size_t> at(0, inst.ranking.size());
      const std::string id = "junk_extra" + std::to_string(j);
      inst.ranking.insert(inst.ranking.begin() + std::ptrdiff_t(at(rng)), id);
      inst.junk.insert(id);
    }
    EXPECT_NEAR(average_precision(inst.ranking, inst.pos, inst.junk), before, 1e-12);
  }
}

TEST(AveragePrecision, TailPermutationAndPromotion) {
  Rng rng(13);
  for (int t = 0; t < 300; ++t) {
    auto inst = random_instance(rng);
    const double ap = average_precision(inst.ranking, inst.pos, inst.junk);
    // Permuting the negatives after the last positive leaves AP unchanged.
    std::size_t last = 0;
    for (std::size_t i = 0; i < inst.ranking.size(); ++i)
      if (inst.pos.count(inst.ranking[i])) last = i;
    auto perm = inst.ranking;
    std::shuffle(perm.begin() + std::ptrdiff_t(last + 1), perm.end(), rng);
    EXPECT_NEAR(average_precision(perm, inst.pos, inst.junk), ap, 1e-12);
    // Promoting any positive by one rank never lowers AP.
    for (std::size_t i = 1; i < inst.ranking.size(); ++i) {
      if (!inst.pos.count(inst.ranking[i])) continue;
      auto up = inst.ranking;
      std::swap(up[i], up[i - 1]);
      EXPECT_GE(average_precision(up, inst.pos, inst.junk), ap - 1e-12);
    }
  }
}

TEST(PrecisionAtK, TruncationRule) {
  const std::vector<std::string> r = {"p1", "n1", "p2", "n2", "n3"};
  // Last positive at rank 3, so kq = min(3, 10) = 3.
  EXPECT_NEAR(precision_at_k(r, {"p1", "p2"}, {}, 10), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(precision_at_k(r, {"p1", "p2"}, {}, 2), 0.5, 1e-12);
  EXPECT_NEAR(precision_at_k(r, {"p1", "p2"}, {"n1"}, 10), 1.0, 1e-12);
  EXPECT_EQ(precision_at_k(r, {"zz"}, {}, 10), 0.0);
}

namespace {

// Gallery of 12 images on basis directions; query q0 is close to g0..g3.
struct Fixture {
  DescriptorStore store{4};
  EvaluationSet set;
  Fixture() {
    for (int i = 0; i < 4; ++i) store.add({"g" + std::to_string(i), std::nullopt, {0.9 - 0.01 * i, std::sqrt(1 - std::pow(0.9 - 0.01 * i, 2)), 0, 0}});
    for (int i = 4; i < 12; ++i) store.add({"g" + std::to_string(i), std::nullopt, basis(4, 2 + i % 2)});
    store.add({"q0", std::nullopt, basis(4, 0)});
    for (int i = 0; i < 12; ++i) set.gallery.push_back("g" + std::to_string(i));
    set.gallery.push_back("q0");
  }
};

}  // namespace

TEST(Evaluate, PerfectRankingScoresOne) {
  Fixture f;
  f.set.queries.push_back({"q0", std::nullopt, {"g0", "g1"}, {"g2", "g3"}, {}});
  const std::vector<std::size_t> ks = {10};
  for (auto p : {Protocol::Base, Protocol::Medium}) {
    const auto r = evaluate(f.store, f.set, p, ks);
    EXPECT_DOUBLE_EQ(r.map, 1.0);
    EXPECT_DOUBLE_EQ(r.mp_at_k.at(10), 1.0);
    EXPECT_EQ(r.evaluated, 1u);
  }
  // Query itself is in the gallery but excluded, so it is never counted as a negative at rank 1.
  EXPECT_EQ(evaluate(f.store, f.set, Protocol::Medium, ks).per_query_ap.at("q0"), 1.0);
}

TEST(Evaluate, HardTreatsEasyAsJunk) {
  Fixture f;
  // g0..g3 are easy; the only hard positive is ranked last.
  f.set.queries.push_back({"q0", std::nullopt, {"g0", "g1", "g2", "g3"}, {"g11"}, {}});
  const std::vector<std::size_t> ks = {10};
  const auto hard = evaluate(f.store, f.set, Protocol::Hard, ks);
  // g4..g11 tie at score 0 and are ordered by id as strings: g10, g11, g4, ... so g11 is rank 2.
  EXPECT_NEAR(hard.map, 0.5, 1e-12);
  // Easy-only retrieval contributes 0 AP when the hard positive is absent.
  f.set.queries[0].hard = {"missing_from_gallery"};
  EXPECT_DOUBLE_EQ(evaluate(f.store, f.set, Protocol::Hard, ks).map, 0.0);
}

TEST(Evaluate, SkipsQueriesWithoutPositivesAndReportsMissing) {
  Fixture f;
  f.set.queries.push_back({"q0", std::nullopt, {"g0"}, {}, {}});
  f.set.queries.push_back({"g5", std::nullopt, {}, {}, {}});
  const std::vector<std::size_t> ks = {5};
  const auto r = evaluate(f.store, f.set, Protocol::Medium, ks);
  EXPECT_EQ(r.evaluated, 1u);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0], "g5");
  f.set.gallery.push_back("ghost");
  try {
    evaluate(f.store, f.set, Protocol::Medium, ks);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("ghost"), std::string::npos);
  }
}

TEST(Evaluate, RandomDescriptorsTwoClassesNearHalf) {
  double acc = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    DescriptorStore s(32);
    for (int i = 0; i < 16; ++i) s.add({"i" + std::to_string(i), std::to_string(i % 2), unit(32, rng)});
    const std::vector<std::size_t> ks = {10};
    acc += evaluate(s, category_evaluation_set(s), Protocol::Medium, ks).map;
  }
  EXPECT_NEAR(acc / 50.0, 0.5, 0.15);
}

TEST(EvaluationSetJson, ParsesAndValidates) {
  const auto j = nlohmann::json::parse(R"({"queries":[{"id":"q","crop":[1,2,3,4],"easy":["a"],"hard":["b"],"junk":["c"]}],
                                            "gallery":["a","b","c"]})");
  const auto s = j.get<EvaluationSet>();
  ASSERT_EQ(s.queries.size(), 1u);
  EXPECT_EQ(*s.queries[0].crop, (CropRect{1, 2, 3, 4}));
  EXPECT_EQ(nlohmann::json(s).get<EvaluationSet>().queries[0].junk, std::set<std::string>{"c"});
  const auto bad = nlohmann::json::parse(R"({"queries":[{"id":"q","easy":["a"],"junk":["a"]}],"gallery":["a"]})");
  EXPECT_THROW(bad.get<EvaluationSet>(), DataError);
  EXPECT_THROW(parse_protocol("easy"), ConfigError);
  EXPECT_EQ(parse_protocol("hard"), Protocol::Hard);
}

TEST(Ann, RecallAgainstExactOn1kVectors) {
  const auto s = random_store(1000, 32, 21);
  const auto t0 = std::chrono::steady_clock::now();
  const auto idx = AnnIndex::build(s, {16, 100, 5});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 5.0);
  Rng rng(99);
  double overlap = 0;
  for (int q = 0; q < 100; ++q) {
    const auto v = unit(32, rng);
    const auto exact = search_exact(s, v, 10);
    const auto approx = idx.search(v, 10);
    ASSERT_EQ(approx.size(), 10u);
    for (const auto& a : approx)
      overlap += std::any_of(exact.begin(), exact.end(), [&](const SearchHit& e) { return e.id == a.id; });
  }
  EXPECT_GE(overlap / 1000.0, 0.9);
  EXPECT_GE(idx.self_test_recall(), 0.95);
}

TEST(Ann, SameSeedSameGraph) {
  const auto s = random_store(300, 16, 22);
  const auto a = AnnIndex::build(s, {16, 100, 7});
  const auto b = AnnIndex::build(s, {16, 100, 7});
  ASSERT_EQ(a.max_level(), b.max_level());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(a.neighbors(i), b.neighbors(i));
  const auto hits = a.search(s[3].vector, 1);
  EXPECT_EQ(hits[0].id, "img3");
}

TEST(Ann, JsonRoundTripSearchesIdentically) {
  const auto s = random_store(400, 16, 23);
  const auto a = AnnIndex::build(s, {8, 60, 3});
  const auto b = AnnIndex::from_json(nlohmann::json::parse(a.to_json().dump()), s);
  ASSERT_EQ(b.size(), a.size());
  Rng rng(4);
  for (int q = 0; q < 20; ++q) {
    const auto v = unit(16, rng);
    const auto ha = a.search(v, 5), hb = b.search(v, 5);
    ASSERT_EQ(ha.size(), hb.size());
    for (std::size_t i = 0; i < ha.size(); ++i) EXPECT_EQ(ha[i].id, hb[i].id);
  }
  const auto other = random_store(399, 16, 23);
  EXPECT_THROW(AnnIndex::from_json(a.to_json(), other), DataError);
  auto broken = a.to_json();
  broken["links"][0][0] = std::vector<int>{100000};
  EXPECT_THROW(AnnIndex::from_json(broken, s), DataError);
  EXPECT_THROW(AnnIndex::from_json(nlohmann::json::object(), s), DataError);
}
