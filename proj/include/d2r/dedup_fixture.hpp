#pragma once

// Synthetic overlap fixture: textured scenes grouped into landmark categories,
// some of which are planted as warped copies among the evaluation queries.

#include <cmath>
#include <cstdio>
#include <numeric>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>

#include "d2r/model.hpp"
#include "d2r/overlap.hpp"
#include "d2r/random.hpp"

namespace d2r {

/// Random scene of overlapping shapes and strokes over a colour gradient.
inline Tensor render_scene(std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const double S = double(size);
  Tensor img({size, size, 3});
  const std::array<double, 3> c0 = {U(rng), U(rng), U(rng)}, c1 = {U(rng), U(rng), U(rng)};
  const double ga = U(rng) * 2 * std::numbers::pi;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double t = 0.5 + 0.5 * ((double(x) / S - 0.5) * std::cos(ga) + (double(y) / S - 0.5) * std::sin(ga));
      for (std::size_t c = 0; c < 3; ++c) img(y, x, c) = (1 - t) * c0[c] + t * c1[c];
    }
  for (int s = 0; s < 40; ++s) {
    const std::array<double, 3> col = {U(rng), U(rng), U(rng)};
    const double cx = U(rng) * S, cy = U(rng) * S, rx = (0.02 + 0.1 * U(rng)) * S, ry = (0.02 + 0.1 * U(rng)) * S;
    const double rot = U(rng) * std::numbers::pi;
    const int kind = int(U(rng) * 3);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
        const double u = (std::cos(rot) * dx + std::sin(rot) * dy) / rx, v = (-std::sin(rot) * dx + std::cos(rot) * dy) / ry;
        bool in = false;
        if (kind == 0) in = u * u + v * v <= 1;
        if (kind == 1) in = std::abs(u) <= 1 && std::abs(v) <= 1;
        if (kind == 2) in = std::abs(v) <= 0.15 && std::abs(u) <= 2.5;
        if (in)
          for (std::size_t c = 0; c < 3; ++c) img(y, x, c) = col[c];
      }
  }
  return img;
}

/// Inverse-mapped bilinear warp by `a` (source -> destination); uncovered pixels are mid grey.
inline Tensor warp_affine(const Tensor& img, const Affine& a) {
  const std::size_t H = img.extent(0), W = img.extent(1), C = img.extent(2);
  const double det = a.m[0] * a.m[4] - a.m[1] * a.m[3];
  if (std::abs(det) < 1e-12) throw std::invalid_argument("warp_affine: singular transform");
  const double ia = a.m[4] / det, ib = -a.m[1] / det, ic = -a.m[3] / det, id = a.m[0] / det;
  Tensor out({H, W, C}, 0.5);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double dx = double(x) - a.m[2], dy = double(y) - a.m[5];
      const double sx = ia * dx + ib * dy, sy = ic * dx + id * dy;
      if (sx < 0 || sy < 0 || sx > double(W - 1) || sy > double(H - 1)) continue;
      const auto x0 = std::size_t(sx), y0 = std::size_t(sy);
      const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double fx = sx - double(x0), fy = sy - double(y0);
      for (std::size_t c = 0; c < C; ++c)
        out(y, x, c) = (1 - fy) * ((1 - fx) * img(y0, x0, c) + fx * img(y0, x1, c)) +
                       fy * ((1 - fx) * img(y1, x0, c) + fx * img(y1, x1, c));
    }
  return out;
}

/// Random similarity about the image centre: rotation within +-12 degrees,
/// scale 0.9..1.1, shift up to 6 px.
inline Affine random_similarity(std::size_t size, Rng& rng) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  const double th = U(rng) * 12.0 * std::numbers::pi / 180.0, s = 1.0 + 0.1 * U(rng);
  const double c = double(size) / 2.0, tx = 6.0 * U(rng), ty = 6.0 * U(rng);
  Affine a;
  a.m = {s * std::cos(th), -s * std::sin(th), 0, s * std::sin(th), s * std::cos(th), 0};
  a.m[2] = c - (a.m[0] * c + a.m[1] * c) + tx;
  a.m[5] = c - (a.m[3] * c + a.m[4] * c) + ty;
  return a;
}

struct DedupFixture {
  CategoryIndex categories;
  std::map<std::string, Tensor> train_images;
  std::map<std::string, Tensor> query_images;
  std::set<std::string> planted_gids;
  std::map<std::string, std::string> query_source;  // query id -> planted training image id
};

struct DedupFixtureParams {
  std::size_t categories = 50;
  std::size_t images_per_category = 3;
  std::size_t planted = 5;
  std::size_t queries_per_planted = 2;
  std::size_t image_size = 128;
  std::uint64_t seed = 0;
};

inline DedupFixture make_dedup_fixture(const DedupFixtureParams& p = {}) {
  if (p.planted > p.categories) throw ConfigError("dedup fixture: more planted categories than categories");
  if (p.queries_per_planted > p.images_per_category)
    throw ConfigError("dedup fixture: queries_per_planted must not exceed images_per_category");
  DedupFixture f;
  Rng rng(derive_seed(p.seed, "dedup-fixture"));
  std::vector<std::size_t> order(p.categories);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const std::set<std::size_t> planted(order.begin(), order.begin() + std::ptrdiff_t(p.planted));

  char buf[32];
  std::size_t qn = 0;
  for (std::size_t c = 0; c < p.categories; ++c) {
    std::snprintf(buf, sizeof buf, "G%05zu", 10007 * (c + 1) % 99991);
    LandmarkCategory cat{buf, "Synthetic landmark " + std::to_string(c + 1), {}};
    for (std::size_t i = 0; i < p.images_per_category; ++i) {
      const std::string id = "train_" + std::to_string(c) + "_" + std::to_string(i);
      f.train_images[id] = render_scene(p.image_size, derive_seed(p.seed, "scene", c * 1000 + i));
      cat.image_ids.push_back(id);
    }
    if (planted.count(c)) {
      f.planted_gids.insert(cat.gid);
      for (std::size_t q = 0; q < p.queries_per_planted; ++q) {
        std::snprintf(buf, sizeof buf, "query_%02zu", qn++);
        const auto& src = cat.image_ids[q];
        f.query_images[buf] = warp_affine(f.train_images[src], random_similarity(p.image_size, rng));
        f.query_source[buf] = src;
      }
    }
    f.categories.push_back(std::move(cat));
  }
  return f;
}

/// Scripted evaluator: confirms AutoVerified visual candidates whose GID is in
/// `truth` and Confirmed-eligible text candidates in `truth`; rejects the rest.
inline void scripted_verdicts(std::vector<CandidateMatch>& cands, const std::set<std::string>& truth) {
  for (auto& c : cands) {
    const bool eligible = c.reason == CandidateReason::Text || c.status == CandidateStatus::AutoVerified;
    c.status = eligible && truth.count(c.gid) ? CandidateStatus::Confirmed : CandidateStatus::Rejected;
  }
}

struct DedupRun {
  std::vector<CandidateMatch> candidates;  // after auto-verification, before verdicts
  RemovalManifest manifest;                // after scripted verdicts
};

/// rank -> verify -> scripted verdicts -> aggregate over an in-memory fixture.
inline DedupRun run_dedup_pipeline(const EmbeddingModel& model, const CategoryIndex& cats,
                                   const std::map<std::string, Tensor>& train_images,
                                   const std::map<std::string, Tensor>& query_images, const std::set<std::string>& truth,
                                   std::size_t k = 5, const VerifyParams& vp = {}) {
  DescriptorStore train(model.embed_dim()), queries(model.embed_dim());
  const auto gid_of = image_to_gid(cats);
  for (const auto& c : cats)
    for (const auto& id : c.image_ids) train.add(id, model.embed(train_images.at(id)), c.gid);
  for (const auto& [id, img] : query_images) queries.add(id, model.embed(img));

  DedupRun run;
  run.candidates = rank_candidates(queries, train, gid_of, k);
  std::map<std::string, std::vector<LocalFeature>> cache;
  const FeatureSource features = [&](const std::string& id) -> const std::vector<LocalFeature>& {
    auto it = cache.find(id);
    if (it != cache.end()) return it->second;
    auto q = query_images.find(id);
    if (q == query_images.end()) q = train_images.find(id);
    if (q == train_images.end()) throw DataError("no image for '" + id + "'");
    const Tensor& img = q->second;
    return cache.emplace(id, detect_features(img, vp.detector)).first->second;
  };
  auto_verify(run.candidates, features, vp);
  auto judged = run.candidates;
  scripted_verdicts(judged, truth);
  run.manifest = aggregate_removals(judged, cats);
  return run;
}

}  // namespace d2r
