#pragma once

// Hierarchical navigable small-world graph over unit vectors (cosine).

#include <algorithm>
#include <cmath>
#include <queue>
#include <random>
#include <vector>

#include "d2r/eval.hpp"
#include "d2r/random.hpp"

namespace d2r {

struct AnnParams {
  std::size_t M = 16;
  std::size_t ef_construction = 100;
  std::uint64_t seed = 0;
};

class AnnIndex {
 public:
  /// Builds over every descriptor of `store`, which must outlive the index.
  static AnnIndex build(const DescriptorStore& store, const AnnParams& params = {}) {
    if (store.empty()) throw DataError("ann: cannot index an empty store");
    if (params.M < 2) throw ConfigError("ann: M must be >= 2");
    AnnIndex idx;
    idx.store_ = &store;
    idx.params_ = params;
    idx.level_mult_ = 1.0 / std::log(double(params.M));
    Rng rng(derive_seed(params.seed, "ann-levels"));
    idx.links_.resize(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) idx.insert(i, rng);
    return idx;
  }

  std::size_t size() const { return links_.size(); }
  std::size_t max_level() const { return max_level_; }
  const std::vector<std::vector<std::uint32_t>>& neighbors(std::size_t node) const { return links_[node]; }

  /// Approximate top-k by cosine; `ef` is the search beam (at least k).
  std::vector<SearchHit> search(std::span<const double> query, std::size_t k, std::size_t ef = 64) const {
    if (k == 0) throw ConfigError("ann: k must be >= 1");
    if (query.size() != store_->dim()) throw DataError("ann: query dim mismatch");
    std::uint32_t ep = entry_;
    double ep_d = distance(query, ep);
    for (std::size_t l = max_level_; l > 0; --l) greedy(query, ep, ep_d, l);
    auto found = search_layer(query, ep, ep_d, std::max(ef, k), 0);
    std::vector<SearchHit> hits;
    for (const auto& [d, n] : found) hits.push_back({(*store_)[n].image_id, 1.0 - d, n});
    std::sort(hits.begin(), hits.end(), hit_order);
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

  /// Graph as JSON; vectors stay in the store it was built over.
  nlohmann::json to_json() const {
    return {{"format", "d2r-ann-1"},   {"M", params_.M},      {"ef_construction", params_.ef_construction},
            {"seed", params_.seed},    {"entry", entry_},     {"max_level", max_level_},
            {"nodes", store_->size()}, {"dim", store_->dim()}, {"links", links_}};
  }

  static AnnIndex from_json(const nlohmann::json& j, const DescriptorStore& store) {
    AnnIndex idx;
    try {
      if (j.at("format") != "d2r-ann-1") throw DataError("ann: unknown index format");
      if (j.at("nodes").get<std::size_t>() != store.size() || j.at("dim").get<std::size_t>() != store.dim())
        throw DataError("ann: index was built over a different store");
      idx.store_ = &store;
      idx.params_ = {j.at("M").get<std::size_t>(), j.at("ef_construction").get<std::size_t>(), j.at("seed").get<std::uint64_t>()};
      idx.level_mult_ = 1.0 / std::log(double(idx.params_.M));
      idx.entry_ = j.at("entry").get<std::uint32_t>();
      idx.max_level_ = j.at("max_level").get<std::size_t>();
      idx.links_ = j.at("links").get<decltype(idx.links_)>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("ann: malformed index: ") + e.what());
    }
    if (idx.links_.size() != store.size() || idx.entry_ >= store.size()) throw DataError("ann: index does not match store");
    for (const auto& levels : idx.links_)
      for (const auto& l : levels)
        for (auto n : l)
          if (n >= store.size()) throw DataError("ann: link out of range");
    return idx;
  }

  /// Mean top-k overlap with exact search for `probes` stored vectors used as queries.
  double self_test_recall(std::size_t k = 10, std::size_t probes = 100) const {
    probes = std::min(probes, size());
    k = std::min(k, size());
    double acc = 0;
    for (std::size_t p = 0; p < probes; ++p) {
      const std::size_t q = p * size() / probes;
      const auto& v = (*store_)[q].vector;
      const auto exact = search_exact(*store_, v, k);
      const auto approx = search(v, k);
      std::size_t hit = 0;
      for (const auto& a : approx)
        hit += std::any_of(exact.begin(), exact.end(), [&](const SearchHit& e) { return e.index == a.index; });
      acc += double(hit) / double(k);
    }
    return probes ? acc / double(probes) : 1.0;
  }

 private:
  using Cand = std::pair<double, std::uint32_t>;  // (distance, node)

  const DescriptorStore* store_ = nullptr;
  AnnParams params_;
  double level_mult_ = 1.0;
  std::vector<std::vector<std::vector<std::uint32_t>>> links_;  // node -> level -> neighbours
  std::uint32_t entry_ = 0;
  std::size_t max_level_ = 0;

  double distance(std::span<const double> q, std::uint32_t n) const { return 1.0 - dot(q, (*store_)[n].vector); }
  double distance(std::uint32_t a, std::uint32_t b) const { return distance((*store_)[a].vector, b); }
  std::size_t max_links(std::size_t level) const { return level == 0 ? 2 * params_.M : params_.M; }

  void greedy(std::span<const double> q, std::uint32_t& ep, double& ep_d, std::size_t level) const {
    for (bool moved = true; moved;) {
      moved = false;
      for (std::uint32_t n : links_[ep][level]) {
        const double d = distance(q, n);
        if (d < ep_d || (d == ep_d && n < ep)) {
          ep = n, ep_d = d, moved = true;
        }
      }
    }
  }

  /// Beam search on one layer; returns up to `ef` closest nodes, nearest first.
  std::vector<Cand> search_layer(std::span<const double> q, std::uint32_t ep, double ep_d, std::size_t ef,
                                 std::size_t level) const {
    std::vector<char> visited(links_.size(), 0);
    std::priority_queue<Cand, std::vector<Cand>, std::greater<>> frontier;  // nearest on top
    std::priority_queue<Cand> best;                                       // farthest on top
    visited[ep] = 1;
    frontier.emplace(ep_d, ep);
    best.emplace(ep_d, ep);
    while (!frontier.empty()) {
      const auto [d, n] = frontier.top();
      if (d > best.top().first && best.size() >= ef) break;
      frontier.pop();
      for (std::uint32_t m : links_[n][level]) {
        if (visited[m]) continue;
        visited[m] = 1;
        const double dm = distance(q, m);
        if (best.size() < ef || dm < best.top().first) {
          frontier.emplace(dm, m);
          best.emplace(dm, m);
          if (best.size() > ef) best.pop();
        }
      }
    }
    std::vector<Cand> out;
    while (!best.empty()) out.push_back(best.top()), best.pop();
    std::reverse(out.begin(), out.end());
    return out;
  }

  /// Neighbour selection heuristic: keep a candidate only if it is closer to
  /// the base than to every neighbour already kept; fill up with the rest.
  std::vector<std::uint32_t> select(std::uint32_t base, const std::vector<Cand>& cands, std::size_t m) const {
    std::vector<std::uint32_t> kept, spare;
    for (const auto& [d, c] : cands) {
      if (c == base) continue;
      if (kept.size() >= m) break;
      const bool diverse = std::all_of(kept.begin(), kept.end(), [&](std::uint32_t k) { return distance(c, k) > d; });
      (diverse ? kept : spare).push_back(c);
    }
    for (std::size_t i = 0; kept.size() < m && i < spare.size(); ++i) kept.push_back(spare[i]);
    return kept;
  }

  void insert(std::size_t i, Rng& rng) {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const auto level = static_cast<std::size_t>(std::floor(-std::log(1.0 - U(rng)) * level_mult_));
    const auto node = static_cast<std::uint32_t>(i);
    links_[node].resize(level + 1);
    if (i == 0) {
      entry_ = node;
      max_level_ = level;
      return;
    }
    const auto& q = (*store_)[node].vector;
    std::uint32_t ep = entry_;
    double ep_d = distance(q, ep);
    for (std::size_t l = max_level_; l > level; --l) greedy(q, ep, ep_d, l);
    for (std::size_t l = std::min(level, max_level_) + 1; l-- > 0;) {
      auto cands = search_layer(q, ep, ep_d, params_.ef_construction, l);
      auto chosen = select(node, cands, params_.M);
      links_[node][l] = chosen;
      for (std::uint32_t n : chosen) {
        auto& nl = links_[n][l];
        nl.push_back(node);
        if (nl.size() > max_links(l)) {
          std::vector<Cand> pool;
          for (std::uint32_t x : nl) pool.emplace_back(distance(n, x), x);
          std::sort(pool.begin(), pool.end());
          nl = select(n, pool, max_links(l));
        }
      }
      ep = cands.front().second;
      ep_d = cands.front().first;
    }
    if (level > max_level_) {
      max_level_ = level;
      entry_ = node;
    }
  }
};

}  // namespace d2r
