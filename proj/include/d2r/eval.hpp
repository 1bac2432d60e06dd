#pragma once

// Descriptor store, exact cosine search and revisited-protocol evaluation
// (Base / Medium / Hard, mAP and mP@k).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "d2r/ckt_io.hpp"
#include "d2r/error.hpp"
#include "d2r/tensor.hpp"

namespace d2r {

inline constexpr double kUnitNormTolerance = 1e-5;

struct Descriptor {
  std::string image_id;
  std::optional<std::string> category_id;
  std::vector<double> vector;
};

class DescriptorStore {
 public:
  DescriptorStore() = default;
  explicit DescriptorStore(std::size_t dim) : dim_(dim) {}

  void add(Descriptor d) {
    if (dim_ == 0) dim_ = d.vector.size();
    if (d.vector.size() != dim_)
      throw DataError("store: descriptor '" + d.image_id + "' has dim " + std::to_string(d.vector.size()) +
                      ", store dim " + std::to_string(dim_));
    const double n = l2_norm(d.vector);
    if (std::abs(n - 1.0) > kUnitNormTolerance)
      throw DataError("store: descriptor '" + d.image_id + "' is not unit-norm (" + std::to_string(n) + ")");
    if (!index_.emplace(d.image_id, items_.size()).second) throw DataError("store: duplicate image id '" + d.image_id + "'");
    items_.push_back(std::move(d));
  }

  void add(std::string id, const Tensor& u, std::optional<std::string> category = std::nullopt) {
    add(Descriptor{std::move(id), std::move(category), std::vector<double>(u.values().begin(), u.values().end())});
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t dim() const { return dim_; }
  const Descriptor& operator[](std::size_t i) const { return items_[i]; }
  const std::vector<Descriptor>& items() const { return items_; }

  const Descriptor* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &items_[it->second];
  }
  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // <stem>.ckt holds one (n, d) matrix; <stem>.json lists ids and categories in row order.
  void save(const std::filesystem::path& stem) const {
    if (items_.empty()) throw DataError("store: refusing to save an empty store");
    Tensor m({items_.size(), dim_});
    nlohmann::json manifest{{"format", "d2r-store-1"}, {"dim", dim_}, {"items", nlohmann::json::array()}};
    for (std::size_t i = 0; i < items_.size(); ++i) {
      std::copy(items_[i].vector.begin(), items_[i].vector.end(), &m(i, 0));
      nlohmann::json item{{"id", items_[i].image_id}};
      if (items_[i].category_id) item["category"] = *items_[i].category_id;
      manifest["items"].push_back(std::move(item));
    }
    ckt::save(stem.string() + ".ckt", {m});
    std::ofstream os(stem.string() + ".json");
    if (!os) throw DataError("store: cannot write " + stem.string() + ".json");
    os << manifest.dump(1) << '\n';
  }

  /// Vectors are stored as f32, so rows are renormalized on load.
  static DescriptorStore load(const std::filesystem::path& stem) {
    std::ifstream is(stem.string() + ".json");
    if (!is) throw DataError("store: cannot open " + stem.string() + ".json");
    nlohmann::json manifest;
    try {
      is >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("store: malformed manifest: ") + e.what());
    }
    const auto records = ckt::load(stem.string() + ".ckt");
    if (records.size() != 1 || records[0].rank() != 2) throw DataError("store: expected one (n, d) matrix in " + stem.string() + ".ckt");
    const Tensor& m = records[0];
    const auto& items = manifest.at("items");
    if (items.size() != m.extent(0))
      throw DataError("store: manifest lists " + std::to_string(items.size()) + " ids, matrix has " +
                      std::to_string(m.extent(0)) + " rows");
    DescriptorStore s(m.extent(1));
    for (std::size_t i = 0; i < items.size(); ++i) {
      std::vector<double> v(&m(i, 0), &m(i, 0) + m.extent(1));
      const double n = l2_norm(v);
      if (n > 0)
        for (auto& x : v) x /= n;
      std::optional<std::string> cat;
      if (items[i].contains("category")) cat = items[i]["category"].get<std::string>();
      s.add(Descriptor{items[i].at("id").get<std::string>(), std::move(cat), std::move(v)});
    }
    return s;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<Descriptor> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct SearchHit {
  std::string id;
  double score = 0;
  std::size_t index = 0;
};

/// Descending score, ties by ascending id.
inline bool hit_order(const SearchHit& a, const SearchHit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

/// Top-k by cosine; k larger than the store returns every item.
inline std::vector<SearchHit> search_exact(const DescriptorStore& store, std::span<const double> query, std::size_t k) {
  if (store.empty()) throw DataError("search: empty store");
  if (k == 0) throw ConfigError("search: k must be >= 1");
  if (query.size() != store.dim())
    throw DataError("search: query dim " + std::to_string(query.size()) + " vs store dim " + std::to_string(store.dim()));
  std::vector<SearchHit> hits(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) hits[i] = {store[i].image_id, dot(query, store[i].vector), i};
  k = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + std::ptrdiff_t(k), hits.end(), hit_order);
  hits.resize(k);
  return hits;
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {

/// 1-based ranks of positives after junk has been closed up.
inline std::vector<std::size_t> positive_ranks(std::span<const std::string> ranking,
                                               const std::unordered_set<std::string>& positives,
                                               const std::unordered_set<std::string>& junk) {
  std::vector<std::size_t> ranks;
  std::size_t r = 0;
  for (const auto& id : ranking) {
    if (junk.count(id)) continue;
    ++r;
    if (positives.count(id)) ranks.push_back(r);
  }
  return ranks;
}

}  // namespace detail

/// Non-interpolated AP: junk removed from the ranking, then the mean over all
/// positives of precision at each positive's rank; unretrieved positives add 0.
inline double average_precision(std::span<const std::string> ranking, const std::unordered_set<std::string>& positives,
                                const std::unordered_set<std::string>& junk = {}) {
  if (positives.empty()) throw DataError("average_precision: empty positive set");
  const auto ranks = detail::positive_ranks(ranking, positives, junk);
  double ap = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) ap += double(i + 1) / double(ranks[i]);
  return ap / double(positives.size());
}

/// Precision at k with denominator kq = min(rank of last positive, k); 0 if no positive is retrieved.
inline double precision_at_k(std::span<const std::string> ranking, const std::unordered_set<std::string>& positives,
                             const std::unordered_set<std::string>& junk, std::size_t k) {
  if (k == 0) throw ConfigError("precision_at_k: k must be >= 1");
  const auto ranks = detail::positive_ranks(ranking, positives, junk);
  if (ranks.empty()) return 0.0;
  const std::size_t kq = std::min(ranks.back(), k);
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [&](std::size_t r) { return r <= kq; });
  return double(hits) / double(kq);
}

// ---------------------------------------------------------------------------
// Evaluation sets

struct CropRect {
  std::size_t x = 0, y = 0, w = 0, h = 0;
  bool operator==(const CropRect&) const = default;
};

struct EvalQuery {
  std::string id;
  std::optional<CropRect> crop;
  std::set<std::string> easy, hard, junk;
};

struct EvaluationSet {
  std::vector<EvalQuery> queries;
  std::vector<std::string> gallery;

  void validate() const {
    for (const auto& q : queries) {
      for (const auto& e : q.easy)
        if (q.hard.count(e) || q.junk.count(e)) throw DataError("eval set: query '" + q.id + "' lists '" + e + "' twice");
      for (const auto& h : q.hard)
        if (q.junk.count(h)) throw DataError("eval set: query '" + q.id + "' lists '" + h + "' twice");
      if (q.crop && (q.crop->w == 0 || q.crop->h == 0)) throw DataError("eval set: query '" + q.id + "' has an empty crop");
    }
  }
};

inline void to_json(nlohmann::json& j, const EvaluationSet& s) {
  j = {{"queries", nlohmann::json::array()}, {"gallery", s.gallery}};
  for (const auto& q : s.queries) {
    nlohmann::json o{{"id", q.id}, {"easy", q.easy}, {"hard", q.hard}, {"junk", q.junk}};
    if (q.crop) o["crop"] = {q.crop->x, q.crop->y, q.crop->w, q.crop->h};
    j["queries"].push_back(std::move(o));
  }
}

inline void from_json(const nlohmann::json& j, EvaluationSet& s) {
  try {
    s.gallery = j.at("gallery").get<std::vector<std::string>>();
    s.queries.clear();
    for (const auto& o : j.at("queries")) {
      EvalQuery q;
      q.id = o.at("id").get<std::string>();
      if (o.contains("crop") && !o["crop"].is_null()) {
        const auto c = o["crop"].get<std::vector<std::size_t>>();
        if (c.size() != 4) throw DataError("eval set: crop of '" + q.id + "' must be [x, y, w, h]");
        q.crop = CropRect{c[0], c[1], c[2], c[3]};
      }
      q.easy = o.value("easy", std::set<std::string>{});
      q.hard = o.value("hard", std::set<std::string>{});
      q.junk = o.value("junk", std::set<std::string>{});
      s.queries.push_back(std::move(q));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("eval set: ") + e.what());
  }
  s.validate();
}

inline EvaluationSet load_evaluation_set(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("eval set: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("eval set: malformed JSON in " + path.string() + ": " + e.what());
  }
  return j.get<EvaluationSet>();
}

enum class Protocol { Base, Medium, Hard };

inline Protocol parse_protocol(const std::string& s) {
  if (s == "base") return Protocol::Base;
  if (s == "medium") return Protocol::Medium;
  if (s == "hard") return Protocol::Hard;
  throw ConfigError("unknown protocol '" + s + "' (expected base, medium or hard)");
}

inline std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::Base: return "base";
    case Protocol::Medium: return "medium";
    case Protocol::Hard: return "hard";
  }
  return "?";
}

/// Positive and junk sets of one query under a protocol.
inline std::pair<std::unordered_set<std::string>, std::unordered_set<std::string>> protocol_sets(const EvalQuery& q,
                                                                                               Protocol p) {
  std::unordered_set<std::string> pos, junk(q.junk.begin(), q.junk.end());
  if (p == Protocol::Hard) {
    pos.insert(q.hard.begin(), q.hard.end());
    junk.insert(q.easy.begin(), q.easy.end());
  } else {
    pos.insert(q.easy.begin(), q.easy.end());
    pos.insert(q.hard.begin(), q.hard.end());
  }
  return {pos, junk};
}

struct EvalResult {
  double map = 0;
  std::map<std::size_t, double> mp_at_k;
  std::size_t evaluated = 0;
  std::vector<std::string> skipped;  // queries with no positives under the protocol
  std::map<std::string, double> per_query_ap;
};

/// Ranks the whole gallery for every query (the query's own id excluded) and
/// averages AP and P@k over queries that have positives.
inline EvalResult evaluate(const DescriptorStore& queries, const DescriptorStore& gallery, const EvaluationSet& set,
                           Protocol protocol, std::span<const std::size_t> k_list) {
  std::vector<std::string> missing;
  for (const auto& q : set.queries)
    if (!queries.find(q.id)) missing.push_back("query:" + q.id);
  for (const auto& g : set.gallery)
    if (!gallery.find(g)) missing.push_back("gallery:" + g);
  if (!missing.empty()) {
    std::string msg = "evaluate: missing descriptors for";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ... (" + std::to_string(missing.size()) + " total)";
    throw DataError(msg);
  }

  std::vector<std::size_t> gallery_rows;
  for (const auto& g : set.gallery) gallery_rows.push_back(*gallery.index_of(g));

  EvalResult res;
  for (std::size_t k : k_list) res.mp_at_k[k] = 0;
  for (const auto& q : set.queries) {
    auto [pos, junk] = protocol_sets(q, protocol);
    if (pos.empty()) {
      res.skipped.push_back(q.id);
      continue;
    }
    const auto& qv = queries.find(q.id)->vector;
    std::vector<SearchHit> hits;
    hits.reserve(gallery_rows.size());
    for (std::size_t row : gallery_rows) {
      const auto& d = gallery[row];
      if (d.image_id == q.id) continue;
      hits.push_back({d.image_id, dot(std::span<const double>(qv), d.vector), row});
    }
    std::sort(hits.begin(), hits.end(), hit_order);
    std::vector<std::string> ranking;
    ranking.reserve(hits.size());
    for (auto& h : hits) ranking.push_back(std::move(h.id));

    const double ap = average_precision(ranking, pos, junk);
    res.per_query_ap[q.id] = ap;
    res.map += ap;
    for (std::size_t k : k_list) res.mp_at_k[k] += precision_at_k(ranking, pos, junk, k);
    ++res.evaluated;
  }
  if (res.evaluated) {
    res.map /= double(res.evaluated);
    for (auto& [k, v] : res.mp_at_k) v /= double(res.evaluated);
  }
  return res;
}

/// Single-store convenience: queries and gallery share one descriptor set.
inline EvalResult evaluate(const DescriptorStore& store, const EvaluationSet& set, Protocol protocol,
                           std::span<const std::size_t> k_list) {
  return evaluate(store, store, set, protocol, k_list);
}

/// Evaluation set where every image is a query and same-category images are easy positives.
inline EvaluationSet category_evaluation_set(const DescriptorStore& store) {
  EvaluationSet s;
  std::map<std::string, std::set<std::string>> by_cat;
  for (const auto& d : store.items()) {
    s.gallery.push_back(d.image_id);
    if (d.category_id) by_cat[*d.category_id].insert(d.image_id);
  }
  for (const auto& d : store.items()) {
    if (!d.category_id) continue;
    EvalQuery q;
    q.id = d.image_id;
    q.easy = by_cat[*d.category_id];
    q.easy.erase(d.image_id);
    s.queries.push_back(std::move(q));
  }
  return s;
}

}  // namespace d2r
