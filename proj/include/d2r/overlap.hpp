#pragma once

// Train/test overlap detection: candidate ranking, spatial auto-verification,
// text-name candidates, aggregation of human verdicts into a removal
// manifest, and application of the manifest to a category index.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "d2r/ann.hpp"
#include "d2r/eval.hpp"
#include "d2r/verification.hpp"

namespace d2r {

struct LandmarkCategory {
  std::string gid;
  std::string name;
  std::vector<std::string> image_ids;
};

/// Ordered by first appearance of each GID.
using CategoryIndex = std::vector<LandmarkCategory>;

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace detail

/// Rows of (gid, name, image_id); a header row starting with "gid" is skipped.
inline CategoryIndex parse_categories_csv(std::istream& is, const std::string& origin = "<csv>") {
  CategoryIndex out;
  std::map<std::string, std::size_t> pos;
  std::set<std::pair<std::string, std::string>> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv_line(line);
    if (lineno == 1 && !f.empty() && f[0] == "gid") continue;
    if (f.size() != 3) throw DataError(origin + ":" + std::to_string(lineno) + ": expected 3 fields (gid,name,image_id)");
    if (f[0].empty() || f[2].empty()) throw DataError(origin + ":" + std::to_string(lineno) + ": empty gid or image_id");
    auto [it, fresh] = pos.try_emplace(f[0], out.size());
    if (fresh) out.push_back({f[0], f[1], {}});
    if (!seen.emplace(f[0], f[2]).second)
      throw DataError(origin + ":" + std::to_string(lineno) + ": duplicate image '" + f[2] + "' in " + f[0]);
    out[it->second].image_ids.push_back(f[2]);
  }
  return out;
}

inline CategoryIndex load_categories_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("categories: cannot open " + path.string());
  return parse_categories_csv(is, path.string());
}

inline void write_categories_csv(std::ostream& os, const CategoryIndex& cats) {
  os << "gid,name,image_id\n";
  for (const auto& c : cats)
    for (const auto& id : c.image_ids) os << detail::csv_field(c.gid) << ',' << detail::csv_field(c.name) << ',' << detail::csv_field(id) << '\n';
}

inline std::map<std::string, std::string> image_to_gid(const CategoryIndex& cats) {
  std::map<std::string, std::string> m;
  for (const auto& c : cats)
    for (const auto& id : c.image_ids) m[id] = c.gid;
  return m;
}

// ---------------------------------------------------------------------------
// Candidates

enum class CandidateStatus { Pending, AutoVerified, Confirmed, Rejected };
enum class CandidateReason { Visual, Text };

inline std::string to_string(CandidateStatus s) {
  switch (s) {
    case CandidateStatus::Pending: return "Pending";
    case CandidateStatus::AutoVerified: return "AutoVerified";
    case CandidateStatus::Confirmed: return "Confirmed";
    case CandidateStatus::Rejected: return "Rejected";
  }
  return "?";
}

inline CandidateStatus parse_status(const std::string& s) {
  if (s == "Pending") return CandidateStatus::Pending;
  if (s == "AutoVerified") return CandidateStatus::AutoVerified;
  if (s == "Confirmed") return CandidateStatus::Confirmed;
  if (s == "Rejected") return CandidateStatus::Rejected;
  throw DataError("unknown candidate status '" + s + "'");
}

inline std::string to_string(CandidateReason r) { return r == CandidateReason::Visual ? "Visual" : "Text"; }

inline CandidateReason parse_reason(const std::string& s) {
  if (s == "Visual") return CandidateReason::Visual;
  if (s == "Text") return CandidateReason::Text;
  throw DataError("unknown candidate reason '" + s + "'");
}

struct CandidateMatch {
  std::string id;
  std::string query_id;        // empty for text candidates
  std::string train_image_id;  // empty for text candidates
  std::string gid;
  double cosine = 0;
  std::size_t tentative_count = 0;
  std::size_t inlier_count = 0;
  std::array<double, 6> transform{};
  // Bounding boxes (x0, y0, x1, y1) of the RANSAC inliers in each image; all zero when none.
  std::array<double, 4> query_box{};
  std::array<double, 4> train_box{};
  CandidateStatus status = CandidateStatus::Pending;
  CandidateReason reason = CandidateReason::Visual;
  std::string note;
};

inline void to_json(nlohmann::json& j, const CandidateMatch& c) {
  j = {{"id", c.id},
       {"query_id", c.query_id},
       {"train_image_id", c.train_image_id},
       {"gid", c.gid},
       {"cosine", c.cosine},
       {"tentative_count", c.tentative_count},
       {"inlier_count", c.inlier_count},
       {"transform", c.transform},
       {"query_box", c.query_box},
       {"train_box", c.train_box},
       {"status", to_string(c.status)},
       {"reason", to_string(c.reason)}};
  if (!c.note.empty()) j["note"] = c.note;
}

inline void from_json(const nlohmann::json& j, CandidateMatch& c) {
  c.id = j.at("id").get<std::string>();
  c.query_id = j.value("query_id", "");
  c.train_image_id = j.value("train_image_id", "");
  c.gid = j.at("gid").get<std::string>();
  c.cosine = j.value("cosine", 0.0);
  c.tentative_count = j.value("tentative_count", std::size_t{0});
  c.inlier_count = j.value("inlier_count", std::size_t{0});
  c.transform = j.value("transform", std::array<double, 6>{});
  c.query_box = j.value("query_box", std::array<double, 4>{});
  c.train_box = j.value("train_box", std::array<double, 4>{});
  c.status = parse_status(j.value("status", "Pending"));
  c.reason = parse_reason(j.value("reason", "Visual"));
  c.note = j.value("note", "");
  if (c.inlier_count > c.tentative_count) throw DataError("candidate " + c.id + ": inlier_count exceeds tentative_count");
}

inline void write_candidates_jsonl(const std::filesystem::path& path, const std::vector<CandidateMatch>& cs) {
  std::ofstream os(path);
  if (!os) throw DataError("candidates: cannot write " + path.string());
  for (const auto& c : cs) os << nlohmann::json(c).dump() << '\n';
}

inline std::vector<CandidateMatch> read_candidates_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("candidates: cannot open " + path.string());
  std::vector<CandidateMatch> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<CandidateMatch>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::string visual_candidate_id(const std::string& query, const std::string& train) { return "v:" + query + ":" + train; }
inline std::string text_candidate_id(const std::string& gid) { return "t:" + gid; }

/// Top-k training images per query (exact search, or the ANN index when given).
inline std::vector<CandidateMatch> rank_candidates(const DescriptorStore& queries, const DescriptorStore& train,
                                                   const std::map<std::string, std::string>& gid_of, std::size_t k = 5,
                                                   const AnnIndex* ann = nullptr) {
  if (!queries.empty() && !train.empty() && queries.dim() != train.dim())
    throw DataError("rank_candidates: query dim " + std::to_string(queries.dim()) + " vs train dim " + std::to_string(train.dim()));
  std::vector<CandidateMatch> out;
  if (train.empty()) return out;
  for (const auto& q : queries.items()) {
    const auto hits = ann ? ann->search(q.vector, k, std::max<std::size_t>(64, k)) : search_exact(train, q.vector, k);
    for (const auto& h : hits) {
      CandidateMatch c;
      c.id = visual_candidate_id(q.image_id, h.id);
      c.query_id = q.image_id;
      c.train_image_id = h.id;
      auto g = gid_of.find(h.id);
      c.gid = g != gid_of.end() ? g->second : (train[h.index].category_id ? *train[h.index].category_id : "");
      c.cosine = h.score;
      out.push_back(std::move(c));
    }
  }
  return out;
}

struct VerifyParams {
  std::size_t min_inliers = 15;
  double ratio = 0.8;
  RansacParams ransac;
  DetectorParams detector;
};

struct PairVerification {
  std::size_t tentative = 0;
  std::size_t inliers = 0;
  std::optional<Affine> transform;
  std::array<double, 4> box_a{}, box_b{};
};

inline PairVerification verify_features(const std::vector<LocalFeature>& a, const std::vector<LocalFeature>& b,
                                        const VerifyParams& p) {
  PairVerification v;
  const auto pairs = match_tentative(a, b, p.ratio);
  v.tentative = pairs.size();
  const auto cs = correspondences(a, b, pairs);
  const auto r = ransac_verify(cs, p.ransac);
  v.inliers = r.inliers.size();
  v.transform = r.transform;
  if (!r.inliers.empty()) {
    v.box_a = {1e300, 1e300, -1e300, -1e300};
    v.box_b = v.box_a;
    for (auto i : r.inliers) {
      const auto& c = cs[i];
      v.box_a = {std::min(v.box_a[0], c.x1), std::min(v.box_a[1], c.y1), std::max(v.box_a[2], c.x1), std::max(v.box_a[3], c.y1)};
      v.box_b = {std::min(v.box_b[0], c.x2), std::min(v.box_b[1], c.y2), std::max(v.box_b[2], c.x2), std::max(v.box_b[3], c.y2)};
    }
  }
  return v;
}

/// Applies the inlier threshold to a counted candidate.
inline void apply_inlier_threshold(CandidateMatch& c, std::size_t min_inliers) {
  c.status = c.inlier_count >= min_inliers ? CandidateStatus::AutoVerified : CandidateStatus::Rejected;
}

/// Feature lookup by image id; may throw DataError for unloadable images.
using FeatureSource = std::function<const std::vector<LocalFeature>&(const std::string& image_id)>;

/// Spatially verifies every visual candidate; text candidates pass through.
inline void auto_verify(std::vector<CandidateMatch>& cands, const FeatureSource& features, const VerifyParams& p = {}) {
  for (auto& c : cands) {
    if (c.reason != CandidateReason::Visual) continue;
    try {
      const auto& fa = features(c.query_id);
      const auto& fb = features(c.train_image_id);
      const auto v = verify_features(fa, fb, p);
      c.tentative_count = v.tentative;
      c.inlier_count = v.inliers;
      c.transform = v.transform ? v.transform->m : std::array<double, 6>{};
      c.query_box = v.box_a;
      c.train_box = v.box_b;
      apply_inlier_threshold(c, p.min_inliers);
    } catch (const DataError& e) {
      c.status = CandidateStatus::Rejected;
      c.note = std::string("unverifiable: ") + e.what();
    }
  }
}

/// Feature cache that loads images from `dir/<id>.<ext>` on first use.
class FeatureCache {
 public:
  FeatureCache(std::filesystem::path dir, DetectorParams p = {}) : dir_(std::move(dir)), params_(p) {}

  const std::vector<LocalFeature>& operator()(const std::string& id) {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(id, detect_features(load_image(resolve(id)), params_)).first->second;
  }

  std::filesystem::path resolve(const std::string& id) const {
    for (const char* ext : {".png", ".ppm", ".pgm", ".PNG"}) {
      auto p = dir_ / (id + ext);
      if (std::filesystem::exists(p)) return p;
    }
    throw DataError("no image file for '" + id + "' under " + dir_.string());
  }

 private:
  std::filesystem::path dir_;
  DetectorParams params_;
  std::map<std::string, std::vector<LocalFeature>> cache_;
};

inline const std::vector<std::string> kDefaultNeedles = {"Oxford", "Paris"};

inline std::string lowercase(std::string s) {
  for (auto& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

/// One Pending text candidate per category whose name contains any needle
/// (case-insensitive substring).
inline std::vector<CandidateMatch> text_candidates(const CategoryIndex& cats,
                                                   const std::vector<std::string>& needles = kDefaultNeedles) {
  if (needles.empty()) throw ConfigError("text_candidates: needles must be nonempty");
  std::vector<std::string> low;
  for (const auto& n : needles) low.push_back(lowercase(n));
  std::vector<CandidateMatch> out;
  for (const auto& c : cats) {
    const auto name = lowercase(c.name);
    if (std::none_of(low.begin(), low.end(), [&](const std::string& n) { return name.find(n) != std::string::npos; }))
      continue;
    CandidateMatch m;
    m.id = text_candidate_id(c.gid);
    m.gid = c.gid;
    m.reason = CandidateReason::Text;
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string gid;
  std::string name;
  std::size_t image_count = 0;
  CandidateReason reason = CandidateReason::Visual;
  bool operator==(const ManifestEntry&) const = default;
};

struct RemovalManifest {
  std::vector<ManifestEntry> removed;
  std::vector<std::string> notes;  // tie resolutions and other audit remarks

  std::size_t total_gids() const { return removed.size(); }
  std::size_t total_images() const {
    std::size_t n = 0;
    for (const auto& e : removed) n += e.image_count;
    return n;
  }
  std::set<std::string> gids() const {
    std::set<std::string> s;
    for (const auto& e : removed) s.insert(e.gid);
    return s;
  }
};

inline void to_json(nlohmann::json& j, const RemovalManifest& m) {
  j = {{"removed", nlohmann::json::array()}, {"totals", {{"gids", m.total_gids()}, {"images", m.total_images()}}}};
  for (std::size_t i = 0; i < m.removed.size(); ++i) {
    const auto& e = m.removed[i];
    j["removed"].push_back({{"#", i + 1}, {"GID", e.gid}, {"#Images", e.image_count}, {"names", e.name}, {"reason", to_string(e.reason)}});
  }
  if (!m.notes.empty()) j["notes"] = m.notes;
}

inline void from_json(const nlohmann::json& j, RemovalManifest& m) {
  m = {};
  std::set<std::string> seen;
  for (const auto& o : j.at("removed")) {
    ManifestEntry e{o.at("GID").get<std::string>(), o.value("names", ""), o.at("#Images").get<std::size_t>(),
                    parse_reason(o.value("reason", "Visual"))};
    if (!seen.insert(e.gid).second) throw DataError("manifest: duplicate GID " + e.gid);
    m.removed.push_back(std::move(e));
  }
  m.notes = j.value("notes", std::vector<std::string>{});
  if (j.contains("totals")) {
    const auto& t = j["totals"];
    if (t.value("gids", m.total_gids()) != m.total_gids() || t.value("images", m.total_images()) != m.total_images())
      throw DataError("manifest: totals disagree with entries");
  }
}

/// Folds terminal candidates into a manifest. Per query, the most frequent
/// GID among Confirmed visual candidates is removed (all tied GIDs on a tie);
/// Confirmed text candidates remove their GID. Entries follow category order.
inline RemovalManifest aggregate_removals(const std::vector<CandidateMatch>& cands, const CategoryIndex& cats) {
  RemovalManifest m;
  std::map<std::string, CandidateReason> marked;
  std::map<std::string, std::map<std::string, std::size_t>> per_query;
  for (const auto& c : cands) {
    if (c.status != CandidateStatus::Confirmed) continue;
    if (c.reason == CandidateReason::Text)
      marked.try_emplace(c.gid, CandidateReason::Text);
    else
      ++per_query[c.query_id][c.gid];
  }
  for (const auto& [q, counts] : per_query) {
    std::size_t best = 0;
    for (const auto& [g, n] : counts) best = std::max(best, n);
    std::vector<std::string> top;
    for (const auto& [g, n] : counts)
      if (n == best) top.push_back(g);
    if (top.size() > 1) {
      std::string note = "query " + q + ": tie at " + std::to_string(best) + " between";
      for (const auto& g : top) note += " " + g;
      m.notes.push_back(note + "; all removed");
    }
    for (const auto& g : top) marked[g] = CandidateReason::Visual;
  }
  std::set<std::string> known;
  for (const auto& c : cats) {
    known.insert(c.gid);
    auto it = marked.find(c.gid);
    if (it != marked.end()) m.removed.push_back({c.gid, c.name, c.image_ids.size(), it->second});
  }
  for (const auto& [g, r] : marked)
    if (!known.count(g)) m.notes.push_back("GID " + g + " is not in the category index; skipped");
  return m;
}

struct CorpusStats {
  std::size_t images = 0;
  std::size_t categories = 0;
  bool operator==(const CorpusStats&) const = default;
};

inline CorpusStats corpus_stats(const CategoryIndex& cats) {
  CorpusStats s{0, cats.size()};
  for (const auto& c : cats) s.images += c.image_ids.size();
  return s;
}

/// Corpus totals after removing the manifest's categories.
inline CorpusStats apply_manifest_stats(const CorpusStats& before, const RemovalManifest& m) {
  if (m.total_gids() > before.categories || m.total_images() > before.images)
    throw DataError("manifest removes more than the corpus holds");
  return {before.images - m.total_images(), before.categories - m.total_gids()};
}

struct ManifestApplication {
  CategoryIndex revised;
  CorpusStats before, after;
};

inline ManifestApplication apply_manifest(const CategoryIndex& cats, const RemovalManifest& m) {
  std::set<std::string> known;
  for (const auto& c : cats) known.insert(c.gid);
  std::vector<std::string> unknown;
  for (const auto& e : m.removed)
    if (!known.count(e.gid)) unknown.push_back(e.gid);
  if (!unknown.empty()) {
    std::string msg = "apply_manifest: unknown GIDs";
    for (const auto& g : unknown) msg += " " + g;
    throw DataError(msg);
  }
  const auto drop = m.gids();
  ManifestApplication a;
  a.before = corpus_stats(cats);
  for (const auto& c : cats)
    if (!drop.count(c.gid)) a.revised.push_back(c);
  a.after = corpus_stats(a.revised);
  return a;
}

}  // namespace d2r
