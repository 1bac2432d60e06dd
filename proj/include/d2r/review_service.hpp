#pragma once

// Human review of overlap candidates: verdict log, derived statuses, and the
// HTTP endpoints evaluators use.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "d2r/overlap.hpp"

namespace d2r {

enum class Decision { Confirm, Reject };

inline std::string to_string(Decision d) { return d == Decision::Confirm ? "Confirm" : "Reject"; }

inline Decision parse_decision(const std::string& s) {
  if (s == "Confirm") return Decision::Confirm;
  if (s == "Reject") return Decision::Reject;
  throw DataError("unknown decision '" + s + "' (expected Confirm or Reject)");
}

struct Verdict {
  std::string candidate_id;
  std::string evaluator;
  Decision decision = Decision::Reject;
  std::int64_t timestamp = 0;  // UTC seconds
  bool operator==(const Verdict&) const = default;
};

inline void to_json(nlohmann::json& j, const Verdict& v) {
  j = {{"candidate_id", v.candidate_id}, {"evaluator", v.evaluator}, {"decision", to_string(v.decision)}, {"timestamp", v.timestamp}};
}

inline void from_json(const nlohmann::json& j, Verdict& v) {
  v.candidate_id = j.at("candidate_id").get<std::string>();
  v.evaluator = j.at("evaluator").get<std::string>();
  v.decision = parse_decision(j.at("decision").get<std::string>());
  v.timestamp = j.value("timestamp", std::int64_t{0});
}

inline std::int64_t utc_now() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
}

// ---------------------------------------------------------------------------
// Review state

enum class SubmitOutcome { Accepted, UnknownEvaluator, UnknownCandidate, Duplicate };

class ReviewState {
 public:
  /// Evaluators see AutoVerified visual candidates and all text candidates,
  /// or every candidate when `include_all` is set.
  ReviewState(std::vector<CandidateMatch> candidates, std::vector<std::string> evaluators, bool include_all = false)
      : candidates_(std::move(candidates)), evaluators_(evaluators.begin(), evaluators.end()), include_all_(include_all) {
    if (evaluators_.empty()) throw ConfigError("review: at least one evaluator is required");
    for (std::size_t i = 0; i < candidates_.size(); ++i)
      if (!index_.emplace(candidates_[i].id, i).second) throw DataError("review: duplicate candidate id '" + candidates_[i].id + "'");
  }

  bool has_evaluator(const std::string& e) const { return evaluators_.count(e) > 0; }
  const std::set<std::string>& evaluators() const { return evaluators_; }
  const std::vector<Verdict>& verdicts() const { return log_; }
  const std::vector<CandidateMatch>& candidates() const { return candidates_; }

  bool visible(const CandidateMatch& c) const {
    return include_all_ || c.reason == CandidateReason::Text || c.status == CandidateStatus::AutoVerified;
  }

  const CandidateMatch* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &candidates_[it->second];
  }

  /// Oldest visible candidate without a verdict from `evaluator`.
  const CandidateMatch* next_for(const std::string& evaluator) const {
    for (const auto& c : candidates_)
      if (visible(c) && !by_pair_.count({c.id, evaluator})) return &c;
    return nullptr;
  }

  SubmitOutcome check(const Verdict& v) const {
    if (!has_evaluator(v.evaluator)) return SubmitOutcome::UnknownEvaluator;
    if (!find(v.candidate_id)) return SubmitOutcome::UnknownCandidate;
    if (by_pair_.count({v.candidate_id, v.evaluator})) return SubmitOutcome::Duplicate;
    return SubmitOutcome::Accepted;
  }

  /// Records `v` if check() accepts it.
  SubmitOutcome apply(const Verdict& v) {
    const auto out = check(v);
    if (out != SubmitOutcome::Accepted) return out;
    by_pair_.emplace(std::make_pair(v.candidate_id, v.evaluator), log_.size());
    log_.push_back(v);
    return out;
  }

  /// Confirmed once anyone confirms; Rejected once every evaluator has
  /// rejected; otherwise the automatic status.
  CandidateStatus status(const CandidateMatch& c) const {
    std::size_t rejects = 0;
    for (const auto& e : evaluators_) {
      auto it = by_pair_.find({c.id, e});
      if (it == by_pair_.end()) continue;
      if (log_[it->second].decision == Decision::Confirm) return CandidateStatus::Confirmed;
      ++rejects;
    }
    return rejects == evaluators_.size() ? CandidateStatus::Rejected : c.status;
  }

  bool human_decided(const CandidateMatch& c) const {
    const auto s = status(c);
    return s == CandidateStatus::Confirmed || (s == CandidateStatus::Rejected && judged_by_anyone(c));
  }

  /// Candidates with derived statuses.
  std::vector<CandidateMatch> resolved() const {
    auto out = candidates_;
    for (auto& c : out) c.status = status(c);
    return out;
  }

  nlohmann::json summary(const CategoryIndex& cats) const {
    std::size_t pending = 0, confirmed = 0, rejected = 0;
    for (const auto& c : candidates_) {
      if (!visible(c)) continue;
      const auto s = status(c);
      if (s == CandidateStatus::Confirmed)
        ++confirmed;
      else if (human_decided(c))
        ++rejected;
      else
        ++pending;
    }
    const auto manifest = aggregate_removals(resolved(), cats);
    return {{"pending", pending},
            {"confirmed", confirmed},
            {"rejected", rejected},
            {"gids_marked", manifest.total_gids()},
            {"projected_manifest", manifest}};
  }

 private:
  bool judged_by_anyone(const CandidateMatch& c) const {
    for (const auto& e : evaluators_)
      if (by_pair_.count({c.id, e})) return true;
    return false;
  }

  std::vector<CandidateMatch> candidates_;
  std::map<std::string, std::size_t> index_;
  std::set<std::string> evaluators_;
  bool include_all_;
  std::vector<Verdict> log_;
  std::map<std::pair<std::string, std::string>, std::size_t> by_pair_;
};

// ---------------------------------------------------------------------------
// Append-only verdict log

class VerdictLog {
 public:
  explicit VerdictLog(std::filesystem::path path) : path_(std::move(path)) {}

  const std::filesystem::path& path() const { return path_; }

  /// Appends one line and fsyncs before returning.
  void append(const Verdict& v) {
    const std::string line = nlohmann::json(v).dump() + "\n";
    const int fd = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
    if (fd < 0) throw DataError("verdict log: cannot open " + path_.string());
    std::size_t off = 0;
    while (off < line.size()) {
      const auto n = ::write(fd, line.data() + off, line.size() - off);
      if (n < 0) {
        ::close(fd);
        throw DataError("verdict log: write failed for " + path_.string());
      }
      off += std::size_t(n);
    }
    const bool synced = ::fsync(fd) == 0;
    ::close(fd);
    if (!synced) throw DataError("verdict log: fsync failed for " + path_.string());
  }

  /// Every complete line in order. A trailing line without a newline is a torn
  /// write that was never acknowledged and is dropped.
  std::vector<Verdict> read() const {
    std::vector<Verdict> out;
    std::ifstream is(path_, std::ios::binary);
    if (!is) return out;
    std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::size_t start = 0, lineno = 0;
    while (start < content.size()) {
      const auto nl = content.find('\n', start);
      if (nl == std::string::npos) break;
      ++lineno;
      const std::string line = content.substr(start, nl - start);
      start = nl + 1;
      if (line.empty()) continue;
      try {
        out.push_back(nlohmann::json::parse(line).get<Verdict>());
      } catch (const nlohmann::json::exception& e) {
        throw DataError(path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return out;
  }

  /// Replays the log into `state`; entries the state refuses are errors.
  std::size_t replay(ReviewState& state) const {
    std::size_t n = 0;
    for (const auto& v : read()) {
      if (state.apply(v) != SubmitOutcome::Accepted)
        throw DataError("verdict log: cannot replay verdict by '" + v.evaluator + "' on '" + v.candidate_id + "'");
      ++n;
    }
    return n;
  }

 private:
  std::filesystem::path path_;
};

/// Candidates with derived statuses, one JSON object per line.
inline void write_snapshot(const std::filesystem::path& path, const ReviewState& state) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  write_candidates_jsonl(tmp, state.resolved());
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// HTTP

struct ReviewServiceConfig {
  std::filesystem::path image_dir;
  std::filesystem::path snapshot_path;  // empty: no snapshots
  std::size_t snapshot_every = 50;      // verdicts between snapshots
  std::string cors_origin = "*";
};

class ReviewService {
 public:
  ReviewService(ReviewState& state, VerdictLog& log, CategoryIndex categories, ReviewServiceConfig cfg = {})
      : state_(state), log_(log), cats_(std::move(categories)), cfg_(std::move(cfg)) {
    // SO_REUSEADDR only: with httplib's default SO_REUSEPORT a second server
    // on the same port would bind too and silently take half the connections.
    svr_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    routes();
  }

  httplib::Server& server() { return svr_; }

  /// Binds to `port` (0: any free port) and returns the bound port.
  int bind(const std::string& host, int port) {
    if (port == 0) {
      const int bound = svr_.bind_to_any_port(host);
      if (bound < 0) throw ConfigError("review service: cannot bind " + host);
      return bound;
    }
    if (!svr_.bind_to_port(host, port)) throw ConfigError("review service: cannot bind " + host + ":" + std::to_string(port));
    return port;
  }
  bool run() { return svr_.listen_after_bind(); }
  void stop() { svr_.stop(); }

  nlohmann::json candidate_payload(const CandidateMatch& c) const {
    nlohmann::json j = c;
    j["status"] = to_string(state_.status(c));
    j["query_image"] = c.query_id.empty() ? nlohmann::json(nullptr) : nlohmann::json("/images/" + c.query_id);
    j["train_image"] = c.train_image_id.empty() ? nlohmann::json(nullptr) : nlohmann::json("/images/" + c.train_image_id);
    return j;
  }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }
  static void send_error(httplib::Response& res, int status, const std::string& msg) {
    send_json(res, status, {{"error", msg}});
  }

  void routes() {
    svr_.set_default_headers({{"Access-Control-Allow-Origin", cfg_.cors_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
    svr_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    svr_.Get("/candidates/next", [this](const httplib::Request& req, httplib::Response& res) {
      const auto e = req.get_param_value("evaluator");
      std::shared_lock lock(mu_);
      if (e.empty() || !state_.has_evaluator(e)) return send_error(res, 400, "unknown evaluator '" + e + "'");
      const auto* c = state_.next_for(e);
      if (!c) {
        res.status = 204;
        return;
      }
      send_json(res, 200, candidate_payload(*c));
    });

    svr_.Get("/candidates", [this](const httplib::Request&, httplib::Response& res) {
      std::shared_lock lock(mu_);
      auto arr = nlohmann::json::array();
      for (const auto& c : state_.candidates())
        if (state_.visible(c)) arr.push_back(candidate_payload(c));
      send_json(res, 200, arr);
    });

    svr_.Post("/verdicts", [this](const httplib::Request& req, httplib::Response& res) {
      Verdict v;
      try {
        const auto j = nlohmann::json::parse(req.body);
        v.candidate_id = j.at("candidate_id").get<std::string>();
        v.evaluator = j.at("evaluator").get<std::string>();
        v.decision = parse_decision(j.at("decision").get<std::string>());
      } catch (const std::exception& e) {
        return send_error(res, 400, std::string("malformed verdict: ") + e.what());
      }
      v.timestamp = utc_now();
      std::unique_lock lock(mu_);
      switch (state_.check(v)) {
        case SubmitOutcome::UnknownEvaluator: return send_error(res, 400, "unknown evaluator '" + v.evaluator + "'");
        case SubmitOutcome::UnknownCandidate: return send_error(res, 404, "unknown candidate '" + v.candidate_id + "'");
        case SubmitOutcome::Duplicate:
          return send_error(res, 409, "evaluator '" + v.evaluator + "' already judged '" + v.candidate_id + "'");
        case SubmitOutcome::Accepted: break;
      }
      try {
        log_.append(v);
      } catch (const DataError& e) {
        return send_error(res, 500, e.what());
      }
      state_.apply(v);
      maybe_snapshot();
      const auto* c = state_.find(v.candidate_id);
      send_json(res, 200, {{"candidate_id", v.candidate_id}, {"status", to_string(state_.status(*c))}, {"verdict", v}});
    });

    svr_.Get("/summary", [this](const httplib::Request&, httplib::Response& res) {
      std::shared_lock lock(mu_);
      send_json(res, 200, state_.summary(cats_));
    });

    svr_.Get(R"(/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (cfg_.image_dir.empty() || id.find("..") != std::string::npos) return send_error(res, 404, "no image '" + id + "'");
      for (const auto& [ext, type] : {std::pair<const char*, const char*>{".png", "image/png"},
                                      {".ppm", "image/x-portable-pixmap"},
                                      {".pgm", "image/x-portable-graymap"},
                                      {".jpg", "image/jpeg"}}) {
        const auto p = cfg_.image_dir / (id + ext);
        if (!std::filesystem::exists(p)) continue;
        std::ifstream is(p, std::ios::binary);
        res.set_content(std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>()), type);
        return;
      }
      send_error(res, 404, "no image '" + id + "'");
    });
  }

  void maybe_snapshot() {
    if (cfg_.snapshot_path.empty() || cfg_.snapshot_every == 0) return;
    if (state_.verdicts().size() % cfg_.snapshot_every == 0) write_snapshot(cfg_.snapshot_path, state_);
  }

  ReviewState& state_;
  VerdictLog& log_;
  CategoryIndex cats_;
  ReviewServiceConfig cfg_;
  httplib::Server svr_;
  std::shared_mutex mu_;
};

}  // namespace d2r
