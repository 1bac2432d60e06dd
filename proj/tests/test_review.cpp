#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "d2r/dedup_fixture.hpp"
#include "d2r/image.hpp"
#include "d2r/review_service.hpp"

using namespace d2r;
using nlohmann::json;

namespace {

CandidateMatch cand(std::string id, std::string gid, CandidateStatus s = CandidateStatus::AutoVerified,
                    CandidateReason r = CandidateReason::Visual, std::string query = "q0") {
  CandidateMatch c;
  c.id = std::move(id);
  c.gid = std::move(gid);
  c.status = s;
  c.reason = r;
  if (r == CandidateReason::Visual) {
    c.query_id = std::move(query);
    c.train_image_id = "t_" + c.id;
    c.tentative_count = 40;
    c.inlier_count = s == CandidateStatus::AutoVerified ? 30 : 3;
    c.cosine = 0.8;
  }
  return c;
}

CategoryIndex cats_for(std::initializer_list<std::string> gids) {
  CategoryIndex out;
  for (const auto& g : gids) out.push_back({g, "name " + g, {g + "_a", g + "_b"}});
  return out;
}

std::filesystem::path temp_file(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("d2r_review_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove(p);
  return p;
}

// Serves `state` on a free port for the lifetime of the object.
struct Harness {
  Harness(ReviewState& state, const std::string& log_name, CategoryIndex cats = {}, ReviewServiceConfig cfg = {})
      : log_path(temp_file(log_name)), log(log_path), svc(state, log, std::move(cats), std::move(cfg)) {
    port = svc.bind("127.0.0.1", 0);
    thread = std::thread([this] { svc.run(); });
    svc.server().wait_until_ready();
  }
  ~Harness() {
    svc.stop();
    thread.join();
    std::filesystem::remove(log_path);
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }

  std::filesystem::path log_path;
  VerdictLog log;
  ReviewService svc;
  int port = 0;
  std::thread thread;
};

httplib::Result post_verdict(httplib::Client& cli, const std::string& id, const std::string& e, const std::string& d) {
  return cli.Post("/verdicts", json{{"candidate_id", id}, {"evaluator", e}, {"decision", d}}.dump(), "application/json");
}

std::string next_id(httplib::Client& cli, const std::string& e) {
  auto r = cli.Get(("/candidates/next?evaluator=" + e).c_str());
  if (!r || r->status != 200) return "";
  return json::parse(r->body).at("id").get<std::string>();
}

}  // namespace

TEST(ReviewState, ConfirmRuleAndVisibility) {
  ReviewState s({cand("a", "G1"), cand("b", "G2", CandidateStatus::Rejected), cand("t", "G3", CandidateStatus::Pending, CandidateReason::Text)},
                {"e1", "e2"});
  EXPECT_TRUE(s.visible(*s.find("a")));
  EXPECT_FALSE(s.visible(*s.find("b")));
  EXPECT_TRUE(s.visible(*s.find("t")));
  ReviewState all(s.candidates(), {"e1"}, true);
  EXPECT_TRUE(all.visible(*all.find("b")));

  EXPECT_EQ(s.apply({"a", "e1", Decision::Reject, 1}), SubmitOutcome::Accepted);
  EXPECT_EQ(s.status(*s.find("a")), CandidateStatus::AutoVerified);
  EXPECT_EQ(s.apply({"a", "e2", Decision::Reject, 2}), SubmitOutcome::Accepted);
  EXPECT_EQ(s.status(*s.find("a")), CandidateStatus::Rejected);
  EXPECT_EQ(s.apply({"t", "e2", Decision::Confirm, 3}), SubmitOutcome::Accepted);
  EXPECT_EQ(s.status(*s.find("t")), CandidateStatus::Confirmed);
  EXPECT_EQ(s.apply({"t", "e2", Decision::Reject, 4}), SubmitOutcome::Duplicate);
  EXPECT_EQ(s.apply({"zz", "e2", Decision::Reject, 4}), SubmitOutcome::UnknownCandidate);
  EXPECT_EQ(s.apply({"t", "e9", Decision::Reject, 4}), SubmitOutcome::UnknownEvaluator);
  EXPECT_EQ(s.verdicts().size(), 3u);

  EXPECT_THROW(ReviewState({}, {}), ConfigError);
  EXPECT_THROW(ReviewState({cand("a", "G1"), cand("a", "G2")}, {"e"}), DataError);
}

TEST(ReviewState, MonotoneInConfirms) {
  // Random verdict sequences: once Confirmed, a candidate stays Confirmed.
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<CandidateMatch> cs;
    for (int i = 0; i < 6; ++i) cs.push_back(cand("c" + std::to_string(i), "G" + std::to_string(i % 3)));
    ReviewState s(cs, {"e1", "e2", "e3"});
    std::vector<Verdict> pool;
    for (const auto& c : cs)
      for (const auto& e : {"e1", "e2", "e3"})
        pool.push_back({c.id, e, rng() % 2 ? Decision::Confirm : Decision::Reject, 0});
    std::shuffle(pool.begin(), pool.end(), rng);
    std::set<std::string> confirmed;
    for (const auto& v : pool) {
      s.apply(v);
      for (const auto& c : s.candidates()) {
        const bool now = s.status(c) == CandidateStatus::Confirmed;
        if (confirmed.count(c.id)) {
          ASSERT_TRUE(now) << c.id;
        }
        if (now) confirmed.insert(c.id);
      }
    }
  }
}

TEST(VerdictLog, ReplayReconstructsStateAndDropsTornLine) {
  const auto path = temp_file("replay");
  std::vector<CandidateMatch> cs = {cand("a", "G1"), cand("b", "G2"), cand("c", "G1", CandidateStatus::Pending, CandidateReason::Text)};
  const auto cats = cats_for({"G1", "G2"});
  ReviewState live(cs, {"e1", "e2"});
  VerdictLog log(path);
  for (const Verdict& v : {Verdict{"a", "e1", Decision::Reject, 10}, Verdict{"b", "e2", Decision::Confirm, 11},
                           Verdict{"a", "e2", Decision::Reject, 12}, Verdict{"c", "e1", Decision::Confirm, 13}}) {
    ASSERT_EQ(live.check(v), SubmitOutcome::Accepted);
    log.append(v);
    live.apply(v);
  }
  ReviewState back(cs, {"e1", "e2"});
  EXPECT_EQ(log.replay(back), 4u);
  EXPECT_EQ(back.verdicts(), live.verdicts());
  EXPECT_EQ(back.summary(cats), live.summary(cats));
  for (const auto& c : cs) EXPECT_EQ(back.status(c), live.status(c));

  {
    std::ofstream os(path, std::ios::app);
    os << R"({"candidate_id":"c","evaluator":"e2","deci)";
  }
  ReviewState torn(cs, {"e1", "e2"});
  EXPECT_EQ(log.replay(torn), 4u);
  EXPECT_EQ(torn.summary(cats), live.summary(cats));

  std::filesystem::remove(path);
  {
    std::ofstream os(path);
    os << "not json\n";
  }
  ReviewState bad(cs, {"e1", "e2"});
  EXPECT_THROW(log.replay(bad), DataError);
  std::filesystem::remove(path);
  {
    std::ofstream os(path);
    os << json(Verdict{"a", "e1", Decision::Reject, 1}).dump() << "\n" << json(Verdict{"a", "e1", Decision::Confirm, 2}).dump() << "\n";
  }
  ReviewState dup(cs, {"e1", "e2"});
  EXPECT_THROW(log.replay(dup), DataError);
  std::filesystem::remove(path);
}

TEST(VerdictLog, SnapshotHoldsDerivedStatuses) {
  const auto path = temp_file("snap");
  ReviewState s({cand("a", "G1"), cand("b", "G2")}, {"e1"});
  s.apply({"b", "e1", Decision::Confirm, 1});
  write_snapshot(path, s);
  const auto back = read_candidates_jsonl(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].status, CandidateStatus::AutoVerified);
  EXPECT_EQ(back[1].status, CandidateStatus::Confirmed);
  std::filesystem::remove(path);
}

TEST(ReviewHttp, NextFollowsCreationOrderPerEvaluator) {
  ReviewState s({cand("c1", "G1"), cand("c2", "G2"), cand("c3", "G3")}, {"E", "F"});
  Harness h(s, "next");
  auto cli = h.client();

  auto r = cli.Get("/candidates/next?evaluator=E");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  const auto j = json::parse(r->body);
  EXPECT_EQ(j["id"], "c1");
  EXPECT_EQ(j["status"], "AutoVerified");
  EXPECT_EQ(j["inlier_count"], 30);
  EXPECT_DOUBLE_EQ(j["cosine"].get<double>(), 0.8);
  EXPECT_EQ(j["query_image"], "/images/q0");
  EXPECT_EQ(j["train_image"], "/images/t_c1");
  EXPECT_TRUE(j.contains("query_box"));
  EXPECT_TRUE(j.contains("train_box"));
  // Reads are stateless: asking again returns the same candidate.
  EXPECT_EQ(next_id(cli, "E"), "c1");

  // Interleaved evaluators keep independent queues.
  ASSERT_EQ(post_verdict(cli, "c1", "E", "Reject")->status, 200);
  EXPECT_EQ(next_id(cli, "E"), "c2");
  EXPECT_EQ(next_id(cli, "F"), "c1");
  ASSERT_EQ(post_verdict(cli, "c2", "F", "Reject")->status, 200);
  EXPECT_EQ(next_id(cli, "F"), "c1");
  EXPECT_EQ(next_id(cli, "E"), "c2");

  for (const auto* id : {"c2", "c3"}) ASSERT_EQ(post_verdict(cli, id, "E", "Confirm")->status, 200);
  r = cli.Get("/candidates/next?evaluator=E");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 204);

  EXPECT_EQ(cli.Get("/candidates/next?evaluator=nobody")->status, 400);
  EXPECT_EQ(cli.Get("/candidates/next")->status, 400);
}

TEST(ReviewHttp, VerdictStatusesAndErrors) {
  ReviewState s({cand("c1", "G1"), cand("c2", "G2"), cand("c3", "G3")}, {"E", "F", "H"});
  Harness h(s, "verdicts");
  auto cli = h.client();

  auto r = post_verdict(cli, "c1", "E", "Confirm");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body)["status"], "Confirmed");

  r = post_verdict(cli, "c2", "E", "Reject");
  EXPECT_EQ(json::parse(r->body)["status"], "AutoVerified");
  r = post_verdict(cli, "c2", "F", "Confirm");
  EXPECT_EQ(json::parse(r->body)["status"], "Confirmed");
  const auto body = json::parse(r->body);
  EXPECT_EQ(body["verdict"]["evaluator"], "F");
  EXPECT_GT(body["verdict"]["timestamp"].get<std::int64_t>(), 1600000000);

  // Every evaluator rejecting is the only path to a human Rejected.
  for (const auto* e : {"E", "F"}) post_verdict(cli, "c3", e, "Reject");
  EXPECT_EQ(json::parse(post_verdict(cli, "c3", "H", "Reject")->body)["status"], "Rejected");

  const auto before = s.verdicts();
  const auto log_before = h.log.read();
  r = post_verdict(cli, "c2", "E", "Confirm");
  EXPECT_EQ(r->status, 409);
  EXPECT_EQ(s.verdicts(), before);
  EXPECT_EQ(h.log.read(), log_before);
  EXPECT_EQ(s.status(*s.find("c2")), CandidateStatus::Confirmed);

  EXPECT_EQ(post_verdict(cli, "nope", "E", "Confirm")->status, 404);
  EXPECT_EQ(post_verdict(cli, "c1", "ghost", "Confirm")->status, 400);
  EXPECT_EQ(post_verdict(cli, "c1", "H", "Maybe")->status, 400);
  EXPECT_EQ(cli.Post("/verdicts", "{", "application/json")->status, 400);
  EXPECT_EQ(s.verdicts(), before);

  // Each acknowledged verdict is already in the log.
  EXPECT_EQ(h.log.read(), s.verdicts());
  ReviewState replayed(s.candidates(), {"E", "F", "H"});
  h.log.replay(replayed);
  EXPECT_EQ(replayed.summary({}), s.summary({}));
}

TEST(ReviewHttp, OccupiedPortIsRejected) {
  ReviewState s({}, {"E"});
  Harness h(s, "occupied");
  VerdictLog other_log(temp_file("occupied_other"));
  ReviewService other(s, other_log, {});
  EXPECT_THROW(other.bind("127.0.0.1", h.port), ConfigError);
  std::filesystem::remove(other_log.path());
}

TEST(ReviewHttp, EmptySummaryIsAllZeros) {
  ReviewState s({}, {"E"});
  Harness h(s, "empty");
  auto cli = h.client();
  auto r = cli.Get("/summary");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  const auto j = json::parse(r->body);
  EXPECT_EQ(j["pending"], 0);
  EXPECT_EQ(j["confirmed"], 0);
  EXPECT_EQ(j["rejected"], 0);
  EXPECT_EQ(j["gids_marked"], 0);
  EXPECT_EQ(j["projected_manifest"]["totals"]["gids"], 0);
  EXPECT_EQ(j["projected_manifest"]["totals"]["images"], 0);
  EXPECT_TRUE(j["projected_manifest"]["removed"].empty());
  EXPECT_EQ(cli.Get("/candidates/next?evaluator=E")->status, 204);
}

TEST(ReviewHttp, FixtureSummaryMarksPlantedGids) {
  DedupFixtureParams p;
  p.image_size = 16;
  const auto f = make_dedup_fixture(p);
  const auto gid_of = image_to_gid(f.categories);

  // One verified candidate per planted query, plus an unverified decoy per query.
  std::vector<CandidateMatch> cs;
  std::size_t decoy = 0;
  for (const auto& [q, src] : f.query_source) {
    auto c = cand("v_" + q, gid_of.at(src), CandidateStatus::AutoVerified, CandidateReason::Visual, q);
    c.train_image_id = src;
    cs.push_back(c);
    const auto& other = f.categories[decoy++ * 7 % f.categories.size()];
    if (f.planted_gids.count(other.gid)) continue;
    auto d = cand("d_" + q, other.gid, CandidateStatus::Rejected, CandidateReason::Visual, q);
    d.train_image_id = other.image_ids[0];
    cs.push_back(d);
  }
  ASSERT_EQ(f.planted_gids.size(), 5u);
  ASSERT_EQ(f.query_source.size(), 10u);

  ReviewState s(cs, {"E1", "E2", "E3"});
  Harness h(s, "fixture", f.categories);
  auto cli = h.client();

  auto all = json::parse(cli.Get("/candidates")->body);
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(json::parse(cli.Get("/summary")->body)["pending"], 10);

  // E1 rejects everything; E2 confirms every planted pair; E3 is idle.
  for (std::string id; !(id = next_id(cli, "E1")).empty();) ASSERT_EQ(post_verdict(cli, id, "E1", "Reject")->status, 200);
  EXPECT_EQ(json::parse(cli.Get("/summary")->body)["gids_marked"], 0);
  for (std::string id; !(id = next_id(cli, "E2")).empty();) {
    const bool planted = f.planted_gids.count(s.find(id)->gid) > 0;
    ASSERT_EQ(post_verdict(cli, id, "E2", planted ? "Confirm" : "Reject")->status, 200);
  }

  const auto j = json::parse(cli.Get("/summary")->body);
  EXPECT_EQ(j["gids_marked"], 5);
  EXPECT_EQ(j["confirmed"], 10);
  EXPECT_EQ(j["pending"], 0);
  EXPECT_EQ(j["rejected"], 0);
  const auto manifest = j["projected_manifest"].get<RemovalManifest>();
  EXPECT_EQ(manifest.gids(), f.planted_gids);
  EXPECT_EQ(manifest.total_images(), 15u);

  // Finalizing with the same verdicts gives the same manifest.
  const auto final_manifest = aggregate_removals(s.resolved(), f.categories);
  EXPECT_EQ(final_manifest.removed, manifest.removed);
  EXPECT_EQ(j["projected_manifest"]["totals"]["gids"], final_manifest.total_gids());
  EXPECT_EQ(j["projected_manifest"]["totals"]["images"], final_manifest.total_images());
}

TEST(ReviewHttp, IncludeAllShowsAutoRejected) {
  ReviewState s({cand("r", "G1", CandidateStatus::Rejected), cand("v", "G2")}, {"E"}, true);
  Harness h(s, "all");
  auto cli = h.client();
  EXPECT_EQ(next_id(cli, "E"), "r");
  EXPECT_EQ(json::parse(cli.Get("/candidates")->body).size(), 2u);
}

TEST(ReviewHttp, CorsAndImages) {
  const auto dir = std::filesystem::temp_directory_path() / ("d2r_review_imgdir_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  save_png(dir / "t_c1.png", Tensor({4, 4, 3}, 0.25));

  ReviewState s({cand("c1", "G1")}, {"E"});
  ReviewServiceConfig cfg;
  cfg.image_dir = dir;
  cfg.cors_origin = "http://localhost:5173";
  Harness h(s, "img", {}, cfg);
  auto cli = h.client();

  auto r = cli.Get("/images/t_c1");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(r->body.substr(1, 3), "PNG");
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
  EXPECT_EQ(cli.Get("/images/missing")->status, 404);
  EXPECT_EQ(cli.Get("/images/..%2Fetc")->status, 404);

  r = cli.Options("/verdicts");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 204);
  EXPECT_NE(r->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
  EXPECT_EQ(cli.Get("/summary")->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
  std::filesystem::remove_all(dir);
}

TEST(ReviewHttp, PeriodicSnapshot) {
  const auto snap = temp_file("periodic_snapshot");
  ReviewState s({cand("a", "G1"), cand("b", "G2"), cand("c", "G3")}, {"E"});
  ReviewServiceConfig cfg;
  cfg.snapshot_path = snap;
  cfg.snapshot_every = 2;
  Harness h(s, "periodic", {}, cfg);
  auto cli = h.client();
  post_verdict(cli, "a", "E", "Confirm");
  EXPECT_FALSE(std::filesystem::exists(snap));
  post_verdict(cli, "b", "E", "Reject");
  ASSERT_TRUE(std::filesystem::exists(snap));
  const auto back = read_candidates_jsonl(snap);
  EXPECT_EQ(back[0].status, CandidateStatus::Confirmed);
  EXPECT_EQ(back[1].status, CandidateStatus::Rejected);
  std::filesystem::remove(snap);
}
