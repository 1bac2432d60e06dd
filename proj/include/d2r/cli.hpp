#pragma once

// Command-line front end shared by the d2r binary and the tests.
//
// Seeds: every subcommand takes --seed S and derives its streams with
// derive_seed(S, name): "data" (gen-data), "model" (initial weights),
// "train" (optimizer, batching, background draws), "ann" (index levels).

#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "d2r/ann.hpp"
#include "d2r/dedup_fixture.hpp"
#include "d2r/image.hpp"
#include "d2r/review_service.hpp"
#include "d2r/toy_experiment.hpp"

namespace d2r::cli {

inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

struct Io {
  std::ostream& out;
  std::ostream& err;
  void log(const std::string& cmd, const std::string& msg) const { err << "[d2r " << cmd << "] " << msg << '\n'; }
};

namespace detail {

inline nlohmann::json read_json(const std::filesystem::path& p, bool config) {
  std::ifstream is(p);
  auto fail = [&](const std::string& m) -> nlohmann::json {
    if (config) throw ConfigError(m);
    throw DataError(m);
  };
  if (!is) return fail("cannot open " + p.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    return fail("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << s;
}

/// Options as given (or defaulted) on the command line.
inline nlohmann::json option_values(const CLI::App& app) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* o : app.get_options()) {
    if (o->get_name() == "--help") continue;
    std::string name = o->get_name();
    while (!name.empty() && name.front() == '-') name.erase(name.begin());
    if (o->count() > 0) {
      const auto& r = o->results();
      j[name] = o->get_expected_max() > 1 ? nlohmann::json(r) : (o->get_type_size() == 0 ? nlohmann::json(true) : nlohmann::json(r.back()));
    } else if (!o->get_default_str().empty()) {
      j[name] = o->get_default_str();
    }
  }
  return j;
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// {"model": {...}, "train": {...}}; both optional.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "model" && k != "train") throw ConfigError("config: unknown key '" + k + "' (expected model, train)");
  RunConfig c;
  c.model.head.embed_dim = 64;
  try {
    if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
    if (j.contains("train")) {
      if (j["train"].contains("seed")) throw ConfigError("config: train.seed is derived from --seed; remove it");
      c.train = j["train"].get<TrainConfig>();
    }
    c.model.head.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) { return {{"model", c.model}, {"train", c.train}}; }

struct DatasetEntry {
  std::string id;
  std::string split;
  std::optional<std::size_t> class_id;
  std::optional<std::string> gid;
};

struct DatasetIndex {
  std::string kind;
  std::vector<DatasetEntry> entries;
  std::filesystem::path root;

  std::filesystem::path image(const std::string& id) const { return root / "images" / (id + ".png"); }
  std::filesystem::path mask(const std::string& id) const { return root / "masks" / (id + ".pgm"); }
};

inline DatasetIndex load_dataset(const std::filesystem::path& dir) {
  const auto j = read_json(dir / "dataset.json", false);
  DatasetIndex d;
  d.root = dir;
  try {
    d.kind = j.at("kind").get<std::string>();
    for (const auto& o : j.at("images")) {
      DatasetEntry e{o.at("id").get<std::string>(), o.at("split").get<std::string>(), std::nullopt, std::nullopt};
      if (o.contains("class")) e.class_id = o["class"].get<std::size_t>();
      if (o.contains("gid")) e.gid = o["gid"].get<std::string>();
      d.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset.json: " + std::string(e.what()));
  }
  return d;
}

inline std::optional<std::string> category_of(const DatasetEntry& e) {
  if (e.class_id) return "class" + std::to_string(*e.class_id);
  return e.gid;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string x; std::getline(ss, x, ',');)
    if (!x.empty()) out.push_back(x);
  return out;
}

inline std::string fmt(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline EmbeddingModel load_or_init_model(const std::string& stem, const std::string& config, std::uint64_t seed) {
  if (!stem.empty()) return EmbeddingModel::load(stem);
  RunConfig rc;
  rc.model.head.embed_dim = 64;
  if (!config.empty()) rc = parse_run_config(read_json(config, true));
  return EmbeddingModel::create(rc.model, derive_seed(seed, "model"));
}

inline ReviewService* g_service = nullptr;

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands

struct Common {
  std::uint64_t seed = 0;
  std::filesystem::path out = ".";
};

inline void gen_data(const Common& c, const Io& io, const std::string& kind, const ToyRunConfig& toy,
                     const DedupFixtureParams& fx) {
  using detail::write_json;
  std::filesystem::create_directories(c.out / "images");
  nlohmann::json ds{{"kind", kind}, {"images", nlohmann::json::array()}};
  if (kind == "toy") {
    if (toy.classes < 2) throw ConfigError("gen-data: --classes must be >= 2");
    std::filesystem::create_directories(c.out / "masks");
    const auto seed = derive_seed(c.seed, "data");
    auto emit = [&](const std::vector<ToySample>& samples, const std::string& split) {
      for (const auto& s : samples) {
        const std::string id = split + "_" + s.id;
        save_png(c.out / "images" / (id + ".png"), s.image);
        save_pgm(c.out / "masks" / (id + ".pgm"), s.foreground_mask);
        ds["images"].push_back({{"id", id}, {"split", split}, {"class", s.class_id}});
      }
    };
    emit(toy_training_set(toy.classes, toy.train_images, toy.image_size, toy.clutter, derive_seed(seed, "train")), "train");
    emit(gen_toy_dataset(toy.classes, toy.heldout_per_class, toy.image_size, toy.clutter, derive_seed(seed, "heldout")),
         "heldout");
    ds["classes"] = toy.classes;
    ds["image_size"] = toy.image_size;
    io.log("gen-data", "toy set: " + std::to_string(toy.train_images) + " train, " +
                           std::to_string(toy.classes * toy.heldout_per_class) + " held-out images");
  } else if (kind == "dedup") {
    auto p = fx;
    p.seed = derive_seed(c.seed, "data");
    const auto f = make_dedup_fixture(p);
    for (const auto& cat : f.categories)
      for (const auto& id : cat.image_ids) {
        save_png(c.out / "images" / (id + ".png"), f.train_images.at(id));
        ds["images"].push_back({{"id", id}, {"split", "train"}, {"gid", cat.gid}});
      }
    for (const auto& [id, img] : f.query_images) {
      save_png(c.out / "images" / (id + ".png"), img);
      ds["images"].push_back({{"id", id}, {"split", "query"}});
    }
    std::ofstream csv(c.out / "categories.csv");
    write_categories_csv(csv, f.categories);
    write_json(c.out / "truth.json", {{"planted_gids", f.planted_gids}, {"query_source", f.query_source}});
    io.log("gen-data", "dedup fixture: " + std::to_string(f.categories.size()) + " categories, " +
                           std::to_string(f.query_images.size()) + " queries, " + std::to_string(f.planted_gids.size()) +
                           " planted");
  } else {
    throw ConfigError("gen-data: unknown --kind '" + kind + "' (expected toy or dedup)");
  }
  write_json(c.out / "dataset.json", ds);
}

inline void train_cmd(const Common& c, const Io& io, const std::string& data_dir, const std::string& config,
                      nlohmann::json& echo) {
  const auto rc = config.empty() ? detail::parse_run_config(nlohmann::json::object())
                                 : detail::parse_run_config(detail::read_json(config, true));
  auto tc = rc.train;
  tc.seed = derive_seed(c.seed, "train");
  echo["config"] = detail::to_json({rc.model, tc});

  const auto ds = detail::load_dataset(data_dir);
  std::vector<ToySample> samples;
  for (const auto& e : ds.entries) {
    if (e.split != "train") continue;
    if (!e.class_id) throw DataError("train: image '" + e.id + "' has no class label");
    ToySample s{e.id, load_image(ds.image(e.id)), *e.class_id, Tensor{}};
    if (std::filesystem::exists(ds.mask(e.id))) s.foreground_mask = load_gray(ds.mask(e.id));
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw DataError("train: no training images in " + data_dir);
  const bool masks = std::all_of(samples.begin(), samples.end(), [](const ToySample& s) { return s.foreground_mask.size() > 0; });
  if (!masks)
    for (auto& s : samples) s.foreground_mask = Tensor{};

  auto model = EmbeddingModel::create(rc.model, derive_seed(c.seed, "model"));
  io.log("train", std::to_string(samples.size()) + " images, embed_dim " + std::to_string(model.embed_dim()) + ", " +
                      std::to_string(tc.total_epochs) + " epochs");
  const auto view = labelled_view(samples);
  std::vector<LabelledImage> unmasked = view;
  if (!masks)
    for (auto& v : unmasked) v.foreground_mask = nullptr;
  const double attn0 = masks ? mean_attention_mass(model, view) : 0.0;
  const auto res = train(model, std::span<const LabelledImage>(unmasked), tc, &io.err);
  const double attn1 = masks ? mean_attention_mass(model, view) : 0.0;

  std::filesystem::create_directories(c.out);
  model.save(c.out / "model");
  std::ofstream csv(c.out / "metrics.csv", std::ios::binary);
  write_metrics_csv(csv, res.log);
  nlohmann::json summary{{"epochs", res.log.size()},
                         {"initial_loss", res.log.front().loss},
                         {"final_loss", res.log.back().loss}};
  if (masks) summary["attention_mass"] = {{"before", attn0}, {"after", attn1}};
  if (tc.finetune)
    summary["stage2_backbone_checksum"] = {{"begin", res.stage2_backbone_checksum_begin}, {"end", res.stage2_backbone_checksum_end}};
  detail::write_json(c.out / "train_summary.json", summary);
  io.out << "loss " << detail::fmt(res.log.front().loss) << " -> " << detail::fmt(res.log.back().loss) << '\n';
  if (masks) io.out << "attention_mass " << detail::fmt(attn0) << " -> " << detail::fmt(attn1) << '\n';
}

struct EmbedArgs {
  std::string model, config, data, split = "all", images, store, eval_set;
  bool multires = false;
};

inline void embed_cmd(const Common& c, const Io& io, const EmbedArgs& a) {
  const auto model = detail::load_or_init_model(a.model, a.config, c.seed);
  if (a.model.empty()) io.log("embed", "no --model given; using the untrained initialization for this seed");
  DescriptorStore store(model.embed_dim());
  // Queries with a crop rectangle are cropped before embedding.
  std::map<std::string, CropRect> crops;
  if (!a.eval_set.empty())
    for (const auto& q : load_evaluation_set(a.eval_set).queries)
      if (q.crop) crops[q.id] = *q.crop;
  auto add = [&](const std::string& id, const std::filesystem::path& p, std::optional<std::string> cat) {
    Tensor img = load_image(p);
    if (auto it = crops.find(id); it != crops.end()) {
      const auto& r = it->second;
      try {
        img = crop(img, r.x, r.y, r.w, r.h);
      } catch (const DataError& e) {
        throw DataError("embed: query '" + id + "': " + e.what());
      }
    }
    store.add(id, a.multires ? model.embed_multires(img, kDefaultScales, &io.err) : model.embed(img), std::move(cat));
  };
  if (!a.data.empty()) {
    const auto ds = detail::load_dataset(a.data);
    for (const auto& e : ds.entries)
      if (a.split == "all" || e.split == a.split) add(e.id, ds.image(e.id), detail::category_of(e));
  } else if (!a.images.empty()) {
    std::vector<std::filesystem::path> files;
    for (const auto& f : std::filesystem::directory_iterator(a.images)) {
      const auto ext = f.path().extension().string();
      if (ext == ".png" || ext == ".ppm" || ext == ".pgm") files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add(f.stem().string(), f, std::nullopt);
  } else {
    throw ConfigError("embed: give --data or --images");
  }
  if (store.empty()) throw DataError("embed: no images selected");
  const auto stem = a.store.empty() ? c.out / "store" : std::filesystem::path(a.store);
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  store.save(stem);
  io.log("embed", std::to_string(store.size()) + " descriptors of dim " + std::to_string(store.dim()) + " -> " + stem.string());
}

inline void index_cmd(const Common& c, const Io& io, const std::string& store_stem, const AnnParams& params_in,
                      const std::string& index_path) {
  const auto store = DescriptorStore::load(store_stem);
  auto params = params_in;
  params.seed = derive_seed(c.seed, "ann");
  const auto t0 = std::chrono::steady_clock::now();
  const auto idx = AnnIndex::build(store, params);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto path = index_path.empty() ? c.out / "index.json" : std::filesystem::path(index_path);
  detail::write_json(path, idx.to_json());
  io.log("index", std::to_string(idx.size()) + " nodes, " + std::to_string(idx.max_level() + 1) + " levels, built in " +
                      detail::fmt(secs, 3) + " s");
  io.out << "recall@10 " << detail::fmt(idx.self_test_recall(10, 100), 4) << '\n';
}

struct SearchArgs {
  std::string store, index, query_id, image, model, config;
  std::size_t k = 10;
};

inline void search_cmd(const Common& c, const Io& io, const SearchArgs& a) {
  const auto store = DescriptorStore::load(a.store);
  std::vector<double> q;
  if (!a.query_id.empty()) {
    const auto* d = store.find(a.query_id);
    if (!d) throw DataError("search: no descriptor '" + a.query_id + "' in the store");
    q = d->vector;
  } else if (!a.image.empty()) {
    const auto model = detail::load_or_init_model(a.model, a.config, c.seed);
    const auto u = model.embed(load_image(a.image));
    q.assign(u.values().begin(), u.values().end());
  } else {
    throw ConfigError("search: give --query-id or --image");
  }
  std::vector<SearchHit> hits;
  if (!a.index.empty()) {
    const auto idx = AnnIndex::from_json(detail::read_json(a.index, false), store);
    hits = idx.search(q, a.k, std::max<std::size_t>(64, a.k));
  } else {
    hits = search_exact(store, q, a.k);
  }
  io.out << "rank,id,score,category\n";
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto& d = store[hits[i].index];
    io.out << i + 1 << ',' << hits[i].id << ',' << detail::fmt(hits[i].score) << ',' << d.category_id.value_or("") << '\n';
  }
}

struct EvalArgs {
  std::string store, queries, eval_set, protocol = "medium", ks = "1,5,10";
};

inline void eval_cmd(const Common& c, const Io& io, const EvalArgs& a) {
  const auto protocol = parse_protocol(a.protocol);
  std::vector<std::size_t> ks;
  for (const auto& s : detail::split_list(a.ks)) {
    std::size_t pos = 0;
    long long k = 0;
    try {
      k = std::stoll(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || k < 1) throw ConfigError("eval: --k entries must be positive integers, got '" + s + "'");
    ks.push_back(std::size_t(k));
  }
  const auto gallery = DescriptorStore::load(a.store);
  const auto queries = a.queries.empty() ? gallery : DescriptorStore::load(a.queries);
  const auto set = a.eval_set.empty() ? category_evaluation_set(queries) : load_evaluation_set(a.eval_set);
  const auto r = evaluate(queries, gallery, set, protocol, ks);
  if (r.evaluated == 0) throw DataError("eval: no query has positives under the " + protocol_name(protocol) + " protocol");
  for (const auto& q : r.skipped) io.log("eval", "query '" + q + "' has no positives; skipped");

  std::ostringstream csv;
  csv << "protocol,metric,k,value\n" << std::setprecision(10);
  csv << protocol_name(protocol) << ",mAP,," << r.map << '\n';
  io.out << "mAP " << detail::fmt(r.map, 4) << '\n';
  for (const auto& [k, v] : r.mp_at_k) {
    csv << protocol_name(protocol) << ",mP@k," << k << ',' << v << '\n';
    io.out << "mP@" << k << ' ' << detail::fmt(v, 4) << '\n';
  }
  std::filesystem::create_directories(c.out);
  detail::write_text(c.out / "eval.csv", csv.str());
  std::ostringstream per;
  per << "query,ap\n" << std::setprecision(10);
  for (const auto& [q, ap] : r.per_query_ap) per << q << ',' << ap << '\n';
  detail::write_text(c.out / "eval_per_query.csv", per.str());
}

inline const DescriptorStore restricted(const DescriptorStore& s, const std::map<std::string, std::string>& gid_of) {
  DescriptorStore out(s.dim());
  for (const auto& d : s.items())
    if (gid_of.count(d.image_id)) out.add(Descriptor{d.image_id, gid_of.at(d.image_id), d.vector});
  return out;
}

struct RankArgs {
  std::string queries, train, categories, needles = "Oxford,Paris", output;
  std::size_t k = 5;
  bool ann = false;
};

inline void dedup_rank(const Common& c, const Io& io, const RankArgs& a) {
  const auto cats = load_categories_csv(a.categories);
  const auto gid_of = image_to_gid(cats);
  const auto queries = DescriptorStore::load(a.queries);
  const auto all_train = DescriptorStore::load(a.train);
  // Only images still listed in the category index take part.
  const auto train = restricted(all_train, gid_of);
  if (train.size() < all_train.size())
    io.log("dedup-rank", std::to_string(all_train.size() - train.size()) + " stored training images are not in the category index; ignored");
  std::optional<AnnIndex> ann;
  if (a.ann && !train.empty()) ann = AnnIndex::build(train, {16, 100, derive_seed(c.seed, "ann")});
  auto cands = rank_candidates(queries, train, gid_of, a.k, ann ? &*ann : nullptr);
  const std::size_t visual = cands.size();
  const auto needles = detail::split_list(a.needles);
  if (!needles.empty()) {
    auto text = text_candidates(cats, needles);
    cands.insert(cands.end(), text.begin(), text.end());
  }
  const auto path = a.output.empty() ? c.out / "candidates.jsonl" : std::filesystem::path(a.output);
  write_candidates_jsonl(path, cands);
  io.log("dedup-rank", std::to_string(visual) + " visual and " + std::to_string(cands.size() - visual) + " text candidates -> " + path.string());
}

inline void dedup_verify(const Common& c, const Io& io, const std::string& in, const std::string& images,
                         const VerifyParams& vp, const std::string& output) {
  auto cands = read_candidates_jsonl(in);
  FeatureCache cache(images, vp.detector);
  auto_verify(cands, [&](const std::string& id) -> const std::vector<LocalFeature>& { return cache(id); }, vp);
  std::size_t verified = 0;
  for (const auto& m : cands) verified += m.status == CandidateStatus::AutoVerified;
  const auto path = output.empty() ? c.out / "verified.jsonl" : std::filesystem::path(output);
  write_candidates_jsonl(path, cands);
  io.log("dedup-verify", std::to_string(verified) + " of " + std::to_string(cands.size()) + " candidates auto-verified -> " + path.string());
}

struct ManifestArgs {
  std::string candidates, categories, verdicts, evaluators, truth, output, revised;
};

inline void dedup_manifest(const Common& c, const Io& io, const ManifestArgs& a) {
  const auto cats = load_categories_csv(a.categories);
  auto cands = read_candidates_jsonl(a.candidates);
  if (!a.truth.empty() && !a.verdicts.empty()) throw ConfigError("dedup-manifest: give either --truth or --verdicts, not both");
  if (!a.truth.empty()) {
    const auto t = detail::read_json(a.truth, false);
    std::set<std::string> truth;
    try {
      truth = t.at("planted_gids").get<std::set<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("truth file: " + std::string(e.what()));
    }
    scripted_verdicts(cands, truth);
  } else if (!a.verdicts.empty()) {
    const auto evaluators = detail::split_list(a.evaluators);
    if (evaluators.empty()) throw ConfigError("dedup-manifest: --verdicts needs --evaluators");
    ReviewState state(cands, evaluators);
    VerdictLog(a.verdicts).replay(state);
    cands = state.resolved();
  }
  const auto m = aggregate_removals(cands, cats);
  const auto path = a.output.empty() ? c.out / "manifest.json" : std::filesystem::path(a.output);
  detail::write_json(path, m);
  for (const auto& n : m.notes) io.log("dedup-manifest", n);
  if (!a.revised.empty()) {
    const auto applied = apply_manifest(cats, m);
    std::ofstream os(a.revised);
    if (!os) throw DataError("cannot write " + a.revised);
    write_categories_csv(os, applied.revised);
  }
  io.out << "gids " << m.total_gids() << "\nimages " << m.total_images() << '\n';
}

struct ServeArgs {
  std::string candidates, categories, images, evaluators, log, snapshot, host = "127.0.0.1", cors = "*";
  int port = 8080;
  std::size_t snapshot_every = 50;
  bool include_all = false;
};

inline void serve_cmd(const Common& c, const Io& io, const ServeArgs& a) {
  const auto evaluators = detail::split_list(a.evaluators);
  if (evaluators.empty()) throw ConfigError("serve: --evaluators must list at least one id");
  const auto cats = a.categories.empty() ? CategoryIndex{} : load_categories_csv(a.categories);
  ReviewState state(read_candidates_jsonl(a.candidates), evaluators, a.include_all);
  std::filesystem::create_directories(c.out);
  VerdictLog log(a.log.empty() ? c.out / "verdicts.jsonl" : std::filesystem::path(a.log));
  const auto replayed = log.replay(state);
  ReviewServiceConfig cfg;
  cfg.image_dir = a.images;
  cfg.snapshot_path = a.snapshot.empty() ? c.out / "snapshot.jsonl" : std::filesystem::path(a.snapshot);
  cfg.snapshot_every = a.snapshot_every;
  cfg.cors_origin = a.cors;
  ReviewService svc(state, log, cats, cfg);
  const int port = svc.bind(a.host, a.port);
  io.log("serve", "replayed " + std::to_string(replayed) + " verdicts from " + log.path().string());
  io.log("serve", "listening on http://" + a.host + ":" + std::to_string(port));
  detail::g_service = &svc;
  auto prev_int = std::signal(SIGINT, [](int) {
    if (detail::g_service) detail::g_service->stop();
  });
  auto prev_term = std::signal(SIGTERM, [](int) {
    if (detail::g_service) detail::g_service->stop();
  });
  svc.run();
  std::signal(SIGINT, prev_int);
  std::signal(SIGTERM, prev_term);
  detail::g_service = nullptr;
  write_snapshot(cfg.snapshot_path, state);
  io.log("serve", "stopped; snapshot written to " + cfg.snapshot_path.string());
}

// ---------------------------------------------------------------------------

/// Runs one command line (without the program name) and returns the exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  const Io io{out, err};
  CLI::App app{"Detect-to-retrieve toolkit: data, training, retrieval evaluation and training-set deduplication", "d2r"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--seed", common.seed, "Root seed for every random stream")->capture_default_str();
  app.add_option("--out", common.out, "Output directory")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset");
  std::string kind = "toy";
  ToyRunConfig toy;
  DedupFixtureParams fx;
  gen->add_option("--kind", kind, "toy or dedup")->capture_default_str();
  gen->add_option("--classes", toy.classes, "toy: number of classes")->capture_default_str();
  gen->add_option("--train-images", toy.train_images, "toy: training images")->capture_default_str();
  gen->add_option("--heldout-per-class", toy.heldout_per_class, "toy: held-out images per class")->capture_default_str();
  gen->add_option("--size", toy.image_size, "toy: image side in pixels")->capture_default_str();
  gen->add_option("--clutter", toy.clutter, "toy: clutter level in [0, 1]")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  gen->add_option("--categories", fx.categories, "dedup: landmark categories")->capture_default_str();
  gen->add_option("--images-per-category", fx.images_per_category, "dedup: training images per category")->capture_default_str();
  gen->add_option("--planted", fx.planted, "dedup: categories copied into the queries")->capture_default_str();
  gen->add_option("--queries-per-planted", fx.queries_per_planted, "dedup: queries per planted category")->capture_default_str();
  gen->add_option("--fixture-size", fx.image_size, "dedup: image side in pixels")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train an embedding model on a generated dataset");
  std::string data_dir, config;
  tr->add_option("--data", data_dir, "Dataset directory written by gen-data")->required();
  tr->add_option("--config", config, "JSON config with optional model and train sections");

  auto* em = app.add_subcommand("embed", "Compute global descriptors into a store");
  EmbedArgs ea;
  em->add_option("--model", ea.model, "Checkpoint stem (omit for the untrained initialization)");
  em->add_option("--config", ea.config, "Model config used when --model is omitted");
  em->add_option("--data", ea.data, "Dataset directory written by gen-data");
  em->add_option("--split", ea.split, "train, heldout, query or all")->capture_default_str();
  em->add_option("--images", ea.images, "Directory of images (ids are file stems)");
  em->add_option("--store", ea.store, "Output store stem (default <out>/store)");
  em->add_option("--eval-set", ea.eval_set, "Evaluation set JSON; queries with a crop are cropped before embedding");
  em->add_flag("--multires", ea.multires, "Average over the default scale set");

  auto* ix = app.add_subcommand("index", "Build an approximate nearest-neighbour index over a store");
  std::string ix_store, ix_path;
  AnnParams ap;
  ix->add_option("--store", ix_store, "Store stem")->required();
  ix->add_option("--M", ap.M, "Graph degree")->capture_default_str();
  ix->add_option("--ef-construction", ap.ef_construction, "Build beam width")->capture_default_str();
  ix->add_option("--index", ix_path, "Output path (default <out>/index.json)");

  auto* se = app.add_subcommand("search", "Nearest neighbours of one query");
  SearchArgs sa;
  se->add_option("--store", sa.store, "Store stem")->required();
  se->add_option("--index", sa.index, "ANN index from `index` (exact search when omitted)");
  se->add_option("--query-id", sa.query_id, "Use a stored descriptor as the query");
  se->add_option("--image", sa.image, "Embed this image as the query");
  se->add_option("--model", sa.model, "Checkpoint stem for --image");
  se->add_option("--config", sa.config, "Model config when --model is omitted");
  se->add_option("--k", sa.k, "Number of results")->capture_default_str()->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "mAP and mP@k of a store against an evaluation set");
  EvalArgs va;
  ev->add_option("--store", va.store, "Gallery store stem")->required();
  ev->add_option("--queries", va.queries, "Query store stem (default: the gallery store)");
  ev->add_option("--eval-set", va.eval_set, "Evaluation set JSON (default: same-category positives)");
  ev->add_option("--protocol", va.protocol, "base, medium or hard")->capture_default_str();
  ev->add_option("--k", va.ks, "Comma-separated cut-offs for mP@k")->capture_default_str();

  auto* dr = app.add_subcommand("dedup-rank", "Top-k training neighbours and name matches as candidates");
  RankArgs ra;
  dr->add_option("--queries", ra.queries, "Query store stem")->required();
  dr->add_option("--train", ra.train, "Training store stem")->required();
  dr->add_option("--categories", ra.categories, "Category index CSV (gid,name,image_id)")->required();
  dr->add_option("--k", ra.k, "Neighbours per query")->capture_default_str()->check(CLI::PositiveNumber);
  dr->add_flag("--ann", ra.ann, "Search with the ANN index instead of exhaustively");
  dr->add_option("--needles", ra.needles, "Comma-separated name substrings (empty to disable)")->capture_default_str();
  dr->add_option("--candidates", ra.output, "Output JSONL (default <out>/candidates.jsonl)");

  auto* dv = app.add_subcommand("dedup-verify", "Spatially verify visual candidates");
  std::string dv_in, dv_images, dv_out;
  VerifyParams vp;
  dv->add_option("--candidates", dv_in, "Candidates JSONL from dedup-rank")->required();
  dv->add_option("--images", dv_images, "Directory holding query and training images")->required();
  dv->add_option("--min-inliers", vp.min_inliers, "Inliers needed to auto-verify")->capture_default_str();
  dv->add_option("--ratio", vp.ratio, "Nearest-neighbour ratio test threshold")->capture_default_str();
  dv->add_option("--output", dv_out, "Output JSONL (default <out>/verified.jsonl)");

  auto* dm = app.add_subcommand("dedup-manifest", "Fold judged candidates into a removal manifest");
  ManifestArgs ma;
  dm->add_option("--candidates", ma.candidates, "Candidates JSONL")->required();
  dm->add_option("--categories", ma.categories, "Category index CSV")->required();
  dm->add_option("--verdicts", ma.verdicts, "Verdict log written by serve");
  dm->add_option("--evaluators", ma.evaluators, "Comma-separated evaluator ids for --verdicts");
  dm->add_option("--truth", ma.truth, "Scripted verdicts: JSON with planted_gids");
  dm->add_option("--manifest", ma.output, "Output path (default <out>/manifest.json)");
  dm->add_option("--revised-categories", ma.revised, "Also write the category index with the manifest applied");

  auto* sv = app.add_subcommand("serve", "Run the review service");
  ServeArgs sva;
  sv->add_option("--candidates", sva.candidates, "Candidates JSONL")->required();
  sv->add_option("--categories", sva.categories, "Category index CSV for the summary");
  sv->add_option("--images", sva.images, "Directory served under /images/<id>");
  sv->add_option("--evaluators", sva.evaluators, "Comma-separated evaluator ids")->required();
  sv->add_option("--log", sva.log, "Verdict log (default <out>/verdicts.jsonl)");
  sv->add_option("--snapshot", sva.snapshot, "Snapshot path (default <out>/snapshot.jsonl)");
  sv->add_option("--snapshot-every", sva.snapshot_every, "Verdicts between snapshots")->capture_default_str();
  sv->add_option("--host", sva.host, "Bind address")->capture_default_str();
  sv->add_option("--port", sva.port, "Port (0 picks a free one)")->capture_default_str();
  sv->add_option("--cors-origin", sva.cors, "Access-Control-Allow-Origin value")->capture_default_str();
  sv->add_flag("--include-all", sva.include_all, "Also show auto-rejected visual candidates");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "d2r: " << e.what() << '\n';
    return kExitConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    nlohmann::json echo{{"command", name}, {"seed", common.seed}, {"out", common.out.string()}, {"options", detail::option_values(*sub)}};
    if (name == "gen-data") gen_data(common, io, kind, toy, fx);
    if (name == "train") train_cmd(common, io, data_dir, config, echo);
    if (name == "embed") embed_cmd(common, io, ea);
    if (name == "index") index_cmd(common, io, ix_store, ap, ix_path);
    if (name == "search") search_cmd(common, io, sa);
    if (name == "eval") eval_cmd(common, io, va);
    if (name == "dedup-rank") dedup_rank(common, io, ra);
    if (name == "dedup-verify") dedup_verify(common, io, dv_in, dv_images, vp, dv_out);
    if (name == "dedup-manifest") dedup_manifest(common, io, ma);
    if (name == "serve") serve_cmd(common, io, sva);
    std::filesystem::create_directories(common.out);
    detail::write_json(common.out / (name + ".config.json"), echo);
    return 0;
  } catch (const ConfigError& e) {
    err << "d2r " << name << ": config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "d2r " << name << ": numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "d2r " << name << ": data error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace d2r::cli
