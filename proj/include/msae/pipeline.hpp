#pragma once

// Stage runners behind the command line: each validates its configuration,
// checks inputs, skips itself when a stage manifest says nothing changed,
// and writes its outputs to the configured paths. Also the read-only
// queries (steer, attribute, probe) shared with the HTTP service, and the
// synthetic end-to-end demo.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "msae/activation_store.hpp"
#include "msae/attribution.hpp"
#include "msae/config.hpp"
#include "msae/evaluate.hpp"
#include "msae/exchange.hpp"
#include "msae/host.hpp"
#include "msae/interpret.hpp"
#include "msae/toy_clients.hpp"
#include "msae/trainer.hpp"

namespace msae {

namespace fs = std::filesystem;

// ---- hosts and inputs -------------------------------------------------------------

inline toy::SceneLayout scene_layout(const RunConfig& cfg) {
  const auto px = cfg.uint("host.cell_px");
  if (px < 1) throw ConfigError("host.cell_px must be >= 1");
  return {cfg.grid(), static_cast<std::uint32_t>(px)};
}

inline void validate_host_config(const RunConfig& cfg) {
  const auto kind = cfg.str("host.kind");
  if (kind == "exchange") {
    if (cfg.list("host.command").empty() && cfg.str("host.socket").empty())
      throw ConfigError("host.kind=exchange needs host.command or host.socket");
    return;
  }
  if (cfg.uint("host.d_model") < 1) throw ConfigError("host.d_model must be >= 1");
  if (kind == "toy-mlp" && cfg.uint("host.hidden") < 1) throw ConfigError("host.hidden must be >= 1");
  scene_layout(cfg);
}

inline std::unique_ptr<HostModel> make_host(const RunConfig& cfg) {
  validate_host_config(cfg);
  const auto kind = cfg.str("host.kind");
  if (kind == "toy-linear") return make_toy_linear_host(cfg.uint("host.d_model"), cfg.uint("host.seed"), scene_layout(cfg));
  if (kind == "toy-mlp")
    return make_toy_mlp_host(cfg.uint("host.d_model"), cfg.uint("host.seed"), cfg.uint("host.hidden"), scene_layout(cfg));
  if (!cfg.str("host.socket").empty())
    return std::make_unique<exchange::ExchangeHost>(exchange::connect_unix(cfg.str("host.socket")));
  return std::make_unique<exchange::ExchangeHost>(std::make_unique<exchange::Subprocess>(cfg.list("host.command")));
}

// Image (optional) plus prompt, with a ref usable by out-of-process hosts.
inline HostInput make_input(const std::optional<fs::path>& image, const std::string& prompt) {
  HostInput in;
  nlohmann::json ref = nlohmann::json::object();
  if (image) {
    in.image = load_png(*image);
    ref["image"] = fs::absolute(*image).string();
  }
  in.text = toy::tokenize(prompt);
  if (!prompt.empty()) ref["text"] = prompt;
  in.ref = ref.dump();
  return in;
}

// Word from the toy vocabulary, or a decimal id.
inline std::uint32_t resolve_token(const std::string& s, std::size_t vocab) {
  std::uint32_t id = 0;
  if (!s.empty() && s.find_first_not_of("0123456789") == std::string::npos) {
    id = static_cast<std::uint32_t>(std::stoul(s));
  } else {
    const auto& v = toy::vocabulary();
    const auto it = std::find(v.begin(), v.end(), s);
    if (it == v.end()) throw InvalidArgument("unknown token: " + s);
    id = static_cast<std::uint32_t>(it - v.begin());
  }
  if (id >= vocab) throw InvalidArgument("token id " + std::to_string(id) + " out of range (vocab " + std::to_string(vocab) + ")");
  return id;
}

// image_id -> file, from the manifest.
class ImageIndex {
 public:
  ImageIndex() = default;
  explicit ImageIndex(const fs::path& manifest) {
    for (const auto& e : read_manifest(manifest)) {
      if (!paths_.emplace(e.image_id, resolve_manifest_path(manifest, e.path)).second)
        throw InvalidArgument(manifest.string() + ": duplicate image_id " + e.image_id);
      order_.push_back(e.image_id);
    }
  }
  const fs::path& path(const std::string& id) const {
    const auto it = paths_.find(id);
    if (it == paths_.end()) throw NotFound("unknown image: " + id);
    return it->second;
  }
  bool contains(const std::string& id) const { return paths_.count(id) != 0; }
  Image load(const std::string& id) const { return load_png(path(id)); }
  const std::vector<std::string>& ids() const { return order_; }
  ImageLoader loader() const {
    return [this](const std::string& id) { return load(id); };
  }

 private:
  std::map<std::string, fs::path> paths_;
  std::vector<std::string> order_;
};

// ---- chat roles ----------------------------------------------------------------------

inline constexpr const char* kMockEndpoint = "mock:toy";

inline std::unique_ptr<ChatClient> make_client(const RunConfig& cfg, const std::string& role) {
  const auto cc = cfg.client_config(role);
  if (cc.endpoint == kMockEndpoint) {
    if (role == "explainer") return toy::make_explainer();
    if (role == "refiner") return toy::make_refiner();
    if (role == "categorizer") return toy::make_categorizer();
    return toy::make_judge();
  }
  return std::make_unique<HttpChatClient>(cc);
}

struct Role {
  std::unique_ptr<ChatClient> client;
  std::unique_ptr<Archive> archive;
  RoleSetup setup;
};

inline Role make_role(const RunConfig& cfg, const std::string& role) {
  Role r;
  r.client = make_client(cfg, role);
  if (cfg.has("paths.archive")) r.archive = std::make_unique<Archive>(cfg.path("paths.archive"));
  r.setup = RoleSetup(r.client.get(), r.archive.get(), cfg.has("paths.templates") ? cfg.path("paths.templates") : fs::path{});
  return r;
}

// ---- stage manifest ----------------------------------------------------------------

inline std::string hash_file(const fs::path& p) { return sha256_hex(io::read_file(p)); }

// Files under a directory (recursively, sorted) or the file itself.
inline std::vector<fs::path> files_of(const fs::path& p) {
  std::vector<fs::path> out;
  if (fs::is_directory(p)) {
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
  } else if (fs::exists(p)) {
    out.push_back(p);
  }
  return out;
}

inline std::string hash_paths(const std::vector<fs::path>& paths) {
  std::string acc;
  for (const auto& p : paths) {
    acc += "@" + p.string() + "\n";
    for (const auto& f : files_of(p)) acc += f.string() + " " + hash_file(f) + "\n";
  }
  return sha256_hex(acc);
}

// stages.json in the run directory: per stage, the key its inputs hashed
// to and the hashes of what it wrote.
class StageManifest {
 public:
  explicit StageManifest(fs::path file) : file_(std::move(file)) {
    if (fs::exists(file_)) {
      try {
        doc_ = nlohmann::json::parse(io::read_text(file_));
      } catch (const nlohmann::json::exception&) {
        doc_ = nlohmann::json::object();
      }
    }
    if (!doc_.is_object()) doc_ = nlohmann::json::object();
  }

  bool up_to_date(const std::string& stage, const std::string& key, const std::vector<fs::path>& outputs) const {
    if (!doc_.contains(stage)) return false;
    const auto& s = doc_.at(stage);
    if (s.value("key", "") != key) return false;
    for (const auto& o : outputs)
      if (!fs::exists(o) || s.at("outputs").value(o.string(), "") != hash_paths({o})) return false;
    return true;
  }

  // Stages whose outputs are rewritten downstream store a digest of the
  // part they own instead; an empty digest never counts as current.
  bool digest_current(const std::string& stage, const std::string& key, const std::string& digest) const {
    if (digest.empty() || !doc_.contains(stage)) return false;
    const auto& s = doc_.at(stage);
    return s.value("key", "") == key && s.value("digest", "") == digest;
  }

  void record(const std::string& stage, const std::string& key, const std::vector<fs::path>& outputs,
              const std::string& digest = {}) {
    nlohmann::json outs = nlohmann::json::object();
    for (const auto& o : outputs) outs[o.string()] = hash_paths({o});
    doc_[stage] = {{"key", key}, {"outputs", outs}};
    if (!digest.empty()) doc_[stage]["digest"] = digest;
    io::write_text(file_, doc_.dump(2) + "\n");
  }

  void forget(const std::string& stage) {
    if (doc_.erase(stage)) io::write_text(file_, doc_.dump(2) + "\n");
  }

 private:
  fs::path file_;
  nlohmann::json doc_;
};

// ---- pipeline ------------------------------------------------------------------------

struct StageResult {
  bool skipped = false;
  nlohmann::json summary = nlohmann::json::object();
  std::size_t warnings = 0;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, std::ostream& log = std::cerr) : cfg_(std::move(cfg)), log_(log) {}

  const RunConfig& config() const { return cfg_; }
  void set_force(bool f) { force_ = f; }

  StageResult cache_activations() {
    cfg_.require_keys({"paths.manifest", "paths.shards"});
    validate_host_config(cfg_);
    const auto manifest = need_file("paths.manifest");
    const auto per_shard = cfg_.uint("cache.images_per_shard");
    if (per_shard < 1) throw ConfigError("cache.images_per_shard must be >= 1");
    const ImageIndex index(manifest);
    std::vector<fs::path> inputs{manifest};
    for (const auto& id : index.ids()) inputs.push_back(index.path(id));
    const auto out_dir = cfg_.path("paths.shards");
    return run_stage("cache-activations", inputs, {"host", "cache"}, {out_dir}, [&](StageResult& res) {
      const auto host = make_host(cfg_);
      const Grid grid = cfg_.grid();
      const auto& ids = index.ids();
      require(!ids.empty(), "manifest lists no images");
      std::vector<std::vector<float>> rows(ids.size());
      progress_.reset(ids.size(), "cache-activations");
      parallel_for(ids.size(), host_threads(*host), [&](std::size_t i) {
        const auto in = make_input(index.path(ids[i]), "");
        const auto x = host->run(in);
        const auto ranges = host->token_ranges(in);
        const TokenRange* img = nullptr;
        for (const auto& r : ranges)
          if (r.label == "image") img = &r;
        if (!img) throw InvalidArgument("host reported no image range for " + ids[i]);
        if (img->end - img->begin != grid.tokens())
          throw InvalidArgument("host returned " + std::to_string(img->end - img->begin) + " image tokens for " +
                                ids[i] + ", grid expects " + std::to_string(grid.tokens()));
        const auto first = x.data().begin() + static_cast<std::ptrdiff_t>(img->begin * x.cols());
        rows[i].assign(first, first + static_cast<std::ptrdiff_t>(grid.tokens() * x.cols()));
        progress_.tick(log_);
      });
      fs::create_directories(out_dir);
      for (const auto& e : fs::directory_iterator(out_dir))
        if (e.path().extension() == ".act") fs::remove(e.path());
      const auto d_l = static_cast<std::uint32_t>(host->d_model());
      std::size_t n_shards = 0;
      for (std::size_t start = 0; start < ids.size(); start += per_shard, ++n_shards) {
        ActivationShard s(grid, d_l);
        for (std::size_t i = start; i < std::min<std::size_t>(ids.size(), start + per_shard); ++i)
          s.append(ids[i], rows[i]);
        write_shard(s, out_dir / shard_name(n_shards));
      }
      res.summary = {{"images", ids.size()}, {"shards", n_shards}, {"d_l", d_l}, {"T", grid.tokens()}};
    });
  }

  StageResult train() {
    cfg_.require_keys({"paths.shards", "paths.params", "paths.optim", "paths.metrics"});
    const auto tc = cfg_.train_config();
    const auto shard_dir = need_dir("paths.shards");
    const auto params = cfg_.path("paths.params"), optim = cfg_.path("paths.optim"), metrics = cfg_.path("paths.metrics");
    const bool resume = cfg_.flag("train.resume") && fs::exists(params) && fs::exists(optim);
    std::vector<fs::path> inputs{shard_dir};
    if (resume) inputs.insert(inputs.end(), {params, optim});
    return run_stage("train", inputs, {"sae", "train"}, {params, optim, metrics}, [&](StageResult& res) {
      const auto shards = load_shards(shard_dir);
      TrainState state = resume ? load_checkpoint(params, optim) : initial_state(shards, tc);
      if (resume && (state.params.d_s() != tc.d_s || state.params.k != tc.k))
        throw ConfigError("train.resume: checkpoint dims do not match sae.d_s / sae.k");
      std::string lines = resume && fs::exists(metrics) ? io::read_text(metrics) : metrics_header();
      const auto start = state.step;
      progress_.reset(tc.steps > start ? tc.steps - start : 0, "train");
      TrainMetrics last;
      train_from(state, shards, tc, [&](const TrainMetrics& m) {
        lines += metrics_line(m);
        last = m;
        progress_.tick(log_);
      });
      if (params.has_parent_path()) fs::create_directories(params.parent_path());
      save_checkpoint(state, params, optim);
      io::write_text(metrics, lines);
      res.summary = {{"steps", state.step}, {"recon_loss", last.recon_loss}, {"dead_count", last.dead_count}};
    });
  }

  StageResult encode_cache() {
    cfg_.require_keys({"paths.shards", "paths.params", "paths.cache"});
    const auto shard_dir = need_dir("paths.shards");
    const auto params = need_file("paths.params");
    const auto out = cfg_.path("paths.cache");
    return run_stage("encode-cache", {shard_dir, params}, {}, {out}, [&](StageResult& res) {
      const auto cache = build_sparse_cache(load_shards(shard_dir), load_params(params));
      write_cache(cache, out);
      res.summary = {{"images", cache.n_images()}, {"tokens", cache.n_tokens()}, {"d_s", cache.d_s}, {"k", cache.k}};
    });
  }

  StageResult top_images() {
    cfg_.require_keys({"paths.cache", "paths.records"});
    const auto cache_path = need_file("paths.cache");
    const auto opt = cfg_.binarize_options();
    const auto n_top = cfg_.uint("eval.n_top");
    if (n_top < 1) throw ConfigError("eval.n_top must be >= 1");
    const auto records_path = cfg_.path("paths.records");
    std::vector<fs::path> outputs{records_path};
    if (cfg_.has("paths.masks")) outputs.push_back(cfg_.path("paths.masks"));
    auto evidence = [&]() -> std::string {
      if (!fs::exists(records_path)) return "";
      std::string acc;
      for (const auto& r : read_records(records_path)) acc += std::to_string(r.feature_index) + " " + r.evidence_hash + "\n";
      if (cfg_.has("paths.masks")) acc += hash_paths({cfg_.path("paths.masks")});
      return sha256_hex(acc);
    };
    return run_stage("top-images", {cache_path}, {"eval.n_top", "eval.threshold_mode", "eval.tau_rel"}, outputs,
                     [&](StageResult& res) {
                       const auto cache = read_cache(cache_path);
                       auto records = make_records(cache, n_top, opt);
                       std::size_t kept = 0;
                       if (fs::exists(records_path)) {
                         const auto previous = read_records(records_path);
                         merge_previous(records, previous);
                         for (const auto& r : records) kept += r.explained();
                       }
                       write_records(records, records_path);
                       if (cfg_.has("paths.masks")) write_mask_files(records, cfg_.path("paths.masks"));
                       res.summary = {{"records", records.size()}, {"carried_over", kept}};
                     },
                     {}, evidence);
  }

  StageResult explain() { return record_stage("explain", "explainer", true); }
  StageResult refine() { return record_stage("refine", "refiner", false); }
  StageResult categorize() { return record_stage("categorize", "categorizer", false); }
  StageResult consistency() { return record_stage("consistency", "judge", true); }

  StageResult evaluate() {
    cfg_.require_keys({"paths.records", "paths.scores"});
    const auto records_path = need_file("paths.records");
    const auto g_kind = cfg_.str("eval.grounding"), e_kind = cfg_.str("eval.embeddings");
    std::vector<fs::path> inputs;
    if (g_kind == "file") inputs.push_back(need_dir("paths.grounding"));
    if (g_kind == "http" && cfg_.str("eval.grounding_endpoint").empty())
      throw ConfigError("missing config key: eval.grounding_endpoint");
    if (e_kind == "file") inputs.push_back(need_file("paths.embeddings"));
    if (e_kind == "http" && cfg_.str("eval.embeddings_endpoint").empty())
      throw ConfigError("missing config key: eval.embeddings_endpoint");
    const bool baselines = cfg_.has("paths.cache") && fs::exists(cfg_.path("paths.cache"));
    if (baselines) inputs.push_back(cfg_.path("paths.cache"));
    if (baselines && cfg_.uint("eval.n_runs") < 2) throw ConfigError("eval.n_runs must be >= 2");
    if (g_kind == "http" || e_kind == "http") cfg_.require_keys({"paths.manifest"});
    const auto scores = cfg_.path("paths.scores");
    const auto scores_json = fs::path(scores).replace_extension(".json");
    const auto scored_fields = [&] {
      std::string acc;
      for (const auto& r : read_records(records_path))
        acc += std::to_string(r.feature_index) + " " + r.evidence_hash + " " + r.refined_label.value_or("-") + " " +
               r.category.value_or("-") + "\n";
      return sha256_hex(acc);
    };
    return run_stage("evaluate", inputs, {"eval"}, {scores, scores_json}, [&](StageResult& res) {
      auto records = read_records(records_path);
      std::optional<ImageIndex> index;
      if (g_kind == "http" || e_kind == "http") index.emplace(need_file("paths.manifest"));
      std::unique_ptr<GroundingSource> grounding;
      std::unique_ptr<EmbeddingSource> embeddings;
      const double timeout = cfg_.num("eval.timeout_s");
      if (g_kind == "file") grounding = std::make_unique<FileGroundingSource>(cfg_.path("paths.grounding"));
      if (g_kind == "http")
        grounding = std::make_unique<HttpGroundingSource>(cfg_.str("eval.grounding_endpoint"), index->loader(), timeout);
      if (e_kind == "file") embeddings = std::make_unique<FileEmbeddingSource>(cfg_.path("paths.embeddings"));
      if (e_kind == "http")
        embeddings = std::make_unique<HttpEmbeddingSource>(cfg_.str("eval.embeddings_endpoint"), index->loader(), timeout);
      const auto rep = evaluate_records(records, grounding.get(), embeddings.get());
      auto table = aggregate(records);
      if (baselines && rep.scored > 0) {
        const auto cache = read_cache(cfg_.path("paths.cache"));
        const auto n_runs = cfg_.uint("eval.n_runs"), seed = cfg_.uint("eval.seed"), n_top = cfg_.uint("eval.n_top");
        if (grounding) table.baselines.push_back(table_baseline("iou", records, cache, grounding.get(), nullptr, n_runs, seed, n_top));
        if (embeddings)
          table.baselines.push_back(table_baseline("clip_score", records, cache, nullptr, embeddings.get(), n_runs, seed, n_top));
      }
      write_records(records, records_path);
      io::write_text(scores, table_tsv(table));
      io::write_text(scores_json, table_json(table).dump(2) + "\n");
      if (rep.unrefined > 0)
        log_ << "warning: " << rep.unrefined << " record(s) without a refined label were not scored\n";
      res.warnings = rep.unrefined;
      res.summary = {{"scored", rep.scored},
                     {"unrefined", rep.unrefined},
                     {"iou_unavailable", rep.iou_unavailable},
                     {"clip_unavailable", rep.clip_unavailable},
                     {"rows", table.rows.size()}};
    }, scored_fields());
  }

  StageResult run(const std::string& stage) {
    if (stage == "cache-activations") return cache_activations();
    if (stage == "train") return train();
    if (stage == "encode-cache") return encode_cache();
    if (stage == "top-images") return top_images();
    if (stage == "explain") return explain();
    if (stage == "refine") return refine();
    if (stage == "categorize") return categorize();
    if (stage == "evaluate") return evaluate();
    if (stage == "consistency") return consistency();
    throw InvalidArgument("unknown stage: " + stage);
  }

  static const std::vector<std::string>& stage_order() {
    static const std::vector<std::string> kOrder{"cache-activations", "train",    "encode-cache", "top-images",
                                                 "explain",           "refine",   "categorize",   "evaluate",
                                                 "consistency"};
    return kOrder;
  }

  static std::string shard_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "shard_%05zu.act", i);
    return buf;
  }

  static std::vector<ActivationShard> load_shards(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".act") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw NotFound("no .act shards in " + dir.string());
    std::vector<ActivationShard> out;
    for (const auto& f : files) out.push_back(read_shard(f));
    return out;
  }

  // <dir>/<feature>/<image_id>.msk per record image.
  static void write_mask_files(const std::vector<FeatureRecord>& records, const fs::path& dir) {
    if (fs::exists(dir)) fs::remove_all(dir);
    fs::create_directories(dir);
    for (const auto& r : records) {
      const auto sub = dir / std::to_string(r.feature_index);
      fs::create_directories(sub);
      for (std::size_t i = 0; i < r.top_images.size(); ++i) write_mask(r.masks[i], sub / (r.top_images[i].image_id + ".msk"));
    }
  }

 private:
  struct Progress {
    std::size_t total = 0, done = 0, next = 0;
    std::string name;
    std::mutex m;
    void reset(std::size_t n, std::string nm) {
      total = n, done = 0, next = 0, name = std::move(nm);
    }
    void tick(std::ostream& log) {
      std::lock_guard l(m);
      ++done;
      if (total >= 10 && done >= next) {
        log << "[" << name << "] " << done << "/" << total << "\n";
        next = done + total / 10;
      }
    }
  };

  std::size_t host_threads(const HostModel& host) const {
    return dynamic_cast<const exchange::ExchangeHost*>(&host) ? 1 : cfg_.threads();
  }

  fs::path need_file(const std::string& key) const {
    const auto p = cfg_.path(key);
    if (!fs::is_regular_file(p)) throw NotFound(key + ": no such file: " + p.string());
    return p;
  }
  fs::path need_dir(const std::string& key) const {
    const auto p = cfg_.path(key);
    if (!fs::is_directory(p)) throw NotFound(key + ": no such directory: " + p.string());
    return p;
  }

  // `extra` joins the key; `output_digest`, when given, replaces the
  // output hash comparison.
  template <class Body>
  StageResult run_stage(const std::string& stage, const std::vector<fs::path>& inputs,
                        const std::vector<std::string>& prefixes, const std::vector<fs::path>& outputs, Body body,
                        const std::string& extra = {}, const std::function<std::string()>& output_digest = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto run_dir = cfg_.run_dir();
    fs::create_directories(run_dir);
    StageManifest manifest(run_dir / "stages.json");
    const std::string key = sha256_hex(stage + "\n" + cfg_.fingerprint(prefixes) + hash_paths(inputs) + extra);
    StageResult res;
    const bool current = output_digest ? manifest.digest_current(stage, key, output_digest())
                                       : manifest.up_to_date(stage, key, outputs);
    if (!force_ && current) {
      res.skipped = true;
      log_ << "[" << stage << "] up to date, nothing to do\n";
      return res;
    }
    manifest.forget(stage);
    body(res);
    manifest.record(stage, key, outputs, output_digest ? output_digest() : std::string());
    io::write_text(run_dir / "config.used.json", cfg_.resolved_json().dump(2) + "\n");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.summary["seconds"] = secs;
    log_ << "[" << stage << "] done " << res.summary.dump() << "\n";
    return res;
  }

  // Stages that update records in place through a chat role. The records
  // file is both input and output, so only its post-stage hash is checked.
  StageResult record_stage(const std::string& stage, const std::string& role_name, bool needs_images) {
    cfg_.require_keys({"paths.records"});
    if (needs_images) cfg_.require_keys({"paths.manifest"});
    const auto records_path = need_file("paths.records");
    cfg_.client_config(role_name);
    if (stage == "consistency" && cfg_.uint("eval.judge_samples") < 1) throw ConfigError("eval.judge_samples must be >= 1");
    std::vector<fs::path> inputs;
    if (needs_images) inputs.push_back(need_file("paths.manifest"));
    if (cfg_.has("paths.templates")) inputs.push_back(cfg_.path("paths.templates"));
    std::vector<std::string> prefixes{"clients." + role_name};
    if (stage == "consistency") prefixes.push_back("eval.judge_samples");
    auto pending = [&](const FeatureRecord& r) {
      if (stage == "explain") return !r.explained() && !r.top_images.empty();
      if (stage == "refine") return r.has_pattern() && !r.refined_label;
      if (stage == "categorize") return r.refined_label && !r.category;
      return r.has_pattern() && !r.scores.consistency;
    };
    auto nothing_pending = [&]() -> std::string {
      const auto records = read_records(records_path);
      return std::none_of(records.begin(), records.end(), pending) ? "done" : "";
    };
    return run_stage(stage, inputs, prefixes, {records_path}, [&](StageResult& res) {
      auto records = read_records(records_path);
      auto role = make_role(cfg_, role_name);
      std::optional<ImageIndex> index;
      if (needs_images) index.emplace(cfg_.path("paths.manifest"));
      const Grid grid = cfg_.grid();
      const std::size_t threads = cfg_.threads();
      StageReport rep;
      try {
        if (stage == "explain") rep = explain_records(records, index->loader(), grid, role.setup, threads);
        if (stage == "refine") rep = refine_records(records, role.setup, threads);
        if (stage == "categorize") rep = categorize_records(records, role.setup, threads);
        if (stage == "consistency")
          rep = consistency_records(records, index->loader(), grid, role.setup, cfg_.uint("eval.judge_samples"), threads);
      } catch (...) {
        write_records(records, records_path);  // keep whatever finished
        throw;
      }
      write_records(records, records_path);
      if (rep.failed) log_ << "warning: " << rep.failed << " record(s) failed in " << stage << "\n";
      res.warnings = rep.failed;
      res.summary = {{"processed", rep.processed}, {"skipped", rep.skipped}, {"failed", rep.failed}};
    }, {}, nothing_pending);
  }

  RunConfig cfg_;
  std::ostream& log_;
  bool force_ = false;
  Progress progress_;
};

// ---- queries ----------------------------------------------------------------------------

struct SteerQuery {
  std::uint32_t feature = 0;
  double value = 0.0;
  std::vector<std::uint32_t> tokens;  // empty: every token
  std::string prompt;
  std::optional<fs::path> image;
  std::size_t max_len = 1;
};

inline nlohmann::json steer_query(const HostModel& host, const SaeParams& params, const SteerQuery& q) {
  if (q.feature >= params.d_s())
    throw InvalidArgument("feature " + std::to_string(q.feature) + " out of range (d_s=" + std::to_string(params.d_s()) + ")");
  const auto in = make_input(q.image, q.prompt);
  const SteerSpec spec{q.tokens, q.feature, q.value};
  const auto plain = generate_steered(host, in, params, {}, q.max_len);
  const auto steered = generate_steered(host, in, params, std::span<const SteerSpec>(&spec, 1), q.max_len);
  return {{"feature", q.feature},
          {"value", q.value},
          {"tokens", q.tokens},
          {"unsteered", {{"ids", plain}, {"text", toy::detokenize(plain)}}},
          {"steered", {{"ids", steered}, {"text", toy::detokenize(steered)}}}};
}

struct AttributeQuery {
  std::string prompt;
  std::optional<fs::path> image;
  std::optional<std::string> v_c;  // default: the unsteered argmax
  std::string v_b;
  AttributionMethod method = AttributionMethod::exact;
  std::size_t top_n = 10;
};

inline AttributionResult attribute_query(const HostModel& host, const SaeParams& params, const AttributeQuery& q,
                                         std::size_t threads, HostInput* used_input = nullptr) {
  const auto in = make_input(q.image, q.prompt);
  const auto v_b = resolve_token(q.v_b, host.vocab_size());
  std::uint32_t v_c;
  if (q.v_c) {
    v_c = resolve_token(*q.v_c, host.vocab_size());
  } else {
    v_c = argmax(hooked_forward(host, in, params).logits);
    if (v_c == v_b) throw InvalidArgument("v_b equals the model's chosen token; pass v_c explicitly");
  }
  if (used_input) *used_input = in;
  return attribute(host, in, params, v_c, v_b, q.method, threads);
}

// ---- synthetic demo ------------------------------------------------------------------------

// Config for a self-contained toy run in `dir`; mock clients everywhere.
inline nlohmann::json demo_config_json() {
  nlohmann::json c = {
      {"run_dir", "."},
      {"paths",
       {{"manifest", "images/manifest.jsonl"},
        {"shards", "shards"},
        {"params", "sae.params"},
        {"optim", "sae.optim"},
        {"metrics", "metrics.tsv"},
        {"cache", "features.cache"},
        {"records", "records.jsonl"},
        {"masks", "masks"},
        {"grounding", "grounding"},
        {"embeddings", "embeddings.emb"},
        {"archive", "archive.jsonl"},
        {"scores", "scores.tsv"}}},
      {"sae", {{"d_s", 32}, {"k", 1}}},
      {"train", {{"steps", 300}, {"lr", 1e-2}, {"batch_size", 8}, {"grad_accum_steps", 2}, {"seed", 3}}},
      {"host", {{"kind", "toy-linear"}, {"d_model", 16}, {"seed", 11}}},
      {"eval", {{"embeddings", "file"}, {"grounding", "file"}, {"n_runs", 10}, {"judge_samples", 5}}},
  };
  for (const auto& role : client_roles()) c["clients"][role]["endpoint"] = kMockEndpoint;
  return c;
}

// Scenes, manifest, planted ground-truth masks (per concept name, pixel
// resolution) and embeddings: text = one-hot concept, image = normalized
// per-concept pixel counts.
inline nlohmann::json write_demo_data(const RunConfig& cfg) {
  cfg.require_keys({"paths.manifest", "paths.grounding", "paths.embeddings"});
  const auto layout = scene_layout(cfg);
  const auto n = cfg.uint("demo.n_images");
  if (n < 1) throw ConfigError("demo.n_images must be >= 1");
  const auto seed = cfg.uint("demo.seed");
  const auto manifest = cfg.path("paths.manifest");
  const auto img_dir = manifest.parent_path();
  const auto grounding = cfg.path("paths.grounding");
  fs::create_directories(img_dir);
  if (fs::exists(grounding)) fs::remove_all(grounding);
  fs::create_directories(grounding);
  const auto& cs = toy::concepts();
  EmbeddingTable emb;
  emb.dim = static_cast<std::uint32_t>(cs.size());
  for (std::size_t c = 0; c < cs.size(); ++c) {
    std::vector<float> v(cs.size(), 0.0f);
    v[c] = 1.0f;
    emb.texts[cs[c].name] = v;
  }
  std::vector<ManifestEntry> entries;
  std::vector<std::size_t> concept_images(cs.size(), 0);
  for (std::uint64_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%05llu", static_cast<unsigned long long>(i));
    const auto scene = toy::make_scene(id, seed * 1000003ULL + i, layout);
    save_png(scene.image, img_dir / (std::string(id) + ".png"));
    entries.push_back({id, std::string(id) + ".png"});
    std::vector<float> hist(cs.size(), 0.0f);
    for (const auto& pl : scene.placements) {
      Mask cells(layout.grid.cols, layout.grid.rows);
      for (std::size_t t = 0; t < pl.cells.size(); ++t) cells.bits[t] = pl.cells[t];
      const Mask px = upsample(cells, scene.image.width, scene.image.height);
      write_mask(px, FileGroundingSource::path_for(grounding, cs[pl.concept_index].name, id));
      hist[pl.concept_index] += static_cast<float>(px.count());
      ++concept_images[pl.concept_index];
    }
    double norm = 0.0;
    for (auto h : hist) norm += double(h) * h;
    norm = std::sqrt(norm);
    for (auto& h : hist) h = norm > 0 ? static_cast<float>(h / norm) : 0.0f;
    emb.images[id] = hist;
  }
  write_manifest(entries, manifest);
  write_embeddings(emb, cfg.path("paths.embeddings"));
  return {{"images", n}, {"concept_images", concept_images}};
}

// Decoder columns against the host's planted concept directions.
struct ConceptMatch {
  std::uint32_t feature = 0;
  std::size_t concept_index = 0;
  double cosine = 0.0;
};

inline std::vector<ConceptMatch> match_concepts(const SaeParams& params, const Matrix<float>& concept_dirs,
                                                double min_cos) {
  require(concept_dirs.cols() == params.d_l(), "match_concepts: concept width != d_l");
  std::vector<ConceptMatch> out;
  for (std::uint32_t j = 0; j < params.d_s(); ++j) {
    const auto w = params.atom(j);
    if (squared_norm(w) == 0.0) continue;
    ConceptMatch best{j, 0, -2.0};
    for (std::size_t c = 0; c < concept_dirs.rows(); ++c) {
      const double cosv = cosine(w, concept_dirs.row(c));
      if (cosv > best.cosine) best = {j, c, cosv};
    }
    if (best.cosine > min_cos) out.push_back(best);
  }
  return out;
}

// Generates data, runs every stage with the configured (mock) clients, and
// writes planted.json describing which features matched which concept.
inline nlohmann::json run_demo(const RunConfig& cfg, std::ostream& log = std::cerr) {
  if (cfg.str("host.kind") == "exchange") throw ConfigError("demo-synthetic needs a toy host (host.kind)");
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = write_demo_data(cfg);
  log << "[demo] wrote " << data.dump() << "\n";
  Pipeline p(cfg, log);
  nlohmann::json stages = nlohmann::json::object();
  for (const auto& s : Pipeline::stage_order()) stages[s] = p.run(s).summary;
  const auto host = make_host(cfg);
  const ToyFrontEnd* fe = nullptr;
  if (const auto* lin = dynamic_cast<const ToyLinearHost*>(host.get())) fe = &lin->front_end();
  if (const auto* mlp = dynamic_cast<const ToyMlpHost*>(host.get())) fe = &mlp->front_end();
  // A latent that never fires has no evidence to explain; aligned dead
  // latents are listed separately.
  nlohmann::json matches = nlohmann::json::array(), dead = nlohmann::json::array();
  if (fe) {
    const auto cache = read_cache(cfg.path("paths.cache"));
    std::vector<std::uint8_t> live(cache.d_s, 0);
    for (std::size_t a = 0; a < cache.indices.size(); ++a)
      if (cache.values[a] > 0.0f) live[cache.indices[a]] = 1;
    for (const auto& m : match_concepts(load_params(cfg.path("paths.params")), fe->concept_dirs, 0.9)) {
      const nlohmann::json e = {{"feature", m.feature}, {"concept", toy::concepts()[m.concept_index].name}, {"cosine", m.cosine}};
      (live[m.feature] ? matches : dead).push_back(e);
    }
  }
  nlohmann::json out = {{"concepts", nlohmann::json::array()}, {"matches", matches}, {"dead_matches", dead}};
  for (const auto& c : toy::concepts()) out["concepts"].push_back(c.name);
  io::write_text(cfg.run_dir() / "planted.json", out.dump(2) + "\n");
  out["stages"] = stages;
  out["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace msae
