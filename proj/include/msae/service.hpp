#pragma once

// HTTP API over a finished run: browse records and evidence, steer and
// attribute on the configured host. Everything lives under /api/v1 and
// every JSON body carries schema_version.

#include <httplib.h>

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "msae/pipeline.hpp"

namespace msae {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kApiSchemaVersion = 1;

// Request problem tied to one body or query field; answered with 422.
class FieldError : public Error {
 public:
  FieldError(std::string field, const std::string& what) : Error(what), field_(std::move(field)) {}
  const char* kind() const noexcept override { return "invalid-field"; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct Artifacts {
  SaeParams params;
  SparseFeatureCache cache;
  std::vector<FeatureRecord> records;
  std::map<std::uint32_t, std::size_t> by_feature;
  ImageIndex images;
  std::unique_ptr<HostModel> host;
};

inline std::unique_ptr<Artifacts> load_artifacts(const RunConfig& cfg) {
  cfg.require_keys({"paths.params", "paths.cache", "paths.records", "paths.manifest"});
  auto a = std::make_unique<Artifacts>();
  a->params = load_params(cfg.path("paths.params"));
  a->cache = read_cache(cfg.path("paths.cache"));
  a->records = read_records(cfg.path("paths.records"));
  for (std::size_t i = 0; i < a->records.size(); ++i) a->by_feature[a->records[i].feature_index] = i;
  a->images = ImageIndex(cfg.path("paths.manifest"));
  a->host = make_host(cfg);
  if (a->host->d_model() != a->params.d_l())
    throw ConfigError("host d_model " + std::to_string(a->host->d_model()) + " != SAE d_l " + std::to_string(a->params.d_l()));
  return a;
}

inline nlohmann::json feature_summary(const FeatureRecord& r) {
  auto opt = [](const auto& o) -> nlohmann::json {
    if (o) return *o;
    return nullptr;
  };
  return {{"feature_index", r.feature_index},
          {"top_mean", r.top_images.empty() ? 0.0 : r.top_images.front().mean},
          {"n_images", r.top_images.size()},
          {"explanation", opt(r.explanation)},
          {"refined_label", opt(r.refined_label)},
          {"concept", opt(r.category)},
          {"scores",
           {{"iou", opt(r.scores.iou)}, {"clip_score", opt(r.scores.clip_score)}, {"consistency", opt(r.scores.consistency)}}}};
}

// Order for GET /features: descending key, records without the score last,
// ties by feature index.
inline std::vector<const FeatureRecord*> sorted_features(const std::vector<FeatureRecord>& records, const std::string& sort,
                                                         const std::string& concept_filter) {
  std::function<std::optional<double>(const FeatureRecord&)> key;
  if (sort == "mean")
    key = [](const FeatureRecord& r) -> std::optional<double> {
      if (r.top_images.empty()) return std::nullopt;
      return r.top_images.front().mean;
    };
  else if (sort == "iou")
    key = [](const FeatureRecord& r) { return r.scores.iou; };
  else if (sort == "clip")
    key = [](const FeatureRecord& r) { return r.scores.clip_score; };
  else
    throw FieldError("sort", "sort must be mean, iou or clip");
  std::vector<const FeatureRecord*> out;
  for (const auto& r : records)
    if (concept_filter.empty() || (r.category && *r.category == concept_filter)) out.push_back(&r);
  std::stable_sort(out.begin(), out.end(), [&](const FeatureRecord* a, const FeatureRecord* b) {
    const auto ka = key(*a), kb = key(*b);
    if (ka.has_value() != kb.has_value()) return ka.has_value();
    if (ka && *ka != *kb) return *ka > *kb;
    return a->feature_index < b->feature_index;
  });
  return out;
}

class Service {
 public:
  explicit Service(RunConfig cfg, std::ostream& log = std::cerr) : cfg_(std::move(cfg)), log_(log) {
    try {
      art_ = load_artifacts(cfg_);
    } catch (const std::exception& e) {
      load_error_ = e.what();
      log_ << "warning: run artifacts not loaded: " << load_error_ << "\n";
    }
    routes();
  }

  bool loaded() const { return art_ != nullptr; }
  httplib::Server& server() { return srv_; }

  // "host:port"; blocks until stop().
  void listen(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw ConfigError("service.addr must look like host:port: " + addr);
    const std::string host = addr.substr(0, colon);
    int port = 0;
    try {
      port = std::stoi(addr.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("service.addr has a bad port: " + addr);
    }
    if (!srv_.bind_to_port(host, port)) throw ClientError("cannot bind " + addr);
    log_ << "serving /api/v1 on http://" << addr << "\n";
    srv_.listen_after_bind();
  }

  int bind_any(const std::string& host = "127.0.0.1") { return srv_.bind_to_any_port(host); }
  void listen_after_bind() { srv_.listen_after_bind(); }
  void stop() { srv_.stop(); }

 private:
  using Req = httplib::Request;
  using Res = httplib::Response;

  static void send_json(Res& res, int status, nlohmann::json body) {
    body["schema_version"] = kApiSchemaVersion;
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(Res& res, int status, const std::string& kind, const std::string& message,
                         const std::optional<std::string>& field = std::nullopt) {
    nlohmann::json e = {{"kind", kind}, {"message", message}};
    if (field) e["field"] = *field;
    send_json(res, status, {{"error", e}});
  }

  // Runs `fn` with loaded artifacts, mapping failures to status codes.
  template <class Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [this, fn](const Req& req, Res& res) {
      if (!art_) return send_error(res, 503, "unavailable", "run artifacts not loaded: " + load_error_);
      try {
        fn(req, res, *art_);
      } catch (const FieldError& e) {
        send_error(res, 422, e.kind(), e.what(), e.field());
      } catch (const NotFound& e) {
        send_error(res, 404, e.kind(), e.what());
      } catch (const InvalidArgument& e) {
        send_error(res, 422, e.kind(), e.what());
      } catch (const ClientError& e) {
        send_error(res, 502, e.kind(), e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
      }
    };
  }

  static nlohmann::json parse_body(const Req& req) {
    auto j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw FieldError("body", "request body must be a JSON object");
    return j;
  }

  static std::uint32_t uint_field(const nlohmann::json& j, const std::string& name, std::optional<std::uint32_t> fallback = {}) {
    if (!j.contains(name) || j.at(name).is_null()) {
      if (fallback) return *fallback;
      throw FieldError(name, name + " is required");
    }
    const auto& v = j.at(name);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0 || v.get<std::int64_t>() > 0xffffffffLL)
      throw FieldError(name, name + " must be a non-negative integer");
    return v.get<std::uint32_t>();
  }

  static std::string string_field(const nlohmann::json& j, const std::string& name, std::optional<std::string> fallback = {}) {
    if (!j.contains(name) || j.at(name).is_null()) {
      if (fallback) return *fallback;
      throw FieldError(name, name + " is required");
    }
    if (!j.at(name).is_string()) throw FieldError(name, name + " must be a string");
    return j.at(name).get<std::string>();
  }

  // Token given as a vocabulary word or an id.
  static std::string token_field(const nlohmann::json& j, const std::string& name) {
    const auto& v = j.at(name);
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return std::to_string(v.get<std::int64_t>());
    throw FieldError(name, name + " must be a token word or id");
  }

  static std::optional<fs::path> image_field(const nlohmann::json& j, const Artifacts& a) {
    if (!j.contains("image") || j.at("image").is_null()) return std::nullopt;
    if (!j.at("image").is_string()) throw FieldError("image", "image must be an image id");
    const auto id = j.at("image").get<std::string>();
    if (!a.images.contains(id)) throw FieldError("image", "unknown image: " + id);
    return a.images.path(id);
  }

  void routes() {
    const std::string origin = cfg_.str("service.cors_origin");
    srv_.set_default_headers({{"Access-Control-Allow-Origin", origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
    srv_.Options(R"(/api/v1/.*)", [](const Req&, Res& res) { res.status = 204; });

    srv_.Get("/api/v1/health", [this](const Req&, Res& res) {
      nlohmann::json body = {{"status", art_ ? "ok" : "unavailable"},
                             {"version", kVersion},
                             {"loaded", art_ != nullptr},
                             {"build", {{"compiler", __VERSION__}, {"cxx", __cplusplus}, {"date", __DATE__}}},
                             {"host", cfg_.str("host.kind")}};
      if (art_) body["n_features"] = art_->records.size();
      if (!art_) body["error"] = load_error_;
      send_json(res, 200, body);
    });

    srv_.Get("/api/v1/features", guarded([](const Req& req, Res& res, Artifacts& a) {
      const std::string sort = req.has_param("sort") ? req.get_param_value("sort") : "mean";
      const std::string concept_filter = req.has_param("concept") ? req.get_param_value("concept") : "";
      auto positive = [&](const std::string& name, std::size_t fallback) -> std::size_t {
        if (!req.has_param(name)) return fallback;
        const auto v = req.get_param_value(name);
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos || v.size() > 9 || std::stoul(v) < 1)
          throw FieldError(name, name + " must be a positive integer");
        return std::stoul(v);
      };
      const std::size_t page = positive("page", 1), page_size = std::min<std::size_t>(positive("page_size", 50), 500);
      const auto order = sorted_features(a.records, sort, concept_filter);
      nlohmann::json items = nlohmann::json::array();
      for (std::size_t i = (page - 1) * page_size; i < order.size() && i < page * page_size; ++i)
        items.push_back(feature_summary(*order[i]));
      send_json(res, 200,
                {{"sort", sort}, {"concept", concept_filter}, {"page", page}, {"page_size", page_size},
                 {"total", order.size()}, {"features", items}});
    }));

    srv_.Get(R"(/api/v1/features/(\d+))", guarded([](const Req& req, Res& res, Artifacts& a) {
      const auto id = parse_feature(req.matches[1]);
      const auto it = a.by_feature.find(id);
      if (it == a.by_feature.end()) throw NotFound("no record for feature " + std::to_string(id));
      send_json(res, 200, {{"record", record_to_json(a.records[it->second])}});
    }));

    srv_.Get(R"(/api/v1/features/(\d+)/heatmap/([^/]+))", guarded([](const Req& req, Res& res, Artifacts& a) {
      const auto id = parse_feature(req.matches[1]);
      const std::string image_id = req.matches[2];
      if (id >= a.cache.d_s) throw NotFound("unknown feature " + std::to_string(id));
      if (!a.cache.contains(image_id)) throw NotFound("image not in cache: " + image_id);
      const auto h = token_heatmap(a.cache, image_id, id);
      send_json(res, 200, {{"feature", id}, {"image_id", image_id}, {"rows", h.rows()}, {"cols", h.cols()},
                           {"values", grid_to_json(h)}});
    }));

    srv_.Get(R"(/api/v1/images/([^/]+))", guarded([](const Req& req, Res& res, Artifacts& a) {
      const std::string id = req.matches[1];
      const auto bytes = io::read_file(a.images.path(id));
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
    }));

    srv_.Post("/api/v1/steer", guarded([this](const Req& req, Res& res, Artifacts& a) {
      const auto body = parse_body(req);
      SteerQuery q;
      q.feature = uint_field(body, "feature");
      if (q.feature >= a.params.d_s())
        throw FieldError("feature", "feature out of range (d_s=" + std::to_string(a.params.d_s()) + ")");
      if (!body.contains("value") || !body.at("value").is_number()) throw FieldError("value", "value must be a number");
      q.value = body.at("value").get<double>();
      if (!std::isfinite(q.value)) throw FieldError("value", "value must be finite");
      q.prompt = string_field(body, "prompt");
      q.image = image_field(body, a);
      q.max_len = uint_field(body, "max_len", 1);
      if (q.max_len < 1 || q.max_len > 64) throw FieldError("max_len", "max_len must be in [1, 64]");
      const std::size_t T = (q.image ? cfg_.grid().tokens() : 0) + toy::tokenize(q.prompt).size();
      if (body.contains("tokens") && !body.at("tokens").is_null()) {
        if (!body.at("tokens").is_array()) throw FieldError("tokens", "tokens must be a list of token positions");
        for (const auto& t : body.at("tokens")) {
          if (!t.is_number_integer() || t.get<std::int64_t>() < 0 || static_cast<std::size_t>(t.get<std::int64_t>()) >= T)
            throw FieldError("tokens", "token positions must be in [0, " + std::to_string(T) + ")");
          q.tokens.push_back(t.get<std::uint32_t>());
        }
      }
      if (T == 0) throw FieldError("prompt", "prompt and image are both empty");
      auto out = steer_query(*a.host, a.params, q);
      out["session_id"] = remember(out);
      send_json(res, 200, out);
    }));

    srv_.Get(R"(/api/v1/steer/(\d+))", guarded([this](const Req& req, Res& res, Artifacts&) {
      const auto id = std::stoull(std::string(req.matches[1]));
      std::lock_guard l(sessions_mu_);
      const auto it = sessions_.find(id);
      if (it == sessions_.end()) throw NotFound("unknown steering session " + std::to_string(id));
      send_json(res, 200, it->second);
    }));

    srv_.Post("/api/v1/attribute", guarded([this](const Req& req, Res& res, Artifacts& a) {
      const auto body = parse_body(req);
      AttributeQuery q;
      q.prompt = string_field(body, "prompt");
      q.image = image_field(body, a);
      if (!body.contains("v_b")) throw FieldError("v_b", "v_b is required");
      q.v_b = token_field(body, "v_b");
      if (body.contains("v_c") && !body.at("v_c").is_null()) q.v_c = token_field(body, "v_c");
      const auto method = string_field(body, "method", std::string("exact"));
      if (method != "exact" && method != "approx") throw FieldError("method", "method must be exact or approx");
      q.method = attribution_method_from(method);
      q.top_n = uint_field(body, "top_n", 10);
      if (q.top_n < 1) throw FieldError("top_n", "top_n must be >= 1");
      if (!q.image && toy::tokenize(q.prompt).empty()) throw FieldError("prompt", "prompt and image are both empty");
      for (const auto& [field, tok] : {std::pair<std::string, std::optional<std::string>>{"v_b", q.v_b}, {"v_c", q.v_c}}) {
        if (!tok) continue;
        try {
          resolve_token(*tok, a.host->vocab_size());
        } catch (const InvalidArgument& e) {
          throw FieldError(field, e.what());
        }
      }
      const auto r = attribute_query(*a.host, a.params, q, cfg_.threads());
      if (r.entries.empty()) {
        send_json(res, 200, attribution_summary_json(r, {}));
        return;
      }
      send_json(res, 200, attribution_summary_json(r, attribution_maps(r, q.top_n, cfg_.grid())));
    }));
  }

  static std::uint32_t parse_feature(const std::string& s) {
    if (s.size() > 9) throw NotFound("unknown feature " + s);
    return static_cast<std::uint32_t>(std::stoul(s));
  }

  std::uint64_t remember(const nlohmann::json& result) {
    std::lock_guard l(sessions_mu_);
    const auto id = ++next_session_;
    sessions_[id] = result;
    while (sessions_.size() > kMaxSessions) sessions_.erase(sessions_.begin());
    return id;
  }

  static constexpr std::size_t kMaxSessions = 256;

  RunConfig cfg_;
  std::ostream& log_;
  std::unique_ptr<Artifacts> art_;
  std::string load_error_;
  httplib::Server srv_;
  std::mutex sessions_mu_;
  std::uint64_t next_session_ = 0;
  std::map<std::uint64_t, nlohmann::json> sessions_;
};

}  // namespace msae
