#pragma once

// Run configuration: one JSON file, nested objects or dotted keys (both
// flatten to the same key set), overridable with `key=value` assignments.
// Every key is checked against a fixed schema before anything runs.

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "msae/activation_store.hpp"
#include "msae/binary_io.hpp"
#include "msae/chat.hpp"
#include "msae/error.hpp"
#include "msae/mask.hpp"
#include "msae/parallel.hpp"
#include "msae/trainer.hpp"

namespace msae {

enum class KeyType { string, path, integer, number, boolean, string_list };

struct KeyInfo {
  KeyType type;
  nlohmann::json fallback;  // null: no default
};

inline const std::vector<std::string>& client_roles() {
  static const std::vector<std::string> kRoles{"explainer", "refiner", "categorizer", "judge"};
  return kRoles;
}

inline const std::map<std::string, KeyInfo>& config_schema() {
  static const std::map<std::string, KeyInfo> kSchema = [] {
    using J = nlohmann::json;
    std::map<std::string, KeyInfo> s{
        {"run_dir", {KeyType::path, "."}},
        {"threads", {KeyType::integer, 0}},
        {"paths.manifest", {KeyType::path, nullptr}},
        {"paths.shards", {KeyType::path, nullptr}},
        {"paths.params", {KeyType::path, nullptr}},
        {"paths.optim", {KeyType::path, nullptr}},
        {"paths.metrics", {KeyType::path, nullptr}},
        {"paths.cache", {KeyType::path, nullptr}},
        {"paths.records", {KeyType::path, nullptr}},
        {"paths.masks", {KeyType::path, nullptr}},
        {"paths.grounding", {KeyType::path, nullptr}},
        {"paths.embeddings", {KeyType::path, nullptr}},
        {"paths.archive", {KeyType::path, nullptr}},
        {"paths.scores", {KeyType::path, nullptr}},
        {"paths.templates", {KeyType::path, nullptr}},
        {"sae.d_s", {KeyType::integer, nullptr}},
        {"sae.k", {KeyType::integer, nullptr}},
        {"train.lr", {KeyType::number, 1e-3}},
        {"train.adam_beta1", {KeyType::number, 0.9}},
        {"train.adam_beta2", {KeyType::number, 0.999}},
        {"train.adam_eps", {KeyType::number, 1e-8}},
        {"train.batch_size", {KeyType::integer, 8}},
        {"train.grad_accum_steps", {KeyType::integer, 4}},
        {"train.steps", {KeyType::integer, 1000}},
        {"train.aux_coef", {KeyType::number, 1.0 / 32.0}},
        {"train.aux_k", {KeyType::integer, 0}},
        {"train.dead_token_threshold", {KeyType::integer, 100000}},
        {"train.seed", {KeyType::integer, 0}},
        {"train.calibration_tokens", {KeyType::integer, 4096}},
        {"train.resume", {KeyType::boolean, false}},
        {"cache.images_per_shard", {KeyType::integer, 256}},
        {"host.kind", {KeyType::string, "toy-linear"}},
        {"host.d_model", {KeyType::integer, 16}},
        {"host.seed", {KeyType::integer, 1}},
        {"host.hidden", {KeyType::integer, 24}},
        {"host.command", {KeyType::string_list, J::array()}},
        {"host.socket", {KeyType::string, ""}},
        {"host.grid_rows", {KeyType::integer, 4}},
        {"host.grid_cols", {KeyType::integer, 4}},
        {"host.cell_px", {KeyType::integer, 16}},
        {"eval.n_top", {KeyType::integer, 5}},
        {"eval.threshold_mode", {KeyType::string, "relative"}},
        {"eval.tau_rel", {KeyType::number, 0.5}},
        {"eval.n_runs", {KeyType::integer, 10}},
        {"eval.seed", {KeyType::integer, 0}},
        {"eval.judge_samples", {KeyType::integer, 10}},
        {"eval.grounding", {KeyType::string, "file"}},
        {"eval.grounding_endpoint", {KeyType::string, ""}},
        {"eval.embeddings", {KeyType::string, "none"}},
        {"eval.embeddings_endpoint", {KeyType::string, ""}},
        {"eval.timeout_s", {KeyType::number, 60.0}},
        {"demo.n_images", {KeyType::integer, 240}},
        {"demo.seed", {KeyType::integer, 7}},
        {"service.addr", {KeyType::string, "127.0.0.1:8080"}},
        {"service.cors_origin", {KeyType::string, "*"}},
    };
    for (const auto& role : client_roles()) {
      s["clients." + role + ".endpoint"] = {KeyType::string, nullptr};
      s["clients." + role + ".model"] = {KeyType::string, ""};
      s["clients." + role + ".template_id"] = {KeyType::string, ""};
      s["clients." + role + ".timeout_s"] = {KeyType::number, 120.0};
      s["clients." + role + ".max_retries"] = {KeyType::integer, 3};
      s["clients." + role + ".retry_backoff_ms"] = {KeyType::integer, 500};
      s["clients." + role + ".max_images"] = {KeyType::integer, 5};
    }
    return s;
  }();
  return kSchema;
}

namespace detail {

inline void flatten_into(const nlohmann::json& j, const std::string& prefix, std::map<std::string, nlohmann::json>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten_into(v, prefix.empty() ? k : prefix + "." + k, out);
    return;
  }
  if (prefix.empty()) throw ConfigError("config must be a JSON object");
  out[prefix] = j;
}

inline bool type_ok(KeyType t, const nlohmann::json& v) {
  switch (t) {
    case KeyType::string:
    case KeyType::path:
      return v.is_string();
    case KeyType::integer:
      return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
    case KeyType::number:
      return v.is_number();
    case KeyType::boolean:
      return v.is_boolean();
    case KeyType::string_list:
      if (!v.is_array()) return false;
      for (const auto& e : v)
        if (!e.is_string()) return false;
      return true;
  }
  return false;
}

inline const char* type_name(KeyType t) {
  switch (t) {
    case KeyType::string: return "a string";
    case KeyType::path: return "a path string";
    case KeyType::integer: return "an integer";
    case KeyType::number: return "a number";
    case KeyType::boolean: return "a boolean";
    case KeyType::string_list: return "a list of strings";
  }
  return "?";
}

}  // namespace detail

// `key=value`; the value is parsed as JSON when it is valid JSON, otherwise
// taken as a string.
inline std::pair<std::string, nlohmann::json> parse_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + s);
  const std::string key = s.substr(0, eq), text = s.substr(eq + 1);
  nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
  if (v.is_discarded()) v = text;
  return {key, v};
}

class RunConfig {
 public:
  RunConfig() : RunConfig(nlohmann::json::object(), std::filesystem::current_path()) {}

  // `base_dir` anchors relative paths (the config file's directory).
  RunConfig(const nlohmann::json& doc, std::filesystem::path base_dir, const std::vector<std::string>& overrides = {})
      : base_dir_(std::filesystem::absolute(base_dir).lexically_normal()) {
    detail::flatten_into(doc, "", values_);
    for (const auto& o : overrides) {
      auto [k, v] = parse_assignment(o);
      values_[k] = std::move(v);
    }
    validate_schema();
  }

  static RunConfig load(const std::filesystem::path& file, const std::vector<std::string>& overrides = {}) {
    if (!std::filesystem::exists(file)) throw ConfigError("config file not found: " + file.string());
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(io::read_text(file));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(file.string() + ": " + e.what());
    }
    return RunConfig(doc, std::filesystem::absolute(file).parent_path(), overrides);
  }

  bool has(const std::string& key) const { return values_.count(key) || !schema_at(key).fallback.is_null(); }

  // Named-key failure for every key in `keys` that has neither a value nor a default.
  void require_keys(const std::vector<std::string>& keys) const {
    std::string missing;
    for (const auto& k : keys)
      if (!has(k)) missing += (missing.empty() ? "" : ", ") + k;
    if (!missing.empty()) throw ConfigError("missing config key(s): " + missing);
  }

  const nlohmann::json& raw(const std::string& key) const {
    if (auto it = values_.find(key); it != values_.end()) return it->second;
    const auto& info = schema_at(key);
    if (info.fallback.is_null()) throw ConfigError("missing config key: " + key);
    return info.fallback;
  }

  std::string str(const std::string& key) const { return raw(key).get<std::string>(); }
  double num(const std::string& key) const { return raw(key).get<double>(); }
  bool flag(const std::string& key) const { return raw(key).get<bool>(); }
  std::int64_t integer(const std::string& key) const { return static_cast<std::int64_t>(raw(key).get<double>()); }
  std::uint64_t uint(const std::string& key) const {
    const auto v = integer(key);
    if (v < 0) throw ConfigError(key + " must be >= 0");
    return static_cast<std::uint64_t>(v);
  }
  std::vector<std::string> list(const std::string& key) const { return raw(key).get<std::vector<std::string>>(); }

  std::filesystem::path path(const std::string& key) const {
    const std::filesystem::path p(str(key));
    auto out = p.is_absolute() ? p.lexically_normal() : (base_dir_ / p).lexically_normal();
    if (!out.has_filename() && out.has_relative_path()) out = out.parent_path();  // "dir/" -> "dir"
    return out;
  }
  std::filesystem::path run_dir() const { return path("run_dir"); }
  const std::filesystem::path& base_dir() const { return base_dir_; }

  void set(const std::string& key, nlohmann::json v) {
    values_[key] = std::move(v);
    validate_schema();
  }

  std::size_t threads() const {
    const auto t = integer("threads");
    if (t < 0) throw ConfigError("threads must be >= 0");
    return t == 0 ? default_threads() : static_cast<std::size_t>(t);
  }

  Grid grid() const {
    const auto r = uint("host.grid_rows"), c = uint("host.grid_cols");
    if (r < 1 || c < 1 || r > 65535 || c > 65535) throw ConfigError("host.grid_rows/grid_cols must be in [1, 65535]");
    return {static_cast<std::uint16_t>(r), static_cast<std::uint16_t>(c)};
  }

  TrainConfig train_config() const {
    require_keys({"sae.d_s", "sae.k"});
    TrainConfig t;
    t.d_s = static_cast<std::uint32_t>(uint("sae.d_s"));
    t.k = static_cast<std::uint32_t>(uint("sae.k"));
    t.lr = num("train.lr");
    t.adam_beta1 = num("train.adam_beta1");
    t.adam_beta2 = num("train.adam_beta2");
    t.adam_eps = num("train.adam_eps");
    t.batch_size = static_cast<std::uint32_t>(uint("train.batch_size"));
    t.grad_accum_steps = static_cast<std::uint32_t>(uint("train.grad_accum_steps"));
    t.steps = uint("train.steps");
    t.aux_coef = num("train.aux_coef");
    t.aux_k = static_cast<std::uint32_t>(uint("train.aux_k"));
    t.dead_token_threshold = uint("train.dead_token_threshold");
    t.seed = uint("train.seed");
    t.calibration_tokens = uint("train.calibration_tokens");
    try {
      t.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
    return t;
  }

  BinarizeOptions binarize_options() const {
    BinarizeOptions o;
    try {
      o.mode = threshold_mode_from(str("eval.threshold_mode"));
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("eval.threshold_mode: ") + e.what());
    }
    o.value = num("eval.tau_rel");
    return o;
  }

  // Environment supplies the key: MSAE_<ROLE>_API_KEY, else MSAE_API_KEY.
  ChatClientConfig client_config(const std::string& role) const {
    const std::string p = "clients." + role + ".";
    require_keys({p + "endpoint"});
    ChatClientConfig c;
    c.endpoint = str(p + "endpoint");
    c.model = str(p + "model");
    c.template_id = str(p + "template_id");
    c.timeout_s = num(p + "timeout_s");
    c.max_retries = static_cast<int>(integer(p + "max_retries"));
    c.retry_backoff_ms = static_cast<int>(integer(p + "retry_backoff_ms"));
    const auto mi = integer(p + "max_images");
    if (mi < 1) throw ConfigError(p + "max_images must be >= 1");
    c.max_images = static_cast<std::size_t>(mi);
    std::string upper = role;
    for (auto& ch : upper) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (const char* k = std::getenv(("MSAE_" + upper + "_API_KEY").c_str()))
      c.api_key = k;
    else if (const char* g = std::getenv("MSAE_API_KEY"))
      c.api_key = g;
    c.validate("clients." + role);
    return c;
  }

  // Nested document with every explicitly set key; paths as written.
  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [k, v] : values_) {
      nlohmann::json* cur = &out;
      std::size_t pos = 0;
      for (;;) {
        const auto dot = k.find('.', pos);
        if (dot == std::string::npos) {
          (*cur)[k.substr(pos)] = v;
          break;
        }
        cur = &(*cur)[k.substr(pos, dot - pos)];
        pos = dot + 1;
      }
    }
    return out;
  }

  // Same document with path keys made absolute, so the copy stays valid
  // wherever it is written.
  nlohmann::json resolved_json() const {
    RunConfig copy = *this;
    for (auto& [k, v] : copy.values_)
      if (schema_at(k).type == KeyType::path) v = path(k).string();
    return copy.to_json();
  }

  // Canonical text of every key under the given prefixes, defaults included.
  std::string fingerprint(const std::vector<std::string>& prefixes) const {
    std::string out;
    for (const auto& [k, info] : config_schema()) {
      bool hit = false;
      for (const auto& p : prefixes) hit |= k == p || k.rfind(p + ".", 0) == 0;
      if (!hit) continue;
      if (values_.count(k))
        out += k + "=" + (info.type == KeyType::path ? path(k).string() : values_.at(k).dump()) + "\n";
      else if (!info.fallback.is_null())
        out += k + "=" + info.fallback.dump() + "\n";
    }
    return out;
  }

 private:
  static const KeyInfo& schema_at(const std::string& key) {
    const auto it = config_schema().find(key);
    if (it == config_schema().end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  void validate_schema() const {
    for (const auto& [k, v] : values_) {
      const auto it = config_schema().find(k);
      if (it == config_schema().end()) throw ConfigError("unknown config key: " + k);
      if (!detail::type_ok(it->second.type, v))
        throw ConfigError("config key " + k + " must be " + detail::type_name(it->second.type) + ", got " + v.dump());
    }
    const auto kind = values_.count("host.kind") ? values_.at("host.kind").get<std::string>() : "toy-linear";
    if (kind != "toy-linear" && kind != "toy-mlp" && kind != "exchange")
      throw ConfigError("host.kind must be toy-linear, toy-mlp or exchange, got " + kind);
    for (const auto& key : {"eval.grounding", "eval.embeddings"}) {
      const auto v = values_.count(key) ? values_.at(key).get<std::string>() : config_schema().at(key).fallback.get<std::string>();
      if (v != "file" && v != "http" && v != "none")
        throw ConfigError(std::string(key) + " must be file, http or none, got " + v);
    }
  }

  std::filesystem::path base_dir_;
  std::map<std::string, nlohmann::json> values_;
};

}  // namespace msae
