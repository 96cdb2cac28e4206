#pragma once

// From top-activating evidence to labeled features: masked evidence images,
// explanation, label refinement, concept categorization, consistency judging,
// and the line-delimited feature record store.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msae/activation_store.hpp"
#include "msae/chat.hpp"
#include "msae/digest.hpp"
#include "msae/image.hpp"
#include "msae/mask.hpp"
#include "msae/parallel.hpp"

namespace msae {

inline const std::string kNoExplanation = "unable to produce explanations";

inline const std::vector<std::string>& concept_categories() {
  static const std::vector<std::string> kCategories{"scene", "object", "part", "material", "texture", "colour"};
  return kCategories;
}

// Active cells keep their pixels; everything else is black.
inline Image compose_masked_image(const Image& image, const Mask& mask, const Grid& grid) {
  if (mask.width != grid.cols || mask.height != grid.rows)
    throw InvalidArgument("compose_masked_image: mask does not match the token grid");
  if (grid.rows == 0 || grid.cols == 0 || image.width % grid.cols != 0 || image.height % grid.rows != 0)
    throw InvalidArgument("compose_masked_image: " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                          " image is not divisible into a " + std::to_string(grid.rows) + "x" +
                          std::to_string(grid.cols) + " grid");
  const std::uint32_t cw = image.width / grid.cols, ch = image.height / grid.rows;
  Image out(image.width, image.height);
  for (std::uint32_t y = 0; y < image.height; ++y)
    for (std::uint32_t x = 0; x < image.width; ++x)
      if (mask.at(x / cw, y / ch)) out.set(x, y, image.pixel(x, y));
  return out;
}

// ---- records ------------------------------------------------------------------------

struct FeatureScores {
  std::optional<double> iou;
  std::optional<double> clip_score;
  std::optional<double> consistency;
};

struct FeatureRecord {
  std::uint32_t feature_index = 0;
  std::vector<RankedImage> top_images;
  std::vector<Matrix<float>> heatmaps;  // token grid, one per top image
  std::vector<Mask> masks;              // binarized heatmaps
  BinarizeOptions binarize;
  std::string evidence_hash;
  std::optional<std::string> explanation;
  std::optional<std::string> refined_label;
  int refine_attempts = 0;
  std::optional<std::string> category;  // one of concept_categories()
  FeatureScores scores;
  std::vector<std::string> errors;

  bool explained() const { return explanation.has_value(); }
  bool has_pattern() const { return explanation && *explanation != kNoExplanation; }
};

inline void validate_record(const FeatureRecord& r) {
  if (r.heatmaps.size() != r.top_images.size() || r.masks.size() != r.top_images.size())
    throw InvalidArgument("record " + std::to_string(r.feature_index) + ": evidence arrays disagree in length");
  if (r.refined_label && (r.refined_label->empty() || !r.has_pattern()))
    throw InvalidArgument("record " + std::to_string(r.feature_index) + ": refined label requires an explanation");
  if (r.category && !r.refined_label)
    throw InvalidArgument("record " + std::to_string(r.feature_index) + ": concept requires a refined label");
  if (r.category && std::find(concept_categories().begin(), concept_categories().end(), *r.category) ==
                       concept_categories().end())
    throw InvalidArgument("record " + std::to_string(r.feature_index) + ": unknown concept " + *r.category);
}

// Identity of the evidence shown to the explainer.
inline std::string evidence_hash(std::uint32_t feature, const std::vector<RankedImage>& top,
                                 const std::vector<Mask>& masks) {
  std::string s = std::to_string(feature);
  for (std::size_t i = 0; i < top.size(); ++i) {
    s += "|" + top[i].image_id + ":" + std::to_string(masks[i].width) + "x" + std::to_string(masks[i].height) + ":";
    for (auto b : masks[i].bits) s.push_back(b ? '1' : '0');
  }
  return sha256_hex(s);
}

inline FeatureRecord make_record(const SparseFeatureCache& cache, std::uint32_t j, std::size_t n_top,
                                 const BinarizeOptions& opt) {
  FeatureRecord r;
  r.feature_index = j;
  r.top_images = top_images(cache, j, n_top).top_images;
  r.binarize = opt;
  for (const auto& ti : r.top_images) {
    r.heatmaps.push_back(token_heatmap(cache, ti.image_id, j));
    r.masks.push_back(binarize(r.heatmaps.back(), opt));
  }
  r.evidence_hash = evidence_hash(j, r.top_images, r.masks);
  return r;
}

// One record per feature that fires on at least one image.
inline std::vector<FeatureRecord> make_records(const SparseFeatureCache& cache, std::size_t n_top = 5,
                                               const BinarizeOptions& opt = {}) {
  const auto means = all_feature_means(cache);
  std::vector<FeatureRecord> out;
  for (std::uint32_t j = 0; j < cache.d_s; ++j)
    if (!means[j].empty()) out.push_back(make_record(cache, j, n_top, opt));
  return out;
}

// Carry completed work over from a previous run when the evidence is unchanged.
inline void merge_previous(std::vector<FeatureRecord>& fresh, const std::vector<FeatureRecord>& previous) {
  std::map<std::uint32_t, const FeatureRecord*> by_feature;
  for (const auto& p : previous) by_feature[p.feature_index] = &p;
  for (auto& r : fresh) {
    const auto it = by_feature.find(r.feature_index);
    if (it != by_feature.end() && it->second->evidence_hash == r.evidence_hash) r = *it->second;
  }
}

// ---- record JSON ----------------------------------------------------------------------

inline constexpr int kRecordSchemaVersion = 1;

template <class T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <class T>
std::optional<T> json_opt(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

inline nlohmann::json mask_to_json(const Mask& m) {
  std::string bits;
  for (auto b : m.bits) bits.push_back(b ? '1' : '0');
  return {{"width", m.width}, {"height", m.height}, {"bits", bits}};
}

inline Mask mask_from_json(const nlohmann::json& j) {
  Mask m(j.at("width").get<std::uint32_t>(), j.at("height").get<std::uint32_t>());
  const auto bits = j.at("bits").get<std::string>();
  if (bits.size() != m.bits.size()) throw ParseError("mask bit string has wrong length");
  for (std::size_t i = 0; i < bits.size(); ++i) m.bits[i] = bits[i] == '1';
  return m;
}

inline nlohmann::json grid_to_json(const Matrix<float>& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < g.rows(); ++r) rows.push_back(std::vector<float>(g.row(r).begin(), g.row(r).end()));
  return rows;
}

inline Matrix<float> grid_from_json(const nlohmann::json& j) {
  const std::size_t rows = j.size(), cols = rows ? j.at(0).size() : 0;
  Matrix<float> g(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (j.at(r).size() != cols) throw ParseError("heatmap rows differ in length");
    for (std::size_t c = 0; c < cols; ++c) g(r, c) = j.at(r).at(c).get<float>();
  }
  return g;
}

inline nlohmann::json record_to_json(const FeatureRecord& r) {
  nlohmann::json top = nlohmann::json::array(), heat = nlohmann::json::array(), masks = nlohmann::json::array();
  for (const auto& t : r.top_images) top.push_back({{"image_id", t.image_id}, {"mean", t.mean}});
  for (const auto& h : r.heatmaps) heat.push_back(grid_to_json(h));
  for (const auto& m : r.masks) masks.push_back(mask_to_json(m));
  return {{"schema_version", kRecordSchemaVersion},
          {"feature_index", r.feature_index},
          {"top_images", top},
          {"heatmaps", heat},
          {"masks", masks},
          {"binarize", {{"mode", to_string(r.binarize.mode)}, {"value", r.binarize.value}}},
          {"evidence_hash", r.evidence_hash},
          {"explanation", opt_json(r.explanation)},
          {"refined_label", opt_json(r.refined_label)},
          {"refine_attempts", r.refine_attempts},
          {"concept", opt_json(r.category)},
          {"scores",
           {{"iou", opt_json(r.scores.iou)},
            {"clip_score", opt_json(r.scores.clip_score)},
            {"consistency", opt_json(r.scores.consistency)}}},
          {"errors", r.errors}};
}

inline FeatureRecord record_from_json(const nlohmann::json& j) {
  FeatureRecord r;
  try {
    if (j.value("schema_version", 0) != kRecordSchemaVersion)
      throw ParseError("unsupported record schema_version " + std::to_string(j.value("schema_version", 0)));
    r.feature_index = j.at("feature_index").get<std::uint32_t>();
    for (const auto& t : j.at("top_images"))
      r.top_images.push_back({t.at("image_id").get<std::string>(), t.at("mean").get<double>()});
    for (const auto& h : j.at("heatmaps")) r.heatmaps.push_back(grid_from_json(h));
    for (const auto& m : j.at("masks")) r.masks.push_back(mask_from_json(m));
    r.binarize.mode = threshold_mode_from(j.at("binarize").at("mode").get<std::string>());
    r.binarize.value = j.at("binarize").at("value").get<double>();
    r.evidence_hash = j.at("evidence_hash").get<std::string>();
    r.explanation = json_opt<std::string>(j, "explanation");
    r.refined_label = json_opt<std::string>(j, "refined_label");
    r.refine_attempts = j.value("refine_attempts", 0);
    r.category = json_opt<std::string>(j, "concept");
    const auto& s = j.at("scores");
    r.scores.iou = json_opt<double>(s, "iou");
    r.scores.clip_score = json_opt<double>(s, "clip_score");
    r.scores.consistency = json_opt<double>(s, "consistency");
    r.errors = j.value("errors", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed feature record: ") + e.what());
  }
  validate_record(r);
  return r;
}

inline void write_records(const std::vector<FeatureRecord>& records, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : records) text += record_to_json(r).dump() + "\n";
  io::write_text(path, text);
}

inline std::vector<FeatureRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open records: " + path.string());
  std::vector<FeatureRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- text helpers -----------------------------------------------------------------------

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Strip whitespace, wrapping quotes and a trailing period.
inline std::string clean_answer(std::string s) {
  s = trim(std::move(s));
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) s = trim(s.substr(1, s.size() - 2));
  while (!s.empty() && (s.back() == '.' || s.back() == '!')) s.pop_back();
  return trim(s);
}

// Case-insensitive phrase match on word boundaries.
inline bool contains_phrase(const std::string& text, const std::string& phrase) {
  const std::string t = lower(text), p = lower(phrase);
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (auto pos = t.find(p); pos != std::string::npos; pos = t.find(p, pos + 1)) {
    const bool left = pos == 0 || !is_word(t[pos - 1]);
    const bool right = pos + p.size() == t.size() || !is_word(t[pos + p.size()]);
    if (left && right) return true;
  }
  return false;
}

inline std::size_t word_count(const std::string& s) {
  std::istringstream in(s);
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

// ---- operations --------------------------------------------------------------------------

struct RoleSetup {
  ChatClient* client = nullptr;
  Archive* archive = nullptr;
  std::filesystem::path template_dir;

  RoleSetup(ChatClient* c = nullptr, Archive* a = nullptr, std::filesystem::path dir = {})
      : client(c), archive(a), template_dir(std::move(dir)) {}
};

inline ChatResponse ask(const RoleSetup& role, const std::string& role_name, const std::string& template_id,
                        std::map<std::string, std::string> vars, std::vector<Image> images, long feature) {
  require(role.client != nullptr, role_name + ": no client configured");
  ChatRequest req;
  req.role = role_name;
  req.prompt = load_template(template_id, role.template_dir).render(vars);
  req.images = std::move(images);
  req.vars = std::move(vars);
  auto resp = role.client->chat(req);
  archive_exchange(role.archive, role_name, feature, req, resp);
  return resp;
}

// Returns the explanation text, or kNoExplanation when the explainer reports
// no common pattern.
inline std::string explain_feature(const std::vector<Image>& masked, const RoleSetup& role, long feature = -1) {
  require(!masked.empty(), "explain_feature: at least one masked image is required");
  const auto resp = ask(role, "explainer", "explain", {{"n_images", std::to_string(masked.size())}}, masked, feature);
  const std::string text = clean_answer(resp.text);
  if (text.empty()) throw ParseError("explainer returned an empty response");
  const std::string l = lower(text);
  if (l.find("unable to produce explanation") != std::string::npos || l.find("no common pattern") != std::string::npos)
    return kNoExplanation;
  return text;
}

struct RefinedLabel {
  std::string label;
  int attempts = 0;
};

inline constexpr std::size_t kMaxLabelWords = 6;

inline RefinedLabel refine_label(const std::string& explanation, const RoleSetup& role, long feature = -1) {
  require(explanation != kNoExplanation && !trim(explanation).empty(), "refine_label: nothing to refine");
  std::map<std::string, std::string> vars{{"explanation", explanation}, {"max_words", std::to_string(kMaxLabelWords)}};
  std::string label = clean_answer(ask(role, "refiner", "refine", vars, {}, feature).text);
  auto ok = [](const std::string& l) { return word_count(l) >= 1 && word_count(l) <= kMaxLabelWords; };
  if (ok(label)) return {label, 1};
  vars["previous"] = label;
  label = clean_answer(ask(role, "refiner", "refine_retry", vars, {}, feature).text);
  if (ok(label)) return {label, 2};
  throw RefinementFailed("label still has " + std::to_string(word_count(label)) + " words after re-prompt: " + label);
}

inline std::optional<std::string> normalize_category(const std::string& answer) {
  std::string a = lower(clean_answer(answer));
  if (a == "color") a = "colour";
  const auto& cs = concept_categories();
  if (std::find(cs.begin(), cs.end(), a) != cs.end()) return a;
  return std::nullopt;
}

inline std::string categorize(const std::string& label, const RoleSetup& role, long feature = -1) {
  require(!trim(label).empty(), "categorize: label must be nonempty");
  std::string cats;
  for (const auto& c : concept_categories()) cats += (cats.empty() ? "" : ", ") + c;
  std::map<std::string, std::string> vars{{"label", label}, {"categories", cats}};
  std::string answer = ask(role, "categorizer", "categorize", vars, {}, feature).text;
  if (auto c = normalize_category(answer)) return *c;
  vars["previous"] = clean_answer(answer);
  answer = ask(role, "categorizer", "categorize_retry", vars, {}, feature).text;
  if (auto c = normalize_category(answer)) return *c;
  throw CategorizationFailed("\"" + clean_answer(answer) + "\" is not a concept category (label: " + label + ")");
}

struct JudgeResult {
  double score = 0.0;
  std::size_t yes = 0, no = 0, abstain = 0;
};

inline std::optional<bool> parse_verdict(const std::string& text) {
  std::string a = lower(clean_answer(text));
  const auto end = a.find_first_not_of("abcdefghijklmnopqrstuvwxyz");
  a = a.substr(0, end);
  if (a == "yes") return true;
  if (a == "no") return false;
  return std::nullopt;
}

// Sample s shows masked image s mod |images|. Unparseable verdicts abstain.
inline JudgeResult consistency_judge(const std::string& explanation, const std::vector<Image>& masked,
                                     const RoleSetup& role, std::size_t n_samples, long feature = -1) {
  require(n_samples >= 1, "consistency_judge: n_samples must be >= 1");
  require(!masked.empty(), "consistency_judge: at least one masked image is required");
  JudgeResult r;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const auto resp = ask(role, "judge", "judge", {{"explanation", explanation}}, {masked[s % masked.size()]}, feature);
    const auto v = parse_verdict(resp.text);
    if (!v)
      ++r.abstain;
    else if (*v)
      ++r.yes;
    else
      ++r.no;
  }
  if (r.yes + r.no == 0) throw JudgeFailed("all " + std::to_string(n_samples) + " verdicts were unparseable");
  r.score = static_cast<double>(r.yes) / static_cast<double>(r.yes + r.no);
  return r;
}

// ---- record-level stages ------------------------------------------------------------------

using ImageLoader = std::function<Image(const std::string& image_id)>;

inline std::vector<Image> masked_evidence(const FeatureRecord& r, const ImageLoader& load, const Grid& grid) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < r.top_images.size(); ++i)
    out.push_back(compose_masked_image(load(r.top_images[i].image_id), r.masks[i], grid));
  return out;
}

struct StageReport {
  std::size_t processed = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
};

// Records that already carry an explanation are never re-requested.
inline StageReport explain_records(std::vector<FeatureRecord>& records, const ImageLoader& load, const Grid& grid,
                                   const RoleSetup& role, std::size_t threads = 1) {
  StageReport rep;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].explained() || records[i].top_images.empty())
      ++rep.skipped;
    else
      todo.push_back(i);
  }
  parallel_for(todo.size(), threads, [&](std::size_t t) {
    auto& r = records[todo[t]];
    r.explanation = explain_feature(masked_evidence(r, load, grid), role, r.feature_index);
  });
  rep.processed = todo.size();
  return rep;
}

inline StageReport refine_records(std::vector<FeatureRecord>& records, const RoleSetup& role, std::size_t threads = 1) {
  StageReport rep;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].has_pattern() && !records[i].refined_label)
      todo.push_back(i);
    else
      ++rep.skipped;
  }
  std::vector<std::uint8_t> failed(todo.size(), 0);
  parallel_for(todo.size(), threads, [&](std::size_t t) {
    auto& r = records[todo[t]];
    try {
      const auto lab = refine_label(*r.explanation, role, r.feature_index);
      r.refined_label = lab.label;
      r.refine_attempts = lab.attempts;
    } catch (const RefinementFailed& e) {
      r.refine_attempts = 2;
      r.errors.push_back(std::string("refinement-failed: ") + e.what());
      failed[t] = 1;
    }
  });
  rep.failed = static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1));
  rep.processed = todo.size() - rep.failed;
  return rep;
}

inline StageReport categorize_records(std::vector<FeatureRecord>& records, const RoleSetup& role,
                                      std::size_t threads = 1) {
  StageReport rep;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].refined_label && !records[i].category)
      todo.push_back(i);
    else
      ++rep.skipped;
  }
  std::vector<std::uint8_t> failed(todo.size(), 0);
  parallel_for(todo.size(), threads, [&](std::size_t t) {
    auto& r = records[todo[t]];
    try {
      r.category = categorize(*r.refined_label, role, r.feature_index);
    } catch (const CategorizationFailed& e) {
      r.errors.push_back(std::string("categorization-failed: ") + e.what());
      failed[t] = 1;
    }
  });
  rep.failed = static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1));
  rep.processed = todo.size() - rep.failed;
  return rep;
}

inline StageReport consistency_records(std::vector<FeatureRecord>& records, const ImageLoader& load,
                                       const Grid& grid, const RoleSetup& role, std::size_t n_samples,
                                       std::size_t threads = 1) {
  StageReport rep;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].has_pattern() && !records[i].scores.consistency)
      todo.push_back(i);
    else
      ++rep.skipped;
  }
  std::vector<std::uint8_t> failed(todo.size(), 0);
  parallel_for(todo.size(), threads, [&](std::size_t t) {
    auto& r = records[todo[t]];
    try {
      r.scores.consistency =
          consistency_judge(*r.explanation, masked_evidence(r, load, grid), role, n_samples, r.feature_index).score;
    } catch (const JudgeFailed& e) {
      r.errors.push_back(std::string("judge-failed: ") + e.what());
      failed[t] = 1;
    }
  });
  rep.failed = static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1));
  rep.processed = todo.size() - rep.failed;
  return rep;
}

}  // namespace msae
