#pragma once

// Scoring explanations: IoU of activation masks against grounded masks,
// embedding similarity, random-image baselines, per-concept aggregation.

#include <httplib.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "msae/activation_store.hpp"
#include "msae/binary_io.hpp"
#include "msae/chat.hpp"
#include "msae/interpret.hpp"
#include "msae/mask.hpp"

namespace msae {

// ---- sources ---------------------------------------------------------------------------

// Detections for a label on an image; nullopt when grounding is unavailable.
class GroundingSource {
 public:
  virtual ~GroundingSource() = default;
  virtual std::optional<std::vector<Mask>> detections(const std::string& image_id, const std::string& label) = 0;
};

class EmbeddingSource {
 public:
  virtual ~EmbeddingSource() = default;
  virtual std::optional<std::vector<float>> text(const std::string& label) = 0;
  virtual std::optional<std::vector<float>> image(const std::string& image_id) = 0;
};

// Lowercase, runs of non-alphanumerics collapsed to '_'.
inline std::string label_slug(const std::string& label) {
  std::string out;
  for (char c : label) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    else if (!out.empty() && out.back() != '_')
      out.push_back('_');
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

// <dir>/<label_slug>/<image_id>.{msk,pgm} plus any <image_id>.<n>.{msk,pgm};
// every file found is one detection.
class FileGroundingSource : public GroundingSource {
 public:
  explicit FileGroundingSource(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::optional<std::vector<Mask>> detections(const std::string& image_id, const std::string& label) override {
    const auto sub = dir_ / label_slug(label);
    if (!std::filesystem::is_directory(sub)) return std::nullopt;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(sub)) {
      const auto ext = e.path().extension();
      if (ext != ".msk" && ext != ".pgm") continue;
      const std::string stem = e.path().stem().string();
      if (stem == image_id || (stem.rfind(image_id + ".", 0) == 0 &&
                               stem.find_first_not_of("0123456789", image_id.size() + 1) == std::string::npos))
        files.push_back(e.path());
    }
    if (files.empty()) return std::nullopt;
    std::sort(files.begin(), files.end());
    std::vector<Mask> out;
    for (const auto& f : files) out.push_back(read_mask(f));
    return out;
  }

  static std::filesystem::path path_for(const std::filesystem::path& dir, const std::string& label,
                                        const std::string& image_id, int n = -1) {
    return dir / label_slug(label) / (image_id + (n >= 0 ? "." + std::to_string(n) : "") + ".msk");
  }

 private:
  std::filesystem::path dir_;
};

// "SAEEMB1\0", u32 version, u32 dim, u64 count, then per record:
// u8 kind (0 text, 1 image), u32 key length, key bytes, dim x f32.
inline constexpr char kEmbeddingMagic[8] = {'S', 'A', 'E', 'E', 'M', 'B', '1', '\0'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;

struct EmbeddingTable {
  std::uint32_t dim = 0;
  std::map<std::string, std::vector<float>> texts;
  std::map<std::string, std::vector<float>> images;
};

inline void write_embeddings(const EmbeddingTable& t, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(std::string_view(kEmbeddingMagic, 8));
  w.put(kEmbeddingVersion);
  w.put(t.dim);
  w.put(static_cast<std::uint64_t>(t.texts.size() + t.images.size()));
  auto put = [&](std::uint8_t kind, const std::string& key, const std::vector<float>& v) {
    require(v.size() == t.dim, "write_embeddings: vector for " + key + " has wrong dimension");
    w.put(kind);
    w.put(static_cast<std::uint32_t>(key.size()));
    w.put_bytes(key);
    w.put_all(std::span<const float>(v));
  };
  for (const auto& [k, v] : t.texts) put(0, k, v);
  for (const auto& [k, v] : t.images) put(1, k, v);
  w.write_file(path);
}

inline EmbeddingTable read_embeddings(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  r.expect_magic(std::string_view(kEmbeddingMagic, 8));
  r.expect_version(kEmbeddingVersion);
  EmbeddingTable t;
  t.dim = r.get<std::uint32_t>();
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto kind = r.get<std::uint8_t>();
    if (kind > 1) throw FormatError(path.string() + ": bad embedding kind " + std::to_string(kind), r.offset() - 1);
    const auto key = r.get_string(r.get<std::uint32_t>());
    std::vector<float> v(t.dim);
    r.get_all(std::span<float>(v));
    (kind == 0 ? t.texts : t.images)[key] = std::move(v);
  }
  if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes", r.offset());
  return t;
}

class FileEmbeddingSource : public EmbeddingSource {
 public:
  explicit FileEmbeddingSource(EmbeddingTable t) : t_(std::move(t)) {}
  explicit FileEmbeddingSource(const std::filesystem::path& path) : t_(read_embeddings(path)) {}

  std::optional<std::vector<float>> text(const std::string& label) override { return find(t_.texts, label); }
  std::optional<std::vector<float>> image(const std::string& image_id) override { return find(t_.images, image_id); }

 private:
  static std::optional<std::vector<float>> find(const std::map<std::string, std::vector<float>>& m,
                                                const std::string& k) {
    const auto it = m.find(k);
    if (it == m.end()) return std::nullopt;
    return it->second;
  }
  EmbeddingTable t_;
};

// POST <endpoint>/ground {"label", "image_id", "image": data URL}
//   -> {"masks": [{"width", "height", "bits": base64 of MSB-first packed bits}]}
// 404 means no grounding for that image.
class HttpGroundingSource : public GroundingSource {
 public:
  HttpGroundingSource(std::string endpoint, ImageLoader load, double timeout_s = 60.0)
      : url_(parse_url(endpoint)), endpoint_(std::move(endpoint)), load_(std::move(load)), timeout_s_(timeout_s) {}

  std::optional<std::vector<Mask>> detections(const std::string& image_id, const std::string& label) override {
    const nlohmann::json body{{"label", label}, {"image_id", image_id}, {"image", png_data_url(load_(image_id))}};
    const auto j = post_json(url_, endpoint_, "/ground", body, timeout_s_);
    if (!j) return std::nullopt;
    std::vector<Mask> out;
    try {
      for (const auto& m : j->at("masks")) {
        Mask mask(m.at("width").get<std::uint32_t>(), m.at("height").get<std::uint32_t>());
        const auto packed = base64_decode(m.at("bits").get<std::string>());
        if (packed.size() != (mask.bits.size() + 7) / 8) throw ParseError("grounding mask has wrong byte count");
        for (std::size_t i = 0; i < mask.bits.size(); ++i) mask.bits[i] = (packed[i / 8] >> (7 - i % 8)) & 1u;
        out.push_back(std::move(mask));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed grounding response: ") + e.what());
    }
    if (out.empty()) return std::nullopt;
    return out;
  }

  static std::optional<nlohmann::json> post_json(const ParsedUrl& url, const std::string& endpoint,
                                                 const std::string& route, const nlohmann::json& body,
                                                 double timeout_s) {
    httplib::Client cli(url.scheme_host_port);
    const auto t = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(timeout_s));
    cli.set_connection_timeout(t);
    cli.set_read_timeout(t);
    auto res = cli.Post(url.path + route, body.dump(), "application/json");
    if (!res) throw ClientError(endpoint + route + ": transport error: " + httplib::to_string(res.error()));
    if (res->status == 404) return std::nullopt;
    if (res->status != 200) throw ClientError(endpoint + route + ": HTTP " + std::to_string(res->status));
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(endpoint + route + ": malformed response: " + e.what());
    }
  }

 private:
  ParsedUrl url_;
  std::string endpoint_;
  ImageLoader load_;
  double timeout_s_;
};

// POST <endpoint>/embed {"text": ...} or {"image_id", "image": data URL}
//   -> {"embedding": [...]}; 404 means unavailable.
class HttpEmbeddingSource : public EmbeddingSource {
 public:
  HttpEmbeddingSource(std::string endpoint, ImageLoader load, double timeout_s = 60.0)
      : url_(parse_url(endpoint)), endpoint_(std::move(endpoint)), load_(std::move(load)), timeout_s_(timeout_s) {}

  std::optional<std::vector<float>> text(const std::string& label) override {
    return embed({{"text", label}});
  }
  std::optional<std::vector<float>> image(const std::string& image_id) override {
    return embed({{"image_id", image_id}, {"image", png_data_url(load_(image_id))}});
  }

 private:
  std::optional<std::vector<float>> embed(const nlohmann::json& body) {
    const auto j = HttpGroundingSource::post_json(url_, endpoint_, "/embed", body, timeout_s_);
    if (!j) return std::nullopt;
    try {
      return j->at("embedding").get<std::vector<float>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed embedding response: ") + e.what());
    }
  }
  ParsedUrl url_;
  std::string endpoint_;
  ImageLoader load_;
  double timeout_s_;
};

// ---- metrics ------------------------------------------------------------------------------

// Mean over the record's images of IoU(composite grounded mask, upsampled
// activation mask). Images without grounding are skipped.
inline double feature_iou(const FeatureRecord& r, GroundingSource& grounding) {
  require(r.refined_label.has_value(), "feature_iou: record " + std::to_string(r.feature_index) + " is not refined");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < r.top_images.size(); ++i) {
    const auto det = grounding.detections(r.top_images[i].image_id, *r.refined_label);
    if (!det || det->empty()) continue;
    const Mask truth = composite_mask(*det);
    sum += iou(truth, upsample(r.masks[i], truth.width, truth.height));
    ++n;
  }
  if (n == 0) throw ScoreUnavailable("feature " + std::to_string(r.feature_index) + ": no grounding for any image");
  return sum / static_cast<double>(n);
}

inline constexpr double kClipScale = 100.0;

// Mean over images of 100 * cosine(text embedding, image embedding).
inline double clip_score(const std::string& label, const std::vector<std::string>& image_ids, EmbeddingSource& emb) {
  const auto t = emb.text(label);
  if (!t) throw ScoreUnavailable("no text embedding for \"" + label + "\"");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& id : image_ids) {
    const auto v = emb.image(id);
    if (!v) continue;
    require(v->size() == t->size(), "clip_score: embedding dimensions differ for " + id);
    sum += kClipScale * cosine(std::span<const float>(*t), std::span<const float>(*v));
    ++n;
  }
  if (n == 0) throw ScoreUnavailable("no image embeddings for \"" + label + "\"");
  return sum / static_cast<double>(n);
}

inline std::vector<std::string> image_ids_of(const FeatureRecord& r) {
  std::vector<std::string> ids;
  for (const auto& t : r.top_images) ids.push_back(t.image_id);
  return ids;
}

struct MeanCi {
  double mean = 0.0;
  double ci99 = 0.0;  // half-width, normal approximation
  std::size_t n = 0;
};

inline constexpr double kZ99 = 2.576;

// Sample mean and z * s / sqrt(n) with the n-1 sample deviation.
inline MeanCi mean_ci99(const std::vector<double>& v) {
  MeanCi out;
  out.n = v.size();
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  if (v.size() < 2 || std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); })) {
    if (v.size() >= 2) out.mean = v.front();
    return out;
  }
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  out.ci99 = kZ99 * sd / std::sqrt(static_cast<double>(v.size()));
  return out;
}

struct BaselineResult {
  MeanCi stats;
  std::vector<double> values;  // one per run that produced a value
};

// Each run draws from a shared generator seeded once; runs whose metric is
// unavailable are dropped.
inline BaselineResult random_baseline(const std::function<std::optional<double>(Rng&)>& metric, std::size_t n_runs,
                                      std::uint64_t seed) {
  require(n_runs >= 2, "random_baseline: n_runs must be >= 2");
  Rng rng(seed);
  BaselineResult out;
  for (std::size_t r = 0; r < n_runs; ++r)
    if (auto v = metric(rng)) out.values.push_back(*v);
  out.stats = mean_ci99(out.values);
  return out;
}

// The record with its top images replaced by n uniformly drawn cache images;
// heatmaps and masks recomputed from the cache for the same feature.
inline FeatureRecord with_random_images(const FeatureRecord& r, const SparseFeatureCache& cache, Rng& rng,
                                        std::size_t n = 5) {
  FeatureRecord out = r;
  out.top_images.clear();
  out.heatmaps.clear();
  out.masks.clear();
  const auto means = mean_activation(cache, r.feature_index);
  for (std::size_t idx : rng.sample_without_replacement(cache.n_images(), std::min(n, cache.n_images()))) {
    const auto& id = cache.image_ids[idx];
    out.top_images.push_back({id, means[idx]});
    out.heatmaps.push_back(token_heatmap(cache, id, r.feature_index));
    out.masks.push_back(binarize(out.heatmaps.back(), r.binarize));
  }
  return out;
}

// ---- record scoring -----------------------------------------------------------------------

struct EvaluateReport {
  std::size_t scored = 0;
  std::size_t unrefined = 0;      // skipped: no refined label
  std::size_t iou_unavailable = 0;
  std::size_t clip_unavailable = 0;
};

inline EvaluateReport evaluate_records(std::vector<FeatureRecord>& records, GroundingSource* grounding,
                                       EmbeddingSource* embeddings) {
  EvaluateReport rep;
  for (auto& r : records) {
    if (!r.refined_label) {
      ++rep.unrefined;
      continue;
    }
    ++rep.scored;
    if (grounding) {
      try {
        r.scores.iou = feature_iou(r, *grounding);
      } catch (const ScoreUnavailable& e) {
        r.scores.iou.reset();
        ++rep.iou_unavailable;
      }
    }
    if (embeddings) {
      try {
        r.scores.clip_score = clip_score(*r.refined_label, image_ids_of(r), *embeddings);
      } catch (const ScoreUnavailable& e) {
        r.scores.clip_score.reset();
        ++rep.clip_unavailable;
      }
    }
  }
  return rep;
}

// ---- aggregation --------------------------------------------------------------------------

struct ScoreRow {
  std::string concept_name;  // category, or "total"
  std::size_t n_features = 0;
  std::size_t iou_n = 0;
  double iou_mean = 0.0;
  std::size_t clip_n = 0;
  double clip_score_mean = 0.0;
  friend bool operator==(const ScoreRow&, const ScoreRow&) = default;
};

struct BaselineRow {
  std::string metric;  // "iou" | "clip_score"
  double mean = 0.0;
  double ci99 = 0.0;
  std::size_t n_runs = 0;
};

struct ScoreTable {
  std::vector<ScoreRow> rows;  // categories in canonical order, only those present
  ScoreRow total{"total"};
  std::vector<BaselineRow> baselines;
};

// Scored records are those with a refined label; per-category rows need a
// category too. Unavailable scores are excluded metric by metric.
inline ScoreTable aggregate(const std::vector<FeatureRecord>& records) {
  ScoreTable t;
  std::map<std::string, ScoreRow> by;
  auto add = [](ScoreRow& row, const FeatureRecord& r) {
    ++row.n_features;
    if (r.scores.iou) ++row.iou_n, row.iou_mean += *r.scores.iou;
    if (r.scores.clip_score) ++row.clip_n, row.clip_score_mean += *r.scores.clip_score;
  };
  for (const auto& r : records) {
    if (!r.refined_label) continue;
    add(t.total, r);
    if (r.category) {
      auto& row = by[*r.category];
      row.concept_name = *r.category;
      add(row, r);
    }
  }
  auto finish = [](ScoreRow& row) {
    if (row.iou_n) row.iou_mean /= static_cast<double>(row.iou_n);
    if (row.clip_n) row.clip_score_mean /= static_cast<double>(row.clip_n);
  };
  finish(t.total);
  for (const auto& c : concept_categories())
    if (auto it = by.find(c); it != by.end()) {
      finish(it->second);
      t.rows.push_back(it->second);
    }
  return t;
}

inline std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// Tab-separated, one row per concept then total then baselines.
inline std::string table_tsv(const ScoreTable& t) {
  std::string out = "# clip_score = 100 * cosine(text, image)\n";
  out += "row\tn_features\tiou_n\tiou_mean\tclip_n\tclip_score_mean\n";
  auto line = [&](const ScoreRow& r) {
    out += r.concept_name + "\t" + std::to_string(r.n_features) + "\t" + std::to_string(r.iou_n) + "\t" +
           fmt(r.iou_mean) + "\t" + std::to_string(r.clip_n) + "\t" + fmt(r.clip_score_mean, 2) + "\n";
  };
  for (const auto& r : t.rows) line(r);
  line(t.total);
  if (!t.baselines.empty()) {
    out += "baseline\tmetric\tn_runs\tmean\tci99\n";
    for (const auto& b : t.baselines)
      out += "random\t" + b.metric + "\t" + std::to_string(b.n_runs) + "\t" + fmt(b.mean, 6) + "\t" + fmt(b.ci99, 6) + "\n";
  }
  return out;
}

inline nlohmann::json table_json(const ScoreTable& t) {
  auto row = [](const ScoreRow& r) {
    return nlohmann::json{{"concept", r.concept_name}, {"n_features", r.n_features}, {"iou_n", r.iou_n},
                          {"iou_mean", r.iou_mean}, {"clip_n", r.clip_n}, {"clip_score_mean", r.clip_score_mean}};
  };
  nlohmann::json rows = nlohmann::json::array(), base = nlohmann::json::array();
  for (const auto& r : t.rows) rows.push_back(row(r));
  for (const auto& b : t.baselines)
    base.push_back({{"metric", b.metric}, {"mean", b.mean}, {"ci99", b.ci99}, {"n_runs", b.n_runs}});
  return {{"schema_version", 1}, {"clip_score_scale", "100*cosine"}, {"ci", "normal approximation, z=2.576"},
          {"rows", rows}, {"total", row(t.total)}, {"baselines", base}};
}

// Random-image baseline for the table: each run swaps every scored record's
// top images for random ones and averages the metric over records.
inline BaselineRow table_baseline(const std::string& metric, const std::vector<FeatureRecord>& records,
                                  const SparseFeatureCache& cache, GroundingSource* grounding,
                                  EmbeddingSource* embeddings, std::size_t n_runs, std::uint64_t seed,
                                  std::size_t n_images = 5) {
  require(metric == "iou" || metric == "clip_score", "table_baseline: unknown metric " + metric);
  auto run = [&](Rng& rng) -> std::optional<double> {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : records) {
      if (!r.refined_label) continue;
      const auto rr = with_random_images(r, cache, rng, n_images);
      try {
        sum += metric == "iou" ? feature_iou(rr, *grounding) : clip_score(*rr.refined_label, image_ids_of(rr), *embeddings);
        ++n;
      } catch (const ScoreUnavailable&) {
      }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  };
  require(metric == "iou" ? grounding != nullptr : embeddings != nullptr, "table_baseline: missing source for " + metric);
  const auto b = random_baseline(run, n_runs, seed);
  return {metric, b.stats.mean, b.stats.ci99, b.stats.n};
}

}  // namespace msae
