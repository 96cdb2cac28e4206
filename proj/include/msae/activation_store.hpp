#pragma once

// Dense activation shards, TopK sparse feature caches, and the queries the
// interpretation pipeline runs against them (mean activation, top images,
// per-token heatmaps).

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/binary_io.hpp"
#include "msae/error.hpp"
#include "msae/sae.hpp"
#include "msae/tensor.hpp"

namespace msae {

struct Grid {
  std::uint16_t rows = 1;
  std::uint16_t cols = 1;
  std::size_t tokens() const noexcept { return std::size_t{rows} * cols; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

// Dense activations for a batch of images: [n_images x T x d_l], T = rows*cols.
struct ActivationShard {
  std::vector<std::string> image_ids;
  Grid grid;
  std::uint32_t d_l = 0;
  std::vector<float> data;

  ActivationShard() = default;
  ActivationShard(Grid g, std::uint32_t dl) : grid(g), d_l(dl) {}

  std::size_t n_images() const noexcept { return image_ids.size(); }
  std::size_t tokens_per_image() const noexcept { return grid.tokens(); }
  std::size_t n_tokens() const noexcept { return n_images() * tokens_per_image(); }

  std::span<const float> token(std::size_t image, std::size_t t) const {
    return {data.data() + (image * tokens_per_image() + t) * d_l, d_l};
  }
  // Flat token index across images.
  std::span<const float> token(std::size_t flat) const { return {data.data() + flat * d_l, d_l}; }

  void append(std::string id, std::span<const float> image_tokens) {
    require(image_tokens.size() == tokens_per_image() * d_l,
            "append: expected " + std::to_string(tokens_per_image() * d_l) + " floats for image " + id);
    image_ids.push_back(std::move(id));
    data.insert(data.end(), image_tokens.begin(), image_tokens.end());
  }

  void validate() const {
    require(grid.rows > 0 && grid.cols > 0, "shard grid must be nonempty");
    require(data.size() == n_tokens() * d_l, "shard data size does not match header");
    require(all_finite<float>(data), "shard data must be finite");
  }

  friend bool operator==(const ActivationShard&, const ActivationShard&) = default;
};

namespace detail {

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline void write_id_table(io::ByteWriter& w, const std::vector<std::string>& ids) {
  for (const auto& id : ids) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(id.size()));
    w.put_bytes(id);
  }
}

inline std::vector<std::string> read_id_table(io::ByteReader& r, std::uint64_t n) {
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(n));
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto len = r.get<std::uint32_t>();
    ids.push_back(r.get_string(len));
  }
  if (r.remaining() != 0) throw FormatError(r.source() + ": trailing bytes after id table", r.offset());
  return ids;
}

// Header CRC: covers every header byte before the checksum field.
inline void check_header_crc(io::ByteReader& r, std::span<const std::uint8_t> bytes, std::size_t header_len) {
  const auto at = r.offset();
  const auto stored = r.get<std::uint32_t>();
  if (stored != crc32_of(bytes.first(header_len)))
    throw FormatError(r.source() + ": header checksum mismatch", at);
}

}  // namespace detail

inline constexpr char kShardMagic[8] = {'S', 'A', 'E', 'A', 'C', 'T', '1', '\0'};
inline constexpr std::uint32_t kShardVersion = 1;
// magic, version, n_images, T, d_l, rows, cols, id_offset, header_crc
inline constexpr std::size_t kShardHeaderLen = 8 + 4 + 8 + 4 + 4 + 2 + 2 + 8;

inline std::vector<std::uint8_t> serialize_shard(const ActivationShard& s) {
  s.validate();
  io::ByteWriter w;
  w.put_bytes(std::string_view(kShardMagic, 8));
  w.put<std::uint32_t>(kShardVersion);
  w.put<std::uint64_t>(s.n_images());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.tokens_per_image()));
  w.put<std::uint32_t>(s.d_l);
  w.put<std::uint16_t>(s.grid.rows);
  w.put<std::uint16_t>(s.grid.cols);
  w.put<std::uint64_t>(kShardHeaderLen + 4 + 4ull * s.data.size());
  w.put<std::uint32_t>(detail::crc32_of(w.buffer()));
  w.put_all<float>(s.data);
  detail::write_id_table(w, s.image_ids);
  return std::move(w.buffer());
}

inline ActivationShard parse_shard(std::span<const std::uint8_t> bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  r.expect_magic(std::string_view(kShardMagic, 8));
  r.expect_version(kShardVersion);
  const auto n = r.get<std::uint64_t>();
  const auto T = r.get<std::uint32_t>();
  const auto dl = r.get<std::uint32_t>();
  ActivationShard s;
  s.grid.rows = r.get<std::uint16_t>();
  s.grid.cols = r.get<std::uint16_t>();
  const auto id_off = r.get<std::uint64_t>();
  detail::check_header_crc(r, bytes, kShardHeaderLen);
  if (T != s.grid.tokens() || T == 0)
    throw FormatError(source + ": T=" + std::to_string(T) + " does not equal rows*cols", 20);
  const std::uint64_t expected_off = kShardHeaderLen + 4 + 4ull * n * T * dl;
  if (id_off != expected_off)
    throw FormatError(source + ": id table offset " + std::to_string(id_off) + " != expected " +
                          std::to_string(expected_off),
                      32);
  if (bytes.size() < id_off)
    throw FormatError(source + ": truncated, expected at least " + std::to_string(id_off) +
                          " bytes, found " + std::to_string(bytes.size()),
                      bytes.size());
  s.d_l = dl;
  s.data.resize(static_cast<std::size_t>(n * T * dl));
  r.get_all<float>(s.data);
  s.image_ids = detail::read_id_table(r, n);
  if (!all_finite<float>(s.data)) throw FormatError(source + ": non-finite activation values", kShardHeaderLen + 4);
  return s;
}

inline void write_shard(const ActivationShard& s, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(serialize_shard(s)));
  w.write_file(path);
}

inline ActivationShard read_shard(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_shard(bytes, path.string());
}

// ---- sparse feature cache --------------------------------------------------

// Per-token TopK (index, value) pairs. Records are fixed width (k slots, an
// explicit count, unused slots zero) so token (i, t) is at a known offset.
struct SparseFeatureCache {
  std::uint32_t T = 0;
  std::uint32_t d_s = 0;
  std::uint32_t k = 0;
  Grid grid;
  std::vector<std::string> image_ids;
  std::vector<std::uint16_t> counts;   // [n_images * T]
  std::vector<std::uint32_t> indices;  // [n_images * T * k]
  std::vector<float> values;           // [n_images * T * k]

  std::size_t n_images() const noexcept { return image_ids.size(); }
  std::size_t n_tokens() const noexcept { return counts.size(); }

  struct TokenView {
    std::span<const std::uint32_t> indices;
    std::span<const float> values;
  };

  TokenView token(std::size_t image, std::size_t t) const {
    const std::size_t flat = image * T + t;
    const std::size_t base = flat * k;
    return {{indices.data() + base, counts[flat]}, {values.data() + base, counts[flat]}};
  }

  void push_token(std::span<const std::uint32_t> idx, std::span<const float> val) {
    require(idx.size() <= k && idx.size() == val.size(), "cache token record exceeds k");
    counts.push_back(static_cast<std::uint16_t>(idx.size()));
    const std::size_t base = indices.size();
    indices.resize(base + k, 0u);
    values.resize(base + k, 0.0f);
    std::copy(idx.begin(), idx.end(), indices.begin() + static_cast<std::ptrdiff_t>(base));
    std::copy(val.begin(), val.end(), values.begin() + static_cast<std::ptrdiff_t>(base));
  }

  std::size_t image_index(const std::string& id) const {
    if (lookup_.size() != image_ids.size()) {
      lookup_.clear();
      for (std::size_t i = 0; i < image_ids.size(); ++i) lookup_.emplace(image_ids[i], i);
    }
    const auto it = lookup_.find(id);
    if (it == lookup_.end()) throw NotFound("image not in cache: " + id);
    return it->second;
  }

  bool contains(const std::string& id) const {
    try {
      image_index(id);
      return true;
    } catch (const NotFound&) {
      return false;
    }
  }

  friend bool operator==(const SparseFeatureCache& a, const SparseFeatureCache& b) {
    return a.T == b.T && a.d_s == b.d_s && a.k == b.k && a.grid == b.grid && a.image_ids == b.image_ids &&
           a.counts == b.counts && a.indices == b.indices && a.values == b.values;
  }

 private:
  mutable std::unordered_map<std::string, std::size_t> lookup_;
};

// Encode every token of every shard and keep the active pairs.
inline SparseFeatureCache build_sparse_cache(std::span<const ActivationShard> shards, const SaeParams& params) {
  params.validate();
  SparseFeatureCache cache;
  cache.d_s = static_cast<std::uint32_t>(params.d_s());
  cache.k = params.k;
  if (!shards.empty()) {
    cache.grid = shards.front().grid;
    cache.T = static_cast<std::uint32_t>(cache.grid.tokens());
  }
  for (const auto& shard : shards) {
    if (shard.d_l != params.d_l())
      throw InvalidArgument("build_sparse_cache: shard d_l " + std::to_string(shard.d_l) +
                            " != params d_l " + std::to_string(params.d_l()));
    require(shard.grid == cache.grid, "build_sparse_cache: shards disagree on token grid");
    for (std::size_t i = 0; i < shard.n_images(); ++i) {
      cache.image_ids.push_back(shard.image_ids[i]);
      for (std::size_t t = 0; t < shard.tokens_per_image(); ++t) {
        const auto state = encode(shard.token(i, t), params);
        cache.push_token(state.active, state.z_sparse);
      }
    }
  }
  return cache;
}

inline SparseFeatureCache build_sparse_cache(const std::vector<ActivationShard>& shards, const SaeParams& params) {
  return build_sparse_cache(std::span<const ActivationShard>(shards), params);
}

// Dense [d_s] latent for one token.
inline std::vector<float> densify_token(const SparseFeatureCache& cache, std::size_t image, std::size_t t) {
  std::vector<float> out(cache.d_s, 0.0f);
  const auto tv = cache.token(image, t);
  for (std::size_t a = 0; a < tv.indices.size(); ++a) out[tv.indices[a]] = tv.values[a];
  return out;
}

inline constexpr char kCacheMagic[8] = {'S', 'A', 'E', 'S', 'P', 'C', '1', '\0'};
inline constexpr std::uint32_t kCacheVersion = 1;
// magic, version, n_images, T, d_s, k, rows, cols, id_offset, header_crc
inline constexpr std::size_t kCacheHeaderLen = 8 + 4 + 8 + 4 + 4 + 4 + 2 + 2 + 8;

inline std::vector<std::uint8_t> serialize_cache(const SparseFeatureCache& c) {
  io::ByteWriter w;
  w.put_bytes(std::string_view(kCacheMagic, 8));
  w.put<std::uint32_t>(kCacheVersion);
  w.put<std::uint64_t>(c.n_images());
  w.put<std::uint32_t>(c.T);
  w.put<std::uint32_t>(c.d_s);
  w.put<std::uint32_t>(c.k);
  w.put<std::uint16_t>(c.grid.rows);
  w.put<std::uint16_t>(c.grid.cols);
  const std::uint64_t record = 2ull + 8ull * c.k;
  w.put<std::uint64_t>(kCacheHeaderLen + 4 + record * c.n_tokens());
  w.put<std::uint32_t>(detail::crc32_of(w.buffer()));
  for (std::size_t flat = 0; flat < c.n_tokens(); ++flat) {
    w.put<std::uint16_t>(c.counts[flat]);
    for (std::size_t s = 0; s < c.k; ++s) {
      w.put<std::uint32_t>(c.indices[flat * c.k + s]);
      w.put<float>(c.values[flat * c.k + s]);
    }
  }
  detail::write_id_table(w, c.image_ids);
  return std::move(w.buffer());
}

inline SparseFeatureCache parse_cache(std::span<const std::uint8_t> bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  r.expect_magic(std::string_view(kCacheMagic, 8));
  r.expect_version(kCacheVersion);
  SparseFeatureCache c;
  const auto n = r.get<std::uint64_t>();
  c.T = r.get<std::uint32_t>();
  c.d_s = r.get<std::uint32_t>();
  c.k = r.get<std::uint32_t>();
  c.grid.rows = r.get<std::uint16_t>();
  c.grid.cols = r.get<std::uint16_t>();
  const auto id_off = r.get<std::uint64_t>();
  detail::check_header_crc(r, bytes, kCacheHeaderLen);
  if (c.T != c.grid.tokens()) throw FormatError(source + ": T does not equal rows*cols", 20);
  if (c.k == 0 || c.k > c.d_s) throw FormatError(source + ": invalid k/d_s", 28);
  const std::uint64_t record = 2ull + 8ull * c.k;
  const std::uint64_t expected_off = kCacheHeaderLen + 4 + record * n * c.T;
  if (id_off != expected_off)
    throw FormatError(source + ": id table offset mismatch", 36);
  if (bytes.size() < id_off)
    throw FormatError(source + ": truncated, expected at least " + std::to_string(id_off) + " bytes, found " +
                          std::to_string(bytes.size()),
                      bytes.size());
  const std::size_t n_tok = static_cast<std::size_t>(n * c.T);
  c.counts.resize(n_tok);
  c.indices.resize(n_tok * c.k);
  c.values.resize(n_tok * c.k);
  for (std::size_t flat = 0; flat < n_tok; ++flat) {
    const auto at = r.offset();
    c.counts[flat] = r.get<std::uint16_t>();
    if (c.counts[flat] > c.k) throw FormatError(source + ": token record count exceeds k", at);
    for (std::size_t s = 0; s < c.k; ++s) {
      c.indices[flat * c.k + s] = r.get<std::uint32_t>();
      c.values[flat * c.k + s] = r.get<float>();
    }
    for (std::size_t s = 0; s < c.counts[flat]; ++s) {
      const auto idx = c.indices[flat * c.k + s];
      if (idx >= c.d_s || (s > 0 && idx <= c.indices[flat * c.k + s - 1]))
        throw FormatError(source + ": token record indices not strictly increasing in [0, d_s)", at);
    }
  }
  c.image_ids = detail::read_id_table(r, n);
  return c;
}

inline void write_cache(const SparseFeatureCache& c, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(serialize_cache(c)));
  w.write_file(path);
}

inline SparseFeatureCache read_cache(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_cache(bytes, path.string());
}

// ---- queries ----------------------------------------------------------------

// Mean of feature j over each image's T tokens (absent tokens count as 0).
inline std::vector<double> mean_activation(const SparseFeatureCache& cache, std::uint32_t j) {
  require(j < cache.d_s, "mean_activation: feature out of range");
  std::vector<double> means(cache.n_images(), 0.0);
  for (std::size_t i = 0; i < cache.n_images(); ++i) {
    double acc = 0.0;
    for (std::size_t t = 0; t < cache.T; ++t) {
      const auto tv = cache.token(i, t);
      const auto it = std::lower_bound(tv.indices.begin(), tv.indices.end(), j);
      if (it != tv.indices.end() && *it == j) acc += tv.values[static_cast<std::size_t>(it - tv.indices.begin())];
    }
    means[i] = acc / static_cast<double>(cache.T);
  }
  return means;
}

struct RankedImage {
  std::string image_id;
  double mean = 0.0;
  friend bool operator==(const RankedImage&, const RankedImage&) = default;
};

struct FeatureActivationSummary {
  std::uint32_t feature_index = 0;
  std::vector<double> mean_activation;  // per image, cache order
  std::vector<RankedImage> top_images;  // descending mean, then id
};

inline bool ranks_before(const RankedImage& a, const RankedImage& b) {
  return a.mean > b.mean || (a.mean == b.mean && a.image_id < b.image_id);
}

// Images ranked by mean activation; zero-mean images never appear.
inline FeatureActivationSummary top_images(const SparseFeatureCache& cache, std::uint32_t j, std::size_t n = 5) {
  require(n >= 1, "top_images: n must be >= 1");
  FeatureActivationSummary out;
  out.feature_index = j;
  out.mean_activation = mean_activation(cache, j);
  std::vector<RankedImage> ranked;
  for (std::size_t i = 0; i < cache.n_images(); ++i)
    if (out.mean_activation[i] > 0.0) ranked.push_back({cache.image_ids[i], out.mean_activation[i]});
  const std::size_t take = std::min(n, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take), ranked.end(), ranks_before);
  ranked.resize(take);
  out.top_images = std::move(ranked);
  return out;
}

// Per-image means for every feature in one pass: result[j] lists
// (image index, mean) for images where feature j is nonzero.
inline std::vector<std::vector<std::pair<std::uint32_t, double>>> all_feature_means(const SparseFeatureCache& cache) {
  std::vector<std::vector<std::pair<std::uint32_t, double>>> out(cache.d_s);
  std::map<std::uint32_t, double> acc;
  for (std::size_t i = 0; i < cache.n_images(); ++i) {
    acc.clear();
    for (std::size_t t = 0; t < cache.T; ++t) {
      const auto tv = cache.token(i, t);
      for (std::size_t a = 0; a < tv.indices.size(); ++a) acc[tv.indices[a]] += tv.values[a];
    }
    for (const auto& [j, sum] : acc)
      if (sum > 0.0) out[j].emplace_back(static_cast<std::uint32_t>(i), sum / static_cast<double>(cache.T));
  }
  return out;
}

// Feature j's per-token values for one image, laid out on the token grid
// (token t -> row t / cols, column t % cols).
inline Matrix<float> token_heatmap(const SparseFeatureCache& cache, const std::string& image_id, std::uint32_t j) {
  require(j < cache.d_s, "token_heatmap: feature out of range");
  const std::size_t i = cache.image_index(image_id);
  Matrix<float> grid(cache.grid.rows, cache.grid.cols, 0.0f);
  for (std::size_t t = 0; t < cache.T; ++t) {
    const auto tv = cache.token(i, t);
    const auto it = std::lower_bound(tv.indices.begin(), tv.indices.end(), j);
    if (it != tv.indices.end() && *it == j)
      grid(t / cache.grid.cols, t % cache.grid.cols) = tv.values[static_cast<std::size_t>(it - tv.indices.begin())];
  }
  return grid;
}

// ---- image manifest -------------------------------------------------------------

// Line-delimited {"image_id": ..., "path": ...}; paths relative to the
// manifest's directory unless absolute.
struct ManifestEntry {
  std::string image_id;
  std::string path;
};

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::string text;
  for (const auto& e : entries) text += nlohmann::json{{"image_id", e.image_id}, {"path", e.path}}.dump() + "\n";
  io::write_text(path, text);
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open manifest: " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("image_id").get<std::string>(), j.at("path").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::filesystem::path resolve_manifest_path(const std::filesystem::path& manifest, const std::string& p) {
  const std::filesystem::path rel(p);
  return rel.is_absolute() ? rel : manifest.parent_path() / rel;
}

}  // namespace msae
