#pragma once

// Binary masks: token-grid activation masks, pixel-resolution grounding
// masks, set algebra, IoU, and the two on-disk mask formats.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "msae/activation_store.hpp"
#include "msae/binary_io.hpp"
#include "msae/error.hpp"
#include "msae/tensor.hpp"

namespace msae {

struct Mask {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> bits;  // row-major, one byte per cell, 0 or 1

  Mask() = default;
  Mask(std::uint32_t w, std::uint32_t h, bool fill = false) : width(w), height(h), bits(std::size_t{w} * h, fill ? 1 : 0) {}

  bool at(std::uint32_t x, std::uint32_t y) const { return bits[std::size_t{y} * width + x] != 0; }
  void set(std::uint32_t x, std::uint32_t y, bool v = true) { bits[std::size_t{y} * width + x] = v ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool empty() const { return count() == 0; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

inline void require_same_dims(const Mask& a, const Mask& b, const char* what) {
  if (a.width != b.width || a.height != b.height)
    throw InvalidArgument(std::string(what) + ": mask dims differ (" + std::to_string(a.width) + "x" +
                          std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) + ")");
}

enum class ThresholdMode { relative, absolute, quantile };

inline std::string to_string(ThresholdMode m) {
  switch (m) {
    case ThresholdMode::relative: return "relative";
    case ThresholdMode::absolute: return "absolute";
    case ThresholdMode::quantile: return "quantile";
  }
  return "relative";
}

inline ThresholdMode threshold_mode_from(const std::string& s) {
  if (s == "relative") return ThresholdMode::relative;
  if (s == "absolute") return ThresholdMode::absolute;
  if (s == "quantile") return ThresholdMode::quantile;
  throw InvalidArgument("unknown threshold mode: " + s);
}

struct BinarizeOptions {
  ThresholdMode mode = ThresholdMode::relative;
  double value = 0.5;  // tau_rel, absolute threshold, or quantile q
};

// relative: v >= tau * max; absolute: v >= tau; quantile: v >= the q-th
// quantile of the cell values (nearest-rank). Zero cells never switch on.
inline Mask binarize(const Matrix<float>& heatmap, const BinarizeOptions& opt = {}) {
  require(all_finite(std::span<const float>(heatmap.data())), "binarize: heatmap must be finite");
  Mask m(static_cast<std::uint32_t>(heatmap.cols()), static_cast<std::uint32_t>(heatmap.rows()));
  const auto& v = heatmap.data();
  if (v.empty()) return m;
  const float mx = *std::max_element(v.begin(), v.end());
  if (mx <= 0.0f) return m;
  double thr = 0.0;
  switch (opt.mode) {
    case ThresholdMode::relative:
      require(opt.value > 0.0 && opt.value <= 1.0, "binarize: tau_rel must be in (0, 1]");
      thr = opt.value * mx;
      break;
    case ThresholdMode::absolute:
      thr = opt.value;
      break;
    case ThresholdMode::quantile: {
      require(opt.value >= 0.0 && opt.value <= 1.0, "binarize: quantile must be in [0, 1]");
      std::vector<float> s(v.begin(), v.end());
      std::sort(s.begin(), s.end());
      const auto rank = static_cast<std::size_t>(std::ceil(opt.value * static_cast<double>(s.size())));
      thr = s[rank == 0 ? 0 : rank - 1];
      break;
    }
  }
  for (std::size_t i = 0; i < v.size(); ++i) m.bits[i] = (v[i] > 0.0f && v[i] >= thr) ? 1 : 0;
  return m;
}

inline Mask binarize(const Matrix<float>& heatmap, double tau_rel) {
  return binarize(heatmap, BinarizeOptions{ThresholdMode::relative, tau_rel});
}

// Block replication: each grid cell becomes a (width/cols) x (height/rows) block.
inline Mask upsample(const Mask& grid_mask, std::uint32_t width, std::uint32_t height) {
  if (grid_mask.width == 0 || grid_mask.height == 0 || width % grid_mask.width != 0 || height % grid_mask.height != 0)
    throw InvalidArgument("upsample: " + std::to_string(width) + "x" + std::to_string(height) +
                          " is not divisible by grid " + std::to_string(grid_mask.width) + "x" +
                          std::to_string(grid_mask.height));
  const std::uint32_t bw = width / grid_mask.width, bh = height / grid_mask.height;
  Mask out(width, height);
  for (std::uint32_t y = 0; y < height; ++y)
    for (std::uint32_t x = 0; x < width; ++x) out.bits[std::size_t{y} * width + x] = grid_mask.at(x / bw, y / bh);
  return out;
}

// Empty union scores 0: a feature that never fires earns no credit.
inline double iou(const Mask& a, const Mask& b) {
  require_same_dims(a, b, "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] & b.bits[i];
    uni += a.bits[i] | b.bits[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline Mask composite_mask(const std::vector<Mask>& detections) {
  if (detections.empty()) return Mask();
  Mask out = detections.front();
  for (std::size_t d = 1; d < detections.size(); ++d) {
    require_same_dims(out, detections[d], "composite_mask");
    for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] |= detections[d].bits[i];
  }
  return out;
}

// ---- files ------------------------------------------------------------------------

// "SAEMSK1\0", u32 version, u32 width, u32 height, then ceil(w*h/8) bytes,
// row-major, most significant bit first.
inline constexpr char kMaskMagic[8] = {'S', 'A', 'E', 'M', 'S', 'K', '1', '\0'};
inline constexpr std::uint32_t kMaskVersion = 1;

inline std::vector<std::uint8_t> serialize_mask(const Mask& m) {
  io::ByteWriter w;
  w.put_bytes(std::string_view(kMaskMagic, 8));
  w.put(kMaskVersion);
  w.put(m.width);
  w.put(m.height);
  std::vector<std::uint8_t> packed((m.bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i]) packed[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
  w.put_bytes(std::span<const std::uint8_t>(packed));
  return std::move(w.buffer());
}

inline Mask parse_mask(std::span<const std::uint8_t> bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  r.expect_magic(std::string_view(kMaskMagic, 8));
  r.expect_version(kMaskVersion);
  const auto w = r.get<std::uint32_t>();
  const auto h = r.get<std::uint32_t>();
  Mask m(w, h);
  const std::size_t nbytes = (m.bits.size() + 7) / 8;
  if (r.remaining() != nbytes)
    throw FormatError(source + ": mask payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(nbytes), r.offset());
  for (std::size_t i = 0; i < m.bits.size(); ++i) {
    const std::size_t byte_index = i / 8;
    m.bits[i] = (bytes[r.offset() + byte_index] >> (7 - i % 8)) & 1u;
  }
  return m;
}

// Binary PGM (P5, maxval <= 255); pixels >= 128 are set.
inline Mask parse_pgm_mask(std::span<const std::uint8_t> bytes, const std::string& source) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P5") throw FormatError(source + ": not a binary PGM (P5)", 0);
  unsigned long w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError(source + ": malformed PGM header", pos);
  }
  if (maxval == 0 || maxval > 255) throw FormatError(source + ": only 8-bit PGM supported", pos);
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + w * h)
    throw FormatError(source + ": truncated, expected " + std::to_string(pos + w * h) + " bytes, found " +
                          std::to_string(bytes.size()), bytes.size());
  Mask m(static_cast<std::uint32_t>(w), static_cast<std::uint32_t>(h));
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = bytes[pos + i] >= 128 ? 1 : 0;
  return m;
}

inline std::vector<std::uint8_t> serialize_pgm_mask(const Mask& m) {
  const std::string header = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (auto b : m.bits) out.push_back(b ? 255 : 0);
  return out;
}

inline void write_mask(const Mask& m, const std::filesystem::path& path) {
  io::ByteWriter w;
  const auto bytes = path.extension() == ".pgm" ? serialize_pgm_mask(m) : serialize_mask(m);
  w.put_bytes(std::span<const std::uint8_t>(bytes));
  w.write_file(path);
}

// Format chosen by extension: .pgm is grayscale, anything else packed bits.
inline Mask read_mask(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  if (path.extension() == ".pgm") return parse_pgm_mask(bytes, path.string());
  return parse_mask(bytes, path.string());
}

}  // namespace msae
