#pragma once

// Procedural verification corpus: images made of colored cell-aligned
// patches ("planted concepts") with exact ground-truth masks, and a small
// word vocabulary for toy prompts.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msae/activation_store.hpp"
#include "msae/image.hpp"
#include "msae/tensor.hpp"

namespace msae::toy {

struct Concept {
  std::string name;
  std::array<std::uint8_t, 3> color;
  std::string category;  // scene | object | part | material | texture | colour
  std::string word;      // vocabulary word the readout associates with it
};

inline const std::vector<Concept>& concepts() {
  static const std::vector<Concept> kConcepts{
      {"red", {230, 20, 20}, "colour", "red"},
      {"green grass", {20, 200, 20}, "scene", "grass"},
      {"blue water", {20, 40, 230}, "material", "water"},
      {"yellow stripes", {230, 220, 20}, "texture", "stripes"},
      {"cyan sky", {20, 210, 220}, "scene", "sky"},
      {"magenta flower", {220, 20, 210}, "object", "flower"},
      {"orange door", {240, 130, 10}, "part", "door"},
      {"purple car", {120, 20, 230}, "object", "car"},
  };
  return kConcepts;
}

inline constexpr std::uint8_t kBlackLevel = 16;

// Nearest concept by RGB direction, or nullopt for (near-)black pixels.
// Also reports the brightness relative to the concept's reference color.
struct PixelClass {
  std::size_t concept_index;
  double brightness;
};

inline std::optional<PixelClass> classify_pixel(std::array<std::uint8_t, 3> px) {
  if (std::max({px[0], px[1], px[2]}) < kBlackLevel) return std::nullopt;
  const double p[3] = {double(px[0]), double(px[1]), double(px[2])};
  const double pn = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  std::size_t best = 0;
  double best_cos = -2.0, best_norm = 1.0;
  const auto& cs = concepts();
  for (std::size_t c = 0; c < cs.size(); ++c) {
    const double q[3] = {double(cs[c].color[0]), double(cs[c].color[1]), double(cs[c].color[2])};
    const double qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
    const double cs_ = (p[0] * q[0] + p[1] * q[1] + p[2] * q[2]) / (pn * qn);
    if (cs_ > best_cos) best_cos = cs_, best = c, best_norm = qn;
  }
  return PixelClass{best, pn / best_norm};
}

inline std::optional<std::size_t> concept_by_name(const std::string& name) {
  const auto& cs = concepts();
  for (std::size_t c = 0; c < cs.size(); ++c)
    if (cs[c].name == name) return c;
  return std::nullopt;
}

struct Placement {
  std::size_t concept_index;
  std::vector<std::uint8_t> cells;  // [rows*cols] token-grid membership
};

struct Scene {
  std::string id;
  Image image;
  std::vector<Placement> placements;
};

struct SceneLayout {
  Grid grid{4, 4};
  std::uint32_t cell_px = 16;
};

// One image: 1-2 concepts, each a 1x1..2x2 block of whole cells, disjoint,
// each drawn at a brightness in [0.75, 1].
inline Scene make_scene(const std::string& id, std::uint64_t seed, const SceneLayout& layout = {}) {
  Rng rng(seed);
  Scene s;
  s.id = id;
  s.image = Image(layout.grid.cols * layout.cell_px, layout.grid.rows * layout.cell_px);
  std::vector<std::uint8_t> used(layout.grid.tokens(), 0);
  const std::size_t n_place = 1 + rng.below(2);
  std::vector<std::size_t> picked = rng.sample_without_replacement(concepts().size(), n_place);
  for (std::size_t c : picked) {
    for (int attempt = 0; attempt < 32; ++attempt) {
      const std::size_t h = 1 + rng.below(std::min<std::size_t>(2, layout.grid.rows));
      const std::size_t w = 1 + rng.below(std::min<std::size_t>(2, layout.grid.cols));
      const std::size_t r0 = rng.below(layout.grid.rows - h + 1);
      const std::size_t c0 = rng.below(layout.grid.cols - w + 1);
      bool clash = false;
      for (std::size_t r = r0; r < r0 + h; ++r)
        for (std::size_t cc = c0; cc < c0 + w; ++cc) clash |= used[r * layout.grid.cols + cc] != 0;
      if (clash) continue;
      Placement pl{c, std::vector<std::uint8_t>(layout.grid.tokens(), 0)};
      const double bright = rng.uniform(0.75, 1.0);
      std::array<std::uint8_t, 3> col;
      for (int ch = 0; ch < 3; ++ch)
        col[ch] = static_cast<std::uint8_t>(std::lround(bright * concepts()[c].color[ch]));
      for (std::size_t r = r0; r < r0 + h; ++r)
        for (std::size_t cc = c0; cc < c0 + w; ++cc) {
          used[r * layout.grid.cols + cc] = 1;
          pl.cells[r * layout.grid.cols + cc] = 1;
          for (std::uint32_t y = 0; y < layout.cell_px; ++y)
            for (std::uint32_t x = 0; x < layout.cell_px; ++x)
              s.image.set(static_cast<std::uint32_t>(cc) * layout.cell_px + x,
                          static_cast<std::uint32_t>(r) * layout.cell_px + y, col);
        }
      s.placements.push_back(std::move(pl));
      break;
    }
  }
  return s;
}

// ---- vocabulary ------------------------------------------------------------------

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> kVocab = [] {
    std::vector<std::string> v{"<eos>", "<unk>", "what", "is", "in", "the", "image", "tell", "me", "a",
                               "story", "how", "do", "you", "feel", "there", "yes", "no", "happy", "sad"};
    for (const auto& c : concepts()) {
      const std::string first = c.name.substr(0, c.name.find(' '));
      if (std::find(v.begin(), v.end(), first) == v.end()) v.push_back(first);
      if (std::find(v.begin(), v.end(), c.word) == v.end()) v.push_back(c.word);
    }
    return v;
  }();
  return kVocab;
}

inline std::uint32_t token_id(const std::string& word) {
  const auto& v = vocabulary();
  const auto it = std::find(v.begin(), v.end(), word);
  return it == v.end() ? 1u : static_cast<std::uint32_t>(it - v.begin());
}

// Lower-cased whitespace split; unknown words map to <unk>.
inline std::vector<std::uint32_t> tokenize(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::uint32_t> out;
  std::string w;
  while (in >> w) {
    std::string clean;
    for (char ch : w)
      if (std::isalnum(static_cast<unsigned char>(ch))) clean += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (!clean.empty()) out.push_back(token_id(clean));
  }
  return out;
}

inline std::string detokenize(const std::vector<std::uint32_t>& ids) {
  std::string out;
  const auto& v = vocabulary();
  for (auto id : ids) {
    if (!out.empty()) out += ' ';
    out += id < v.size() ? v[id] : "<unk>";
  }
  return out;
}

}  // namespace msae::toy
