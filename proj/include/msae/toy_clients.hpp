#pragma once

// Deterministic offline stand-ins for the four chat roles, tuned to the toy
// world: they read planted colors off masked images instead of asking a model.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msae/interpret.hpp"
#include "msae/toy_world.hpp"

namespace msae::toy {

// Concept owning the most non-black pixels, if any.
inline std::optional<std::size_t> dominant_concept(const Image& img) {
  std::vector<std::size_t> counts(concepts().size(), 0);
  for (std::uint32_t y = 0; y < img.height; ++y)
    for (std::uint32_t x = 0; x < img.width; ++x)
      if (auto pc = classify_pixel(img.pixel(x, y))) ++counts[pc->concept_index];
  const auto it = std::max_element(counts.begin(), counts.end());
  if (*it == 0) return std::nullopt;
  return static_cast<std::size_t>(it - counts.begin());
}

// Names the concept that dominates a strict majority of the images.
inline std::unique_ptr<FunctionClient> make_explainer() {
  return std::make_unique<FunctionClient>([](const ChatRequest& req) -> std::string {
    std::vector<std::size_t> votes(concepts().size(), 0);
    for (const auto& img : req.images)
      if (auto c = dominant_concept(img)) ++votes[*c];
    const auto it = std::max_element(votes.begin(), votes.end());
    if (!req.images.empty() && 2 * *it > req.images.size()) return concepts()[static_cast<std::size_t>(it - votes.begin())].name;
    return "The regions share no common pattern; " + kNoExplanation + ".";
  });
}

inline const std::map<std::string, std::string>& known_labels() {
  static const std::map<std::string, std::string> kLabels{{"train tracks", "Train tracks"}};
  return kLabels;
}

// Concept names and a small phrase dictionary map to fixed labels; short
// text passes through verbatim; long text is cut to its first words.
inline std::unique_ptr<FunctionClient> make_refiner() {
  return std::make_unique<FunctionClient>([](const ChatRequest& req) -> std::string {
    const std::string e = req.vars.count("explanation") ? req.vars.at("explanation") : "";
    for (const auto& c : concepts())
      if (contains_phrase(e, c.name)) return c.name;
    for (const auto& [phrase, label] : known_labels())
      if (contains_phrase(e, phrase)) return label;
    if (word_count(e) <= kMaxLabelWords) return e;
    std::istringstream in(e);
    std::string out, w;
    for (std::size_t i = 0; i < kMaxLabelWords && in >> w; ++i) out += (out.empty() ? "" : " ") + w;
    return out;
  });
}

inline std::unique_ptr<FunctionClient> make_categorizer() {
  return std::make_unique<FunctionClient>([](const ChatRequest& req) -> std::string {
    const std::string l = lower(clean_answer(req.vars.count("label") ? req.vars.at("label") : ""));
    for (const auto& c : concepts())
      if (l == c.name || l == c.word) return c.category;
    static const std::vector<std::string> kColours{"red",  "green",   "blue",   "yellow", "cyan",
                                                   "magenta", "orange", "purple", "black",  "white"};
    if (std::find(kColours.begin(), kColours.end(), l) != kColours.end()) return "colour";
    static const std::map<std::string, std::string> kKnown{{"train tracks", "object"}};
    if (auto it = kKnown.find(l); it != kKnown.end()) return it->second;
    return "unknown";
  });
}

// "yes" when the image's dominant concept is the one named by the
// explanation, "no" otherwise, "unclear" for an all-black image.
inline std::unique_ptr<FunctionClient> make_judge() {
  return std::make_unique<FunctionClient>([](const ChatRequest& req) -> std::string {
    if (req.images.empty()) return "unclear";
    const auto c = dominant_concept(req.images.front());
    if (!c) return "unclear";
    const std::string e = req.vars.count("explanation") ? req.vars.at("explanation") : "";
    return contains_phrase(e, concepts()[*c].name) ? "yes" : "no";
  });
}

}  // namespace msae::toy
