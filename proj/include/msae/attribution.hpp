#pragma once

// Which (token, feature) pairs drive a decision: logit differences, exact
// zero-ablation patching, first-order approximation, per-range maps, and
// feature probing on a cached image.

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msae/activation_store.hpp"
#include "msae/host.hpp"
#include "msae/parallel.hpp"
#include "msae/sae.hpp"

namespace msae {

inline double logit_diff(std::span<const double> u, std::uint32_t v_c, std::uint32_t v_b) {
  if (v_c >= u.size() || v_b >= u.size())
    throw InvalidArgument("logit_diff: token id out of range (vocab " + std::to_string(u.size()) + ")");
  return u[v_c] - u[v_b];
}

struct LogitView {
  std::vector<double> u;
  std::uint32_t v_c = 0;  // argmax of u
  std::uint32_t v_b = 0;
};

inline LogitView make_logit_view(std::vector<double> u, std::uint32_t v_b) {
  LogitView lv;
  lv.v_c = argmax(u);
  require(v_b < u.size(), "baseline token id out of range");
  require(lv.v_c != v_b, "baseline token equals the chosen token");
  lv.u = std::move(u);
  lv.v_b = v_b;
  return lv;
}

enum class AttributionMethod { exact, approx };

inline std::string to_string(AttributionMethod m) { return m == AttributionMethod::exact ? "exact" : "approx"; }

inline AttributionMethod attribution_method_from(const std::string& s) {
  if (s == "exact") return AttributionMethod::exact;
  if (s == "approx") return AttributionMethod::approx;
  throw InvalidArgument("unknown attribution method: " + s);
}

struct AttributionEntry {
  std::uint32_t token = 0;
  std::uint32_t feature = 0;
  double influence = 0.0;
  bool reselection = false;  // exact only: a replacement feature entered TopK
};

struct AttributionResult {
  AttributionMethod method = AttributionMethod::exact;
  std::uint32_t v_c = 0, v_b = 0;
  double base_diff = 0.0;
  std::vector<AttributionEntry> entries;  // sorted by (token, feature), unique
  std::vector<TokenRange> ranges;
  std::size_t n_tokens = 0;

  // Sum of influences per token.
  std::vector<double> per_token() const {
    std::vector<double> out(n_tokens, 0.0);
    for (const auto& e : entries) out[e.token] += e.influence;
    return out;
  }

  std::string range_label(std::uint32_t token) const {
    const auto* r = range_of(ranges, token);
    return r ? r->label : "";
  }
};

using Scope = std::vector<std::pair<std::uint32_t, std::uint32_t>>;  // (token, feature)

inline Scope active_pairs(const std::vector<LatentState>& states) {
  Scope s;
  for (std::size_t t = 0; t < states.size(); ++t)
    for (auto j : states[t].active) s.emplace_back(static_cast<std::uint32_t>(t), j);
  return s;
}

inline Scope normalized_scope(Scope scope, std::size_t T, std::size_t d_s) {
  for (const auto& [t, j] : scope) {
    require(t < T, "attribution scope token " + std::to_string(t) + " out of range");
    require(j < d_s, "attribution scope feature " + std::to_string(j) + " out of range");
  }
  std::sort(scope.begin(), scope.end());
  scope.erase(std::unique(scope.begin(), scope.end()), scope.end());
  return scope;
}

// Zero-clamp one (token, feature) at a time (clamp-before-TopK), re-run the
// downstream completion, I = d(after) - d(before). |scope| + 1 completions.
inline AttributionResult exact_attribution(const HostModel& host, const HostInput& input, const SaeParams& params,
                                           std::uint32_t v_c, std::uint32_t v_b,
                                           std::optional<Scope> scope = std::nullopt, std::size_t threads = 1) {
  const auto base = hooked_forward(host, input, params);
  AttributionResult out;
  out.method = AttributionMethod::exact;
  out.v_c = v_c;
  out.v_b = v_b;
  out.base_diff = logit_diff(base.logits, v_c, v_b);
  out.ranges = host.token_ranges(input);
  out.n_tokens = base.x.rows();
  const Scope s = normalized_scope(scope ? std::move(*scope) : active_pairs(base.states), out.n_tokens, params.d_s());
  const Matrix<double> xhat = to_double(base.xhat);
  out.entries.resize(s.size());
  parallel_for(s.size(), threads, [&](std::size_t e) {
    const auto [t, j] = s[e];
    const auto& st = base.states[t];
    auto ablated = steer(st.z_pre, SteerSpec{{}, j, 0.0}, params.k);
    Matrix<double> x2 = xhat;
    const auto xh = decode(ablated, params);
    std::copy(xh.begin(), xh.end(), x2.row(t).begin());
    const auto u2 = host.complete(x2);
    std::vector<std::uint32_t> expected;
    for (auto a : st.active)
      if (a != j) expected.push_back(a);
    out.entries[e] = {t, j, logit_diff(u2, v_c, v_b) - out.base_diff, ablated.active != expected};
  });
  return out;
}

// First order: g = vjp(x_hat); per token g_z = W_dec^T g on the active set;
// I(i, j) = -z_hat[i, j] * g_z[j]. One completion plus one vjp.
inline AttributionResult approx_attribution(const HostModel& host, const HostInput& input, const SaeParams& params,
                                            std::uint32_t v_c, std::uint32_t v_b,
                                            std::optional<Scope> scope = std::nullopt) {
  const auto base = hooked_forward(host, input, params);
  AttributionResult out;
  out.method = AttributionMethod::approx;
  out.v_c = v_c;
  out.v_b = v_b;
  out.base_diff = logit_diff(base.logits, v_c, v_b);
  out.ranges = host.token_ranges(input);
  out.n_tokens = base.x.rows();
  const Scope s = normalized_scope(scope ? std::move(*scope) : active_pairs(base.states), out.n_tokens, params.d_s());
  const auto g = host.vjp(to_double(base.xhat), v_c, v_b);
  std::vector<std::optional<SparseVector>> gz(out.n_tokens);
  for (const auto& [t, j] : s) {
    const auto& st = base.states[t];
    if (!gz[t]) gz[t] = latent_gradient(std::span<const double>(g.row(t)), params, st.active);
    out.entries.push_back({t, j, -static_cast<double>(st.value(j)) * gz[t]->at(j), false});
  }
  return out;
}

inline AttributionResult attribute(const HostModel& host, const HostInput& input, const SaeParams& params,
                                   std::uint32_t v_c, std::uint32_t v_b, AttributionMethod method,
                                   std::size_t threads = 1) {
  return method == AttributionMethod::exact ? exact_attribution(host, input, params, v_c, v_b, std::nullopt, threads)
                                            : approx_attribution(host, input, params, v_c, v_b);
}

// ---- maps -------------------------------------------------------------------------------

struct RangeMap {
  TokenRange range;
  std::vector<std::pair<std::uint32_t, double>> top_features;  // (feature, total |I|), descending
  std::vector<double> values;                                  // per token in the range
  std::size_t rows = 0, cols = 0;                              // grid shape for image ranges, else 1 x n
};

// Per range: the top_n features by total |I| inside that range (ties to the
// lower index), and each token's summed influence over those features.
inline std::vector<RangeMap> attribution_maps(const AttributionResult& r, std::size_t top_n,
                                              std::optional<Grid> image_grid = std::nullopt) {
  require(!r.entries.empty(), "attribution_maps: empty result");
  std::vector<RangeMap> out;
  for (const auto& range : r.ranges) {
    RangeMap m;
    m.range = range;
    std::map<std::uint32_t, double> total;
    for (const auto& e : r.entries)
      if (e.token >= range.begin && e.token < range.end) total[e.feature] += std::abs(e.influence);
    m.top_features.assign(total.begin(), total.end());
    std::stable_sort(m.top_features.begin(), m.top_features.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (m.top_features.size() > top_n) m.top_features.resize(top_n);
    std::vector<std::uint32_t> keep;
    for (const auto& f : m.top_features) keep.push_back(f.first);
    std::sort(keep.begin(), keep.end());
    m.values.assign(range.end - range.begin, 0.0);
    for (const auto& e : r.entries)
      if (e.token >= range.begin && e.token < range.end && std::binary_search(keep.begin(), keep.end(), e.feature))
        m.values[e.token - range.begin] += e.influence;
    if (image_grid && range.label == "image" && image_grid->tokens() == m.values.size()) {
      m.rows = image_grid->rows;
      m.cols = image_grid->cols;
    } else {
      m.rows = 1;
      m.cols = m.values.size();
    }
    out.push_back(std::move(m));
  }
  return out;
}

// ---- probing --------------------------------------------------------------------------------

// Features ranked by mean activation on one image (descending, ties to the
// lower index), the first `skip` dropped, the next k_top returned.
inline std::vector<std::pair<std::uint32_t, double>> probe_features(const SparseFeatureCache& cache,
                                                                    const std::string& image_id, std::size_t k_top,
                                                                    std::size_t skip) {
  require(k_top >= 1, "probe_features: k_top must be >= 1");
  const std::size_t i = cache.image_index(image_id);
  std::map<std::uint32_t, double> sum;
  for (std::size_t t = 0; t < cache.T; ++t) {
    const auto tv = cache.token(i, t);
    for (std::size_t a = 0; a < tv.indices.size(); ++a) sum[tv.indices[a]] += tv.values[a];
  }
  std::vector<std::pair<std::uint32_t, double>> ranked;
  for (const auto& [j, s] : sum)
    if (s > 0.0) ranked.emplace_back(j, s / static_cast<double>(cache.T));
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (skip >= ranked.size()) return {};
  const auto first = ranked.begin() + static_cast<std::ptrdiff_t>(skip);
  const auto last = first + static_cast<std::ptrdiff_t>(std::min(k_top, ranked.size() - skip));
  return {first, last};
}

// ---- export -----------------------------------------------------------------------------------

inline std::string attribution_jsonl(const AttributionResult& r) {
  std::string out;
  for (const auto& e : r.entries)
    out += nlohmann::json{{"token", e.token},
                          {"feature", e.feature},
                          {"influence", e.influence},
                          {"method", to_string(r.method)},
                          {"range", r.range_label(e.token)},
                          {"reselection", e.reselection}}
               .dump() +
           "\n";
  return out;
}

inline nlohmann::json maps_json(const std::vector<RangeMap>& maps) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : maps) {
    nlohmann::json top = nlohmann::json::array();
    for (const auto& [j, v] : m.top_features) top.push_back({{"feature", j}, {"total_abs_influence", v}});
    nlohmann::json grid = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows; ++r)
      grid.push_back(std::vector<double>(m.values.begin() + static_cast<std::ptrdiff_t>(r * m.cols),
                                         m.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * m.cols)));
    arr.push_back({{"label", m.range.label},
                   {"begin", m.range.begin},
                   {"end", m.range.end},
                   {"top_features", top},
                   {"rows", m.rows},
                   {"cols", m.cols},
                   {"values", grid}});
  }
  return arr;
}

inline nlohmann::json attribution_summary_json(const AttributionResult& r, const std::vector<RangeMap>& maps) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"token", e.token},
                       {"feature", e.feature},
                       {"influence", e.influence},
                       {"range", r.range_label(e.token)},
                       {"reselection", e.reselection}});
  return {{"method", to_string(r.method)}, {"v_c", r.v_c},      {"v_b", r.v_b},
          {"logit_diff", r.base_diff},     {"entries", entries}, {"maps", maps_json(maps)}};
}

}  // namespace msae
