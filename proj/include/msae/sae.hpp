#pragma once

// TopK sparse autoencoder: parameters, encode/decode, steering and the
// straight-through latent gradient.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "msae/binary_io.hpp"
#include "msae/error.hpp"
#include "msae/tensor.hpp"

namespace msae {

// Learned dictionary.
//
//   z = TopK(ReLU(W_enc (x - b_pre) + b_enc))
//   x_hat = W_dec z + b_dec
//
// `decoder` is W_dec stored feature-major: row j is column j of W_dec, the
// dictionary direction of feature j. The on-disk layout is still W_dec
// row-major [d_l x d_s].
template <class T>
struct BasicSaeParams {
  std::uint32_t k = 1;
  Matrix<T> w_enc;        // [d_s x d_l]
  std::vector<T> b_pre;   // [d_l]
  std::vector<T> b_enc;   // [d_s]
  Matrix<T> decoder;      // [d_s x d_l]
  std::vector<T> b_dec;   // [d_l]

  BasicSaeParams() = default;
  BasicSaeParams(std::size_t d_l, std::size_t d_s, std::uint32_t k_)
      : k(k_), w_enc(d_s, d_l), b_pre(d_l), b_enc(d_s), decoder(d_s, d_l), b_dec(d_l) {}

  std::size_t d_l() const noexcept { return b_pre.size(); }
  std::size_t d_s() const noexcept { return b_enc.size(); }

  // W_dec(row, col) in the conventional [d_l x d_s] orientation.
  T w_dec(std::size_t row, std::size_t col) const noexcept { return decoder(col, row); }
  std::span<const T> atom(std::size_t j) const noexcept { return decoder.row(j); }

  template <class U>
  BasicSaeParams<U> cast() const {
    BasicSaeParams<U> out;
    out.k = k;
    out.w_enc = w_enc.template cast<U>();
    out.decoder = decoder.template cast<U>();
    out.b_pre.assign(b_pre.begin(), b_pre.end());
    out.b_enc.assign(b_enc.begin(), b_enc.end());
    out.b_dec.assign(b_dec.begin(), b_dec.end());
    return out;
  }

  void validate() const {
    const std::size_t dl = d_l(), ds = d_s();
    require(dl > 0 && ds > 0, "SAE dims must be positive");
    require(k >= 1 && k <= ds, "SAE k must satisfy 1 <= k <= d_s");
    require(w_enc.rows() == ds && w_enc.cols() == dl, "w_enc shape must be [d_s x d_l]");
    require(decoder.rows() == ds && decoder.cols() == dl, "decoder shape must be [d_s x d_l]");
    require(b_dec.size() == dl, "b_dec length must be d_l");
    require(all_finite<T>(w_enc.data()) && all_finite<T>(decoder.data()) &&
                all_finite<T>(b_pre) && all_finite<T>(b_enc) && all_finite<T>(b_dec),
            "SAE parameters must be finite");
  }

  friend bool operator==(const BasicSaeParams&, const BasicSaeParams&) = default;
};

using SaeParams = BasicSaeParams<float>;

// Result of encoding one token. `active` is strictly increasing and
// `z_sparse[i]` is the value of feature `active[i]`.
template <class T>
struct BasicLatentState {
  std::vector<T> z_pre;
  std::vector<std::uint32_t> active;
  std::vector<T> z_sparse;

  // Value of feature j after TopK (0 when inactive).
  T value(std::uint32_t j) const {
    const auto it = std::lower_bound(active.begin(), active.end(), j);
    if (it == active.end() || *it != j) return T{};
    return z_sparse[static_cast<std::size_t>(it - active.begin())];
  }

  bool is_active(std::uint32_t j) const {
    return std::binary_search(active.begin(), active.end(), j);
  }

  std::vector<T> dense(std::size_t d_s) const {
    std::vector<T> out(d_s, T{});
    for (std::size_t i = 0; i < active.size(); ++i) out[active[i]] = z_sparse[i];
    return out;
  }

  friend bool operator==(const BasicLatentState&, const BasicLatentState&) = default;
};

using LatentState = BasicLatentState<float>;

// Clamp feature `feature` to `value` on the tokens in `tokens`. An empty token
// list means every token.
struct SteerSpec {
  std::vector<std::uint32_t> tokens;
  std::uint32_t feature = 0;
  double value = 0.0;

  bool applies_to(std::size_t token) const {
    return tokens.empty() ||
           std::find(tokens.begin(), tokens.end(), static_cast<std::uint32_t>(token)) != tokens.end();
  }

  void validate(std::size_t d_s, std::size_t n_tokens) const {
    require(feature < d_s, "steer feature " + std::to_string(feature) + " out of range (d_s=" +
                               std::to_string(d_s) + ")");
    for (auto t : tokens)
      require(t < n_tokens, "steer token " + std::to_string(t) + " out of range (T=" +
                                std::to_string(n_tokens) + ")");
  }
};

// Indices of the k largest strictly positive entries, ties to the lower index,
// returned in increasing index order. May return fewer than k.
template <class T>
std::vector<std::uint32_t> topk_select(std::span<const T> v, std::size_t k) {
  if (k < 1 || k > v.size())
    throw InvalidArgument("topk_select: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(v.size()) + "]");
  std::vector<std::uint32_t> pos;
  pos.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] > T{}) pos.push_back(static_cast<std::uint32_t>(i));
  if (pos.size() > k) {
    auto before = [&](std::uint32_t a, std::uint32_t b) {
      return v[a] > v[b] || (v[a] == v[b] && a < b);
    };
    std::nth_element(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k) - 1, pos.end(), before);
    pos.resize(k);
    std::sort(pos.begin(), pos.end());
  }
  return pos;
}

template <class T>
std::vector<std::uint32_t> topk_select(const std::vector<T>& v, std::size_t k) {
  return topk_select(std::span<const T>(v), k);
}

// ReLU(W_enc (x - b_pre) + b_enc), accumulated in double.
template <class T, class X>
std::vector<T> preactivations(std::span<const X> x, const BasicSaeParams<T>& params) {
  const std::size_t dl = params.d_l(), ds = params.d_s();
  if (x.size() != dl)
    throw InvalidArgument("encode: input length " + std::to_string(x.size()) + " != d_l " +
                          std::to_string(dl));
  std::vector<double> centered(dl);
  for (std::size_t i = 0; i < dl; ++i)
    centered[i] = static_cast<double>(x[i]) - static_cast<double>(params.b_pre[i]);
  std::vector<T> z(ds);
  for (std::size_t j = 0; j < ds; ++j) {
    const double pre =
        dot(params.w_enc.row(j), std::span<const double>(centered)) + static_cast<double>(params.b_enc[j]);
    z[j] = pre > 0.0 ? static_cast<T>(pre) : T{};
  }
  return z;
}

template <class T>
BasicLatentState<T> select_active(std::vector<T> z_pre, std::size_t k) {
  BasicLatentState<T> state;
  state.active = topk_select(std::span<const T>(z_pre), k);
  state.z_sparse.reserve(state.active.size());
  for (auto j : state.active) state.z_sparse.push_back(z_pre[j]);
  state.z_pre = std::move(z_pre);
  return state;
}

template <class T, class X>
BasicLatentState<T> encode(std::span<const X> x, const BasicSaeParams<T>& params) {
  return select_active(preactivations(x, params), params.k);
}

template <class T, class X>
BasicLatentState<T> encode(const std::vector<X>& x, const BasicSaeParams<T>& params) {
  return encode(std::span<const X>(x), params);
}

// Sparse decode: only the active dictionary rows are touched.
template <class T>
std::vector<T> decode(const BasicLatentState<T>& state, const BasicSaeParams<T>& params) {
  const std::size_t dl = params.d_l(), ds = params.d_s();
  require(state.active.size() == state.z_sparse.size(), "decode: active/z_sparse length mismatch");
  std::vector<double> acc(dl);
  for (std::size_t i = 0; i < dl; ++i) acc[i] = static_cast<double>(params.b_dec[i]);
  for (std::size_t a = 0; a < state.active.size(); ++a) {
    const auto j = state.active[a];
    if (j >= ds)
      throw InvalidArgument("decode: active index " + std::to_string(j) + " >= d_s " + std::to_string(ds));
    const double z = static_cast<double>(state.z_sparse[a]);
    const auto col = params.atom(j);
    for (std::size_t i = 0; i < dl; ++i) acc[i] += z * static_cast<double>(col[i]);
  }
  return std::vector<T>(acc.begin(), acc.end());
}

// Clamp every spec that applies to `token`, then re-run TopK. The clamp only
// survives if it ranks in the TopK; a clamp to 0 frees a slot.
template <class T>
BasicLatentState<T> steer(std::vector<T> z_pre, std::span<const SteerSpec> specs, std::size_t token,
                          std::size_t k) {
  for (const auto& spec : specs) {
    if (spec.feature >= z_pre.size())
      throw InvalidArgument("steer: feature " + std::to_string(spec.feature) + " out of range");
    if (spec.applies_to(token)) z_pre[spec.feature] = static_cast<T>(spec.value);
  }
  return select_active(std::move(z_pre), k);
}

template <class T>
BasicLatentState<T> steer(std::vector<T> z_pre, const SteerSpec& spec, std::size_t k) {
  if (spec.feature >= z_pre.size())
    throw InvalidArgument("steer: feature " + std::to_string(spec.feature) + " out of range");
  z_pre[spec.feature] = static_cast<T>(spec.value);
  return select_active(std::move(z_pre), k);
}

struct SparseVector {
  std::vector<std::uint32_t> indices;
  std::vector<double> values;

  double at(std::uint32_t j) const {
    const auto it = std::lower_bound(indices.begin(), indices.end(), j);
    if (it == indices.end() || *it != j) return 0.0;
    return values[static_cast<std::size_t>(it - indices.begin())];
  }
};

// d/dz of a scalar whose gradient w.r.t. x_hat is `g_xhat`, with the active
// set held fixed: (W_dec^T g_xhat) restricted to `active`.
template <class T>
SparseVector latent_gradient(std::span<const double> g_xhat, const BasicSaeParams<T>& params,
                             std::span<const std::uint32_t> active) {
  require(g_xhat.size() == params.d_l(), "latent_gradient: gradient length != d_l");
  SparseVector out;
  out.indices.assign(active.begin(), active.end());
  out.values.reserve(active.size());
  for (auto j : active) {
    require(j < params.d_s(), "latent_gradient: active index out of range");
    out.values.push_back(dot(params.atom(j), g_xhat));
  }
  return out;
}

// ---- parameter file -------------------------------------------------------

inline constexpr char kParamsMagic[8] = {'S', 'A', 'E', 'P', 'R', 'M', '1', '\0'};
inline constexpr std::uint32_t kParamsVersion = 1;

inline void write_params(io::ByteWriter& w, const SaeParams& p) {
  w.put_bytes(std::string_view(kParamsMagic, 8));
  w.put<std::uint32_t>(kParamsVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.d_l()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.d_s()));
  w.put<std::uint32_t>(p.k);
  w.put_all<float>(p.w_enc.data());
  w.put_all<float>(p.b_pre);
  w.put_all<float>(p.b_enc);
  for (std::size_t r = 0; r < p.d_l(); ++r)
    for (std::size_t c = 0; c < p.d_s(); ++c) w.put<float>(p.w_dec(r, c));
  w.put_all<float>(p.b_dec);
}

inline SaeParams read_params(io::ByteReader& r) {
  r.expect_magic(std::string_view(kParamsMagic, 8));
  r.expect_version(kParamsVersion);
  const auto header_end = r.offset();
  const auto dl = r.get<std::uint32_t>();
  const auto ds = r.get<std::uint32_t>();
  const auto k = r.get<std::uint32_t>();
  if (dl == 0 || ds == 0 || k == 0 || k > ds)
    throw FormatError(r.source() + ": invalid dims d_l=" + std::to_string(dl) + " d_s=" +
                          std::to_string(ds) + " k=" + std::to_string(k),
                      header_end);
  const std::uint64_t body = 4ull * (2ull * dl * ds + 2ull * dl + ds);
  if (r.remaining() < body)
    throw FormatError(r.source() + ": truncated, expected " + std::to_string(r.offset() + body) +
                          " bytes, found " + std::to_string(r.total()),
                      r.total());
  SaeParams p(dl, ds, k);
  r.get_all<float>(p.w_enc.data());
  r.get_all<float>(p.b_pre);
  r.get_all<float>(p.b_enc);
  for (std::size_t row = 0; row < dl; ++row)
    for (std::size_t col = 0; col < ds; ++col) p.decoder(col, row) = r.get<float>();
  r.get_all<float>(p.b_dec);
  if (!all_finite<float>(p.w_enc.data()) || !all_finite<float>(p.decoder.data()) ||
      !all_finite<float>(p.b_pre) || !all_finite<float>(p.b_enc) || !all_finite<float>(p.b_dec))
    throw FormatError(r.source() + ": non-finite parameter values", header_end);
  return p;
}

inline void save_params(const SaeParams& p, const std::filesystem::path& path) {
  io::ByteWriter w;
  write_params(w, p);
  w.write_file(path);
}

inline SaeParams load_params(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  auto p = read_params(r);
  if (r.remaining() != 0)
    throw FormatError(path.string() + ": trailing bytes after parameters", r.offset());
  return p;
}

}  // namespace msae
