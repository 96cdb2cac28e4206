#pragma once

// Host-model contract (the layer the SAE is hooked into), the two toy hosts
// used for verification, the hooked forward pass and greedy steered
// generation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msae/activation_store.hpp"
#include "msae/error.hpp"
#include "msae/image.hpp"
#include "msae/sae.hpp"
#include "msae/tensor.hpp"
#include "msae/toy_world.hpp"

namespace msae {

// What the host is asked to process: an optional image followed by text
// tokens. `ref` is an opaque handle for out-of-process hosts.
struct HostInput {
  std::optional<Image> image;
  std::vector<std::uint32_t> text;
  std::string ref;
};

struct TokenRange {
  std::string label;  // "image" or "text"
  std::size_t begin = 0;
  std::size_t end = 0;
  bool contains(std::size_t t) const { return t >= begin && t < end; }
  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

inline const TokenRange* range_of(std::span<const TokenRange> ranges, std::size_t token) {
  for (const auto& r : ranges)
    if (r.contains(token)) return &r;
  return nullptr;
}

// run() produces the activations x [T x d_l] at the hooked layer;
// complete() maps a (possibly replaced) x_hat to next-token logits;
// vjp() returns d(u[v_c] - u[v_b]) / d x_hat.
//
// Public entry points are non-virtual so call counts are tracked in one place.
class HostModel {
 public:
  virtual ~HostModel() = default;
  HostModel() = default;
  HostModel(const HostModel&) = delete;
  HostModel& operator=(const HostModel&) = delete;

  virtual std::size_t d_model() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::vector<TokenRange> token_ranges(const HostInput& input) const = 0;

  Matrix<float> run(const HostInput& input) const {
    ++run_calls_;
    return do_run(input);
  }

  std::vector<double> complete(const Matrix<double>& xhat) const {
    require(xhat.cols() == d_model(), "complete: x_hat width != d_model");
    ++complete_calls_;
    return do_complete(xhat);
  }

  Matrix<double> vjp(const Matrix<double>& xhat, std::uint32_t v_c, std::uint32_t v_b) const {
    require(xhat.cols() == d_model(), "vjp: x_hat width != d_model");
    require(v_c < vocab_size() && v_b < vocab_size(), "vjp: token id out of range");
    ++vjp_calls_;
    return do_vjp(xhat, v_c, v_b);
  }

  std::uint64_t run_calls() const noexcept { return run_calls_; }
  std::uint64_t complete_calls() const noexcept { return complete_calls_; }
  std::uint64_t vjp_calls() const noexcept { return vjp_calls_; }
  void reset_counters() const noexcept { run_calls_ = complete_calls_ = vjp_calls_ = 0; }

 protected:
  virtual Matrix<float> do_run(const HostInput& input) const = 0;
  virtual std::vector<double> do_complete(const Matrix<double>& xhat) const = 0;
  virtual Matrix<double> do_vjp(const Matrix<double>& xhat, std::uint32_t v_c, std::uint32_t v_b) const = 0;

 private:
  mutable std::atomic<std::uint64_t> run_calls_{0};
  mutable std::atomic<std::uint64_t> complete_calls_{0};
  mutable std::atomic<std::uint64_t> vjp_calls_{0};
};

// ---- toy front end ------------------------------------------------------------

// Maps an image's cells and the text tokens to activations. Each image cell
// is the mean over its pixels of brightness * direction(concept of pixel);
// black pixels contribute nothing. Text token w maps to embedding row w.
struct ToyFrontEnd {
  toy::SceneLayout layout;
  Matrix<float> concept_dirs;  // [n_concepts x d_model], unit rows
  Matrix<float> embeddings;    // [vocab x d_model]

  static ToyFrontEnd make(std::size_t d_model, std::uint64_t seed, toy::SceneLayout layout = {}) {
    Rng rng(seed);
    ToyFrontEnd fe;
    fe.layout = layout;
    fe.concept_dirs = Matrix<float>(toy::concepts().size(), d_model);
    for (std::size_t c = 0; c < fe.concept_dirs.rows(); ++c) {
      std::vector<double> v(d_model);
      for (auto& x : v) x = rng.normal();
      const double n = std::sqrt(squared_norm(std::span<const double>(v)));
      for (std::size_t i = 0; i < d_model; ++i) fe.concept_dirs(c, i) = static_cast<float>(v[i] / n);
    }
    fe.embeddings = Matrix<float>(toy::vocabulary().size(), d_model);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
    for (auto& x : fe.embeddings.data()) x = static_cast<float>(rng.normal() * sd);
    return fe;
  }

  std::size_t d_model() const { return concept_dirs.cols(); }
  std::size_t image_tokens() const { return layout.grid.tokens(); }

  Matrix<float> activations(const HostInput& in) const {
    const std::size_t n_img = in.image ? image_tokens() : 0;
    Matrix<float> x(n_img + in.text.size(), d_model(), 0.0f);
    if (in.image) {
      const Image& img = *in.image;
      const std::uint32_t cp = layout.cell_px;
      if (img.width != layout.grid.cols * cp || img.height != layout.grid.rows * cp)
        throw InvalidArgument("toy host: image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                              ", expected " + std::to_string(layout.grid.cols * cp) + "x" +
                              std::to_string(layout.grid.rows * cp));
      const double inv = 1.0 / (double(cp) * cp);
      std::vector<double> acc(d_model());
      for (std::size_t r = 0; r < layout.grid.rows; ++r)
        for (std::size_t c = 0; c < layout.grid.cols; ++c) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::uint32_t y = 0; y < cp; ++y)
            for (std::uint32_t xx = 0; xx < cp; ++xx) {
              const auto pc = toy::classify_pixel(img.pixel(static_cast<std::uint32_t>(c) * cp + xx,
                                                            static_cast<std::uint32_t>(r) * cp + y));
              if (!pc) continue;
              const auto dir = concept_dirs.row(pc->concept_index);
              for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += pc->brightness * dir[i];
            }
          auto row = x.row(r * layout.grid.cols + c);
          for (std::size_t i = 0; i < acc.size(); ++i) row[i] = static_cast<float>(acc[i] * inv);
        }
    }
    for (std::size_t t = 0; t < in.text.size(); ++t) {
      require(in.text[t] < embeddings.rows(), "toy host: text token id out of range");
      const auto e = embeddings.row(in.text[t]);
      std::copy(e.begin(), e.end(), x.row(n_img + t).begin());
    }
    return x;
  }

  std::vector<TokenRange> ranges(const HostInput& in) const {
    std::vector<TokenRange> out;
    const std::size_t n_img = in.image ? image_tokens() : 0;
    if (n_img) out.push_back({"image", 0, n_img});
    if (!in.text.empty()) out.push_back({"text", n_img, n_img + in.text.size()});
    return out;
  }
};

namespace detail {
inline std::vector<double> mean_rows(const Matrix<double>& x) {
  std::vector<double> m(x.cols(), 0.0);
  if (x.rows() == 0) return m;
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t i = 0; i < x.cols(); ++i) m[i] += x(t, i);
  for (auto& v : m) v /= static_cast<double>(x.rows());
  return m;
}
}  // namespace detail

// u = A mean_t(x_hat_t) + c.
class ToyLinearHost : public HostModel {
 public:
  ToyLinearHost(ToyFrontEnd fe, Matrix<double> readout, std::vector<double> bias)
      : fe_(std::move(fe)), a_(std::move(readout)), c_(std::move(bias)) {
    require(a_.cols() == fe_.d_model() && c_.size() == a_.rows(), "ToyLinearHost: readout shape mismatch");
  }

  std::size_t d_model() const override { return fe_.d_model(); }
  std::size_t vocab_size() const override { return a_.rows(); }
  std::vector<TokenRange> token_ranges(const HostInput& in) const override { return fe_.ranges(in); }
  const Matrix<double>& readout() const { return a_; }
  const ToyFrontEnd& front_end() const { return fe_; }

 protected:
  Matrix<float> do_run(const HostInput& in) const override { return fe_.activations(in); }

  std::vector<double> do_complete(const Matrix<double>& xhat) const override {
    const auto m = detail::mean_rows(xhat);
    std::vector<double> u(c_);
    for (std::size_t v = 0; v < a_.rows(); ++v) u[v] += dot(a_.row(v), std::span<const double>(m));
    return u;
  }

  Matrix<double> do_vjp(const Matrix<double>& xhat, std::uint32_t v_c, std::uint32_t v_b) const override {
    Matrix<double> g(xhat.rows(), xhat.cols());
    const double inv = xhat.rows() ? 1.0 / static_cast<double>(xhat.rows()) : 0.0;
    for (std::size_t t = 0; t < xhat.rows(); ++t)
      for (std::size_t i = 0; i < xhat.cols(); ++i) g(t, i) = (a_(v_c, i) - a_(v_b, i)) * inv;
    return g;
  }

 private:
  ToyFrontEnd fe_;
  Matrix<double> a_;
  std::vector<double> c_;
};

// u = A2 tanh(A1 mean_t(x_hat_t) + c1) + c2.
class ToyMlpHost : public HostModel {
 public:
  ToyMlpHost(ToyFrontEnd fe, Matrix<double> a1, std::vector<double> c1, Matrix<double> a2, std::vector<double> c2)
      : fe_(std::move(fe)), a1_(std::move(a1)), c1_(std::move(c1)), a2_(std::move(a2)), c2_(std::move(c2)) {
    require(a1_.cols() == fe_.d_model() && c1_.size() == a1_.rows() && a2_.cols() == a1_.rows() &&
                c2_.size() == a2_.rows(),
            "ToyMlpHost: layer shape mismatch");
  }

  std::size_t d_model() const override { return fe_.d_model(); }
  std::size_t vocab_size() const override { return a2_.rows(); }
  std::vector<TokenRange> token_ranges(const HostInput& in) const override { return fe_.ranges(in); }
  const ToyFrontEnd& front_end() const { return fe_; }

 protected:
  Matrix<float> do_run(const HostInput& in) const override { return fe_.activations(in); }

  std::vector<double> hidden(const Matrix<double>& xhat) const {
    const auto m = detail::mean_rows(xhat);
    std::vector<double> h(a1_.rows());
    for (std::size_t r = 0; r < h.size(); ++r) h[r] = std::tanh(dot(a1_.row(r), std::span<const double>(m)) + c1_[r]);
    return h;
  }

  std::vector<double> do_complete(const Matrix<double>& xhat) const override {
    const auto h = hidden(xhat);
    std::vector<double> u(c2_);
    for (std::size_t v = 0; v < a2_.rows(); ++v) u[v] += dot(a2_.row(v), std::span<const double>(h));
    return u;
  }

  Matrix<double> do_vjp(const Matrix<double>& xhat, std::uint32_t v_c, std::uint32_t v_b) const override {
    const auto h = hidden(xhat);
    std::vector<double> g_pre(h.size());
    for (std::size_t r = 0; r < h.size(); ++r) g_pre[r] = (a2_(v_c, r) - a2_(v_b, r)) * (1.0 - h[r] * h[r]);
    std::vector<double> g_mean(fe_.d_model(), 0.0);
    for (std::size_t r = 0; r < h.size(); ++r)
      for (std::size_t i = 0; i < g_mean.size(); ++i) g_mean[i] += g_pre[r] * a1_(r, i);
    Matrix<double> g(xhat.rows(), xhat.cols());
    const double inv = xhat.rows() ? 1.0 / static_cast<double>(xhat.rows()) : 0.0;
    for (std::size_t t = 0; t < xhat.rows(); ++t)
      for (std::size_t i = 0; i < xhat.cols(); ++i) g(t, i) = g_mean[i] * inv;
    return g;
  }

 private:
  ToyFrontEnd fe_;
  Matrix<double> a1_;
  std::vector<double> c1_;
  Matrix<double> a2_;
  std::vector<double> c2_;
};

// Readout that "names what it sees": the row of each concept's vocabulary
// word points along that concept's direction; every other row is random.
inline Matrix<double> naming_readout(const ToyFrontEnd& fe, std::uint64_t seed, double gain = 4.0) {
  Rng rng(seed);
  const auto& vocab = toy::vocabulary();
  Matrix<double> a(vocab.size(), fe.d_model());
  const double sd = 1.0 / std::sqrt(static_cast<double>(fe.d_model()));
  for (auto& x : a.data()) x = rng.normal() * sd;
  for (std::size_t c = 0; c < toy::concepts().size(); ++c) {
    const auto w = toy::token_id(toy::concepts()[c].word);
    for (std::size_t i = 0; i < fe.d_model(); ++i) a(w, i) += gain * fe.concept_dirs(c, i);
  }
  return a;
}

inline std::unique_ptr<ToyLinearHost> make_toy_linear_host(std::size_t d_model, std::uint64_t seed,
                                                           toy::SceneLayout layout = {}) {
  auto fe = ToyFrontEnd::make(d_model, seed, layout);
  auto a = naming_readout(fe, seed + 1);
  std::vector<double> c(a.rows(), 0.0);
  return std::make_unique<ToyLinearHost>(std::move(fe), std::move(a), std::move(c));
}

inline std::unique_ptr<ToyMlpHost> make_toy_mlp_host(std::size_t d_model, std::uint64_t seed,
                                                     std::size_t hidden = 24, toy::SceneLayout layout = {}) {
  auto fe = ToyFrontEnd::make(d_model, seed, layout);
  Rng rng(seed + 2);
  Matrix<double> a1(hidden, d_model);
  std::vector<double> c1(hidden);
  const double sd1 = 2.0 / std::sqrt(static_cast<double>(d_model));
  for (auto& x : a1.data()) x = rng.normal() * sd1;
  for (auto& x : c1) x = rng.normal() * 0.1;
  Matrix<double> a2(toy::vocabulary().size(), hidden);
  const double sd2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (auto& x : a2.data()) x = rng.normal() * sd2;
  std::vector<double> c2(a2.rows(), 0.0);
  return std::make_unique<ToyMlpHost>(std::move(fe), std::move(a1), std::move(c1), std::move(a2), std::move(c2));
}

// ---- hooked forward ------------------------------------------------------------------

struct HookedResult {
  Matrix<float> x;        // activations at the hook
  Matrix<float> xhat;     // SAE reconstruction fed downstream
  std::vector<LatentState> states;
  std::vector<double> logits;
};

inline Matrix<double> to_double(const Matrix<float>& m) { return m.cast<double>(); }

// x = run(input); per token encode, clamp-then-TopK for applicable specs,
// decode; logits = complete(x_hat). Without specs x_hat is the plain
// reconstruction.
inline HookedResult hooked_forward(const HostModel& host, const HostInput& input, const SaeParams& params,
                                   std::span<const SteerSpec> specs = {}) {
  if (host.d_model() != params.d_l())
    throw InvalidArgument("hooked_forward: host d_model " + std::to_string(host.d_model()) + " != SAE d_l " +
                          std::to_string(params.d_l()));
  HookedResult out;
  out.x = host.run(input);
  const std::size_t T = out.x.rows();
  for (const auto& s : specs) s.validate(params.d_s(), T);
  out.xhat = Matrix<float>(T, params.d_l());
  out.states.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    auto z_pre = preactivations(std::span<const float>(out.x.row(t)), params);
    auto state = specs.empty() ? select_active(std::move(z_pre), params.k) : steer(std::move(z_pre), specs, t, params.k);
    const auto xh = decode(state, params);
    std::copy(xh.begin(), xh.end(), out.xhat.row(t).begin());
    out.states.push_back(std::move(state));
  }
  out.logits = host.complete(to_double(out.xhat));
  return out;
}

inline std::uint32_t argmax(std::span<const double> u) {
  require(!u.empty(), "argmax of empty logits");
  return static_cast<std::uint32_t>(std::max_element(u.begin(), u.end()) - u.begin());
}

// Greedy decoding; each step re-runs the hooked forward over the whole
// sequence with the steering specs applied. Returns only the new tokens.
// Specs with an empty token list follow the growing sequence.
inline std::vector<std::uint32_t> generate_steered(const HostModel& host, const HostInput& prompt,
                                                   const SaeParams& params, std::span<const SteerSpec> specs,
                                                   std::size_t max_len) {
  if (max_len < 1) throw InvalidArgument("generate_steered: max_len must be >= 1");
  HostInput cur = prompt;
  std::vector<std::uint32_t> generated;
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto r = hooked_forward(host, cur, params, specs);
    const auto next = argmax(r.logits);
    generated.push_back(next);
    cur.text.push_back(next);
  }
  return generated;
}

}  // namespace msae
