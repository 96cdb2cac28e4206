#pragma once

// SAE training: reconstruction + auxiliary dead-latent loss, analytic
// gradients of the two-layer model, Adam with bias correction, dead-feature
// tracking, and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msae/activation_store.hpp"
#include "msae/binary_io.hpp"
#include "msae/error.hpp"
#include "msae/sae.hpp"
#include "msae/tensor.hpp"

namespace msae {

struct TrainConfig {
  std::uint32_t d_s = 512;
  std::uint32_t k = 8;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Images (token sequences) per micro-batch, and micro-batches per step.
  std::uint32_t batch_size = 8;
  std::uint32_t grad_accum_steps = 4;
  std::uint64_t steps = 0;
  double aux_coef = 1.0 / 32.0;
  std::uint32_t aux_k = 0;  // 0 selects 2k
  std::uint64_t dead_token_threshold = 100000;
  std::uint64_t seed = 0;
  // Tokens used to initialise b_pre.
  std::uint64_t calibration_tokens = 4096;

  std::uint32_t effective_aux_k() const { return aux_k == 0 ? 2 * k : aux_k; }

  void validate() const {
    require(lr > 0.0, "train.lr must be > 0");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "train.adam_beta1 must be in [0, 1)");
    require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "train.adam_beta2 must be in [0, 1)");
    require(adam_eps > 0.0, "train.adam_eps must be > 0");
    require(batch_size >= 1, "train.batch_size must be >= 1");
    require(grad_accum_steps >= 1, "train.grad_accum_steps must be >= 1");
    require(d_s >= 1 && k >= 1 && k <= d_s, "sae.k must satisfy 1 <= k <= d_s");
    require(effective_aux_k() >= 1, "train.aux_k must be >= 1");
    require(aux_coef >= 0.0, "train.aux_coef must be >= 0");
  }
};

struct TrainMetrics {
  std::uint64_t step = 0;
  double recon_loss = 0.0;
  double aux_loss = 0.0;
  std::uint64_t dead_count = 0;
  double fraction_active_mean = 0.0;  // mean over tokens of |active| / d_s
};

// Gradients share the parameter layout, held in double.
using SaeGradients = BasicSaeParams<double>;

inline SaeGradients zero_gradients_like(std::size_t d_l, std::size_t d_s) { return SaeGradients(d_l, d_s, 1); }

// ---- dead latents ------------------------------------------------------------

// Tokens since each feature last appeared in an active set.
class DeadTracker {
 public:
  DeadTracker() = default;
  DeadTracker(std::size_t d_s, std::uint64_t threshold) : since_active_(d_s, 0), threshold_(threshold) {}

  // Feed the active sets of consecutive tokens, in order.
  void observe(std::span<const std::vector<std::uint32_t>> active_sets) {
    const std::uint64_t n = active_sets.size();
    std::vector<std::int64_t> last(since_active_.size(), -1);
    for (std::size_t t = 0; t < active_sets.size(); ++t)
      for (auto j : active_sets[t]) last[j] = static_cast<std::int64_t>(t);
    for (std::size_t j = 0; j < since_active_.size(); ++j)
      since_active_[j] = last[j] < 0 ? since_active_[j] + n : n - 1 - static_cast<std::uint64_t>(last[j]);
  }

  bool is_dead(std::size_t j) const { return since_active_[j] >= threshold_; }

  std::vector<std::uint8_t> dead_mask() const {
    std::vector<std::uint8_t> m(since_active_.size());
    for (std::size_t j = 0; j < m.size(); ++j) m[j] = is_dead(j) ? 1 : 0;
    return m;
  }

  std::vector<std::uint32_t> dead_set() const {
    std::vector<std::uint32_t> out;
    for (std::size_t j = 0; j < since_active_.size(); ++j)
      if (is_dead(j)) out.push_back(static_cast<std::uint32_t>(j));
    return out;
  }

  std::uint64_t dead_count() const {
    return static_cast<std::uint64_t>(std::count_if(since_active_.begin(), since_active_.end(),
                                                    [&](std::uint64_t c) { return c >= threshold_; }));
  }

  std::vector<std::uint64_t>& counters() noexcept { return since_active_; }
  const std::vector<std::uint64_t>& counters() const noexcept { return since_active_; }
  std::uint64_t threshold() const noexcept { return threshold_; }

 private:
  std::vector<std::uint64_t> since_active_;
  std::uint64_t threshold_ = 0;
};

// ---- loss and gradients --------------------------------------------------------

struct LossParts {
  double recon = 0.0;  // mean over tokens of ||x - x_hat||^2
  double aux = 0.0;    // mean over tokens of ||e - e_aux||^2
  double total(double aux_coef) const { return recon + aux_coef * aux; }
};

struct LossOptions {
  std::span<const std::uint8_t> dead_mask;  // empty: nothing is dead
  std::uint32_t aux_k = 1;
  double aux_coef = 1.0 / 32.0;
};

namespace detail {

// One token's contribution. `scale` is 1/N for the batch the token belongs
// to. When `grads` is non-null the gradient of scale*(recon + aux_coef*aux)
// is accumulated into it. The residual e = x - x_hat inside the auxiliary
// term is differentiated through, so gradients match the reported loss.
template <class T, class X>
void accumulate_token(std::span<const X> x, const BasicSaeParams<T>& p, const LossOptions& opt, double scale,
                      LossParts& sums, SaeGradients* grads, std::vector<std::uint32_t>* active_out) {
  const std::size_t dl = p.d_l(), ds = p.d_s();
  std::vector<double> centered(dl);
  for (std::size_t i = 0; i < dl; ++i) centered[i] = static_cast<double>(x[i]) - static_cast<double>(p.b_pre[i]);
  std::vector<T> z_pre(ds);
  for (std::size_t j = 0; j < ds; ++j) {
    const double pre = dot(p.w_enc.row(j), std::span<const double>(centered)) + static_cast<double>(p.b_enc[j]);
    z_pre[j] = pre > 0.0 ? static_cast<T>(pre) : T{};
  }
  const auto active = topk_select(std::span<const T>(z_pre), p.k);

  std::vector<double> xhat(dl);
  for (std::size_t i = 0; i < dl; ++i) xhat[i] = static_cast<double>(p.b_dec[i]);
  for (auto j : active) {
    const double z = static_cast<double>(z_pre[j]);
    const auto col = p.atom(j);
    for (std::size_t i = 0; i < dl; ++i) xhat[i] += z * static_cast<double>(col[i]);
  }
  std::vector<double> resid(dl);  // x_hat - x
  double recon = 0.0;
  for (std::size_t i = 0; i < dl; ++i) {
    resid[i] = xhat[i] - static_cast<double>(x[i]);
    recon += resid[i] * resid[i];
  }
  sums.recon += scale * recon;

  // Auxiliary: top aux_k dead latents (strictly positive) reconstruct e.
  std::vector<std::uint32_t> aux_set;
  std::vector<double> aux_diff;  // e_aux - e = e_aux + (x_hat - x)
  if (!opt.dead_mask.empty()) {
    std::vector<T> dead_z(ds, T{});
    bool any = false;
    for (std::size_t j = 0; j < ds; ++j)
      if (opt.dead_mask[j] && z_pre[j] > T{}) {
        dead_z[j] = z_pre[j];
        any = true;
      }
    if (any) {
      aux_set = topk_select(std::span<const T>(dead_z), std::min<std::size_t>(opt.aux_k, ds));
      aux_diff.assign(resid.begin(), resid.end());
      for (auto j : aux_set) {
        const double z = static_cast<double>(z_pre[j]);
        const auto col = p.atom(j);
        for (std::size_t i = 0; i < dl; ++i) aux_diff[i] += z * static_cast<double>(col[i]);
      }
      double aux = 0.0;
      for (double d : aux_diff) aux += d * d;
      sums.aux += scale * aux;
    }
  }

  if (active_out) *active_out = active;
  if (!grads) return;

  // d/dx_hat and d/de_aux.
  std::vector<double> g_xhat(dl), g_aux;
  for (std::size_t i = 0; i < dl; ++i) g_xhat[i] = 2.0 * scale * resid[i];
  if (!aux_set.empty()) {
    g_aux.resize(dl);
    for (std::size_t i = 0; i < dl; ++i) {
      g_aux[i] = 2.0 * scale * opt.aux_coef * aux_diff[i];
      g_xhat[i] += g_aux[i];
    }
  }
  for (std::size_t i = 0; i < dl; ++i) grads->b_dec[i] += g_xhat[i];

  auto backprop_latent = [&](std::uint32_t j, std::span<const double> g_out) {
    const double z = static_cast<double>(z_pre[j]);
    auto d_atom = grads->decoder.row(j);
    const auto atom = p.atom(j);
    double gz = 0.0;
    for (std::size_t i = 0; i < dl; ++i) {
      d_atom[i] += z * g_out[i];
      gz += static_cast<double>(atom[i]) * g_out[i];
    }
    // z_pre[j] > 0 here, so the ReLU passes the gradient.
    auto d_enc = grads->w_enc.row(j);
    const auto enc = p.w_enc.row(j);
    for (std::size_t i = 0; i < dl; ++i) {
      d_enc[i] += gz * centered[i];
      grads->b_pre[i] -= gz * static_cast<double>(enc[i]);
    }
    grads->b_enc[j] += gz;
  };
  for (auto j : active) backprop_latent(j, g_xhat);
  for (auto j : aux_set) backprop_latent(j, g_aux);
}

}  // namespace detail

// Loss over a batch of tokens (rows of `x_batch`). With `grads` non-null the
// batch-mean gradient is added to it.
template <class T, class X>
LossParts total_loss(const Matrix<X>& x_batch, const BasicSaeParams<T>& params, const LossOptions& opt = {},
                     SaeGradients* grads = nullptr) {
  if (x_batch.rows() == 0) throw InvalidArgument("total_loss: empty batch");
  require(x_batch.cols() == params.d_l(), "total_loss: batch width != d_l");
  require(opt.dead_mask.empty() || opt.dead_mask.size() == params.d_s(), "total_loss: dead mask length != d_s");
  LossParts sums;
  const double scale = 1.0 / static_cast<double>(x_batch.rows());
  for (std::size_t r = 0; r < x_batch.rows(); ++r)
    detail::accumulate_token(x_batch.row(r), params, opt, scale, sums, grads, nullptr);
  return sums;
}

// ---- Adam ---------------------------------------------------------------------

struct AdamState {
  SaeGradients m;
  SaeGradients v;
  std::uint64_t t = 0;  // completed updates

  AdamState() = default;
  AdamState(std::size_t d_l, std::size_t d_s) : m(d_l, d_s, 1), v(d_l, d_s, 1) {}
};

// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) for one flat tensor.
template <class T>
void adam_update(std::span<T> theta, std::span<const double> g, std::span<double> m, std::span<double> v,
                 const TrainConfig& cfg, std::uint64_t t) {
  require(t >= 1, "adam_update: t must be >= 1");
  require(theta.size() == g.size() && g.size() == m.size() && m.size() == v.size(), "adam_update: shape mismatch");
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double gi = g[i];
    if (!std::isfinite(gi)) throw TrainingDiverged("non-finite gradient at update " + std::to_string(t));
    m[i] = b1 * m[i] + (1.0 - b1) * gi;
    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    theta[i] = static_cast<T>(static_cast<double>(theta[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
  }
}

// Visit the five parameter tensors of several same-shaped parameter sets.
template <class F, class... Ps>
void for_each_tensor(F&& f, Ps&... ps) {
  f(ps.w_enc.data()...);
  f(ps.b_pre...);
  f(ps.b_enc...);
  f(ps.decoder.data()...);
  f(ps.b_dec...);
}

// One Adam update of every parameter; advances state.t.
template <class T>
void adam_step(BasicSaeParams<T>& params, const SaeGradients& grads, AdamState& state, const TrainConfig& cfg) {
  const std::uint64_t t = state.t + 1;
  auto update = [&](auto& theta, const std::vector<double>& g, std::vector<double>& m, std::vector<double>& v) {
    adam_update(std::span(theta), std::span<const double>(g), std::span(m), std::span(v), cfg, t);
  };
  update(params.w_enc.data(), grads.w_enc.data(), state.m.w_enc.data(), state.v.w_enc.data());
  update(params.b_pre, grads.b_pre, state.m.b_pre, state.v.b_pre);
  update(params.b_enc, grads.b_enc, state.m.b_enc, state.v.b_enc);
  update(params.decoder.data(), grads.decoder.data(), state.m.decoder.data(), state.v.decoder.data());
  update(params.b_dec, grads.b_dec, state.m.b_dec, state.v.b_dec);
  state.t = t;
}

// ---- initialisation ---------------------------------------------------------------

// W_enc ~ N(0, 1/d_l); W_dec = W_enc^T; b_pre = mean of `calibration`;
// b_enc = b_dec = 0.
inline SaeParams init_params(std::size_t d_l, std::size_t d_s, std::uint32_t k, std::uint64_t seed,
                             const Matrix<float>& calibration) {
  require(k >= 1 && k <= d_s, "init_params: k must satisfy 1 <= k <= d_s");
  SaeParams p(d_l, d_s, k);
  Rng rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d_l));
  for (auto& w : p.w_enc.data()) w = static_cast<float>(rng.normal() * sd);
  p.decoder = p.w_enc;
  if (calibration.rows() > 0) {
    require(calibration.cols() == d_l, "init_params: calibration width != d_l");
    for (std::size_t i = 0; i < d_l; ++i) {
      double acc = 0.0;
      for (std::size_t r = 0; r < calibration.rows(); ++r) acc += calibration(r, i);
      p.b_pre[i] = static_cast<float>(acc / static_cast<double>(calibration.rows()));
    }
  }
  return p;
}

// ---- data ---------------------------------------------------------------------

// Flat view over the images of several shards, visited in a seeded
// per-epoch permutation so that the order is a pure function of (seed, step).
class ShardSampler {
 public:
  ShardSampler(std::span<const ActivationShard> shards, std::uint64_t seed) : shards_(shards), seed_(seed) {
    for (std::size_t s = 0; s < shards.size(); ++s)
      for (std::size_t i = 0; i < shards[s].n_images(); ++i) images_.push_back({s, i});
  }

  std::size_t n_images() const { return images_.size(); }
  std::size_t tokens_per_image() const { return shards_.empty() ? 0 : shards_.front().tokens_per_image(); }

  // Tokens of the image at global position `pos` of the infinite epoch stream.
  void append_image(std::uint64_t pos, Matrix<float>& out, std::size_t& row) {
    const std::uint64_t epoch = pos / images_.size();
    if (epoch != perm_epoch_ || perm_.empty()) {
      Rng rng(seed_ ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
      perm_ = rng.sample_without_replacement(images_.size(), images_.size());
      perm_epoch_ = epoch;
    }
    const auto [s, i] = images_[perm_[pos % images_.size()]];
    const auto& shard = shards_[s];
    for (std::size_t t = 0; t < shard.tokens_per_image(); ++t, ++row) {
      const auto tok = shard.token(i, t);
      std::copy(tok.begin(), tok.end(), out.row(row).begin());
    }
  }

 private:
  std::span<const ActivationShard> shards_;
  std::uint64_t seed_;
  std::vector<std::pair<std::size_t, std::size_t>> images_;
  std::vector<std::size_t> perm_;
  std::uint64_t perm_epoch_ = 0;
};

// ---- training loop --------------------------------------------------------------

struct TrainState {
  SaeParams params;
  AdamState adam;
  DeadTracker dead;
  std::uint64_t step = 0;
};

inline TrainState initial_state(std::span<const ActivationShard> shards, const TrainConfig& cfg) {
  cfg.validate();
  require(!shards.empty() && shards.front().n_images() > 0, "train: no activation data");
  const std::uint32_t dl = shards.front().d_l;
  for (const auto& s : shards) {
    require(s.d_l == dl, "train: shards disagree on d_l");
    require(s.tokens_per_image() == shards.front().tokens_per_image(), "train: shards disagree on T");
  }
  ShardSampler sampler(shards, cfg.seed);
  const std::size_t per_image = sampler.tokens_per_image();
  const std::size_t n_cal_images =
      std::min<std::size_t>(sampler.n_images(), std::max<std::size_t>(1, cfg.calibration_tokens / per_image));
  Matrix<float> cal(n_cal_images * per_image, dl);
  std::size_t row = 0;
  for (std::size_t i = 0; i < n_cal_images; ++i) sampler.append_image(i, cal, row);
  TrainState st;
  st.params = init_params(dl, cfg.d_s, cfg.k, cfg.seed, cal);
  st.adam = AdamState(dl, cfg.d_s);
  st.dead = DeadTracker(cfg.d_s, cfg.dead_token_threshold);
  return st;
}

using MetricsSink = std::function<void(const TrainMetrics&)>;

// Advance `state` to `cfg.steps` total steps. Each step accumulates
// grad_accum_steps micro-batches of batch_size images; the loss is a mean
// over every token of the step, so accumulation equals one big batch. The
// dead set is frozen for the duration of a step.
inline std::vector<TrainMetrics> train_from(TrainState& state, std::span<const ActivationShard> shards,
                                            const TrainConfig& cfg, const MetricsSink& sink = {}) {
  cfg.validate();
  std::vector<TrainMetrics> series;
  if (state.step >= cfg.steps) return series;
  for (const auto& s : shards) require(s.d_l == state.params.d_l(), "train: shard d_l != params d_l");
  ShardSampler sampler(shards, cfg.seed);
  const std::size_t per_image = sampler.tokens_per_image();
  const std::size_t micro_tokens = std::size_t{cfg.batch_size} * per_image;
  const std::size_t step_images = std::size_t{cfg.batch_size} * cfg.grad_accum_steps;
  const double scale = 1.0 / static_cast<double>(micro_tokens * cfg.grad_accum_steps);
  const std::size_t dl = state.params.d_l(), ds = state.params.d_s();
  Matrix<float> micro(micro_tokens, dl);
  std::vector<std::vector<std::uint32_t>> active_sets(micro_tokens * cfg.grad_accum_steps);

  while (state.step < cfg.steps) {
    const auto dead_mask = state.dead.dead_mask();
    LossOptions opt{dead_mask, cfg.effective_aux_k(), cfg.aux_coef};
    SaeGradients grads = zero_gradients_like(dl, ds);
    LossParts sums;
    std::size_t token_no = 0;
    for (std::uint32_t a = 0; a < cfg.grad_accum_steps; ++a) {
      std::size_t row = 0;
      for (std::size_t b = 0; b < cfg.batch_size; ++b)
        sampler.append_image(state.step * step_images + a * cfg.batch_size + b, micro, row);
      for (std::size_t r = 0; r < micro_tokens; ++r, ++token_no)
        detail::accumulate_token(std::span<const float>(micro.row(r)), state.params, opt, scale, sums, &grads, &active_sets[token_no]);
    }
    if (!std::isfinite(sums.recon) || !std::isfinite(sums.aux))
      throw TrainingDiverged("non-finite loss at step " + std::to_string(state.step + 1));
    adam_step(state.params, grads, state.adam, cfg);
    state.dead.observe(active_sets);
    ++state.step;

    std::size_t active_total = 0;
    for (const auto& s : active_sets) active_total += s.size();
    TrainMetrics m;
    m.step = state.step;
    m.recon_loss = sums.recon;
    m.aux_loss = sums.aux;
    m.dead_count = state.dead.dead_count();
    m.fraction_active_mean =
        static_cast<double>(active_total) / (static_cast<double>(active_sets.size()) * static_cast<double>(ds));
    series.push_back(m);
    if (sink) sink(m);
  }
  return series;
}

struct TrainResult {
  SaeParams params;
  std::vector<TrainMetrics> metrics;
  TrainState state;
};

inline TrainResult train(std::span<const ActivationShard> shards, const TrainConfig& cfg, const MetricsSink& sink = {}) {
  auto state = initial_state(shards, cfg);
  auto metrics = train_from(state, shards, cfg, sink);
  return {state.params, std::move(metrics), std::move(state)};
}

inline TrainResult train(const std::vector<ActivationShard>& shards, const TrainConfig& cfg,
                         const MetricsSink& sink = {}) {
  return train(std::span<const ActivationShard>(shards), cfg, sink);
}

// ---- synthetic planted-dictionary corpus --------------------------------------------

struct SyntheticCorpus {
  std::vector<ActivationShard> shards;  // 1x1 grid: each "image" is one token
  Matrix<float> dictionary;              // [d_s_true x d_l], unit-norm rows
  std::vector<std::vector<std::uint32_t>> supports;  // per token, sorted
};

// x = D s + sigma * noise, s with `sparsity` positive coefficients in
// [0.5, 1.5) on a uniformly random support.
inline SyntheticCorpus synth_gen(std::size_t d_l, std::size_t d_s_true, std::size_t sparsity, std::size_t n_tokens,
                                 double noise_sigma, std::uint64_t seed, std::size_t tokens_per_shard = 65536) {
  require(sparsity <= d_s_true, "synth_gen: sparsity must be <= d_s_true");
  require(d_l >= 1 && d_s_true >= 1 && tokens_per_shard >= 1, "synth_gen: dims must be positive");
  Rng rng(seed);
  SyntheticCorpus out;
  out.dictionary = Matrix<float>(d_s_true, d_l);
  for (std::size_t j = 0; j < d_s_true; ++j) {
    std::vector<double> col(d_l);
    double norm = 0.0;
    do {
      for (auto& c : col) c = rng.normal();
      norm = std::sqrt(squared_norm(std::span<const double>(col)));
    } while (norm == 0.0);
    for (std::size_t i = 0; i < d_l; ++i) out.dictionary(j, i) = static_cast<float>(col[i] / norm);
  }
  out.supports.reserve(n_tokens);
  std::vector<float> x(d_l);
  for (std::size_t t = 0; t < n_tokens; ++t) {
    if (t % tokens_per_shard == 0) out.shards.emplace_back(Grid{1, 1}, static_cast<std::uint32_t>(d_l));
    auto support = rng.sample_without_replacement(d_s_true, sparsity);
    std::sort(support.begin(), support.end());
    std::vector<double> acc(d_l, 0.0);
    for (auto j : support) {
      const double coef = rng.uniform(0.5, 1.5);
      const auto atom = out.dictionary.row(j);
      for (std::size_t i = 0; i < d_l; ++i) acc[i] += coef * atom[i];
    }
    for (std::size_t i = 0; i < d_l; ++i) {
      const double noise = noise_sigma > 0.0 ? noise_sigma * rng.normal() : 0.0;
      x[i] = static_cast<float>(acc[i] + noise);
    }
    out.shards.back().append("tok" + std::to_string(t), x);
    out.supports.emplace_back(support.begin(), support.end());
  }
  return out;
}

// Mean over planted atoms of the best |cosine| with any learned decoder row.
inline double mean_max_cosine(const Matrix<float>& truth, const SaeParams& params) {
  require(truth.cols() == params.d_l(), "mean_max_cosine: dimension mismatch");
  double total = 0.0;
  for (std::size_t a = 0; a < truth.rows(); ++a) {
    double best = -1.0;
    for (std::size_t j = 0; j < params.d_s(); ++j) best = std::max(best, cosine(truth.row(a), params.atom(j)));
    total += best;
  }
  return truth.rows() ? total / static_cast<double>(truth.rows()) : 0.0;
}

// ---- metrics file and checkpoints ------------------------------------------------

inline std::string metrics_header() { return "step\trecon_loss\taux_loss\tdead_count\tfraction_active_mean\n"; }

inline std::string metrics_line(const TrainMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%llu\t%.9g\t%.9g\t%llu\t%.9g\n", static_cast<unsigned long long>(m.step),
                m.recon_loss, m.aux_loss, static_cast<unsigned long long>(m.dead_count), m.fraction_active_mean);
  return buf;
}

inline constexpr char kOptimMagic[8] = {'S', 'A', 'E', 'O', 'P', 'T', '1', '\0'};
inline constexpr std::uint32_t kOptimVersion = 1;

// Optimizer sidecar: same envelope as the parameter file (magic, version,
// dims) followed by the step counter, Adam moments (f64, parameter order)
// and dead-latent counters.
inline void save_checkpoint(const TrainState& st, const std::filesystem::path& params_path,
                            const std::filesystem::path& optim_path) {
  save_params(st.params, params_path);
  io::ByteWriter w;
  w.put_bytes(std::string_view(kOptimMagic, 8));
  w.put<std::uint32_t>(kOptimVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(st.params.d_l()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(st.params.d_s()));
  w.put<std::uint32_t>(st.params.k);
  w.put<std::uint64_t>(st.step);
  w.put<std::uint64_t>(st.adam.t);
  auto m = st.adam.m;
  auto v = st.adam.v;
  for_each_tensor([&](auto& a) { w.put_all<double>(a); }, m);
  for_each_tensor([&](auto& a) { w.put_all<double>(a); }, v);
  w.put<std::uint64_t>(st.dead.threshold());
  w.put_all<std::uint64_t>(st.dead.counters());
  w.write_file(optim_path);
}

inline TrainState load_checkpoint(const std::filesystem::path& params_path, const std::filesystem::path& optim_path) {
  TrainState st;
  st.params = load_params(params_path);
  const auto bytes = io::read_file(optim_path);
  io::ByteReader r(bytes, optim_path.string());
  r.expect_magic(std::string_view(kOptimMagic, 8));
  r.expect_version(kOptimVersion);
  const auto dl = r.get<std::uint32_t>(), ds = r.get<std::uint32_t>(), k = r.get<std::uint32_t>();
  if (dl != st.params.d_l() || ds != st.params.d_s() || k != st.params.k)
    throw FormatError(optim_path.string() + ": optimizer state dims do not match parameters", 12);
  st.step = r.get<std::uint64_t>();
  st.adam = AdamState(dl, ds);
  st.adam.t = r.get<std::uint64_t>();
  for_each_tensor([&](auto& a) { r.get_all<double>(std::span(a)); }, st.adam.m);
  for_each_tensor([&](auto& a) { r.get_all<double>(std::span(a)); }, st.adam.v);
  const auto threshold = r.get<std::uint64_t>();
  st.dead = DeadTracker(ds, threshold);
  r.get_all<std::uint64_t>(std::span(st.dead.counters()));
  if (r.remaining() != 0) throw FormatError(optim_path.string() + ": trailing bytes", r.offset());
  return st;
}

}  // namespace msae
