#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

#include "msae/trainer.hpp"
#include "oracles.hpp"

using namespace msae;

namespace {

// Scalar-by-scalar loss: plain loops over the conventional matrices.
std::pair<double, double> loop_loss(const Matrix<double>& xs, const BasicSaeParams<double>& p,
                                    const std::vector<std::uint8_t>& dead, std::size_t aux_k) {
  double recon = 0, aux = 0;
  for (std::size_t r = 0; r < xs.rows(); ++r) {
    std::vector<double> x(xs.row(r).begin(), xs.row(r).end());
    const auto z = oracle::dense_preactivations(x, p);
    const auto act = oracle::topk_by_sort(z, p.k);
    std::vector<double> zs(p.d_s(), 0.0);
    for (auto j : act) zs[j] = z[j];
    const auto xh = oracle::dense_decode(zs, p);
    std::vector<double> e(p.d_l());
    for (std::size_t i = 0; i < p.d_l(); ++i) {
      recon += (x[i] - xh[i]) * (x[i] - xh[i]);
      e[i] = x[i] - xh[i];
    }
    std::vector<double> dz(p.d_s(), 0.0);
    bool any = false;
    for (std::size_t j = 0; j < p.d_s(); ++j)
      if (dead[j] && z[j] > 0) dz[j] = z[j], any = true;
    if (!any) continue;
    const auto aux_act = oracle::topk_by_sort(dz, aux_k);
    for (std::size_t i = 0; i < p.d_l(); ++i) {
      double ea = 0;
      for (auto j : aux_act) ea += p.w_dec(i, j) * z[j];
      aux += (e[i] - ea) * (e[i] - ea);
    }
  }
  return {recon / xs.rows(), aux / xs.rows()};
}

Matrix<double> random_batch(std::size_t n, std::size_t d, Rng& rng) {
  Matrix<double> m(n, d);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

std::vector<ActivationShard> small_corpus(std::uint64_t seed, std::size_t n = 4000) {
  return synth_gen(16, 32, 3, n, 0.01, seed, 1000).shards;
}

}  // namespace

TEST(TotalLoss, PerfectReconstructionIsZero) {
  SaeParams p(2, 2, 2);
  p.w_enc(0, 0) = p.w_enc(1, 1) = 1.0f;
  p.decoder = p.w_enc;
  Matrix<float> x(2, 2, std::vector<float>{1.0f, 2.0f, 0.5f, 3.0f});
  EXPECT_EQ(total_loss(x, p).recon, 0.0);
}

TEST(TotalLoss, NoDeadLatentsMeansNoAux) {
  const auto p = oracle::random_params<float>(3, 4, 2, 3);
  Rng rng(1);
  const auto x = random_batch(5, 3, rng).cast<float>();
  std::vector<std::uint8_t> dead(4, 0);
  EXPECT_EQ(total_loss(x, p, LossOptions{dead, 4, 1.0 / 32}).aux, 0.0);
  EXPECT_EQ(total_loss(x, p).aux, 0.0);
}

TEST(TotalLoss, EmptyBatchRejected) {
  const auto p = oracle::random_params<float>(3, 4, 2, 3);
  EXPECT_THROW(total_loss(Matrix<float>(0, 3), p), InvalidArgument);
}

TEST(TotalLoss, TwoTokenHandStateMatchesLoopOracle) {
  const auto p = oracle::random_params<double>(3, 4, 2, 17);
  Matrix<double> x(2, 3, std::vector<double>{0.3, -1.2, 0.8, 1.5, 0.1, -0.4});
  std::vector<std::uint8_t> dead{0, 1, 0, 1};
  const auto got = total_loss(x, p, LossOptions{dead, 2, 1.0 / 32});
  const auto [recon, aux] = loop_loss(x, p, dead, 2);
  EXPECT_NEAR(got.recon, recon, 1e-12);
  EXPECT_NEAR(got.aux, aux, 1e-12);
}

TEST(TotalLoss, RandomInstancesMatchLoopOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto p = oracle::random_params<double>(4, 7, 1 + std::uint32_t(rng.below(4)), 40 + trial);
    const auto x = random_batch(6, 4, rng);
    std::vector<std::uint8_t> dead(7);
    for (auto& d : dead) d = rng.below(2);
    const auto got = total_loss(x, p, LossOptions{dead, 3, 1.0 / 32});
    const auto [recon, aux] = loop_loss(x, p, dead, 3);
    EXPECT_NEAR(got.recon, recon, 1e-10);
    EXPECT_NEAR(got.aux, aux, 1e-10);
  }
}

// Every parameter of a small double-precision instance against central
// differences of total_loss, skipping probes that flip an active set.
TEST(Gradients, MatchFiniteDifferences) {
  Rng rng(99);
  int checked = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto p = oracle::random_params<double>(4, 6, 2, 900 + trial);
    const auto x = random_batch(3, 4, rng);
    std::vector<std::uint8_t> dead(6);
    for (auto& d : dead) d = rng.below(2);
    const LossOptions opt{dead, 2, 0.5};
    SaeGradients g = zero_gradients_like(4, 6);
    total_loss(x, p, opt, &g);

    auto probe = [&](std::vector<double>& theta, const std::vector<double>& grad) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double orig = theta[i], h = 1e-6;
        theta[i] = orig + h;
        const double fp = total_loss(x, p, opt).total(opt.aux_coef);
        theta[i] = orig - h;
        const double fm = total_loss(x, p, opt).total(opt.aux_coef);
        theta[i] = orig;
        const double fd = (fp - fm) / (2 * h);
        if (std::abs(fd) < 1e-7 && std::abs(grad[i]) < 1e-7) continue;
        EXPECT_LT(oracle::rel_err(grad[i], fd, 1e-6), 1e-3) << "index " << i;
        ++checked;
      }
    };
    probe(p.w_enc.data(), g.w_enc.data());
    probe(p.b_pre, g.b_pre);
    probe(p.b_enc, g.b_enc);
    probe(p.decoder.data(), g.decoder.data());
    probe(p.b_dec, g.b_dec);
  }
  EXPECT_GT(checked, 200);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  auto p = oracle::random_params<float>(3, 4, 2, 2);
  const auto before = p;
  AdamState st(3, 4);
  TrainConfig cfg;
  cfg.d_s = 4;
  cfg.k = 2;
  adam_step(p, zero_gradients_like(3, 4), st, cfg);
  EXPECT_TRUE(p == before);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, ScalarFirstStep) {
  std::vector<double> theta{1.0}, g{1.0}, m{0.0}, v{0.0};
  TrainConfig cfg;
  cfg.lr = 0.1;
  adam_update(std::span(theta), std::span<const double>(g), std::span(m), std::span(v), cfg, 1);
  // m_hat = 1, v_hat = 1 -> theta = 1 - 0.1 / (1 + 1e-8)
  EXPECT_NEAR(theta[0], 0.9, 1e-8);
}

TEST(Adam, NanGradientDiverges) {
  std::vector<double> theta{1.0}, g{std::nan("")}, m{0.0}, v{0.0};
  TrainConfig cfg;
  EXPECT_THROW(adam_update(std::span(theta), std::span<const double>(g), std::span(m), std::span(v), cfg, 1),
               TrainingDiverged);
}

TEST(DeadTracker, ActiveResetsCounter) {
  DeadTracker d(3, 10);
  std::vector<std::vector<std::uint32_t>> none(5);
  d.observe(none);
  EXPECT_EQ(d.counters()[1], 5u);
  std::vector<std::vector<std::uint32_t>> one{{1}};
  d.observe(one);
  EXPECT_EQ(d.counters()[1], 0u);
  EXPECT_EQ(d.counters()[0], 6u);
}

TEST(DeadTracker, ThresholdBoundary) {
  DeadTracker d(2, 10);
  std::vector<std::vector<std::uint32_t>> nine(9, std::vector<std::uint32_t>{0});
  nine[0] = {1};
  d.observe(std::vector<std::vector<std::uint32_t>>{{1}});
  d.observe(std::vector<std::vector<std::uint32_t>>(9, std::vector<std::uint32_t>{0}));
  EXPECT_FALSE(d.is_dead(1));
  d.observe(std::vector<std::vector<std::uint32_t>>{{0}});
  EXPECT_TRUE(d.is_dead(1));
  EXPECT_FALSE(d.is_dead(0));
  EXPECT_EQ(d.dead_count(), 1u);
}

TEST(DeadTracker, MatchesHistoryReplay) {
  Rng rng(7);
  const std::size_t ds = 12;
  const std::uint64_t threshold = 15;
  DeadTracker d(ds, threshold);
  std::vector<std::vector<std::uint32_t>> history;
  for (int batch = 0; batch < 40; ++batch) {
    std::vector<std::vector<std::uint32_t>> sets(1 + rng.below(6));
    for (auto& s : sets) {
      for (std::uint32_t j = 0; j < ds; ++j)
        if (rng.uniform() < 0.04) s.push_back(j);
      history.push_back(s);
    }
    d.observe(sets);
    for (std::uint32_t j = 0; j < ds; ++j) {
      // Replay: count trailing tokens without j. Features never seen count from 0.
      std::uint64_t run = 0;
      for (auto it = history.rbegin(); it != history.rend(); ++it) {
        if (std::find(it->begin(), it->end(), j) != it->end()) break;
        ++run;
      }
      EXPECT_EQ(d.is_dead(j), run >= threshold) << "feature " << j << " batch " << batch;
    }
    for (auto j : sets.back()) EXPECT_FALSE(d.is_dead(j));
    EXPECT_LE(d.dead_count(), ds);
  }
}

TEST(SynthGen, NoiselessSingleSparsityIsScaledColumn) {
  const auto c = synth_gen(8, 5, 1, 50, 0.0, 3);
  for (std::size_t t = 0; t < 50; ++t) {
    const auto x = c.shards[0].token(t);
    ASSERT_EQ(c.supports[t].size(), 1u);
    const auto atom = c.dictionary.row(c.supports[t][0]);
    EXPECT_GT(cosine(x, atom), 1.0 - 1e-6);
    EXPECT_GT(dot(x, atom), 0.0);
  }
}

TEST(SynthGen, DeterministicAndExactSparsity) {
  const auto a = synth_gen(8, 20, 4, 300, 0.01, 9, 100);
  const auto b = synth_gen(8, 20, 4, 300, 0.01, 9, 100);
  EXPECT_EQ(a.shards, b.shards);
  EXPECT_EQ(a.dictionary, b.dictionary);
  EXPECT_EQ(a.shards.size(), 3u);
  for (const auto& s : a.supports) {
    EXPECT_EQ(s.size(), 4u);
    EXPECT_EQ(std::set<std::uint32_t>(s.begin(), s.end()).size(), 4u);
  }
  for (std::size_t j = 0; j < 20; ++j) EXPECT_NEAR(squared_norm(a.dictionary.row(j)), 1.0, 1e-6);
}

TEST(Train, ZeroStepsReturnsInitialization) {
  const auto data = small_corpus(1, 200);
  TrainConfig cfg;
  cfg.d_s = 32;
  cfg.k = 3;
  cfg.steps = 0;
  const auto r = train(data, cfg);
  EXPECT_TRUE(r.metrics.empty());
  const auto init = initial_state(data, cfg);
  EXPECT_TRUE(r.params == init.params);
  // W_dec = W_enc^T at init.
  EXPECT_EQ(r.params.decoder, r.params.w_enc);
}

TEST(Train, DeterministicGivenSeed) {
  const auto data = small_corpus(2, 1000);
  TrainConfig cfg;
  cfg.d_s = 32;
  cfg.k = 3;
  cfg.steps = 20;
  cfg.seed = 5;
  cfg.dead_token_threshold = 64;
  const auto a = train(data, cfg);
  const auto b = train(data, cfg);
  EXPECT_TRUE(a.params == b.params);
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(a.metrics[i].recon_loss, b.metrics[i].recon_loss);
    EXPECT_EQ(a.metrics[i].dead_count, b.metrics[i].dead_count);
  }
}

TEST(Train, GradientAccumulationEqualsBigBatch) {
  const auto data = small_corpus(3, 2000);
  TrainConfig a;
  a.d_s = 32;
  a.k = 3;
  a.steps = 15;
  a.batch_size = 8;
  a.grad_accum_steps = 4;
  a.dead_token_threshold = 40;
  TrainConfig b = a;
  b.batch_size = 32;
  b.grad_accum_steps = 1;
  const auto ra = train(data, a);
  const auto rb = train(data, b);
  for (std::size_t i = 0; i < ra.params.decoder.size(); ++i)
    EXPECT_NEAR(ra.params.decoder.data()[i], rb.params.decoder.data()[i], 1e-5);
  for (std::size_t i = 0; i < ra.params.w_enc.size(); ++i)
    EXPECT_NEAR(ra.params.w_enc.data()[i], rb.params.w_enc.data()[i], 1e-5);
  for (std::size_t s = 0; s < ra.metrics.size(); ++s)
    EXPECT_NEAR(ra.metrics[s].recon_loss, rb.metrics[s].recon_loss, 1e-5);
}

TEST(Train, ReconLossTrendsDownOnPlantedData) {
  const auto data = small_corpus(4, 8000);
  TrainConfig cfg;
  cfg.d_s = 32;
  cfg.k = 3;
  cfg.steps = 1000;
  cfg.batch_size = 32;
  cfg.grad_accum_steps = 1;
  cfg.lr = 2e-3;
  cfg.dead_token_threshold = 2000;
  const auto r = train(data, cfg);
  // Smoothed: mean of consecutive 200-step windows must strictly decrease.
  std::vector<double> window_means;
  for (std::size_t w = 0; w + 200 <= r.metrics.size(); w += 200) {
    double acc = 0;
    for (std::size_t i = w; i < w + 200; ++i) acc += r.metrics[i].recon_loss;
    window_means.push_back(acc / 200);
  }
  ASSERT_EQ(window_means.size(), 5u);
  for (std::size_t i = 1; i < window_means.size(); ++i) EXPECT_LT(window_means[i], window_means[i - 1]);
  for (const auto& m : r.metrics) {
    EXPECT_GE(m.recon_loss, 0.0);
    EXPECT_GE(m.aux_loss, 0.0);
    EXPECT_LE(m.dead_count, 32u);
  }
}

TEST(Train, RejectsInconsistentShards) {
  auto data = small_corpus(5, 100);
  data.push_back(ActivationShard(Grid{1, 1}, 7));
  data.back().append("x", std::vector<float>(7, 0.0f));
  TrainConfig cfg;
  cfg.d_s = 32;
  cfg.k = 3;
  cfg.steps = 1;
  EXPECT_THROW(train(data, cfg), InvalidArgument);
}

TEST(Train, CheckpointResumeMatchesStraightRun) {
  const auto data = small_corpus(6, 1500);
  TrainConfig cfg;
  cfg.d_s = 32;
  cfg.k = 3;
  cfg.steps = 12;
  cfg.dead_token_threshold = 50;
  const auto straight = train(data, cfg);

  TrainConfig half = cfg;
  half.steps = 6;
  auto first = train(data, half);
  const auto dir = std::filesystem::temp_directory_path() / "msae_ckpt";
  save_checkpoint(first.state, dir / "p.bin", dir / "opt.bin");
  auto resumed = load_checkpoint(dir / "p.bin", dir / "opt.bin");
  EXPECT_EQ(resumed.step, 6u);
  train_from(resumed, data, cfg);
  EXPECT_TRUE(resumed.params == straight.params);
}

TEST(Train, MetricsLineFormat) {
  TrainMetrics m{3, 0.5, 0.25, 2, 0.125};
  EXPECT_EQ(metrics_line(m), "3\t0.5\t0.25\t2\t0.125\n");
  EXPECT_EQ(metrics_header(), "step\trecon_loss\taux_loss\tdead_count\tfraction_active_mean\n");
}
