#include <gtest/gtest.h>

#include <condition_variable>
#include <filesystem>
#include <mutex>
#include <thread>

#include "msae/exchange.hpp"
#include "oracles.hpp"

using namespace msae;
using namespace msae::exchange;

namespace {

struct PipePair {
  std::unique_ptr<FdChannel> client, server;
  PipePair() {
    int a[2], b[2];
    EXPECT_EQ(::pipe(a), 0);
    EXPECT_EQ(::pipe(b), 0);
    client = std::make_unique<FdChannel>(b[0], a[1]);
    server = std::make_unique<FdChannel>(a[0], b[1]);
  }
};

std::string write_scene(const std::string& name, std::uint64_t seed) {
  const auto path = std::filesystem::temp_directory_path() / ("msae_exchange_" + name + ".png");
  save_png(toy::make_scene(name, seed).image, path);
  return path.string();
}

}  // namespace

TEST(ExchangeFraming, FloatBlocksRoundTrip) {
  std::vector<float> v{1.5f, -2.25f, 0.0f, 3e-8f};
  EXPECT_EQ(unpack_f32(pack_f32(std::span<const float>(v))), v);
  EXPECT_THROW(unpack_f32(std::string(5, '\0')), ParseError);
  // Little-endian on the wire.
  std::vector<float> one{1.0f};
  EXPECT_EQ(pack_f32(std::span<const float>(one)), std::string("\x00\x00\x80\x3f", 4));
}

TEST(ExchangeFraming, HeaderLineThenBlock) {
  PipePair p;
  std::vector<float> v{1.0f, 2.0f};
  send(*p.client, {{"type", "COMPLETE"}, {"rows", 1}, {"cols", 2}}, pack_f32(std::span<const float>(v)));
  const auto m = receive(*p.server);
  ASSERT_TRUE(m);
  EXPECT_EQ(m->header.at("type"), "COMPLETE");
  EXPECT_EQ(m->header.at("bytes"), 8);
  EXPECT_EQ(block_matrix(*m).data(), (std::vector<double>{1.0, 2.0}));
}

TEST(ExchangeHost, MatchesLocalHostOverPipes) {
  const auto local = make_toy_mlp_host(8, 21);
  PipePair p;
  std::thread server([&] { serve(*local, *p.server, resolve_toy_input, 16); });
  {
    ExchangeHost remote(std::move(p.client));
    EXPECT_EQ(remote.d_model(), 8u);
    EXPECT_EQ(remote.vocab_size(), local->vocab_size());
    EXPECT_EQ(remote.image_tokens(), 16u);

    nlohmann::json ref{{"image", write_scene("a", 3)}, {"text", "what is in the image"}};
    HostInput in;
    in.ref = ref.dump();
    const auto x_remote = remote.run(in);
    const auto x_local = local->run(resolve_toy_input(in.ref));
    EXPECT_EQ(x_remote, x_local);
    EXPECT_EQ(remote.token_ranges(in), local->token_ranges(resolve_toy_input(in.ref)));

    const auto xd = to_double(x_local);
    const auto u_remote = remote.complete(xd);
    const auto u_local = local->complete(xd);
    ASSERT_EQ(u_remote.size(), u_local.size());
    for (std::size_t i = 0; i < u_local.size(); ++i) EXPECT_EQ(u_remote[i], static_cast<float>(u_local[i]));

    const auto g_remote = remote.vjp(xd, 3, 4);
    const auto g_local = local->vjp(xd, 3, 4);
    for (std::size_t i = 0; i < g_local.size(); ++i)
      EXPECT_EQ(g_remote.data()[i], static_cast<float>(g_local.data()[i]));

    // Hooked forward works through the remote host too.
    const auto sae = oracle::random_params<float>(8, 16, 3, 1);
    const auto r = hooked_forward(remote, in, sae);
    EXPECT_EQ(r.states.size(), x_local.rows());
  }
  server.join();
}

TEST(ExchangeHost, ServerErrorsSurfaceAsClientErrors) {
  const auto local = make_toy_linear_host(8, 2);
  PipePair p;
  std::thread server([&] { serve(*local, *p.server, resolve_toy_input, 16); });
  {
    ExchangeHost remote(std::move(p.client));
    HostInput in;
    in.ref = "not json";
    EXPECT_THROW(remote.run(in), ClientError);
    // Connection still usable afterwards.
    in.ref = R"({"text_ids": [2, 3]})";
    EXPECT_EQ(remote.run(in).rows(), 2u);
  }
  server.join();
}

TEST(ExchangeHost, UnixSocketTransport) {
  const auto local = make_toy_linear_host(6, 2);
  const auto path = (std::filesystem::temp_directory_path() / "msae_exchange_test.sock").string();
  std::mutex m;
  std::condition_variable cv;
  bool ready = false;
  std::thread server([&] {
    listen_unix(path, *local, resolve_toy_input, 16, 1, [&] {
      std::lock_guard l(m);
      ready = true;
      cv.notify_all();
    });
  });
  {
    std::unique_lock l(m);
    cv.wait(l, [&] { return ready; });
  }
  {
    ExchangeHost remote(connect_unix(path));
    HostInput in;
    in.ref = R"({"text": "how do you feel"})";
    EXPECT_EQ(remote.run(in), local->run(resolve_toy_input(in.ref)));
  }
  server.join();
}
