#include <gtest/gtest.h>

#include <filesystem>

#include "msae/activation_store.hpp"
#include "oracles.hpp"

using namespace msae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("msae_store_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ActivationShard random_shard(std::size_t n, Grid g, std::uint32_t d_l, std::uint64_t seed, const std::string& prefix) {
  Rng rng(seed);
  ActivationShard s(g, d_l);
  std::vector<float> img(g.tokens() * d_l);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : img) v = static_cast<float>(rng.normal());
    s.append(prefix + std::to_string(i), img);
  }
  return s;
}

// Mean per image from a dense per-token re-encode, then a full sort.
std::vector<RankedImage> top_images_by_sort(const std::vector<ActivationShard>& shards, const SaeParams& p,
                                            std::uint32_t j, std::size_t n) {
  std::vector<RankedImage> all;
  for (const auto& s : shards)
    for (std::size_t i = 0; i < s.n_images(); ++i) {
      double acc = 0.0;
      for (std::size_t t = 0; t < s.tokens_per_image(); ++t) acc += encode(s.token(i, t), p).value(j);
      const double mean = acc / static_cast<double>(s.tokens_per_image());
      if (mean > 0.0) all.push_back({s.image_ids[i], mean});
    }
  std::sort(all.begin(), all.end(), [](const RankedImage& a, const RankedImage& b) {
    if (a.mean != b.mean) return a.mean > b.mean;
    return a.image_id < b.image_id;
  });
  if (all.size() > n) all.resize(n);
  return all;
}

}  // namespace

TEST(Shard, RoundTripIsBitExact) {
  const auto dir = temp_dir("shard");
  const auto s = random_shard(5, {2, 3}, 7, 1, "img_");
  write_shard(s, dir / "a.act");
  EXPECT_TRUE(read_shard(dir / "a.act") == s);
  EXPECT_EQ(serialize_shard(read_shard(dir / "a.act")), serialize_shard(s));
}

TEST(Shard, CorruptionRejected) {
  const auto s = random_shard(3, {2, 2}, 4, 2, "x");
  const auto good = serialize_shard(s);
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_shard(bad_magic, "m"), FormatError);
  auto bad_version = good;
  bad_version[8] = 9;
  EXPECT_THROW(parse_shard(bad_version, "v"), FormatError);
  auto bad_header = good;
  bad_header[20] ^= 1;  // T
  EXPECT_THROW(parse_shard(bad_header, "h"), FormatError);
  auto truncated = good;
  truncated.resize(good.size() - 10);
  EXPECT_THROW(parse_shard(truncated, "t"), FormatError);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(parse_shard(trailing, "x"), FormatError);
}

TEST(Shard, AppendChecksSize) {
  ActivationShard s({2, 2}, 3);
  std::vector<float> wrong(5);
  EXPECT_THROW(s.append("a", wrong), InvalidArgument);
}

TEST(SparseCache, DensifiedEqualsDirectEncode) {
  const Grid g{3, 3};
  const std::vector<ActivationShard> shards{random_shard(6, g, 8, 3, "a"), random_shard(4, g, 8, 4, "b")};
  const auto p = oracle::random_params<float>(8, 24, 3, 5);
  const auto cache = build_sparse_cache(shards, p);
  ASSERT_EQ(cache.n_images(), 10u);
  std::size_t img = 0;
  for (const auto& s : shards)
    for (std::size_t i = 0; i < s.n_images(); ++i, ++img)
      for (std::size_t t = 0; t < g.tokens(); ++t) {
        EXPECT_EQ(densify_token(cache, img, t), encode(s.token(i, t), p).dense(p.d_s()));
        EXPECT_LE(cache.token(img, t).indices.size(), p.k);
      }
}

TEST(SparseCache, RoundTripAndCorruption) {
  const auto dir = temp_dir("cache");
  const std::vector<ActivationShard> shards{random_shard(5, {2, 2}, 6, 7, "c")};
  const auto cache = build_sparse_cache(shards, oracle::random_params<float>(6, 16, 4, 8));
  write_cache(cache, dir / "f.cache");
  const auto back = read_cache(dir / "f.cache");
  EXPECT_TRUE(back == cache);
  EXPECT_EQ(serialize_cache(back), serialize_cache(cache));

  const auto good = serialize_cache(cache);
  auto bad = good;
  bad[28] ^= 0xff;  // k
  EXPECT_THROW(parse_cache(bad, "k"), FormatError);
  bad = good;
  bad[0] = 'Z';
  EXPECT_THROW(parse_cache(bad, "magic"), FormatError);
  bad = good;
  bad.resize(kCacheHeaderLen + 10);
  EXPECT_THROW(parse_cache(bad, "short"), FormatError);

  // Count field larger than k in the first record.
  bad = good;
  bad[kCacheHeaderLen + 4] = 0xff;
  EXPECT_THROW(parse_cache(bad, "count"), FormatError);
}

TEST(SparseCache, RejectsMismatchedShards) {
  const std::vector<ActivationShard> shards{random_shard(2, {2, 2}, 6, 1, "a"), random_shard(2, {2, 3}, 6, 2, "b")};
  EXPECT_THROW(build_sparse_cache(shards, oracle::random_params<float>(6, 8, 2, 1)), InvalidArgument);
  const std::vector<ActivationShard> wide{random_shard(2, {2, 2}, 5, 1, "a")};
  EXPECT_THROW(build_sparse_cache(wide, oracle::random_params<float>(6, 8, 2, 1)), InvalidArgument);
}

TEST(TopImages, MatchesFullSortOracle) {
  const Grid g{2, 2};
  const std::vector<ActivationShard> shards{random_shard(30, g, 6, 11, "p"), random_shard(25, g, 6, 12, "q")};
  const auto p = oracle::random_params<float>(6, 20, 3, 13);
  const auto cache = build_sparse_cache(shards, p);
  for (std::uint32_t j = 0; j < p.d_s(); ++j)
    for (std::size_t n : {1u, 5u, 100u}) EXPECT_EQ(top_images(cache, j, n).top_images, top_images_by_sort(shards, p, j, n));
}

TEST(TopImages, TiesBrokenByImageId) {
  SparseFeatureCache c;
  c.T = 1, c.d_s = 2, c.k = 1, c.grid = {1, 1};
  for (const auto* id : {"b", "a", "c"}) {
    c.image_ids.push_back(id);
    const std::uint32_t idx = 0;
    const float v = 2.0f;
    c.push_token(std::span(&idx, 1), std::span(&v, 1));
  }
  const auto top = top_images(c, 0, 2).top_images;
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].image_id, "a");
  EXPECT_EQ(top[1].image_id, "b");
  EXPECT_TRUE(top_images(c, 1, 3).top_images.empty());
}

TEST(AllFeatureMeans, AgreesWithMeanActivation) {
  const std::vector<ActivationShard> shards{random_shard(12, {2, 2}, 5, 21, "m")};
  const auto cache = build_sparse_cache(shards, oracle::random_params<float>(5, 10, 2, 22));
  const auto all = all_feature_means(cache);
  for (std::uint32_t j = 0; j < cache.d_s; ++j) {
    const auto m = mean_activation(cache, j);
    std::size_t nz = 0;
    for (double v : m) nz += v > 0.0;
    ASSERT_EQ(all[j].size(), nz);
    for (const auto& [i, mean] : all[j]) EXPECT_NEAR(mean, m[i], 1e-12);
  }
}

TEST(Heatmap, LaysTokensOutRowMajor) {
  SparseFeatureCache c;
  c.T = 6, c.d_s = 3, c.k = 1, c.grid = {2, 3};
  c.image_ids = {"img"};
  for (std::uint32_t t = 0; t < 6; ++t) {
    const std::uint32_t idx = t % 2 ? 1 : 2;
    const float v = static_cast<float>(t + 1);
    c.push_token(std::span(&idx, 1), std::span(&v, 1));
  }
  const auto h = token_heatmap(c, "img", 1);
  EXPECT_EQ(h(0, 1), 2.0f);
  EXPECT_EQ(h(1, 0), 4.0f);
  EXPECT_EQ(h(1, 2), 6.0f);
  EXPECT_EQ(h(0, 0), 0.0f);
  EXPECT_THROW(token_heatmap(c, "missing", 1), NotFound);
}

TEST(Manifest, RelativePathsResolveAgainstManifestDir) {
  const auto dir = temp_dir("manifest");
  write_manifest({{"a", "a.png"}, {"b", "/abs/b.png"}}, dir / "m.jsonl");
  const auto back = read_manifest(dir / "m.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(resolve_manifest_path(dir / "m.jsonl", back[0].path), dir / "a.png");
  EXPECT_EQ(resolve_manifest_path(dir / "m.jsonl", back[1].path), fs::path("/abs/b.png"));
}
