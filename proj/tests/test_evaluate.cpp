#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <thread>

#include "msae/evaluate.hpp"
#include "oracles.hpp"

using namespace msae;

namespace {

Mask random_mask(std::uint32_t w, std::uint32_t h, Rng& rng, double p = 0.4) {
  Mask m(w, h);
  for (auto& b : m.bits) b = rng.uniform() < p;
  return m;
}

std::set<std::size_t> set_of(const Mask& m) {
  std::set<std::size_t> s;
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i]) s.insert(i);
  return s;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("msae_evaluate_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

class MapGrounding : public GroundingSource {
 public:
  std::map<std::string, std::vector<Mask>> by_image;
  std::optional<std::vector<Mask>> detections(const std::string& id, const std::string&) override {
    auto it = by_image.find(id);
    if (it == by_image.end()) return std::nullopt;
    return it->second;
  }
};

FeatureRecord refined_record(std::uint32_t j, const std::string& label, std::vector<std::string> ids,
                             std::vector<Mask> masks) {
  FeatureRecord r;
  r.feature_index = j;
  for (auto& id : ids) r.top_images.push_back({id, 1.0});
  r.masks = std::move(masks);
  r.heatmaps.assign(r.masks.size(), Matrix<float>(r.masks[0].height, r.masks[0].width));
  r.explanation = label;
  r.refined_label = label;
  return r;
}

}  // namespace

TEST(Iou, ClosedFormCases) {
  Mask a(4, 2), full(4, 2, true), empty(4, 2);
  for (std::uint32_t y = 0; y < 2; ++y)
    for (std::uint32_t x = 0; x < 2; ++x) a.set(x, y);
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, full), 0.5);
  Mask right(4, 2);
  for (std::uint32_t y = 0; y < 2; ++y)
    for (std::uint32_t x = 2; x < 4; ++x) right.set(x, y);
  EXPECT_EQ(iou(a, right), 0.0);
  EXPECT_EQ(iou(empty, empty), 0.0);
  EXPECT_THROW(iou(a, Mask(2, 4)), InvalidArgument);
}

TEST(Iou, Properties) {
  Rng rng(1);
  for (int t = 0; t < 300; ++t) {
    const auto a = random_mask(7, 5, rng), b = random_mask(7, 5, rng);
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    if (!a.empty()) {
      EXPECT_EQ(iou(a, a), 1.0);
    }
    // Set oracle.
    const auto sa = set_of(a), sb = set_of(b);
    std::set<std::size_t> i, u;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(i, i.end()));
    std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(u, u.end()));
    EXPECT_DOUBLE_EQ(v, u.empty() ? 0.0 : double(i.size()) / double(u.size()));
  }
}

TEST(Iou, MonotoneUnderGrowingIntersection) {
  // Fixed union U = a | b; moving cells of a \ b into b grows the intersection.
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    auto a = random_mask(6, 6, rng, 0.6);
    auto b = random_mask(6, 6, rng, 0.3);
    double prev = iou(a, b);
    for (std::size_t i = 0; i < a.bits.size(); ++i)
      if (a.bits[i] && !b.bits[i]) {
        b.bits[i] = 1;
        const double now = iou(a, b);
        EXPECT_GE(now, prev);
        prev = now;
      }
  }
}

TEST(CompositeMask, Basics) {
  Rng rng(3);
  const auto a = random_mask(5, 5, rng);
  EXPECT_EQ(composite_mask({a}), a);
  EXPECT_EQ(composite_mask({}), Mask());
  Mask left(4, 1), right(4, 1);
  left.set(0, 0), left.set(1, 0), right.set(3, 0);
  EXPECT_EQ(composite_mask({left, right}).count(), 3u);
  EXPECT_THROW(composite_mask({left, Mask(3, 1)}), InvalidArgument);
}

TEST(CompositeMask, AlgebraAndUnionOracle) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto a = random_mask(6, 4, rng), b = random_mask(6, 4, rng), c = random_mask(6, 4, rng);
    EXPECT_EQ(composite_mask({a, b}), composite_mask({b, a}));
    EXPECT_EQ(composite_mask({composite_mask({a, b}), c}), composite_mask({a, composite_mask({b, c})}));
    EXPECT_EQ(composite_mask({a, a}), a);
    auto sa = set_of(a), sb = set_of(b);
    sa.insert(sb.begin(), sb.end());
    EXPECT_EQ(set_of(composite_mask({a, b})), sa);
  }
}

TEST(Upsample, BlockReplicationPreservesGridIou) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto a = random_mask(4, 3, rng), b = random_mask(4, 3, rng);
    EXPECT_DOUBLE_EQ(iou(upsample(a, 64, 48), upsample(b, 64, 48)), iou(a, b));
  }
  Mask m(2, 2);
  m.set(1, 0);
  const auto up = upsample(m, 4, 4);
  EXPECT_EQ(up.bits, (std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0}));
  EXPECT_THROW(upsample(m, 5, 4), InvalidArgument);
}

TEST(MaskFiles, PackedRoundTripAndLayout) {
  Rng rng(6);
  const auto dir = temp_dir("masks");
  for (int t = 0; t < 10; ++t) {
    const auto m = random_mask(13, 3 + t, rng);
    write_mask(m, dir / "m.msk");
    EXPECT_EQ(read_mask(dir / "m.msk"), m);
    write_mask(m, dir / "m.pgm");
    EXPECT_EQ(read_mask(dir / "m.pgm"), m);
  }
  Mask m(3, 3);
  m.set(0, 0);
  m.set(2, 2);
  const auto bytes = serialize_mask(m);
  ASSERT_EQ(bytes.size(), 20u + 2u);
  EXPECT_EQ(bytes[20], 0x80);  // bit 0 is the MSB of the first byte
  EXPECT_EQ(bytes[21], 0x80);  // bit 8 is the MSB of the second byte
  auto bad = bytes;
  bad.pop_back();
  EXPECT_THROW(parse_mask(bad, "x"), FormatError);
  bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_mask(bad, "x"), FormatError);
}

TEST(MaskFiles, PgmThresholdAt128) {
  const std::string pgm = std::string("P5\n# comment\n4 1\n255\n") + char(0) + char(127) + char(128) + char(255);
  const auto m = parse_pgm_mask(std::span(reinterpret_cast<const std::uint8_t*>(pgm.data()), pgm.size()), "x");
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{0, 0, 1, 1}));
}

TEST(FeatureIou, IdenticalMasksScoreOne) {
  Rng rng(7);
  MapGrounding g;
  std::vector<Mask> masks;
  std::vector<std::string> ids;
  for (int i = 0; i < 5; ++i) {
    Mask m = random_mask(4, 4, rng, 0.5);
    m.set(0, 0);
    masks.push_back(m);
    ids.push_back("im" + std::to_string(i));
    g.by_image[ids.back()] = {upsample(m, 64, 64)};
  }
  EXPECT_DOUBLE_EQ(feature_iou(refined_record(1, "x", ids, masks), g), 1.0);
}

TEST(FeatureIou, HandComputedMeanWithSkipsAndComposites) {
  MapGrounding g;
  Mask act(2, 2);
  act.set(0, 0);  // top-left quadrant of a 4x4 image = 4 pixels
  Mask left(4, 4), top(4, 4);
  for (std::uint32_t y = 0; y < 4; ++y) left.set(0, y), left.set(1, y);
  for (std::uint32_t x = 0; x < 4; ++x) top.set(x, 0), top.set(x, 1);
  g.by_image["a"] = {left};       // IoU 4/8
  g.by_image["b"] = {left, top};  // union 12 px -> IoU 4/12
  // "c" has no grounding: skipped.
  const auto r = refined_record(1, "x", {"a", "b", "c"}, {act, act, act});
  EXPECT_DOUBLE_EQ(feature_iou(r, g), (0.5 + 1.0 / 3.0) / 2.0);
  MapGrounding none;
  EXPECT_THROW(feature_iou(r, none), ScoreUnavailable);
  auto unrefined = r;
  unrefined.refined_label.reset();
  EXPECT_THROW(feature_iou(unrefined, g), InvalidArgument);
}

TEST(FeatureIou, FileGroundingSource) {
  const auto dir = temp_dir("grounding");
  Mask a(4, 4), b(4, 4);
  a.set(0, 0);
  b.set(3, 3);
  write_mask(a, FileGroundingSource::path_for(dir, "Train tracks", "img.1", 0));
  write_mask(b, FileGroundingSource::path_for(dir, "Train tracks", "img.1", 1));
  write_mask(b, dir / "train_tracks" / "img.pgm");
  write_mask(b, dir / "train_tracks" / "img.1x.msk");  // belongs to neither id
  FileGroundingSource src(dir);
  const auto d = src.detections("img.1", "Train tracks");
  ASSERT_TRUE(d);
  EXPECT_EQ(d->size(), 2u);
  EXPECT_EQ(composite_mask(*d).count(), 2u);
  ASSERT_TRUE(src.detections("img", "train tracks"));
  EXPECT_EQ(src.detections("img", "train tracks")->size(), 1u);
  EXPECT_FALSE(src.detections("other", "train tracks"));
  EXPECT_FALSE(src.detections("img", "boats"));
}

TEST(ClipScore, IdenticalAndOrthogonal) {
  EmbeddingTable t;
  t.dim = 3;
  t.texts["cat"] = {1, 2, 3};
  t.images["same"] = {2, 4, 6};
  t.images["orth"] = {3, 0, -1};
  FileEmbeddingSource src(t);
  EXPECT_NEAR(clip_score("cat", {"same"}, src), 100.0, 1e-9);
  EXPECT_NEAR(clip_score("cat", {"orth"}, src), 0.0, 1e-9);
  EXPECT_NEAR(clip_score("cat", {"same", "orth", "missing"}, src), 50.0, 1e-9);
  EXPECT_THROW(clip_score("dog", {"same"}, src), ScoreUnavailable);
  EXPECT_THROW(clip_score("cat", {"missing"}, src), ScoreUnavailable);
}

TEST(EmbeddingFile, RoundTripAndCorruption) {
  EmbeddingTable t;
  t.dim = 2;
  t.texts["a"] = {1.5f, -2.0f};
  t.images["im"] = {0.25f, 4.0f};
  const auto dir = temp_dir("emb");
  write_embeddings(t, dir / "e.bin");
  const auto back = read_embeddings(dir / "e.bin");
  EXPECT_EQ(back.dim, 2u);
  EXPECT_EQ(back.texts, t.texts);
  EXPECT_EQ(back.images, t.images);
  auto bytes = io::read_file(dir / "e.bin");
  bytes.pop_back();
  io::ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(bytes));
  w.write_file(dir / "bad.bin");
  EXPECT_THROW(read_embeddings(dir / "bad.bin"), FormatError);
}

TEST(RandomBaseline, ClosedForms) {
  const auto c = random_baseline([](Rng&) { return 0.3; }, 10, 1);
  EXPECT_DOUBLE_EQ(c.stats.mean, 0.3);
  EXPECT_EQ(c.stats.ci99, 0.0);
  int call = 0;
  const auto two = random_baseline([&](Rng&) { return double(call++); }, 2, 1);
  EXPECT_DOUBLE_EQ(two.stats.mean, 0.5);
  EXPECT_NEAR(two.stats.ci99, 2.576 * (std::sqrt(0.5) / std::sqrt(2.0)), 1e-12);
  EXPECT_NEAR(two.stats.ci99, 1.288, 1e-3);
  EXPECT_THROW(random_baseline([](Rng&) { return 0.0; }, 1, 1), InvalidArgument);
}

TEST(RandomBaseline, ReproducibleAndMatchesDirectArithmetic) {
  auto metric = [](Rng& rng) -> std::optional<double> { return rng.uniform(); };
  const auto a = random_baseline(metric, 30, 42), b = random_baseline(metric, 30, 42);
  EXPECT_EQ(a.values, b.values);
  double mean = 0;
  for (double v : a.values) mean += v;
  mean /= 30;
  double ss = 0;
  for (double v : a.values) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(a.stats.mean, mean, 1e-15);
  EXPECT_NEAR(a.stats.ci99, 2.576 * std::sqrt(ss / 29) / std::sqrt(30.0), 1e-15);
}

TEST(RandomBaseline, RandomImagesComeFromCache) {
  SparseFeatureCache cache;
  cache.T = 4;
  cache.d_s = 2;
  cache.k = 1;
  cache.grid = {2, 2};
  for (int i = 0; i < 10; ++i) {
    cache.image_ids.push_back("im" + std::to_string(i));
    for (std::uint32_t t = 0; t < 4; ++t) cache.push_token({{1u}}, {{float(i + t)}});
  }
  FeatureRecord r = refined_record(1, "x", {"im9"}, {Mask(2, 2, true)});
  Rng rng(3);
  const auto rr = with_random_images(r, cache, rng, 5);
  ASSERT_EQ(rr.top_images.size(), 5u);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < 5; ++i) {
    ids.insert(rr.top_images[i].image_id);
    EXPECT_EQ(rr.heatmaps[i], token_heatmap(cache, rr.top_images[i].image_id, 1));
    EXPECT_EQ(rr.masks[i], binarize(rr.heatmaps[i], r.binarize));
  }
  EXPECT_EQ(ids.size(), 5u);
}

TEST(Aggregate, EmptyAndOnePerConcept) {
  const auto e = aggregate({});
  EXPECT_TRUE(e.rows.empty());
  EXPECT_EQ(e.total.n_features, 0u);
  EXPECT_EQ(e.total.iou_mean, 0.0);

  std::vector<FeatureRecord> rs;
  for (std::size_t c = 0; c < concept_categories().size(); ++c) {
    FeatureRecord r;
    r.explanation = r.refined_label = "l";
    r.category = concept_categories()[c];
    r.scores.iou = 0.1 * double(c);
    r.scores.clip_score = 20.0 + double(c);
    rs.push_back(r);
  }
  const auto t = aggregate(rs);
  ASSERT_EQ(t.rows.size(), 6u);
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_EQ(t.rows[c].concept_name, concept_categories()[c]);
    EXPECT_EQ(t.rows[c].iou_mean, *rs[c].scores.iou);
    EXPECT_EQ(t.rows[c].clip_score_mean, *rs[c].scores.clip_score);
  }
}

TEST(Aggregate, MatchesGroupByOracle) {
  Rng rng(9);
  std::vector<FeatureRecord> rs;
  for (int i = 0; i < 200; ++i) {
    FeatureRecord r;
    if (rng.uniform() < 0.9) r.explanation = r.refined_label = "l";
    if (r.refined_label && rng.uniform() < 0.9) r.category = concept_categories()[rng.below(6)];
    if (rng.uniform() < 0.8) r.scores.iou = rng.uniform();
    if (rng.uniform() < 0.8) r.scores.clip_score = 100 * rng.uniform();
    rs.push_back(r);
  }
  const auto t = aggregate(rs);
  std::map<std::string, std::vector<double>> ious, clips;
  std::map<std::string, std::size_t> counts;
  for (const auto& r : rs) {
    if (!r.refined_label) continue;
    for (const std::string& key : {std::string("total"), r.category.value_or("")}) {
      if (key.empty()) continue;
      ++counts[key];
      if (r.scores.iou) ious[key].push_back(*r.scores.iou);
      if (r.scores.clip_score) clips[key].push_back(*r.scores.clip_score);
    }
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
  };
  std::vector<ScoreRow> all = t.rows;
  all.push_back(t.total);
  EXPECT_EQ(all.size(), counts.size());
  for (const auto& row : all) {
    EXPECT_EQ(row.n_features, counts[row.concept_name]);
    EXPECT_EQ(row.iou_n, ious[row.concept_name].size());
    EXPECT_NEAR(row.iou_mean, mean(ious[row.concept_name]), 1e-12);
    EXPECT_NEAR(row.clip_score_mean, mean(clips[row.concept_name]), 1e-10);
  }
}

TEST(Aggregate, TsvLayout) {
  FeatureRecord r;
  r.explanation = r.refined_label = "l";
  r.category = "object";
  r.scores.iou = 0.25;
  auto t = aggregate({r});
  t.baselines.push_back({"iou", 0.005, 0.0002, 10});
  const auto tsv = table_tsv(t);
  EXPECT_NE(tsv.find("object\t1\t1\t0.2500\t0\t0.00\n"), std::string::npos);
  EXPECT_NE(tsv.find("total\t1\t1\t0.2500"), std::string::npos);
  EXPECT_NE(tsv.find("random\tiou\t10\t0.005000\t0.000200"), std::string::npos);
  EXPECT_EQ(table_json(t).at("clip_score_scale"), "100*cosine");
}

TEST(EvaluateRecords, CountsUnrefinedAndUnavailable) {
  MapGrounding g;
  Mask act(2, 2, true);
  g.by_image["a"] = {Mask(4, 4, true)};
  std::vector<FeatureRecord> rs{refined_record(0, "x", {"a"}, {act}), refined_record(1, "x", {"b"}, {act}),
                                FeatureRecord{}};
  const auto rep = evaluate_records(rs, &g, nullptr);
  EXPECT_EQ(rep.scored, 2u);
  EXPECT_EQ(rep.unrefined, 1u);
  EXPECT_EQ(rep.iou_unavailable, 1u);
  EXPECT_EQ(rs[0].scores.iou, 1.0);
  EXPECT_FALSE(rs[1].scores.iou);
}

TEST(HttpSources, GroundingAndEmbeddingOverHttp) {
  httplib::Server server;
  server.Post("/api/ground", [](const httplib::Request& req, httplib::Response& res) {
    const auto j = nlohmann::json::parse(req.body);
    if (j.at("image_id") == "missing") {
      res.status = 404;
      return;
    }
    Mask m(3, 3);
    m.set(0, 0);
    m.set(2, 2);
    const auto bytes = serialize_mask(m);
    std::vector<std::uint8_t> packed(bytes.begin() + 20, bytes.end());
    res.set_content(nlohmann::json{{"masks", {{{"width", 3}, {"height", 3}, {"bits", base64_encode(packed)}}}}}.dump(),
                    "application/json");
  });
  server.Post("/api/embed", [](const httplib::Request& req, httplib::Response& res) {
    const auto j = nlohmann::json::parse(req.body);
    const std::vector<float> v = j.contains("text") ? std::vector<float>{1, 0} : std::vector<float>{1, 1};
    res.set_content(nlohmann::json{{"embedding", v}}.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  const std::string ep = "http://127.0.0.1:" + std::to_string(port) + "/api";
  auto load = [](const std::string&) { return Image(3, 3); };
  HttpGroundingSource g(ep, load);
  const auto d = g.detections("a", "x");
  ASSERT_TRUE(d);
  EXPECT_EQ(d->at(0).count(), 2u);
  EXPECT_TRUE(d->at(0).at(2, 2));
  EXPECT_FALSE(g.detections("missing", "x"));
  HttpEmbeddingSource e(ep, load);
  EXPECT_NEAR(clip_score("x", {"a"}, e), 100.0 / std::sqrt(2.0), 1e-5);
  server.stop();
  th.join();
}
