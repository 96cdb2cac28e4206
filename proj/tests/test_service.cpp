#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <thread>

#include "msae/service.hpp"
#include "oracles.hpp"

using namespace msae;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("msae_service_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

class Running {
 public:
  explicit Running(RunConfig cfg) : svc_(std::move(cfg), log_) {
    port_ = svc_.bind_any();
    thread_ = std::thread([this] { svc_.listen_after_bind(); });
    svc_.server().wait_until_ready();
  }
  ~Running() {
    svc_.stop();
    thread_.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(30, 0);
    return c;
  }
  Service& service() { return svc_; }

 private:
  std::ostringstream log_;
  Service svc_;
  int port_ = 0;
  std::thread thread_;
};

json body_of(const httplib::Result& r) {
  EXPECT_TRUE(r);
  if (!r) return {};
  return json::parse(r->body);
}

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(temp_dir("run"));
    io::write_text(*dir_ / "config.json", demo_config_json().dump(2));
    std::ostringstream log;
    run_demo(RunConfig::load(*dir_ / "config.json"), log);
  }
  static void TearDownTestSuite() { delete dir_; }

  static RunConfig config(std::vector<std::string> sets = {}) { return RunConfig::load(*dir_ / "config.json", sets); }

  static fs::path* dir_;
};

fs::path* ServiceTest::dir_ = nullptr;

}  // namespace

TEST_F(ServiceTest, HealthAndCors) {
  Running srv(config());
  auto c = srv.client();
  const auto r = c.Get("/api/v1/health");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
  const auto j = json::parse(r->body);
  EXPECT_EQ(j["schema_version"], kApiSchemaVersion);
  EXPECT_EQ(j["status"], "ok");
  EXPECT_EQ(j["version"], kVersion);
  EXPECT_EQ(j["n_features"], read_records(config().path("paths.records")).size());
  const auto o = c.Options("/api/v1/steer");
  ASSERT_TRUE(o);
  EXPECT_EQ(o->status, 204);
}

TEST_F(ServiceTest, UnloadedRunIs503ExceptHealth) {
  Running srv(config({"paths.params=missing.params"}));
  EXPECT_FALSE(srv.service().loaded());
  auto c = srv.client();
  const auto h = c.Get("/api/v1/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(json::parse(h->body)["loaded"], false);
  const auto f = c.Get("/api/v1/features");
  ASSERT_TRUE(f);
  EXPECT_EQ(f->status, 503);
  EXPECT_EQ(json::parse(f->body)["error"]["kind"], "unavailable");
}

TEST_F(ServiceTest, FeatureListSortsAndFilters) {
  Running srv(config());
  auto c = srv.client();
  const auto records = read_records(config().path("paths.records"));

  const auto all = body_of(c.Get("/api/v1/features?sort=iou&page_size=500"));
  ASSERT_EQ(all["total"], records.size());
  const auto& fs_ = all["features"];
  bool seen_null = false;
  for (std::size_t i = 0; i < fs_.size(); ++i) {
    const auto& iou = fs_[i]["scores"]["iou"];
    if (iou.is_null()) seen_null = true;
    else EXPECT_FALSE(seen_null) << "scored record after an unscored one";
    if (i > 0 && !iou.is_null() && !fs_[i - 1]["scores"]["iou"].is_null())
      EXPECT_GE(fs_[i - 1]["scores"]["iou"].get<double>(), iou.get<double>());
  }

  const auto by_mean = body_of(c.Get("/api/v1/features?sort=mean&page_size=3&page=2"));
  EXPECT_EQ(by_mean["page"], 2);
  EXPECT_LE(by_mean["features"].size(), 3u);
  const auto full = sorted_features(records, "mean", "");
  for (std::size_t i = 0; i < by_mean["features"].size(); ++i)
    EXPECT_EQ(by_mean["features"][i]["feature_index"], full[3 + i]->feature_index);

  std::string concept_name;
  for (const auto& r : records)
    if (r.category) concept_name = *r.category;
  ASSERT_FALSE(concept_name.empty());
  const auto filtered = body_of(c.Get(("/api/v1/features?concept=" + concept_name).c_str()));
  ASSERT_GT(filtered["total"].get<std::size_t>(), 0u);
  for (const auto& f : filtered["features"]) EXPECT_EQ(f["concept"], concept_name);

  const auto bad = c.Get("/api/v1/features?sort=loudness");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 422);
  EXPECT_EQ(json::parse(bad->body)["error"]["field"], "sort");
  const auto bad_page = c.Get("/api/v1/features?page=0");
  ASSERT_TRUE(bad_page);
  EXPECT_EQ(bad_page->status, 422);
  EXPECT_EQ(json::parse(bad_page->body)["error"]["field"], "page");
}

TEST_F(ServiceTest, FeatureDetailMatchesTheRecordFile) {
  Running srv(config());
  auto c = srv.client();
  const auto records = read_records(config().path("paths.records"));
  const auto& rec = records.front();
  const auto j = body_of(c.Get(("/api/v1/features/" + std::to_string(rec.feature_index)).c_str()));
  EXPECT_EQ(j["record"], record_to_json(rec));

  std::set<std::uint32_t> have;
  for (const auto& r : records) have.insert(r.feature_index);
  std::uint32_t missing = 0;
  while (have.count(missing)) ++missing;
  const auto nf = c.Get(("/api/v1/features/" + std::to_string(missing)).c_str());
  ASSERT_TRUE(nf);
  EXPECT_EQ(nf->status, 404);
  const auto huge = c.Get("/api/v1/features/99999999999999");
  ASSERT_TRUE(huge);
  EXPECT_EQ(huge->status, 404);
}

TEST_F(ServiceTest, HeatmapAndImage) {
  Running srv(config());
  auto c = srv.client();
  const auto cfg = config();
  const auto cache = read_cache(cfg.path("paths.cache"));
  const auto rec = read_records(cfg.path("paths.records")).front();
  const auto& img = rec.top_images.front().image_id;
  const auto j = body_of(c.Get(("/api/v1/features/" + std::to_string(rec.feature_index) + "/heatmap/" + img).c_str()));
  EXPECT_EQ(j["values"], grid_to_json(token_heatmap(cache, img, rec.feature_index)));
  EXPECT_EQ(j["rows"], cfg.grid().rows);

  const auto nf = c.Get(("/api/v1/features/0/heatmap/no_such_image"));
  ASSERT_TRUE(nf);
  EXPECT_EQ(nf->status, 404);

  const auto png = c.Get(("/api/v1/images/" + img).c_str());
  ASSERT_TRUE(png);
  EXPECT_EQ(png->status, 200);
  EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
  const auto bytes = io::read_file(ImageIndex(cfg.path("paths.manifest")).path(img));
  EXPECT_EQ(png->body, std::string(bytes.begin(), bytes.end()));
  const auto missing = c.Get("/api/v1/images/nope");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
}

TEST_F(ServiceTest, SteeringZeroOnAnInactiveFeatureChangesNothing) {
  Running srv(config());
  auto c = srv.client();
  const auto cfg = config();
  const auto params = load_params(cfg.path("paths.params"));
  const auto host = make_host(cfg);
  const std::string prompt = "the car is";
  const auto image_id = ImageIndex(cfg.path("paths.manifest")).ids().front();
  const auto in = make_input(ImageIndex(cfg.path("paths.manifest")).path(image_id), prompt);
  const auto fwd = hooked_forward(*host, in, params);
  std::vector<std::uint8_t> active(params.d_s(), 0);
  for (const auto& st : fwd.states)
    for (auto j : st.active) active[j] = 1;
  std::uint32_t quiet = 0;
  while (quiet < params.d_s() && active[quiet]) ++quiet;
  ASSERT_LT(quiet, params.d_s());

  const json req = {{"feature", quiet}, {"value", 0.0}, {"prompt", prompt}, {"image", image_id}, {"max_len", 4}};
  const auto r = c.Post("/api/v1/steer", req.dump(), "application/json");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200) << r->body;
  const auto j = json::parse(r->body);
  EXPECT_EQ(j["steered"], j["unsteered"]);
  EXPECT_EQ(j["unsteered"]["ids"].size(), 4u);

  const auto again = body_of(c.Get(("/api/v1/steer/" + std::to_string(j["session_id"].get<std::uint64_t>())).c_str()));
  EXPECT_EQ(again["steered"], j["steered"]);
  const auto gone = c.Get("/api/v1/steer/999999");
  ASSERT_TRUE(gone);
  EXPECT_EQ(gone->status, 404);
}

TEST_F(ServiceTest, SteerRejectsBadFields) {
  Running srv(config());
  auto c = srv.client();
  auto field_of = [&](const json& req) -> std::string {
    const auto r = c.Post("/api/v1/steer", req.dump(), "application/json");
    if (!r || r->status != 422) return "status " + (r ? std::to_string(r->status) : std::string("none"));
    return json::parse(r->body)["error"].value("field", "");
  };
  EXPECT_EQ(field_of({{"value", 1.0}, {"prompt", "car"}}), "feature");
  EXPECT_EQ(field_of({{"feature", 100000}, {"value", 1.0}, {"prompt", "car"}}), "feature");
  EXPECT_EQ(field_of({{"feature", 1}, {"value", "big"}, {"prompt", "car"}}), "value");
  EXPECT_EQ(field_of({{"feature", 1}, {"value", 1.0}}), "prompt");
  EXPECT_EQ(field_of({{"feature", 1}, {"value", 1.0}, {"prompt", "car"}, {"max_len", 0}}), "max_len");
  EXPECT_EQ(field_of({{"feature", 1}, {"value", 1.0}, {"prompt", "car"}, {"tokens", {5}}}), "tokens");
  EXPECT_EQ(field_of({{"feature", 1}, {"value", 1.0}, {"prompt", "car"}, {"image", "nope"}}), "image");
  const auto r = c.Post("/api/v1/steer", "not json", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 422);
  EXPECT_EQ(json::parse(r->body)["error"]["field"], "body");
}

TEST_F(ServiceTest, AttributeRejectsBadFields) {
  Running srv(config());
  auto c = srv.client();
  auto field_of = [&](const json& req) -> std::string {
    const auto r = c.Post("/api/v1/attribute", req.dump(), "application/json");
    if (!r || r->status != 422) return "status " + (r ? std::to_string(r->status) : std::string("none"));
    return json::parse(r->body)["error"].value("field", "");
  };
  EXPECT_EQ(field_of({{"prompt", "car"}}), "v_b");
  EXPECT_EQ(field_of({{"prompt", "car"}, {"v_b", "not-a-word"}}), "v_b");
  EXPECT_EQ(field_of({{"prompt", "car"}, {"v_b", 0}, {"v_c", 100000}}), "v_c");
  EXPECT_EQ(field_of({{"prompt", "car"}, {"v_b", 0}, {"method", "guess"}}), "method");
  EXPECT_EQ(field_of({{"prompt", ""}, {"v_b", 0}}), "prompt");
}

// Separate params whose TopK never has to choose on the request input, so
// the linearized attribution must equal the exact one.
TEST_F(ServiceTest, ApproxMatchesExactWithoutReselection) {
  const auto cfg0 = config();
  const auto host = make_host(cfg0);
  const auto image_id = ImageIndex(cfg0.path("paths.manifest")).ids()[1];
  const std::string prompt = "a red car";
  const auto in = make_input(ImageIndex(cfg0.path("paths.manifest")).path(image_id), prompt);
  auto p = oracle::random_params<float>(host->d_model(), 32, 4, 99, 0.5);
  oracle::limit_positives(p, host->run(in), 3);
  const auto params_path = temp_dir("approx") / "limited.params";
  save_params(p, params_path);

  Running srv(config({"paths.params=" + params_path.string()}));
  auto c = srv.client();
  json req = {{"prompt", prompt}, {"image", image_id}, {"v_c", 1}, {"v_b", 2}, {"top_n", 5}};
  req["method"] = "exact";
  const auto ex = body_of(c.Post("/api/v1/attribute", req.dump(), "application/json"));
  req["method"] = "approx";
  const auto ap = body_of(c.Post("/api/v1/attribute", req.dump(), "application/json"));
  ASSERT_EQ(ex["method"], "exact");
  ASSERT_EQ(ap["method"], "approx");
  ASSERT_FALSE(ex["entries"].empty());
  ASSERT_EQ(ex["entries"].size(), ap["entries"].size());
  for (std::size_t i = 0; i < ex["entries"].size(); ++i) {
    const auto& e = ex["entries"][i];
    const auto& a = ap["entries"][i];
    EXPECT_EQ(e["token"], a["token"]);
    EXPECT_EQ(e["feature"], a["feature"]);
    EXPECT_FALSE(e["reselection"].get<bool>());
    EXPECT_NEAR(e["influence"].get<double>(), a["influence"].get<double>(), 1e-4);
  }
  EXPECT_NEAR(ex["logit_diff"].get<double>(), ap["logit_diff"].get<double>(), 1e-12);

  const auto naive = oracle::naive_exact(*host, in, p, 1, 2);
  for (const auto& e : ex["entries"])
    EXPECT_NEAR(e["influence"].get<double>(), naive.at({e["token"].get<std::uint32_t>(), e["feature"].get<std::uint32_t>()}),
                1e-4);
}

TEST_F(ServiceTest, DimensionMismatchIsReportedNotServed) {
  Running srv(config({"host.d_model=8"}));
  EXPECT_FALSE(srv.service().loaded());
  auto c = srv.client();
  const auto h = body_of(c.Get("/api/v1/health"));
  EXPECT_NE(h["error"].get<std::string>().find("d_model"), std::string::npos);
}
