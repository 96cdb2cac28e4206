// msae: every pipeline stage as a subcommand over one run configuration.
// Exit status: 0 success, 1 validation or data error, 2 client/transport error.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "msae/pipeline.hpp"
#include "msae/service.hpp"

namespace {

using namespace msae;

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  int threads = -1;
  bool force = false;
};

RunConfig load_config(const Globals& g, bool required = true) {
  std::vector<std::string> sets = g.sets;
  if (g.threads >= 0) sets.push_back("threads=" + std::to_string(g.threads));
  if (g.config.empty()) {
    if (required) throw ConfigError("missing --config");
    return RunConfig(nlohmann::json::object(), fs::current_path(), sets);
  }
  return RunConfig::load(g.config, sets);
}

void write_or_print(const nlohmann::json& j, const std::string& out) {
  if (!out.empty()) io::write_text(out, j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"Sparse autoencoder toolkit: train, cache, explain, score, steer and attribute."};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Globals g;
  auto add_globals = [&](CLI::App* sub, bool config_required = true) {
    auto* opt = sub->add_option("-c,--config", g.config, "run configuration (JSON)");
    if (config_required) opt->required();
    sub->add_option("--set", g.sets, "override a config key: key=value (repeatable)");
    sub->add_option("--threads", g.threads, "worker thread cap (0: hardware concurrency)")->check(CLI::NonNegativeNumber);
  };

  std::string stage_name;
  for (const auto& s : Pipeline::stage_order()) {
    auto* sub = app.add_subcommand(s, "run the " + s + " stage");
    add_globals(sub);
    sub->add_flag("--force", g.force, "run even when the stage manifest says it is up to date");
    sub->callback([&, s] { stage_name = s; });
  }

  SteerQuery steer;
  std::optional<std::string> steer_image;
  std::string steer_out;
  auto* steer_cmd = app.add_subcommand("steer", "generate with and without a feature clamp");
  add_globals(steer_cmd);
  steer_cmd->add_option("--feature", steer.feature, "feature index")->required();
  steer_cmd->add_option("--value", steer.value, "clamp value")->required();
  steer_cmd->add_option("--prompt", steer.prompt, "prompt text");
  steer_cmd->add_option("--image", steer_image, "image id from the manifest");
  steer_cmd->add_option("--tokens", steer.tokens, "token positions to clamp (default: all)");
  steer_cmd->add_option("--max-len", steer.max_len, "tokens to generate")->check(CLI::Range(1, 256));
  steer_cmd->add_option("--out", steer_out, "also write the JSON result here");

  AttributeQuery attr;
  std::optional<std::string> attr_image;
  std::string attr_method = "exact", attr_out;
  auto* attr_cmd = app.add_subcommand("attribute", "per (token, feature) influence on a logit difference");
  add_globals(attr_cmd);
  attr_cmd->add_option("--prompt", attr.prompt, "prompt text");
  attr_cmd->add_option("--image", attr_image, "image id from the manifest");
  attr_cmd->add_option("--v-c", attr.v_c, "chosen token (word or id; default: the model's argmax)");
  attr_cmd->add_option("--v-b", attr.v_b, "baseline token (word or id)")->required();
  attr_cmd->add_option("--method", attr_method, "exact or approx")->check(CLI::IsMember({"exact", "approx"}));
  attr_cmd->add_option("--top-n", attr.top_n, "features per range in the maps")->check(CLI::PositiveNumber);
  attr_cmd->add_option("--out-dir", attr_out, "output directory (default: <run_dir>/attribution)");

  std::string probe_image;
  std::size_t probe_k = 30, probe_skip = 0;
  auto* probe_cmd = app.add_subcommand("probe", "features ranked by activation on one cached image");
  add_globals(probe_cmd);
  probe_cmd->add_option("--image", probe_image, "image id")->required();
  probe_cmd->add_option("--k-top", probe_k, "features to return")->check(CLI::PositiveNumber);
  probe_cmd->add_option("--skip", probe_skip, "top features to drop first");

  std::string serve_addr;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP API over a finished run");
  add_globals(serve_cmd);
  serve_cmd->add_option("--addr", serve_addr, "host:port (default: service.addr)");

  std::string demo_out = "demo_run";
  auto* demo_cmd = app.add_subcommand("demo-synthetic", "toy scenes through every stage with mock clients");
  add_globals(demo_cmd, false);
  demo_cmd->add_option("--out", demo_out, "run directory when no --config is given");

  std::string exchange_socket;
  auto* host_cmd = app.add_subcommand("host-exchange", "");  // serves a toy host; used by host.kind=exchange
  host_cmd->group("");
  add_globals(host_cmd, false);
  host_cmd->add_option("--socket", exchange_socket, "listen on a unix socket instead of stdin/stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (!stage_name.empty()) {
    Pipeline p(load_config(g), std::cerr);
    p.set_force(g.force);
    const auto r = p.run(stage_name);
    std::cout << nlohmann::json{{"stage", stage_name}, {"skipped", r.skipped}, {"warnings", r.warnings},
                                {"summary", r.summary}}
                     .dump()
              << "\n";
    return 0;
  }

  if (steer_cmd->parsed()) {
    const auto cfg = load_config(g);
    cfg.require_keys({"paths.params"});
    const auto params = load_params(cfg.path("paths.params"));
    std::optional<ImageIndex> index;
    if (steer_image) {
      cfg.require_keys({"paths.manifest"});
      index.emplace(cfg.path("paths.manifest"));
      steer.image = index->path(*steer_image);
    }
    const auto host = make_host(cfg);
    write_or_print(steer_query(*host, params, steer), steer_out);
    return 0;
  }

  if (attr_cmd->parsed()) {
    const auto cfg = load_config(g);
    cfg.require_keys({"paths.params"});
    attr.method = attribution_method_from(attr_method);
    const auto params = load_params(cfg.path("paths.params"));
    if (attr_image) {
      cfg.require_keys({"paths.manifest"});
      attr.image = ImageIndex(cfg.path("paths.manifest")).path(*attr_image);
    }
    const auto host = make_host(cfg);
    const auto r = attribute_query(*host, params, attr, cfg.threads());
    const fs::path dir = attr_out.empty() ? cfg.run_dir() / "attribution" : fs::path(attr_out);
    fs::create_directories(dir);
    io::write_text(dir / "attribution.jsonl", attribution_jsonl(r));
    const auto maps = r.entries.empty() ? std::vector<RangeMap>{} : attribution_maps(r, attr.top_n, cfg.grid());
    const auto summary = attribution_summary_json(r, maps);
    io::write_text(dir / "maps.json", maps_json(maps).dump(2) + "\n");
    std::cerr << "[attribute] " << r.entries.size() << " entries, " << to_string(r.method) << ", logit diff "
              << r.base_diff << ", written to " << dir.string() << "\n";
    std::cout << summary.dump() << "\n";
    return 0;
  }

  if (probe_cmd->parsed()) {
    const auto cfg = load_config(g);
    cfg.require_keys({"paths.cache"});
    const auto cache = read_cache(cfg.path("paths.cache"));
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [j, m] : probe_features(cache, probe_image, probe_k, probe_skip))
      out.push_back({{"feature", j}, {"mean_activation", m}});
    std::cout << nlohmann::json{{"image_id", probe_image}, {"skip", probe_skip}, {"features", out}}.dump(2) << "\n";
    return 0;
  }

  if (serve_cmd->parsed()) {
    const auto cfg = load_config(g);
    Service svc(cfg);
    svc.listen(serve_addr.empty() ? cfg.str("service.addr") : serve_addr);
    return 0;
  }

  if (demo_cmd->parsed()) {
    if (g.config.empty()) {
      fs::create_directories(demo_out);
      g.config = (fs::path(demo_out) / "config.json").string();
      if (!fs::exists(g.config)) io::write_text(g.config, demo_config_json().dump(2) + "\n");
    }
    const auto out = run_demo(load_config(g), std::cerr);
    std::cout << out.dump(2) << "\n";
    return 0;
  }

  if (host_cmd->parsed()) {
    const auto cfg = load_config(g, false);
    if (cfg.str("host.kind") == "exchange") throw ConfigError("host-exchange serves a toy host; set host.kind");
    const auto host = make_host(cfg);
    const auto T = cfg.grid().tokens();
    if (!exchange_socket.empty()) {
      exchange::listen_unix(exchange_socket, *host, exchange::resolve_toy_input, T);
    } else {
      exchange::FdChannel ch(0, 1);
      exchange::serve(*host, ch, exchange::resolve_toy_input, T);
    }
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const msae::ClientError& e) {
    std::cerr << "error (" << e.kind() << "): " << e.what() << "\n";
    return 2;
  } catch (const msae::Error& e) {
    std::cerr << "error (" << e.kind() << "): " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
