#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "skelmamba/bench.hpp"
#include "skelmamba/config.hpp"
#include "skelmamba/plot.hpp"
#include "skelmamba/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace skelmamba;
using nlohmann::json;

namespace {

#ifndef SKELMAMBA_CLI_PATH
#define SKELMAMBA_CLI_PATH "./skelmamba"
#endif

struct RunOutcome {
  int exit_code;
  std::string out;
  std::string err;
};

RunOutcome run_cli(const std::string& args) {
  const std::string out_f = "/tmp/cli_out.txt", err_f = "/tmp/cli_err.txt";
  const std::string cmd = std::string(SKELMAMBA_CLI_PATH) + " " + args +
                          " > " + out_f + " 2> " + err_f;
  const int rc = std::system(cmd.c_str());
  auto slurp = [](const std::string& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  return {WEXITSTATUS(rc), slurp(out_f), slurp(err_f)};
}

}  // namespace

TEST_CASE("dotted overrides are applied; unknown keys rejected") {
  RunConfig cfg = default_run_config();
  apply_override(cfg, "model.channels=48");
  apply_override(cfg, "model.mti_scales=1,3");
  apply_override(cfg, "train.lr=0.5");
  apply_override(cfg, "kd.teacher_first=true");
  CHECK(cfg.model.channels == 48);
  CHECK(cfg.model.mti_scales == std::vector<int>{1, 3});
  CHECK(cfg.train.lr == doctest::Approx(0.5));
  CHECK(cfg.kd.teacher_first);

  CHECK_THROWS_AS(apply_override(cfg, "model.nonsense=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "no_equals_sign"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "train.lr=not_a_number"), ConfigError);
}

TEST_CASE("json config load validates every key") {
  {
    std::ofstream f("/tmp/cfg_ok.json");
    f << R"({"model": {"channels": 32, "heads": 4}, "train": {"epochs": 3}})";
  }
  RunConfig cfg = load_run_config("/tmp/cfg_ok.json");
  CHECK(cfg.model.channels == 32);
  CHECK(cfg.model.heads == 4);
  CHECK(cfg.train.epochs == 3);

  {
    std::ofstream f("/tmp/cfg_bad.json");
    f << R"({"model": {"chanels": 32}})";  // typo must be rejected
  }
  CHECK_THROWS_AS(load_run_config("/tmp/cfg_bad.json"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/tmp/does_not_exist.json"), DataError);
}

TEST_CASE("config snapshot renders every schema key") {
  RunConfig cfg = default_run_config();
  const std::string js = run_config_to_json(cfg);
  json j = json::parse(js);
  for (const auto& e : config_schema()) {
    // navigate the dotted path
    const json* cur = &j;
    std::string rest = e.key;
    for (;;) {
      auto dot = rest.find('.');
      if (dot == std::string::npos) break;
      REQUIRE(cur->contains(rest.substr(0, dot)));
      cur = &(*cur)[rest.substr(0, dot)];
      rest = rest.substr(dot + 1);
    }
    REQUIRE(cur->contains(rest));
  }
}

TEST_CASE("help text stays in sync with the schema (doc drift)") {
  const std::string help = schema_help_text();
  for (const auto& e : config_schema()) {
    INFO(e.key);
    // every key appears with its default on the same line
    const auto pos = help.find("  " + e.key + " = ");
    REQUIRE(pos != std::string::npos);
    const auto line_end = help.find('\n', pos);
    const std::string line = help.substr(pos, line_end - pos);
    const std::string shown_default = e.def.empty() ? "\"\"" : e.def;
    CHECK(line.find(shown_default) != std::string::npos);
    CHECK(line.find(e.help) != std::string::npos);
  }
  // and the defaults in the schema match a default-constructed config
  RunConfig cfg = default_run_config();
  for (const auto& e : config_schema()) {
    INFO(e.key);
    CHECK(e.get(cfg) == (e.def.empty() ? e.get(cfg) : e.def));
  }
}

TEST_CASE("bench csv carries the fixed header and sane ratios") {
  auto rows = bench_scan({32, 64}, 8, 4, 2, 1, 3, 7);
  const std::string csv = bench_csv(rows);
  CHECK(csv.rfind("T,mean_ms,p50_ms,p95_ms,ratio_vs_prev\n", 0) == 0);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].ratio_vs_prev == 0.0);
  CHECK(rows[1].ratio_vs_prev > 0.0);
  CHECK(rows[0].p50_ms > 0.0);
}

TEST_CASE("plot_metrics renders curves; bad inputs map to typed errors") {
  // two-epoch log gives two-point curves
  {
    std::ofstream f("/tmp/metrics2.jsonl");
    f << R"({"epoch":0,"lr":0.1,"train_loss":1.5,"train_acc":0.3,"eval_acc":0.2,"wall_s":1})"
      << "\n"
      << R"({"epoch":1,"lr":0.1,"train_loss":1.0,"train_acc":0.5,"eval_acc":0.4,"wall_s":2})"
      << "\n";
  }
  fs::remove_all("/tmp/plots_out");
  auto files = plot_metrics("/tmp/metrics2.jsonl", "/tmp/plots_out");
  REQUIRE(files.size() == 2);
  for (const auto& f : files) {
    CHECK(fs::exists(f));
    std::ifstream in(f);
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str().find("<svg") != std::string::npos);
    CHECK(ss.str().find("polyline") != std::string::npos);
  }

  CHECK_THROWS_AS(plot_metrics("/tmp/nope.jsonl", "/tmp/plots_out"),
                  DataError);
  {
    std::ofstream f("/tmp/metrics_empty.jsonl");
  }
  CHECK_THROWS_AS(plot_metrics("/tmp/metrics_empty.jsonl", "/tmp/plots_out"),
                  ConfigError);
}

TEST_CASE("frames sweep plot collects one point per run") {
  fs::remove_all("/tmp/sweep_in");
  for (int frames : {8, 16, 32}) {
    const std::string dir = "/tmp/sweep_in/T" + std::to_string(frames);
    fs::create_directories(dir);
    RunConfig cfg = default_run_config();
    cfg.model.frames = frames;
    std::ofstream snap(dir + "/config_snapshot.json");
    snap << run_config_to_json(cfg);
    std::ofstream mf(dir + "/metrics.jsonl");
    mf << R"({"epoch":0,"lr":0.1,"train_loss":1.0,"train_acc":0.5,"eval_acc":0.4,"wall_s":1})"
       << "\n";
  }
  const std::string svg = plot_frames_sweep("/tmp/sweep_in", "/tmp/sweep_out");
  CHECK(fs::exists(svg));
  std::ifstream in(svg);
  std::stringstream ss;
  ss << in.rdbuf();
  // two series with three markers each
  size_t count = 0;
  std::string content = ss.str();
  for (size_t p = content.find("<circle"); p != std::string::npos;
       p = content.find("<circle", p + 1)) {
    ++count;
  }
  CHECK(count == 6);
}

TEST_CASE("cli exit codes and machine-readable error prefixes") {
  // usage error: unknown config key
  RunOutcome bad_key = run_cli("param-count --set model.nope=3");
  CHECK(bad_key.exit_code == 1);
  CHECK(bad_key.err.rfind("ERR 1:", 0) == 0);

  // data error: missing metrics file
  RunOutcome bad_file = run_cli("plot --metrics /tmp/nope.jsonl --out /tmp/x");
  CHECK(bad_file.exit_code == 2);
  CHECK(bad_file.err.rfind("ERR 2:", 0) == 0);

  // success: parameter accounting on the desk preset
  RunOutcome ok = run_cli("param-count --preset desk");
  CHECK(ok.exit_code == 0);
  CHECK(ok.out.find("total (formula)") != std::string::npos);

  // data error: evaluating a checkpoint that does not exist
  RunOutcome no_ckpt = run_cli(
      "eval --preset desk --checkpoint /tmp/no_such_checkpoint "
      "--streams joint");
  CHECK(no_ckpt.exit_code == 2);
  CHECK(no_ckpt.err.rfind("ERR 2:", 0) == 0);
}

TEST_CASE("cli writes the run snapshot before any work") {
  fs::remove_all("/tmp/cli_synth");
  RunOutcome r = run_cli(
      "synth-data --preset desk --set data.n_per_class=3 --out /tmp/cli_synth");
  REQUIRE(r.exit_code == 0);
  CHECK(fs::exists("/tmp/cli_synth/config_snapshot.json"));
  CHECK(fs::exists("/tmp/cli_synth/run.json"));
  CHECK(fs::exists("/tmp/cli_synth/manifest.json"));

  std::ifstream f("/tmp/cli_synth/run.json");
  json j;
  f >> j;
  CHECK(j.contains("version"));
  CHECK(j.contains("seed"));
  CHECK(j.contains("env"));
  CHECK(j["command"] == "synth-data");

  // the generated manifest round-trips through the loader
  Dataset ds = load_manifest_dataset("/tmp/cli_synth/manifest.json", 11);
  CHECK(ds.samples.size() == 18);
}

TEST_CASE("cli help-config lists every schema key") {
  RunOutcome r = run_cli("help-config");
  REQUIRE(r.exit_code == 0);
  for (const auto& e : config_schema()) {
    CHECK(r.out.find(e.key) != std::string::npos);
  }
}

TEST_CASE("cli selftest passes") {
  RunOutcome r = run_cli("selftest");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
}

TEST_CASE("cli full-preset parameter audit stays in budget") {
  RunOutcome r = run_cli("param-count --preset full");
  REQUIRE(r.exit_code == 0);
  // parse the runtime total
  const auto pos = r.out.find("total (runtime)");
  REQUIRE(pos != std::string::npos);
  long long total = 0;
  std::sscanf(r.out.c_str() + pos, "total (runtime) %lld", &total);
  CHECK(total >= 2000000);
  CHECK(total <= 2800000);
}

TEST_CASE("cli train -> eval -> infer chain") {
  fs::remove_all("/tmp/cli_chain");
  // a couple of quick epochs on a tiny set
  RunOutcome tr = run_cli(
      "train --preset desk --set data.n_per_class=6 --set train.epochs=2 "
      "--set train.batch=12 --out /tmp/cli_chain");
  REQUIRE(tr.exit_code == 0);
  REQUIRE(fs::exists("/tmp/cli_chain/checkpoint_best/manifest.json"));
  CHECK(fs::exists("/tmp/cli_chain/metrics.jsonl"));

  RunOutcome ev = run_cli(
      "eval --preset desk --set data.n_per_class=6 "
      "--checkpoint /tmp/cli_chain/checkpoint_best --streams joint "
      "--out /tmp/cli_chain/eval");
  REQUIRE(ev.exit_code == 0);
  CHECK(ev.out.find("fused") != std::string::npos);
  CHECK(ev.out.find("not comparable") != std::string::npos);  // caveat
  CHECK(fs::exists("/tmp/cli_chain/eval/eval_report.json"));

  // write one sample to disk and classify it
  SkeletonTopology topo = builtin_topology("synth11");
  Dataset ds = synth_dataset(6, 1, 48, topo, 5);
  const auto& s = ds.samples[2];
  write_tdmt("/tmp/cli_chain/sample.tdmt",
             Tensor::from_data({s.t_raw, s.n_persons, s.n_joints, 3},
                               s.coords),
             DumpDtype::f32);
  RunOutcome inf = run_cli(
      "infer --checkpoint /tmp/cli_chain/checkpoint_best "
      "--input /tmp/cli_chain/sample.tdmt");
  REQUIRE(inf.exit_code == 0);
  CHECK(inf.out.find("predicted class:") != std::string::npos);
  CHECK(inf.out.find("logits:") != std::string::npos);

  // metrics plot from the real run log
  RunOutcome pl = run_cli(
      "plot --metrics /tmp/cli_chain/metrics.jsonl --out /tmp/cli_chain/plots");
  REQUIRE(pl.exit_code == 0);
  CHECK(fs::exists("/tmp/cli_chain/plots/loss_curve.svg"));
  CHECK(fs::exists("/tmp/cli_chain/plots/accuracy_curve.svg"));
}
