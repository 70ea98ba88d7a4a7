// Command line front end: training, evaluation, distillation, synthetic
// data generation, scan benchmarking, parameter accounting, self tests
// and metric plots. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "skelmamba/bench.hpp"
#include "skelmamba/config.hpp"
#include "skelmamba/plot.hpp"
#include "skelmamba/sha256.hpp"
#include "skelmamba/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace skelmamba;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "skelmamba 0.1.0";

SkeletonTopology resolve_topology(const std::string& name_or_path) {
  if (fs::exists(name_or_path)) return load_topology(name_or_path);
  return builtin_topology(name_or_path);
}

// Every run directory gets the resolved config, version, seed and
// environment fingerprint before any work starts.
void write_run_snapshot(const std::string& out_dir, const RunConfig& cfg,
                        const std::string& command) {
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  {
    std::ofstream f(out_dir + "/config_snapshot.json");
    f << run_config_to_json(cfg) << "\n";
  }
  json j;
  j["command"] = command;
  j["version"] = kVersion;
  j["seed"] = cfg.train.seed;
  j["data_seed"] = cfg.data.seed;
  j["env"] = env_fingerprint();
  std::ofstream f(out_dir + "/run.json");
  f << j.dump(2) << "\n";
}

RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides,
                         const std::string& preset) {
  RunConfig cfg;
  if (preset == "desk") {
    cfg.model = desk_preset();
  } else if (preset == "full") {
    cfg.model = full_preset();
  } else if (!preset.empty()) {
    throw ConfigError("unknown preset '" + preset + "' (desk, full)");
  }
  if (!config_path.empty()) {
    RunConfig from_file = load_run_config(config_path);
    cfg = from_file;
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

int cmd_train(const RunConfig& cfg, const std::string& out_dir) {
  write_run_snapshot(out_dir, cfg, "train");
  Dataset all = build_dataset(cfg);
  auto [train_set, eval_set] =
      split_dataset(all, cfg.data.eval_fraction, cfg.data.seed);
  SkeletonTopology topo = resolve_topology(cfg.model.topology);
  Model model = build_model(cfg.model, topo, cfg.train.seed);
  std::printf("%s | params %lld | train %zu eval %zu\n", kVersion,
              static_cast<long long>(model.param_count()),
              train_set.samples.size(), eval_set.samples.size());
  TrainResult r = train(model, train_set, eval_set, cfg.train, out_dir);
  if (r.aborted_nan) {
    throw NumericError("training aborted on non-finite loss; last good "
                       "checkpoint kept at " +
                       (r.best_checkpoint.empty() ? std::string("<none>")
                                                  : r.best_checkpoint));
  }
  std::printf("best eval accuracy %.4f\n", r.best_eval_acc);
  if (!r.best_checkpoint.empty()) {
    std::printf("checkpoint: %s\n", r.best_checkpoint.c_str());
  }
  return 0;
}

int cmd_train_cpkd(const RunConfig& cfg, const std::string& out_dir) {
  write_run_snapshot(out_dir, cfg, "train-cpkd");
  Dataset all = build_dataset(cfg);
  auto [train_set, eval_set] =
      split_dataset(all, cfg.data.eval_fraction, cfg.data.seed);
  SkeletonTopology topo = resolve_topology(cfg.model.topology);

  ModelConfig teacher_cfg = cfg.model;
  teacher_cfg.head_kind = HeadKind::cov_pool;
  ModelConfig student_cfg = cfg.model;
  student_cfg.head_kind = HeadKind::gap;
  Model teacher = build_model(teacher_cfg, topo, cfg.train.seed);
  Model student = build_model(student_cfg, topo, cfg.train.seed + 1);

  CpkdResult r = train_cpkd(teacher, student, train_set, eval_set, cfg.train,
                            cfg.train, cfg.kd, out_dir);
  std::printf("teacher (cov_pool) best eval %.4f\n", r.teacher.best_eval_acc);
  std::printf("student (gap)      best eval %.4f\n", r.student.best_eval_acc);
  std::printf("teacher frozen through stage 2: %s\n",
              r.teacher_signature_before == r.teacher_signature_after
                  ? "yes"
                  : "NO (bug)");
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& checkpoints,
             const std::vector<std::string>& stream_names,
             const std::string& out_dir) {
  if (checkpoints.empty()) throw ConfigError("eval: give --checkpoint");
  std::vector<StreamKind> streams;
  if (stream_names.empty()) {
    streams.assign(checkpoints.size(), StreamKind::joint);
  } else {
    for (const auto& s : stream_names) streams.push_back(stream_from_string(s));
  }
  if (streams.size() != checkpoints.size()) {
    throw ConfigError("eval: one stream per checkpoint");
  }
  write_run_snapshot(out_dir, cfg, "eval");

  Dataset all = build_dataset(cfg);
  auto [train_set, eval_set] =
      split_dataset(all, cfg.data.eval_fraction, cfg.data.seed);
  (void)train_set;

  std::vector<Model> models;
  models.reserve(checkpoints.size());
  std::vector<Model*> ptrs;
  for (size_t i = 0; i < checkpoints.size(); ++i) {
    ModelConfig mc = checkpoint_config(checkpoints[i]);
    mc.stream = streams[i];
    SkeletonTopology topo = resolve_topology(mc.topology);
    models.push_back(build_model(mc, topo, 0));
    load_checkpoint(models.back(), checkpoints[i]);
  }
  for (auto& m : models) ptrs.push_back(&m);
  EvalReport rep = evaluate(ptrs, streams, eval_set);
  std::fputs(report_to_text(rep).c_str(), stdout);
  if (!out_dir.empty()) {
    std::ofstream f(out_dir + "/eval_report.json");
    f << report_to_json(rep) << "\n";
  }
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& input) {
  ModelConfig mc = checkpoint_config(checkpoint);
  SkeletonTopology topo = resolve_topology(mc.topology);
  Model model = build_model(mc, topo, 0);
  load_checkpoint(model, checkpoint);

  SkeletonSequence seq;
  if (input.size() > 5 && input.substr(input.size() - 5) == ".tdmt") {
    Tensor t = read_tdmt(input);
    if (t.rank() != 4 || t.dim(3) != 3) {
      throw DataError("cached sample must be (T,P,J,3)");
    }
    seq.t_raw = t.dim(0);
    seq.n_persons = t.dim(1);
    seq.n_joints = t.dim(2);
    seq.coords = t.values();
  } else {
    seq = parse_ntu_skeleton_file(input);
  }

  NoGradGuard ng;
  std::vector<const SkeletonSequence*> batch{&seq};
  BatchInputs in = make_batch(batch, mc.stream, topo, mc.frames,
                              ResampleMode::eval_full, nullptr);
  Tensor logits = person_mean_logits(model.forward(in.input), in.persons);
  int best = 0;
  for (int64_t k = 1; k < logits.dim(1); ++k) {
    if (logits.at({0, k}) > logits.at({0, best})) best = int(k);
  }
  std::printf("predicted class: %d\nlogits:", best);
  for (int64_t k = 0; k < logits.dim(1); ++k) {
    std::printf(" %.4f", logits.at({0, k}));
  }
  std::printf("\n");
  return 0;
}

int cmd_synth_data(const RunConfig& cfg, const std::string& out_dir) {
  if (out_dir.empty()) throw ConfigError("synth-data: give --out");
  write_run_snapshot(out_dir, cfg, "synth-data");
  SkeletonTopology topo = resolve_topology(cfg.model.topology);
  Dataset ds = synth_dataset(cfg.data.n_classes, cfg.data.n_per_class,
                             cfg.data.t_raw, topo, cfg.data.seed,
                             cfg.data.noise_sigma);
  fs::create_directories(out_dir + "/samples");
  std::vector<ManifestEntry> entries;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    Tensor t = Tensor::from_data({s.t_raw, s.n_persons, s.n_joints, 3},
                                 s.coords);
    char name[64];
    std::snprintf(name, sizeof(name), "samples/s%05zu.tdmt", i);
    write_tdmt(out_dir + "/" + name, t, DumpDtype::f32);
    ManifestEntry e;
    e.path = name;
    e.label = s.label;
    e.subject = s.subject;
    entries.push_back(e);
  }
  write_manifest(entries, out_dir + "/manifest.json");
  std::printf("wrote %zu samples and manifest.json to %s\n",
              ds.samples.size(), out_dir.c_str());
  return 0;
}

int cmd_bench_scan(const std::vector<int64_t>& lengths, int64_t d_inner,
                   int n_state, int streams, int warmup, int reps,
                   uint64_t seed, const std::string& out_csv) {
  auto rows = bench_scan(lengths, d_inner, n_state, streams, warmup, reps,
                         seed);
  const std::string csv = bench_csv(rows);
  std::fputs(csv.c_str(), stdout);
  if (!out_csv.empty()) {
    std::ofstream f(out_csv);
    if (!f) throw DataError("cannot write " + out_csv);
    f << csv;
  }
  return 0;
}

int cmd_param_count(const RunConfig& cfg) {
  SkeletonTopology topo = resolve_topology(cfg.model.topology);
  Model model = build_model(cfg.model, topo, 0);
  const int64_t C = cfg.model.channels;
  const int64_t stem = 3 * C + C + 2 * C;
  const int64_t attn =
      cfg.model.layers *
      attn_layer_param_count(C, cfg.model.heads, cfg.model.max_hop);
  const int64_t tdm =
      cfg.model.layers *
      tdm_block_param_count(C, int(cfg.model.mti_scales.size()),
                            cfg.model.n_state, cfg.model.conv_width,
                            cfg.model.expand);
  const int64_t head = cfg.model.head_kind == HeadKind::gap
                           ? C * cfg.model.n_classes + cfg.model.n_classes
                           : (C * (C + 1) / 2) * cfg.model.n_classes +
                                 cfg.model.n_classes;
  const int64_t formula = model_param_count_formula(cfg.model);
  const int64_t runtime = model.param_count();
  std::printf("stem            %10lld\n", (long long)stem);
  std::printf("spatial blocks  %10lld\n", (long long)attn);
  std::printf("temporal blocks %10lld\n", (long long)tdm);
  std::printf("head (%s)  %10lld\n", to_string(cfg.model.head_kind).c_str(),
              (long long)head);
  std::printf("total (formula) %10lld\n", (long long)formula);
  std::printf("total (runtime) %10lld\n", (long long)runtime);
  if (formula != runtime) {
    throw NumericError("parameter audit mismatch: formula " +
                       std::to_string(formula) + " vs runtime " +
                       std::to_string(runtime));
  }
  return 0;
}

// quick built-in checks, one line per module
int cmd_selftest() {
  struct Case {
    const char* name;
    bool (*fn)();
  };
  auto near = [](double a, double b, double tol) {
    return std::fabs(a - b) <= tol;
  };
  static auto near_s = near;  // usable from the lambdas below

  Case cases[] = {
      {"tensor_autodiff",
       [] {
         Rng rng(1);
         Tensor x = Tensor::rand_uniform({3, 4}, rng, -2, 2, true);
         Tensor loss = sum(mul(x, x));
         backward(loss);
         Tensor g = x.grad();
         for (int64_t i = 0; i < x.numel(); ++i) {
           if (std::fabs(g.data()[i] - 2 * x.data()[i]) > 1e-9) return false;
         }
         return true;
       }},
      {"ssm_core",
       [] {
         // fixed recurrence: Abar=0.5, Bbar=1, C=1, x=[1,1] -> y=[1,1.5]
         const double a = std::log(0.5);
         Tensor A = Tensor::from_data({1, 1}, {a});
         Tensor B = Tensor::from_data({1, 2, 1}, {a / (0.5 - 1.0),
                                                  a / (0.5 - 1.0)});
         Tensor Cm = Tensor::from_data({1, 2, 1}, {1.0, 1.0});
         Tensor x = Tensor::from_data({1, 2, 1}, {1.0, 1.0});
         Tensor d = Tensor::full({1, 2, 1}, 1.0);
         Tensor y = scan_recurrence(x, d, A, B, Cm);
         return std::fabs(y.at({0, 0, 0}) - 1.0) < 1e-9 &&
                std::fabs(y.at({0, 1, 0}) - 1.5) < 1e-9;
       }},
      {"cycle_mti",
       [] {
         CycleFcLayer l;
         l.kernel_size = 3;
         l.weight = Tensor::from_data({3, 1}, {1, 1, 1});
         l.bias = Tensor::zeros({1});
         Tensor H = Tensor::from_data({1, 3, 3, 1},
                                      {1, 2, 3, 4, 5, 6, 7, 8, 9});
         Tensor out = cycle_fc(H, l);
         return std::fabs(out.at({0, 0, 0, 0}) - 15) < 1e-12 &&
                std::fabs(out.at({0, 0, 1, 0}) - 15) < 1e-12 &&
                std::fabs(out.at({0, 0, 2, 0}) - 15) < 1e-12;
       }},
      {"spatial_attention",
       [] {
         Rng rng(3);
         SkeletonTopology topo = builtin_topology("synth11");
         auto layer = SpatialAttnLayer::init(16, 4, 8, rng);
         Tensor H = Tensor::rand_uniform({1, 16, 2, 11}, rng, -1, 1);
         auto res = spatial_attention_full(H, layer, topo);
         // attention rows sum to 1
         const auto& w = res.weights;
         for (int64_t i = 0; i < w.numel(); i += 11) {
           double s = 0;
           for (int j = 0; j < 11; ++j) s += w.data()[i + j];
           if (std::fabs(s - 1.0) > 1e-9) return false;
         }
         return true;
       }},
      {"tdm_block",
       [] {
         Rng rng(4);
         TdmBlock::Options opt;
         opt.pool_stride = 2;
         TdmBlock block = TdmBlock::init(8, opt, rng);
         Tensor H = Tensor::rand_uniform({2, 8, 6, 3}, rng, -1, 1);
         Tensor out = tdm_forward(H, block, false);
         return out.shape() == Shape{2, 8, 3, 3};
       }},
      {"heads_losses",
       [] {
         Tensor sigma = Tensor::from_data({1, 2, 2}, {4, 0, 0, 4});
         Tensor y = newton_schulz_sqrt(sigma, 5);
         if (!near_s(y.at({0, 0, 0}), 2.0, 1e-3)) return false;
         if (!near_s(y.at({0, 0, 1}), 0.0, 1e-3)) return false;
         Tensor s = Tensor::from_data({1, 3}, {1, 2, 3});
         Tensor zero = dkd_loss(s, s, {2}, DkdLoss{});
         return near_s(zero.item(), 0.0, 1e-12);
       }},
      {"data_pipeline",
       [] {
         SkeletonTopology topo = builtin_topology("synth11");
         Dataset a = synth_dataset(4, 8, 24, topo, 11);
         Dataset b = synth_dataset(4, 8, 24, topo, 11);
         return dataset_signature(a) == dataset_signature(b);
       }},
      {"model_runtime",
       [] {
         ModelConfig cfg = desk_preset();
         cfg.layers = 1;
         cfg.channels = 16;
         cfg.heads = 2;
         cfg.pool_layers = {1};
         SkeletonTopology topo = builtin_topology("synth11");
         Model m = build_model(cfg, topo, 5);
         Rng rng(6);
         Tensor x = Tensor::rand_uniform({2, 3, 16, 11}, rng, -1, 1);
         NoGradGuard ng;
         Tensor logits = m.forward(x);
         return logits.shape() == Shape{2, 6} &&
                m.param_count() == model_param_count_formula(cfg);
       }},
  };

  bool all_ok = true;
  for (const auto& c : cases) {
    bool ok = false;
    std::string err;
    try {
      ok = c.fn();
    } catch (const std::exception& e) {
      err = e.what();
    }
    std::printf("suite %-18s %s%s%s\n", c.name, ok ? "PASS" : "FAIL",
                err.empty() ? "" : " : ", err.c_str());
    all_ok &= ok;
  }
  if (!all_ok) throw NumericError("selftest failures");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string(kVersion) +
               " - skeleton action recognition with a hybrid "
               "attention + selective state space model"};
  app.require_subcommand(1);

  std::string config_path, out_dir, preset;
  std::vector<std::string> overrides;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--set", overrides,
                    "dotted-key override, e.g. model.channels=32");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--preset", preset, "model preset: desk or full");
  };

  auto* train_cmd = app.add_subcommand("train", "supervised training");
  add_common(train_cmd);
  auto* cpkd_cmd = app.add_subcommand(
      "train-cpkd", "two-stage distillation from a covariance-pooled teacher");
  add_common(cpkd_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate checkpoints");
  add_common(eval_cmd);
  std::vector<std::string> checkpoints, stream_names;
  eval_cmd->add_option("--checkpoint", checkpoints,
                       "checkpoint directory (repeat per stream)");
  eval_cmd->add_option("--streams", stream_names,
                       "stream per checkpoint: joint bone joint_motion "
                       "bone_motion");

  auto* infer_cmd = app.add_subcommand("infer", "classify one sample");
  std::string infer_ckpt, infer_input;
  infer_cmd->add_option("--checkpoint", infer_ckpt, "checkpoint directory")
      ->required();
  infer_cmd->add_option("--input", infer_input, ".skeleton or .tdmt sample")
      ->required();

  auto* synth_cmd =
      app.add_subcommand("synth-data", "generate the synthetic dataset");
  add_common(synth_cmd);

  auto* bench_cmd = app.add_subcommand("bench-scan", "time the scan kernel");
  std::vector<int64_t> bench_T{256, 512, 1024};
  int64_t bench_d = 64;
  int bench_nstate = 16, bench_streams = 4, bench_warmup = 5, bench_reps = 30;
  uint64_t bench_seed = 1;
  std::string bench_csv_path;
  bench_cmd->add_option("--T", bench_T, "sequence lengths")->delimiter(',');
  bench_cmd->add_option("--d-inner", bench_d, "channel width");
  bench_cmd->add_option("--n-state", bench_nstate, "state size");
  bench_cmd->add_option("--streams", bench_streams, "parallel sequences");
  bench_cmd->add_option("--warmup", bench_warmup, "warmup repetitions");
  bench_cmd->add_option("--reps", bench_reps, "timed repetitions");
  bench_cmd->add_option("--seed", bench_seed, "rng seed");
  bench_cmd->add_option("--csv", bench_csv_path, "also write CSV here");

  auto* count_cmd =
      app.add_subcommand("param-count", "parameter accounting and audit");
  add_common(count_cmd);

  auto* selftest_cmd =
      app.add_subcommand("selftest", "quick checks of every module");
  (void)selftest_cmd;

  auto* plot_cmd = app.add_subcommand("plot", "render metric plots");
  std::string plot_metrics_path, plot_sweep_dir, plot_out = ".";
  plot_cmd->add_option("--metrics", plot_metrics_path, "metrics.jsonl file");
  plot_cmd->add_option("--sweep", plot_sweep_dir,
                       "directory of runs for the frames sweep plot");
  plot_cmd->add_option("--out", plot_out, "output directory");

  auto* help_cfg =
      app.add_subcommand("help-config", "list every config key and default");
  (void)help_cfg;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the parse message
    if (code == 0) return 0;       // --help and friends
    std::fprintf(stderr, "ERR 1: %s\n", e.get_name().c_str());
    return 1;
  }

  try {
    if (app.got_subcommand("help-config")) {
      std::fputs(schema_help_text().c_str(), stdout);
      return 0;
    }
    if (app.got_subcommand("selftest")) return cmd_selftest();
    if (app.got_subcommand("bench-scan")) {
      return cmd_bench_scan(bench_T, bench_d, bench_nstate, bench_streams,
                            bench_warmup, bench_reps, bench_seed,
                            bench_csv_path);
    }
    if (app.got_subcommand("plot")) {
      if (!plot_metrics_path.empty()) {
        auto files = plot_metrics(plot_metrics_path, plot_out);
        for (const auto& f : files) std::printf("wrote %s\n", f.c_str());
      } else if (!plot_sweep_dir.empty()) {
        std::printf("wrote %s\n",
                    plot_frames_sweep(plot_sweep_dir, plot_out).c_str());
      } else {
        throw ConfigError("plot: give --metrics or --sweep");
      }
      return 0;
    }
    if (app.got_subcommand("infer")) return cmd_infer(infer_ckpt, infer_input);

    RunConfig cfg = resolve_config(config_path, overrides, preset);
    if (app.got_subcommand("train")) return cmd_train(cfg, out_dir);
    if (app.got_subcommand("train-cpkd")) return cmd_train_cpkd(cfg, out_dir);
    if (app.got_subcommand("eval")) {
      return cmd_eval(cfg, checkpoints, stream_names, out_dir);
    }
    if (app.got_subcommand("synth-data")) return cmd_synth_data(cfg, out_dir);
    if (app.got_subcommand("param-count")) return cmd_param_count(cfg);
    throw ConfigError("no command given");
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "ERR 1: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "ERR 2: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "ERR 3: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ERR 3: %s\n", e.what());
    return 3;
  }
}
