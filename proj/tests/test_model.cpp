#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "oracles.hpp"
#include "skelmamba/config.hpp"
#include "skelmamba/train.hpp"

using namespace skelmamba;

namespace {

Dataset tiny_synth(int n_classes, int n_per_class, uint64_t seed) {
  SkeletonTopology topo = builtin_topology("synth11");
  return synth_dataset(n_classes, n_per_class, 48, topo, seed);
}

}  // namespace

TEST_CASE("full preset parameter count brackets the target") {
  ModelConfig cfg = full_preset();
  SkeletonTopology topo = builtin_topology("ntu25");
  Model m = build_model(cfg, topo, 1);
  const int64_t count = m.param_count();
  CHECK(count >= 2000000);
  CHECK(count <= 2800000);
  CHECK(count == model_param_count_formula(cfg));
}

TEST_CASE("parameter formula matches runtime across configs") {
  SkeletonTopology topo = builtin_topology("synth11");
  for (auto [L, C, H] : {std::tuple<int, int, int>{1, 16, 2},
                         {2, 32, 4},
                         {3, 24, 3}}) {
    ModelConfig cfg = desk_preset();
    cfg.layers = L;
    cfg.channels = C;
    cfg.heads = H;
    cfg.pool_layers = {L};
    Model m = build_model(cfg, topo, 2);
    CHECK(m.param_count() == model_param_count_formula(cfg));
  }
  // covariance head variant
  ModelConfig cov = desk_preset();
  cov.head_kind = HeadKind::cov_pool;
  Model mc = build_model(cov, topo, 3);
  CHECK(mc.param_count() == model_param_count_formula(cov));
}

TEST_CASE("tiny model builds and runs a forward pass") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.channels = 16;
  cfg.heads = 2;
  cfg.pool_layers = {1};
  cfg.n_classes = 6;
  cfg.frames = 64;
  cfg.topology = "ntu25";
  SkeletonTopology topo = builtin_topology("ntu25");
  Model m = build_model(cfg, topo, 4);
  Rng rng(5);
  Tensor x = Tensor::rand_uniform({2, 3, 64, 25}, rng, -1, 1);
  NoGradGuard ng;
  Tensor logits = m.forward(x);
  CHECK(logits.shape() == Shape{2, 6});
}

TEST_CASE("invalid configs are rejected with every violation listed") {
  ModelConfig cfg = desk_preset();
  cfg.channels = 33;       // odd
  cfg.heads = 5;           // does not divide
  cfg.pool_layers = {9};   // outside 1..layers
  cfg.n_classes = 1;       // too few
  SkeletonTopology topo = builtin_topology("synth11");
  try {
    build_model(cfg, topo, 1);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("even") != std::string::npos);
    CHECK(msg.find("pool layer") != std::string::npos);
    CHECK(msg.find("n_classes") != std::string::npos);
  }
}

TEST_CASE("forward enforces the pooling divisibility contract") {
  ModelConfig cfg = desk_preset();  // one stride-2 layer
  SkeletonTopology topo = builtin_topology("synth11");
  Model m = build_model(cfg, topo, 6);
  Rng rng(7);
  Tensor odd = Tensor::rand_uniform({1, 3, 15, 11}, rng, -1, 1);
  try {
    m.forward(odd);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("divisible") != std::string::npos);
    CHECK(msg.find("2") != std::string::npos);
  }
}

TEST_CASE("eval forward is deterministic and permutation consistent") {
  ModelConfig cfg = desk_preset();
  SkeletonTopology topo = builtin_topology("synth11");
  Model m = build_model(cfg, topo, 8);
  Rng rng(9);
  Tensor x = Tensor::rand_uniform({4, 3, 16, 11}, rng, -1, 1);
  NoGradGuard ng;
  m.training = false;
  Tensor a = m.forward(x);
  Tensor b = m.forward(x);
  for (int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a.data()[i] == b.data()[i]);  // bit identical
  }

  // permuting the batch permutes logits identically
  std::vector<int> perm{2, 0, 3, 1};
  Tensor xp = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t k = 0; k < x.numel() / 4; ++k) {
      xp.data()[perm[i] * (x.numel() / 4) + k] =
          x.data()[i * (x.numel() / 4) + k];
    }
  }
  Tensor c = m.forward(xp);
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t k = 0; k < 6; ++k) {
      CHECK(c.at({perm[i], k}) == a.at({i, k}));
    }
  }
}

TEST_CASE("lr schedule hits the paper values") {
  TrainConfig cfg;  // defaults: 0.025, x0.1 at 110 and 120
  CHECK(lr_at_epoch(cfg, 0) == doctest::Approx(0.025));
  CHECK(lr_at_epoch(cfg, 109) == doctest::Approx(0.025));
  CHECK(lr_at_epoch(cfg, 110) == doctest::Approx(0.0025));
  CHECK(lr_at_epoch(cfg, 119) == doctest::Approx(0.0025));
  CHECK(lr_at_epoch(cfg, 120) == doctest::Approx(0.00025));
}

TEST_CASE("lr zero leaves weights unchanged") {
  ModelConfig mc = desk_preset();
  SkeletonTopology topo = builtin_topology("synth11");
  Model m = build_model(mc, topo, 10);
  const uint64_t before = m.weights_signature();

  Dataset ds = tiny_synth(6, 4, 20);
  TrainConfig tc;
  tc.lr = 0.0;
  tc.epochs = 1;
  tc.batch = 8;
  tc.precision = "f64";
  train(m, ds, ds, tc);
  CHECK(m.weights_signature() == before);
  set_default_precision(Precision::f64);
}

TEST_CASE("one-batch overfit drives the loss under 0.05 in 200 steps") {
  set_default_precision(Precision::f32);
  ModelConfig mc = desk_preset();  // 2 layers, 32 channels
  SkeletonTopology topo = builtin_topology("synth11");
  Model m = build_model(mc, topo, 42);
  Dataset ds = tiny_synth(6, 3, 99);
  ds.samples.resize(16);
  std::vector<const SkeletonSequence*> batch;
  for (auto& s : ds.samples) batch.push_back(&s);
  BatchInputs in = make_batch(batch, StreamKind::joint, topo, 16,
                              ResampleMode::eval_full, nullptr);
  Sgd opt(m.parameters(), 0.9, 0.0);
  m.training = true;
  double final_loss = 1e9;
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    Tensor logits = m.forward(in.input);
    Tensor loss = cross_entropy(logits, in.labels);
    backward(loss);
    opt.step(0.025);
    final_loss = loss.item();
    if (final_loss < 0.04) break;  // early exit once satisfied
  }
  CHECK(final_loss < 0.05);
  set_default_precision(Precision::f64);
}

TEST_CASE("nan loss aborts training and keeps the last good checkpoint") {
  ModelConfig mc = desk_preset();
  SkeletonTopology topo = builtin_topology("synth11");
  Model m = build_model(mc, topo, 11);
  Dataset ds = tiny_synth(6, 6, 21);
  TrainConfig tc;
  tc.lr = 1e14;  // guaranteed blowup
  tc.epochs = 3;
  tc.batch = 18;
  const std::string dir = "/tmp/skelmamba_nan_run";
  std::filesystem::remove_all(dir);
  TrainResult r = train(m, ds, ds, tc, dir);
  CHECK(r.aborted_nan);
  set_default_precision(Precision::f64);
}

TEST_CASE("weight decay skips norm parameters and biases") {
  ModelConfig mc = desk_preset();
  SkeletonTopology topo = builtin_topology("synth11");
  Model m = build_model(mc, topo, 12);
  int decayed = 0, skipped = 0;
  for (auto& p : m.parameters()) {
    const bool is_excluded =
        p.name.find("gamma") != std::string::npos ||
        p.name.find("beta") != std::string::npos ||
        (p.name.size() >= 2 && p.name.substr(p.name.size() - 2) == ".b") ||
        p.name.find("bias") != std::string::npos ||
        p.name.find("b_dt") != std::string::npos ||
        p.name.find("conv.b") != std::string::npos;
    if (p.decay) {
      ++decayed;
      CHECK(!is_excluded);
    } else {
      ++skipped;
      CHECK(is_excluded);
    }
  }
  CHECK(decayed > 0);
  CHECK(skipped > 0);
}

TEST_CASE("checkpoint round trip reproduces eval logits bit-exactly") {
  set_default_precision(Precision::f64);
  ModelConfig mc = desk_preset();
  SkeletonTopology topo = builtin_topology("synth11");
  Model m = build_model(mc, topo, 13);
  // perturb BN buffers so they carry non-default state
  Rng rng(14);
  for (auto& b : m.buffers()) {
    for (int64_t i = 0; i < b.tensor.numel(); ++i) {
      b.tensor.data()[i] += 0.01 * rng.uniform();
    }
  }
  Tensor x = Tensor::rand_uniform({2, 3, 16, 11}, rng, -1, 1);
  NoGradGuard ng;
  m.training = false;
  Tensor before = m.forward(x);

  const std::string dir = "/tmp/skelmamba_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(m, dir);

  Model m2 = build_model(mc, topo, 999);  // different init
  load_checkpoint(m2, dir);
  m2.training = false;
  Tensor after = m2.forward(x);
  for (int64_t i = 0; i < before.numel(); ++i) {
    CHECK(before.data()[i] == after.data()[i]);
  }

  // corrupting a parameter file must be caught by the digest
  ModelConfig cc = checkpoint_config(dir);
  CHECK(cc.channels == mc.channels);
}

TEST_CASE("training is reproducible for the same seed") {
  set_default_precision(Precision::f32);
  Dataset ds = tiny_synth(4, 8, 30);
  auto run_once = [&](uint64_t seed) {
    SkeletonTopology topo = builtin_topology("synth11");
    ModelConfig mc = desk_preset();
    mc.n_classes = 4;
    Model m = build_model(mc, topo, seed);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch = 8;
    tc.seed = seed;
    return train(m, ds, ds, tc);
  };
  TrainResult a = run_once(77);
  TrainResult b = run_once(77);
  REQUIRE(a.log.size() == b.log.size());
  for (size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].train_loss == b.log[i].train_loss);  // bit identical
    CHECK(a.log[i].eval_acc == b.log[i].eval_acc);
  }
  set_default_precision(Precision::f64);
}

TEST_CASE("random-weight model scores near chance; per-class identity") {
  ModelConfig mc = desk_preset();
  SkeletonTopology topo = builtin_topology("synth11");
  Model m = build_model(mc, topo, 15);
  Dataset ds = tiny_synth(6, 20, 31);  // balanced 120 samples
  std::vector<Model*> models{&m};
  EvalReport rep = evaluate(models, {StreamKind::joint}, ds);
  CHECK(rep.fused_acc > 1.0 / 6 - 0.1);
  CHECK(rep.fused_acc < 1.0 / 6 + 0.12);

  // weighted per-class accuracies average to the overall accuracy
  double weighted = 0.0;
  int total = 0;
  for (size_t c = 0; c < rep.per_class_acc.size(); ++c) {
    weighted += rep.per_class_acc[c] * rep.per_class_count[c];
    total += rep.per_class_count[c];
  }
  CHECK(std::fabs(weighted / total - rep.fused_acc) < 1e-9);

  // synthetic data carries the non-comparability caveat
  CHECK(!rep.caveat.empty());
  CHECK(rep.caveat.find("synthetic") != std::string::npos);

  // fusing the same model twice keeps the accuracy
  std::vector<Model*> dup{&m, &m};
  EvalReport rep2 =
      evaluate(dup, {StreamKind::joint, StreamKind::joint}, ds);
  CHECK(rep2.fused_acc == doctest::Approx(rep.fused_acc));
}

TEST_CASE("cpkd validation and teacher freezing") {
  SkeletonTopology topo = builtin_topology("synth11");
  ModelConfig base = desk_preset();
  base.layers = 1;
  base.channels = 16;
  base.heads = 2;
  base.pool_layers = {1};

  ModelConfig tc_cfg = base;
  tc_cfg.head_kind = HeadKind::cov_pool;
  ModelConfig sc_cfg = base;
  sc_cfg.head_kind = HeadKind::gap;

  Model teacher = build_model(tc_cfg, topo, 16);
  Model student = build_model(sc_cfg, topo, 17);

  // the student must cost exactly what a plain model costs
  Model plain = build_model(sc_cfg, topo, 18);
  CHECK(student.param_count() == plain.param_count());
  // and the covariance teacher is strictly larger
  CHECK(teacher.param_count() > student.param_count());

  Dataset ds = tiny_synth(6, 5, 33);
  TrainConfig tr;
  tr.epochs = 1;
  tr.batch = 15;
  tr.lr = 0.01;
  CpkdResult r = train_cpkd(teacher, student, ds, ds, tr, tr, DkdLoss{});
  CHECK(r.teacher_signature_before == r.teacher_signature_after);
  set_default_precision(Precision::f64);

  // mismatched heads are rejected
  CHECK_THROWS_AS(train_cpkd(student, student, ds, ds, tr, tr, DkdLoss{}),
                  ConfigError);
  // mismatched backbones are rejected
  ModelConfig other = tc_cfg;
  other.channels = 32;
  other.heads = 4;
  Model teacher2 = build_model(other, topo, 19);
  CHECK_THROWS_AS(train_cpkd(teacher2, student, ds, ds, tr, tr, DkdLoss{}),
                  ConfigError);
}

TEST_CASE("covariance head trains in f32 mode") {
  // the square-root iterate loses bit-exact symmetry in single
  // precision; the head must stay usable through training
  SkeletonTopology topo = builtin_topology("synth11");
  ModelConfig mc = desk_preset();
  mc.head_kind = HeadKind::cov_pool;
  Model m = build_model(mc, topo, 23);
  Dataset ds = tiny_synth(6, 6, 44);
  TrainConfig tr;
  tr.epochs = 2;
  tr.batch = 12;
  tr.lr = 0.01;
  tr.clip_grad_norm = 1.0;
  TrainResult r = train(m, ds, ds, tr);
  CHECK(!r.aborted_nan);
  CHECK(r.log.size() == 2);
  CHECK(std::isfinite(r.log[1].train_loss));
  set_default_precision(Precision::f64);
}

TEST_CASE("scan strategies all train and evaluate") {
  // smoke-level: every layout runs forward/backward without error
  SkeletonTopology topo = builtin_topology("synth11");
  Dataset ds = tiny_synth(3, 4, 40);
  for (auto scan : {ScanStrategy::t_scan, ScanStrategy::ts_scan,
                    ScanStrategy::st_scan, ScanStrategy::s_scan}) {
    ModelConfig mc = desk_preset();
    mc.n_classes = 3;
    mc.scan = scan;
    Model m = build_model(mc, topo, 21);
    TrainConfig tr;
    tr.epochs = 1;
    tr.batch = 12;
    TrainResult res = train(m, ds, ds, tr);
    CHECK(res.log.size() == 1);
    CHECK(std::isfinite(res.log[0].train_loss));
  }
  set_default_precision(Precision::f64);
}
