#include "skelmamba/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "skelmamba/sha256.hpp"
#include "skelmamba/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace skelmamba {

HeadKind head_from_string(const std::string& s) {
  if (s == "gap") return HeadKind::gap;
  if (s == "cov_pool") return HeadKind::cov_pool;
  throw ConfigError("unknown head kind '" + s + "' (gap, cov_pool)");
}

std::string to_string(HeadKind k) {
  return k == HeadKind::gap ? "gap" : "cov_pool";
}

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> v;
  if (layers < 1) v.push_back("layers must be >= 1");
  if (channels < 2 || channels % 2 != 0) {
    v.push_back("channels must be even and >= 2, got " +
                std::to_string(channels));
  }
  if (heads < 1 || (channels >= 2 && channels % heads != 0)) {
    v.push_back("channels (" + std::to_string(channels) +
                ") must be divisible by heads (" + std::to_string(heads) +
                ")");
  }
  for (int k : mti_scales) {
    if (k <= 0) v.push_back("mti scale " + std::to_string(k) + " must be > 0");
  }
  for (int p : pool_layers) {
    if (p < 1 || p > layers) {
      v.push_back("pool layer " + std::to_string(p) + " outside 1.." +
                  std::to_string(layers));
    }
  }
  if (n_classes < 2) v.push_back("n_classes must be >= 2");
  if (frames < 2) v.push_back("frames must be >= 2");
  if (n_state < 1) v.push_back("n_state must be >= 1");
  if (conv_width < 1) v.push_back("conv_width must be >= 1");
  if (expand < 1) v.push_back("expand must be >= 1");
  if (max_hop < 1) v.push_back("max_hop must be >= 1");
  if (k_ns < 1) v.push_back("k_ns must be >= 1");
  const int64_t pooled = int64_t(1) << pool_layers.size();
  if (frames % pooled != 0) {
    v.push_back("frames (" + std::to_string(frames) +
                ") must be divisible by 2^|pool_layers| = " +
                std::to_string(pooled));
  }
  return v;
}

ModelConfig full_preset() {
  ModelConfig c;  // defaults are the full preset
  return c;
}

ModelConfig desk_preset() {
  ModelConfig c;
  c.layers = 2;
  c.channels = 32;
  c.heads = 4;
  c.pool_layers = {2};
  c.n_classes = 6;
  c.frames = 16;
  c.topology = "synth11";
  return c;
}

Model build_model(const ModelConfig& cfg, const SkeletonTopology& topology,
                  uint64_t seed) {
  auto errs = cfg.violations();
  if (!errs.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  Model m;
  m.cfg = cfg;
  m.topology = topology;

  Rng root(seed);
  Rng stem_rng = root.fork("stem");
  const double sb = 1.0 / std::sqrt(3.0);
  m.stem_w = Tensor::rand_uniform({3, cfg.channels}, stem_rng, -sb, sb, true);
  m.stem_b = Tensor::zeros({cfg.channels}, true);
  m.stem_bn = BatchNorm::init(cfg.channels);

  for (int l = 0; l < cfg.layers; ++l) {
    Rng arng = root.fork("attn" + std::to_string(l));
    m.attn.push_back(
        SpatialAttnLayer::init(cfg.channels, cfg.heads, cfg.max_hop, arng));
    TdmBlock::Options opt;
    opt.mti_scales = cfg.mti_scales;
    opt.n_state = cfg.n_state;
    opt.conv_width = cfg.conv_width;
    opt.expand = cfg.expand;
    opt.scan = cfg.scan;
    opt.pool_stride = 1;
    for (int p : cfg.pool_layers) {
      if (p == l + 1) opt.pool_stride = 2;
    }
    Rng trng = root.fork("tdm" + std::to_string(l));
    m.tdm.push_back(TdmBlock::init(cfg.channels, opt, trng));
  }

  Rng hrng = root.fork("head");
  if (cfg.head_kind == HeadKind::gap) {
    m.gap = GapHead::init(cfg.channels, cfg.n_classes, hrng);
  } else {
    m.cov = CovPoolHead::init(cfg.channels, cfg.n_classes, cfg.k_ns, hrng);
  }
  return m;
}

Tensor Model::forward(const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != 3) {
    throw ShapeError("model forward: input must be (B,3,T,N), got " +
                     shape_str(batch.shape()));
  }
  const int64_t T = batch.dim(2);
  const int64_t pooled = int64_t(1) << cfg.pool_layers.size();
  if (T % pooled != 0) {
    throw ConfigError("model forward: frame count " + std::to_string(T) +
                      " must be divisible by " + std::to_string(pooled) +
                      " (2^|pool_layers|)");
  }
  if (batch.dim(3) != topology.n_joints) {
    throw ShapeError("model forward: joint count mismatch");
  }

  // stem: 1x1 conv 3 -> C, then batch norm
  Tensor x = permute(batch, {0, 2, 3, 1});             // (B,T,N,3)
  Tensor projected = add(matmul(x, stem_w), stem_b);   // (B,T,N,C)
  Tensor h = permute(projected, {0, 3, 1, 2});         // (B,C,T,N)
  h = stem_bn.forward(h, training);

  for (size_t l = 0; l < attn.size(); ++l) {
    h = spatial_attention(h, attn[l], topology);
    h = tdm_forward(h, tdm[l], training);
  }
  return cfg.head_kind == HeadKind::gap ? gap_head(h, gap) : cov_head(h, cov);
}

std::vector<Model::Param> Model::parameters() {
  std::vector<Param> out;
  auto add = [&out](const std::string& name, const Tensor& t, bool decay) {
    out.push_back({name, t, decay});
  };
  add("stem.w", stem_w, true);
  add("stem.b", stem_b, false);
  add("stem.bn.gamma", stem_bn.gamma, false);
  add("stem.bn.beta", stem_bn.beta, false);
  for (size_t l = 0; l < attn.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".attn.";
    auto& a = attn[l];
    add(p + "ln.gamma", a.ln_gamma, false);
    add(p + "ln.beta", a.ln_beta, false);
    add(p + "wq", a.wq, true);
    add(p + "wk", a.wk, true);
    add(p + "wv", a.wv, true);
    add(p + "wo", a.wo, true);
    add(p + "hop_embed", a.hop_embed, true);
  }
  for (size_t l = 0; l < tdm.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".tdm.";
    auto& b = tdm[l];
    add(p + "ln_in.gamma", b.ln_in_gamma, false);
    add(p + "ln_in.beta", b.ln_in_beta, false);
    add(p + "proj.w", b.proj_w, true);
    add(p + "proj.b", b.proj_b, false);
    add(p + "bn.gamma", b.bn.gamma, false);
    add(p + "bn.beta", b.bn.beta, false);
    for (size_t k = 0; k < b.mti.scales.size(); ++k) {
      const std::string mp = p + "mti" + std::to_string(k) + ".";
      add(mp + "w", b.mti.scales[k].weight, true);
      add(mp + "b", b.mti.scales[k].bias, false);
    }
    auto add_branch = [&](const std::string& bp, TdmBranch& br) {
      add(bp + "w_f1", br.w_f1, true);
      add(bp + "w_f2", br.w_f2, true);
      add(bp + "conv.w", br.conv_kernel, true);
      add(bp + "conv.b", br.conv_bias, false);
      add(bp + "ssm.a_log", br.ssm.a_log, true);
      add(bp + "ssm.w_b", br.ssm.w_b, true);
      add(bp + "ssm.w_c", br.ssm.w_c, true);
      add(bp + "ssm.w_dt_down", br.ssm.w_dt_down, true);
      add(bp + "ssm.w_dt_up", br.ssm.w_dt_up, true);
      add(bp + "ssm.b_dt", br.ssm.b_dt, false);
      add(bp + "w_f3", br.w_f3, true);
    };
    add_branch(p + "fwd.", b.fwd);
    add_branch(p + "bwd.", b.bwd);
    add(p + "ln_fuse.gamma", b.ln_fuse_gamma, false);
    add(p + "ln_fuse.beta", b.ln_fuse_beta, false);
  }
  if (cfg.head_kind == HeadKind::gap) {
    add("head.w", gap.w, true);
    add("head.b", gap.b, false);
  } else {
    add("head.w", cov.w, true);
    add("head.b", cov.b, false);
  }
  return out;
}

std::vector<Model::Param> Model::buffers() {
  std::vector<Param> out;
  out.push_back({"stem.bn.running_mean", stem_bn.running_mean, false});
  out.push_back({"stem.bn.running_var", stem_bn.running_var, false});
  for (size_t l = 0; l < tdm.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".tdm.bn.";
    out.push_back({p + "running_mean", tdm[l].bn.running_mean, false});
    out.push_back({p + "running_var", tdm[l].bn.running_var, false});
  }
  return out;
}

int64_t Model::param_count() {
  int64_t total = 0;
  for (auto& p : parameters()) total += p.tensor.numel();
  return total;
}

uint64_t Model::weights_signature() {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ULL;
  };
  for (auto& p : parameters()) {
    mix(fnv1a64(p.name));
    const double* d = p.tensor.data();
    for (int64_t i = 0; i < p.tensor.numel(); ++i) {
      uint64_t bits;
      std::memcpy(&bits, &d[i], 8);
      mix(bits);
    }
  }
  return h;
}

int64_t attn_layer_param_count(int64_t C, int heads, int max_hop) {
  (void)heads;  // the hop table size works out to (max_hop+1)*C total
  return 2 * C + 4 * C * C + int64_t(max_hop + 1) * C;
}

int64_t model_param_count_formula(const ModelConfig& cfg) {
  const int64_t C = cfg.channels;
  int64_t total = 3 * C + C + 2 * C;  // stem conv + bias + BN affine
  total += cfg.layers * attn_layer_param_count(C, cfg.heads, cfg.max_hop);
  total += cfg.layers *
           tdm_block_param_count(C, static_cast<int>(cfg.mti_scales.size()),
                                 cfg.n_state, cfg.conv_width, cfg.expand);
  if (cfg.head_kind == HeadKind::gap) {
    total += C * cfg.n_classes + cfg.n_classes;
  } else {
    total += (C * (C + 1) / 2) * cfg.n_classes + cfg.n_classes;
  }
  return total;
}

// ---------------------------------------------------------------- config json

std::string config_to_json(const ModelConfig& cfg) {
  json j;
  j["layers"] = cfg.layers;
  j["channels"] = cfg.channels;
  j["heads"] = cfg.heads;
  j["mti_scales"] = cfg.mti_scales;
  j["pool_layers"] = cfg.pool_layers;
  j["head_kind"] = to_string(cfg.head_kind);
  j["scan"] = to_string(cfg.scan);
  j["n_classes"] = cfg.n_classes;
  j["stream"] = to_string(cfg.stream);
  j["frames"] = cfg.frames;
  j["topology"] = cfg.topology;
  j["n_state"] = cfg.n_state;
  j["conv_width"] = cfg.conv_width;
  j["expand"] = cfg.expand;
  j["max_hop"] = cfg.max_hop;
  j["k_ns"] = cfg.k_ns;
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw DataError(std::string("bad config json: ") + e.what());
  }
  ModelConfig c;
  c.layers = j.value("layers", c.layers);
  c.channels = j.value("channels", c.channels);
  c.heads = j.value("heads", c.heads);
  c.mti_scales = j.value("mti_scales", c.mti_scales);
  c.pool_layers = j.value("pool_layers", c.pool_layers);
  if (j.contains("head_kind")) c.head_kind = head_from_string(j["head_kind"]);
  if (j.contains("scan")) c.scan = scan_strategy_from_string(j["scan"]);
  c.n_classes = j.value("n_classes", c.n_classes);
  if (j.contains("stream")) c.stream = stream_from_string(j["stream"]);
  c.frames = j.value("frames", c.frames);
  c.topology = j.value("topology", c.topology);
  c.n_state = j.value("n_state", c.n_state);
  c.conv_width = j.value("conv_width", c.conv_width);
  c.expand = j.value("expand", c.expand);
  c.max_hop = j.value("max_hop", c.max_hop);
  c.k_ns = j.value("k_ns", c.k_ns);
  return c;
}

// --------------------------------------------------------------- checkpoints

void save_checkpoint(Model& model, const std::string& dir) {
  fs::create_directories(dir);
  const DumpDtype dtype = default_precision() == Precision::f32
                              ? DumpDtype::f32
                              : DumpDtype::f64;
  json manifest = json::array();
  auto dump_one = [&](const Model::Param& p) {
    std::string fname = p.name;
    for (char& c : fname) {
      if (c == '/' || c == '.') c = '_';
    }
    fname += ".tdmt";
    const auto bytes = tdmt_bytes(p.tensor, dtype);
    std::ofstream f(dir + "/" + fname, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    json e;
    e["name"] = p.name;
    e["file"] = fname;
    e["shape"] = p.tensor.shape();
    e["dtype"] = dtype == DumpDtype::f32 ? "f32" : "f64";
    e["sha256"] = sha256_hex(bytes.data(), bytes.size());
    manifest.push_back(e);
  };
  for (auto& p : model.parameters()) dump_one(p);
  for (auto& b : model.buffers()) dump_one(b);

  std::ofstream mf(dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
  std::ofstream cf(dir + "/config.json");
  cf << config_to_json(model.cfg) << "\n";
}

ModelConfig checkpoint_config(const std::string& dir) {
  std::ifstream cf(dir + "/config.json");
  if (!cf) throw DataError("checkpoint " + dir + " has no config.json");
  std::stringstream ss;
  ss << cf.rdbuf();
  return config_from_json(ss.str());
}

void load_checkpoint(Model& model, const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw DataError("checkpoint " + dir + " has no manifest.json");
  json manifest;
  mf >> manifest;

  auto params = model.parameters();
  auto buffers = model.buffers();
  std::vector<Model::Param*> all;
  for (auto& p : params) all.push_back(&p);
  for (auto& b : buffers) all.push_back(&b);

  for (auto* p : all) {
    bool found = false;
    for (const auto& e : manifest) {
      if (e["name"] != p->name) continue;
      const std::string path = dir + "/" + e["file"].get<std::string>();
      std::ifstream f(path, std::ios::binary);
      if (!f) throw DataError("checkpoint tensor missing: " + path);
      std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
      if (e.contains("sha256") &&
          e["sha256"].get<std::string>() !=
              sha256_hex(bytes.data(), bytes.size())) {
        throw DataError("checkpoint tensor corrupted: " + path);
      }
      Tensor t = tdmt_from_bytes(bytes);
      if (t.shape() != p->tensor.shape()) {
        throw DataError("checkpoint shape mismatch for " + p->name + ": " +
                        shape_str(t.shape()) + " vs " +
                        shape_str(p->tensor.shape()));
      }
      std::memcpy(p->tensor.data(), t.data(),
                  size_t(t.numel()) * sizeof(double));
      found = true;
      break;
    }
    if (!found) {
      throw DataError("checkpoint missing tensor '" + p->name + "'");
    }
  }
}

}  // namespace skelmamba
