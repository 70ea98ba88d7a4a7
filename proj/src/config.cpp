#include "skelmamba/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

using nlohmann::json;

namespace skelmamba {

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  if (s.empty() || s == "[]" || s == "none") return out;
  std::string cur;
  for (char c : s) {
    if (c == ',' || c == ' ' || c == '[' || c == ']') {
      if (!cur.empty()) {
        out.push_back(std::stoi(cur));
        cur.clear();
      }
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::stoi(cur));
  return out;
}

std::string render_int_list(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

template <typename T>
T parse_num(const std::string& s, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) return std::stod(s);
    else if constexpr (std::is_same_v<T, uint64_t>) return std::stoull(s);
    else return static_cast<T>(std::stoll(s));
  } catch (...) {
    throw ConfigError("bad value '" + s + "' for key " + key);
  }
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("bad boolean '" + s + "' for key " + key);
}

std::vector<SchemaEntry> build_schema() {
  std::vector<SchemaEntry> e;
  auto add = [&e](std::string key, std::string def, std::string help,
                  std::function<void(RunConfig&, const std::string&)> set,
                  std::function<std::string(const RunConfig&)> get) {
    e.push_back({std::move(key), std::move(def), std::move(help),
                 std::move(set), std::move(get)});
  };

  // model
  add("model.layers", "7", "number of hybrid layers",
      [](RunConfig& c, const std::string& v) {
        c.model.layers = parse_num<int>(v, "model.layers");
      },
      [](const RunConfig& c) { return std::to_string(c.model.layers); });
  add("model.channels", "216", "channel width (even, divisible by heads)",
      [](RunConfig& c, const std::string& v) {
        c.model.channels = parse_num<int64_t>(v, "model.channels");
      },
      [](const RunConfig& c) { return std::to_string(c.model.channels); });
  add("model.heads", "9", "attention heads",
      [](RunConfig& c, const std::string& v) {
        c.model.heads = parse_num<int>(v, "model.heads");
      },
      [](const RunConfig& c) { return std::to_string(c.model.heads); });
  add("model.mti_scales", "1,3,5", "cycle kernel sizes",
      [](RunConfig& c, const std::string& v) {
        c.model.mti_scales = parse_int_list(v);
      },
      [](const RunConfig& c) { return render_int_list(c.model.mti_scales); });
  add("model.pool_layers", "4,6", "1-based layers that pool time stride 2",
      [](RunConfig& c, const std::string& v) {
        c.model.pool_layers = parse_int_list(v);
      },
      [](const RunConfig& c) { return render_int_list(c.model.pool_layers); });
  add("model.head_kind", "gap", "classifier head: gap or cov_pool",
      [](RunConfig& c, const std::string& v) {
        c.model.head_kind = head_from_string(v);
      },
      [](const RunConfig& c) { return to_string(c.model.head_kind); });
  add("model.scan", "t_scan", "scan layout: t_scan, ts_scan, st_scan, s_scan",
      [](RunConfig& c, const std::string& v) {
        c.model.scan = scan_strategy_from_string(v);
      },
      [](const RunConfig& c) { return to_string(c.model.scan); });
  add("model.n_classes", "60", "number of action classes",
      [](RunConfig& c, const std::string& v) {
        c.model.n_classes = parse_num<int>(v, "model.n_classes");
      },
      [](const RunConfig& c) { return std::to_string(c.model.n_classes); });
  add("model.stream", "joint", "input stream: joint, bone, joint_motion, bone_motion",
      [](RunConfig& c, const std::string& v) {
        c.model.stream = stream_from_string(v);
      },
      [](const RunConfig& c) { return to_string(c.model.stream); });
  add("model.frames", "64", "frames per sample after resampling",
      [](RunConfig& c, const std::string& v) {
        c.model.frames = parse_num<int>(v, "model.frames");
      },
      [](const RunConfig& c) { return std::to_string(c.model.frames); });
  add("model.topology", "ntu25", "skeleton topology name or file path",
      [](RunConfig& c, const std::string& v) { c.model.topology = v; },
      [](const RunConfig& c) { return c.model.topology; });
  add("model.n_state", "16", "SSM state size per channel",
      [](RunConfig& c, const std::string& v) {
        c.model.n_state = parse_num<int>(v, "model.n_state");
      },
      [](const RunConfig& c) { return std::to_string(c.model.n_state); });
  add("model.conv_width", "4", "causal conv kernel width",
      [](RunConfig& c, const std::string& v) {
        c.model.conv_width = parse_num<int>(v, "model.conv_width");
      },
      [](const RunConfig& c) { return std::to_string(c.model.conv_width); });
  add("model.expand", "1", "SSM inner width factor (C' = expand * C/2)",
      [](RunConfig& c, const std::string& v) {
        c.model.expand = parse_num<int>(v, "model.expand");
      },
      [](const RunConfig& c) { return std::to_string(c.model.expand); });
  add("model.max_hop", "8", "hop distance clamp for position encoding",
      [](RunConfig& c, const std::string& v) {
        c.model.max_hop = parse_num<int>(v, "model.max_hop");
      },
      [](const RunConfig& c) { return std::to_string(c.model.max_hop); });
  add("model.k_ns", "5", "Newton-Schulz iterations in the covariance head",
      [](RunConfig& c, const std::string& v) {
        c.model.k_ns = parse_num<int>(v, "model.k_ns");
      },
      [](const RunConfig& c) { return std::to_string(c.model.k_ns); });

  // train
  add("train.lr", "0.025", "initial learning rate",
      [](RunConfig& c, const std::string& v) {
        c.train.lr = parse_num<double>(v, "train.lr");
      },
      [](const RunConfig& c) { return fmt_double(c.train.lr); });
  add("train.momentum", "0.9", "SGD momentum",
      [](RunConfig& c, const std::string& v) {
        c.train.momentum = parse_num<double>(v, "train.momentum");
      },
      [](const RunConfig& c) { return fmt_double(c.train.momentum); });
  add("train.weight_decay", "0.0004", "L2 decay (skips norms and biases)",
      [](RunConfig& c, const std::string& v) {
        c.train.weight_decay = parse_num<double>(v, "train.weight_decay");
      },
      [](const RunConfig& c) { return fmt_double(c.train.weight_decay); });
  add("train.lr_milestones", "110,120", "epochs where lr multiplies by gamma",
      [](RunConfig& c, const std::string& v) {
        c.train.lr_milestones = parse_int_list(v);
      },
      [](const RunConfig& c) {
        return render_int_list(c.train.lr_milestones);
      });
  add("train.lr_gamma", "0.1", "lr decay factor at each milestone",
      [](RunConfig& c, const std::string& v) {
        c.train.lr_gamma = parse_num<double>(v, "train.lr_gamma");
      },
      [](const RunConfig& c) { return fmt_double(c.train.lr_gamma); });
  add("train.batch", "64", "batch size",
      [](RunConfig& c, const std::string& v) {
        c.train.batch = parse_num<int>(v, "train.batch");
      },
      [](const RunConfig& c) { return std::to_string(c.train.batch); });
  add("train.epochs", "30", "training epochs",
      [](RunConfig& c, const std::string& v) {
        c.train.epochs = parse_num<int>(v, "train.epochs");
      },
      [](const RunConfig& c) { return std::to_string(c.train.epochs); });
  add("train.seed", "1", "master seed for init, shuffling, augmentation",
      [](RunConfig& c, const std::string& v) {
        c.train.seed = parse_num<uint64_t>(v, "train.seed");
      },
      [](const RunConfig& c) { return std::to_string(c.train.seed); });
  add("train.clip_grad_norm", "0", "global grad-norm clip (0 disables)",
      [](RunConfig& c, const std::string& v) {
        c.train.clip_grad_norm = parse_num<double>(v, "train.clip_grad_norm");
      },
      [](const RunConfig& c) { return fmt_double(c.train.clip_grad_norm); });
  add("train.kd_warmup_epochs", "0", "epochs to ramp in the distillation term",
      [](RunConfig& c, const std::string& v) {
        c.train.kd_warmup_epochs = parse_num<int>(v, "train.kd_warmup_epochs");
      },
      [](const RunConfig& c) {
        return std::to_string(c.train.kd_warmup_epochs);
      });
  add("train.precision", "f32", "compute precision: f32 or f64",
      [](RunConfig& c, const std::string& v) {
        if (v != "f32" && v != "f64") {
          throw ConfigError("train.precision must be f32 or f64");
        }
        c.train.precision = v;
      },
      [](const RunConfig& c) { return c.train.precision; });

  // data
  add("data.source", "synthetic", "dataset source: synthetic or manifest",
      [](RunConfig& c, const std::string& v) {
        if (v != "synthetic" && v != "manifest") {
          throw ConfigError("data.source must be synthetic or manifest");
        }
        c.data.source = v;
      },
      [](const RunConfig& c) { return c.data.source; });
  add("data.manifest", "", "manifest path when data.source=manifest",
      [](RunConfig& c, const std::string& v) { c.data.manifest = v; },
      [](const RunConfig& c) { return c.data.manifest; });
  add("data.n_classes", "6", "synthetic class count",
      [](RunConfig& c, const std::string& v) {
        c.data.n_classes = parse_num<int>(v, "data.n_classes");
      },
      [](const RunConfig& c) { return std::to_string(c.data.n_classes); });
  add("data.n_per_class", "70", "synthetic samples per class",
      [](RunConfig& c, const std::string& v) {
        c.data.n_per_class = parse_num<int>(v, "data.n_per_class");
      },
      [](const RunConfig& c) { return std::to_string(c.data.n_per_class); });
  add("data.eval_fraction", "0.2857", "held-out fraction of the dataset",
      [](RunConfig& c, const std::string& v) {
        c.data.eval_fraction = parse_num<double>(v, "data.eval_fraction");
      },
      [](const RunConfig& c) { return fmt_double(c.data.eval_fraction); });
  add("data.t_raw", "48", "raw frame count of synthetic sequences",
      [](RunConfig& c, const std::string& v) {
        c.data.t_raw = parse_num<int>(v, "data.t_raw");
      },
      [](const RunConfig& c) { return std::to_string(c.data.t_raw); });
  add("data.noise_sigma", "0.02", "synthetic coordinate noise",
      [](RunConfig& c, const std::string& v) {
        c.data.noise_sigma = parse_num<double>(v, "data.noise_sigma");
      },
      [](const RunConfig& c) { return fmt_double(c.data.noise_sigma); });
  add("data.seed", "7", "dataset generation / split seed",
      [](RunConfig& c, const std::string& v) {
        c.data.seed = parse_num<uint64_t>(v, "data.seed");
      },
      [](const RunConfig& c) { return std::to_string(c.data.seed); });

  // kd
  add("kd.alpha", "1", "target-term weight",
      [](RunConfig& c, const std::string& v) {
        c.kd.alpha = parse_num<double>(v, "kd.alpha");
      },
      [](const RunConfig& c) { return fmt_double(c.kd.alpha); });
  add("kd.beta", "8", "non-target-term weight",
      [](RunConfig& c, const std::string& v) {
        c.kd.beta = parse_num<double>(v, "kd.beta");
      },
      [](const RunConfig& c) { return fmt_double(c.kd.beta); });
  add("kd.tau", "4", "distillation temperature",
      [](RunConfig& c, const std::string& v) {
        c.kd.tau = parse_num<double>(v, "kd.tau");
      },
      [](const RunConfig& c) { return fmt_double(c.kd.tau); });
  add("kd.teacher_first", "false", "swap KL orientation to teacher-first",
      [](RunConfig& c, const std::string& v) {
        c.kd.teacher_first = parse_bool(v, "kd.teacher_first");
      },
      [](const RunConfig& c) {
        return c.kd.teacher_first ? std::string("true") : std::string("false");
      });

  return e;
}

}  // namespace

const std::vector<SchemaEntry>& config_schema() {
  static const std::vector<SchemaEntry> schema = build_schema();
  return schema;
}

RunConfig default_run_config() { return RunConfig{}; }

void apply_override(RunConfig& cfg, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' must look like key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  for (const auto& e : config_schema()) {
    if (e.key == key) {
      e.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open config file " + path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& ex) {
    throw DataError("config " + path + ": " + ex.what());
  }
  RunConfig cfg;
  // flatten to dotted keys and route through the same validated setters
  std::function<void(const json&, const std::string&)> walk =
      [&](const json& node, const std::string& prefix) {
        if (node.is_object()) {
          for (auto it = node.begin(); it != node.end(); ++it) {
            walk(it.value(),
                 prefix.empty() ? it.key() : prefix + "." + it.key());
          }
          return;
        }
        std::string value;
        if (node.is_array()) {
          for (size_t i = 0; i < node.size(); ++i) {
            if (i) value += ",";
            value += node[i].dump();
          }
        } else if (node.is_string()) {
          value = node.get<std::string>();
        } else {
          value = node.dump();
        }
        apply_override(cfg, prefix + "=" + value);
      };
  walk(j, "");
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  for (const auto& e : config_schema()) {
    // rebuild the nested structure from dotted keys
    json* cur = &j;
    std::string rest = e.key;
    for (;;) {
      auto dot = rest.find('.');
      if (dot == std::string::npos) break;
      cur = &(*cur)[rest.substr(0, dot)];
      rest = rest.substr(dot + 1);
    }
    (*cur)[rest] = e.get(cfg);
  }
  return j.dump(2);
}

std::string schema_help_text() {
  std::string out = "configuration keys (key = default  description):\n";
  for (const auto& e : config_schema()) {
    std::string line = "  " + e.key + " = " + (e.def.empty() ? "\"\"" : e.def);
    while (line.size() < 38) line += ' ';
    out += line + " " + e.help + "\n";
  }
  return out;
}

Dataset build_dataset(const RunConfig& cfg) {
  if (cfg.data.source == "synthetic") {
    SkeletonTopology topo = builtin_topology(cfg.model.topology);
    return synth_dataset(cfg.data.n_classes, cfg.data.n_per_class,
                         cfg.data.t_raw, topo, cfg.data.seed,
                         cfg.data.noise_sigma);
  }
  if (cfg.data.manifest.empty()) {
    throw ConfigError("data.source=manifest requires data.manifest");
  }
  return load_manifest_dataset(cfg.data.manifest, 0);
}

}  // namespace skelmamba
