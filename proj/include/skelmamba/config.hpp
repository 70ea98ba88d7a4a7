#pragma once

#include <functional>
#include <string>
#include <vector>

#include "skelmamba/heads.hpp"
#include "skelmamba/model.hpp"
#include "skelmamba/train.hpp"

namespace skelmamba {

// Everything a run needs, addressable by dotted keys ("model.channels").
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  struct DataCfg {
    std::string source = "synthetic";  // "synthetic" or "manifest"
    std::string manifest;
    int n_classes = 6;
    int n_per_class = 70;
    double eval_fraction = 0.2857;  // 300 train / 120 eval at the default
    int t_raw = 48;
    double noise_sigma = 0.02;
    uint64_t seed = 7;
  } data;
  DkdLoss kd;
};

struct SchemaEntry {
  std::string key;
  std::string def;   // default rendered as text
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<SchemaEntry>& config_schema();

RunConfig default_run_config();

// "model.channels=32"; throws ConfigError on unknown keys or bad values.
void apply_override(RunConfig& cfg, const std::string& assignment);

// JSON config file; unknown keys are rejected, not ignored.
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

// One line per key: "key = default    help". The doc-drift test compares
// this against the schema.
std::string schema_help_text();

// Builds the dataset a run asks for (synthetic generator or manifest).
Dataset build_dataset(const RunConfig& cfg);

}  // namespace skelmamba
