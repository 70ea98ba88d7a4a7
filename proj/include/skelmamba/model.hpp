#pragma once

#include <string>
#include <vector>

#include "skelmamba/attention.hpp"
#include "skelmamba/data.hpp"
#include "skelmamba/heads.hpp"
#include "skelmamba/tdm.hpp"

namespace skelmamba {

enum class HeadKind { gap, cov_pool };
HeadKind head_from_string(const std::string& s);
std::string to_string(HeadKind k);

struct ModelConfig {
  int layers = 7;
  int64_t channels = 216;
  int heads = 9;
  std::vector<int> mti_scales{1, 3, 5};
  std::vector<int> pool_layers{4, 6};  // 1-based indices that pool stride 2
  HeadKind head_kind = HeadKind::gap;
  ScanStrategy scan = ScanStrategy::t_scan;
  int n_classes = 60;
  StreamKind stream = StreamKind::joint;
  int frames = 64;
  std::string topology = "ntu25";
  int n_state = 16;
  int conv_width = 4;
  int expand = 1;  // SSM inner width C' = expand * C/2
  int max_hop = 8;
  int k_ns = 5;  // Newton-Schulz iterations for the covariance head

  // returns human-readable violations; empty when valid
  std::vector<std::string> violations() const;
};

ModelConfig full_preset();  // the full-scale architecture
ModelConfig desk_preset();  // small preset used by training checks

// Hybrid stack: stem, then `layers` x (spatial attention, temporal block),
// then the recognition head.
class Model {
 public:
  ModelConfig cfg;
  SkeletonTopology topology;

  Tensor stem_w, stem_b;  // 1x1 conv 3 -> C
  BatchNorm stem_bn;
  std::vector<SpatialAttnLayer> attn;
  std::vector<TdmBlock> tdm;
  GapHead gap;
  CovPoolHead cov;

  bool training = false;

  // (B, 3, T, N) -> (B, n_classes). T must be divisible by
  // 2^(number of stride-2 layers).
  Tensor forward(const Tensor& batch);

  struct Param {
    std::string name;
    Tensor tensor;
    bool decay;  // weight decay applies (norm params and biases excluded)
  };
  std::vector<Param> parameters();
  std::vector<Param> buffers();  // batch-norm running statistics
  int64_t param_count();
  uint64_t weights_signature();  // order-sensitive hash of all parameters
};

Model build_model(const ModelConfig& cfg, const SkeletonTopology& topology,
                  uint64_t seed);

// Closed-form count for the same configuration; tests pin it against
// Model::param_count().
int64_t model_param_count_formula(const ModelConfig& cfg);
int64_t attn_layer_param_count(int64_t channels, int heads, int max_hop);

// Checkpoint = directory of per-parameter tensor dumps, a manifest with
// name/shape/dtype/sha256 per entry, and a config snapshot.
void save_checkpoint(Model& model, const std::string& dir);
void load_checkpoint(Model& model, const std::string& dir);
ModelConfig checkpoint_config(const std::string& dir);

// Serialization of the config itself (used by checkpoints and run dirs).
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);

}  // namespace skelmamba
