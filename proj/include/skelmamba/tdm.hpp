#pragma once

#include <string>
#include <vector>

#include "skelmamba/cycle.hpp"
#include "skelmamba/ssm.hpp"
#include "skelmamba/tensor.hpp"

namespace skelmamba {

// How the (B, C, T, N) feature map is flattened into 1-d sequences for
// the scan. t_scan keeps one length-T sequence per (batch, joint) pair;
// the others are ablation layouts.
enum class ScanStrategy { t_scan, ts_scan, st_scan, s_scan };

ScanStrategy scan_strategy_from_string(const std::string& s);
std::string to_string(ScanStrategy s);

// Per-channel batch normalization over (B, T, N). Running statistics are
// plain buffers updated only in training mode.
struct BatchNorm {
  Tensor gamma, beta;              // (C), trainable
  Tensor running_mean, running_var;  // (C), buffers
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm init(int64_t channels);
  Tensor forward(const Tensor& x, bool training);  // x: (B,C,T,N)
};

enum class PoolKind { average, max };

// One scan direction: in-projections, causal conv, selective SSM, gate,
// out-projection. The two directions of a block hold independent copies.
struct TdmBranch {
  Tensor w_f1, w_f2;  // (C/2, C')
  Tensor conv_kernel;  // (C', k_w)
  Tensor conv_bias;    // (C')
  SsmParams ssm;       // inner width C'
  Tensor w_f3;         // (C', C/2)

  static TdmBranch init(int64_t c_half, int64_t c_inner, int n_state,
                        int conv_width, Rng& rng);
};

// Temporal block: norm -> channel projection to C/2 -> multi-scale cycle
// mixing -> bidirectional selective scan -> concat back to C -> norm ->
// temporal pooling.
struct TdmBlock {
  int64_t channels = 0;  // C, must be even
  Tensor ln_in_gamma, ln_in_beta;
  Tensor proj_w;  // (C, C/2)
  Tensor proj_b;  // (C/2)
  BatchNorm bn;   // over C/2
  MtiModule mti;  // on C/2
  TdmBranch fwd, bwd;
  Tensor ln_fuse_gamma, ln_fuse_beta;  // (C)
  int pool_stride = 1;                 // 1 or 2
  PoolKind pool = PoolKind::average;
  ScanStrategy scan = ScanStrategy::t_scan;
  bool residual = true;  // identity path around the block, added pre-pool

  struct Options {
    std::vector<int> mti_scales{1, 3, 5};
    int n_state = 16;
    int conv_width = 4;
    int expand = 1;  // C' = expand * C/2
    int pool_stride = 1;
    ScanStrategy scan = ScanStrategy::t_scan;
    bool residual = true;
  };
  static TdmBlock init(int64_t channels, const Options& opt, Rng& rng);
};

// LN over channels, 1x1 conv C -> C/2, batch norm, ReLU. Throws
// ConfigError for odd C.
Tensor channel_project(const Tensor& H, TdmBlock& block, bool training);

// (B, C, T, N) -> (streams, length, C) per strategy, and its inverse.
Tensor make_scan_sequence(const Tensor& omega, ScanStrategy s);
Tensor unmake_scan_sequence(const Tensor& seq, ScanStrategy s, int64_t B,
                            int64_t T, int64_t N);

// Ceil-mode average pooling along the time axis of (B, C, T, N);
// stride 1 is the identity.
Tensor temporal_pool(const Tensor& x, int stride, PoolKind kind);

Tensor tdm_forward(const Tensor& H, TdmBlock& block, bool training);

// Pre-fusion branch outputs (forward branch as computed; backward branch
// before flipping back), used by the causality checks.
struct TdmIntermediates {
  Tensor forward_branch;   // (streams, length, C/2)
  Tensor backward_branch;  // (streams, length, C/2), reversed-time order
  Tensor output;           // (B, C, T', N)
};
TdmIntermediates tdm_forward_full(const Tensor& H, TdmBlock& block,
                                  bool training);

// Closed-form parameter count of one block (audited against the actual
// tensors in tests).
int64_t tdm_block_param_count(int64_t channels, int n_scales, int n_state,
                              int conv_width, int expand);

}  // namespace skelmamba
