#pragma once

#include <vector>

#include "skelmamba/tensor.hpp"

namespace skelmamba {

// Per-channel time offset rule used by the cycle layer. `literal` is
// offset(c) = (c mod K) - 1; `centered` is (c mod K) - floor(K/2), which
// symmetrizes the window for K > 3.
enum class CycleOffset { literal, centered };

// Time boundary rule: wrap modulo T (default) or read zeros outside.
enum class CycleBoundary { wrap, zero_pad };

// Linear layer whose per-channel inputs are read from temporally offset
// frames; channel mixing across nearby times at no extra parameter cost.
struct CycleFcLayer {
  int kernel_size = 3;
  Tensor weight;  // (C_in, C_out)
  Tensor bias;    // (C_out)
  CycleOffset offset_rule = CycleOffset::literal;
  CycleBoundary boundary = CycleBoundary::wrap;

  static CycleFcLayer init(int64_t c_in, int64_t c_out, int kernel_size,
                           Rng& rng);
  int64_t param_count() const;
  int time_offset(int64_t channel) const;
};

// out[b, :, t, n] = sum_c H[b, c, (t + offset(c)) mod T, n] * W[c, :] + bias
// H: (B, C_in, T, N) -> (B, C_out, T, N). Emits a warning when K > T
// (wrap still defines it); throws ConfigError for K <= 0.
Tensor cycle_fc(const Tensor& H, const CycleFcLayer& layer);

// Residual multi-scale stack: out = H + sum_K cycle_fc_K(H). Each scale
// must preserve the channel width.
struct MtiModule {
  std::vector<CycleFcLayer> scales;

  static MtiModule init(int64_t channels, const std::vector<int>& kernel_sizes,
                        Rng& rng);
};

Tensor mti_forward(const Tensor& H, const MtiModule& module);

}  // namespace skelmamba
