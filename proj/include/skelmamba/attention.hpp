#pragma once

#include "skelmamba/tensor.hpp"
#include "skelmamba/topology.hpp"

namespace skelmamba {

// Multi-head self-attention over joints, applied independently per frame,
// with a relative position term indexed by hop distance:
//   logits = (Q K^T + Q R^T) / sqrt(d_head),  R[i,j] = E[min(hop(i,j), max_hop)]
struct SpatialAttnLayer {
  int heads = 9;
  int max_hop = 8;
  bool scale_logits = true;  // disable to apply the raw logits
  Tensor ln_gamma, ln_beta;  // pre-norm over channels
  Tensor wq, wk, wv, wo;     // (C, C)
  Tensor hop_embed;          // (max_hop+1, heads, d_head)

  static SpatialAttnLayer init(int64_t channels, int heads, int max_hop,
                               Rng& rng);
  int64_t d_head(int64_t channels) const { return channels / heads; }
};

struct SpatialAttnResult {
  Tensor output;   // (B, C, T, N)
  Tensor weights;  // (B, T, heads, N, N), rows sum to 1
};

// Residual pre-norm attention block; shape preserved. Throws ConfigError
// when C is not divisible by the head count.
Tensor spatial_attention(const Tensor& H, const SpatialAttnLayer& layer,
                         const SkeletonTopology& topology);

SpatialAttnResult spatial_attention_full(const Tensor& H,
                                         const SpatialAttnLayer& layer,
                                         const SkeletonTopology& topology);

}  // namespace skelmamba
