#pragma once

#include <utility>

#include "skelmamba/tensor.hpp"

namespace skelmamba {

// Input-matrix discretization rule. `exact` is zero-order hold,
// Abar = exp(dA), Bbar = (dA)^-1 (exp(dA) - I) dB, with a series fallback
// near dA = 0. `simplified` is the common Bbar = dB shortcut, kept for
// cross-checks.
enum class ZohMode { exact, simplified };

// Per-direction selective SSM parameters. The state evolution is diagonal
// per channel: A[d][n] = -exp(a_log[d][n]), so it stays negative however
// training moves a_log. B_t, C_t and the step size are projections of the
// current input (the selection mechanism).
struct SsmParams {
  Tensor a_log;      // (D, N)
  Tensor w_b;        // (D, N)
  Tensor w_c;        // (D, N)
  Tensor w_dt_down;  // (D, r)
  Tensor w_dt_up;    // (r, D)
  Tensor b_dt;       // (D)
  int n_state = 16;
  ZohMode zoh = ZohMode::exact;

  // a_log = log(1..N) per channel; dt bias set so the initial step size
  // lands in [1e-3, 1e-1].
  static SsmParams init(int64_t d_inner, int n_state, Rng& rng);

  Tensor evolution() const;  // A = -exp(a_log), differentiable
  int64_t d_inner() const { return a_log.dim(0); }
};

// Discretizes (A, B) by step size delta (elementwise, shapes broadcast).
// Returns (A_bar, B_bar). Throws ConfigError when delta <= 0 anywhere.
std::pair<Tensor, Tensor> discretize(const Tensor& A, const Tensor& B,
                                     const Tensor& delta,
                                     ZohMode mode = ZohMode::exact);

// Core linear recurrence as one fused differentiable op:
//   h_t = A_bar_t (*) h_{t-1} + B_bar_t x_t,   y_t = <C_t, h_t>
// x, delta: (S, T, D); A: (D, N) negative; B, C: (S, T, N).
// chunk > 0 processes time in blocks of that size carrying the hidden
// state across block boundaries (identical arithmetic).
Tensor scan_recurrence(const Tensor& x, const Tensor& delta, const Tensor& A,
                       const Tensor& B, const Tensor& C,
                       ZohMode mode = ZohMode::exact, int64_t chunk = 0);

// Full selective scan: derives B_t, C_t, delta_t from x via the selection
// projections, then runs the recurrence. x: (S, T, D) -> (S, T, D).
Tensor selective_scan(const Tensor& x, const SsmParams& params);

// Block-processed variant; same semantics, throws ConfigError for
// chunk <= 0.
Tensor selective_scan_chunked(const Tensor& x, const SsmParams& params,
                              int64_t chunk);

// Depthwise causal 1-d convolution over time. x: (S, T, D),
// kernel: (D, k_w), bias: (D). Output at t uses inputs t-k_w+1 .. t with
// left zero padding; length preserved.
Tensor causal_conv1d(const Tensor& x, const Tensor& kernel,
                     const Tensor& bias);

}  // namespace skelmamba
