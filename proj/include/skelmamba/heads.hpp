#pragma once

#include <vector>

#include "skelmamba/tensor.hpp"

namespace skelmamba {

// Global-average-pooling classifier head.
struct GapHead {
  Tensor w;  // (C, n_classes)
  Tensor b;  // (n_classes)
  static GapHead init(int64_t channels, int64_t n_classes, Rng& rng);
};

Tensor gap_head(const Tensor& M, const GapHead& head);  // (B,C,T,N) -> (B,K)

// Second-order head: channel covariance, matrix square root by coupled
// Newton-Schulz iterations, upper-triangle vectorization, linear.
struct CovPoolHead {
  int iterations = 5;
  Tensor w;  // (C(C+1)/2, n_classes)
  Tensor b;  // (n_classes)
  static CovPoolHead init(int64_t channels, int64_t n_classes, int iterations,
                          Rng& rng);
};

// Sigma = O Itilde O^T with Itilde = (1/d)(I - (1/d) ones); equals the
// channel covariance (1/d)(O - mean)(O - mean)^T. O: (B, C, d), d >= 2.
Tensor cov_pool(const Tensor& O);

// Y ~ Sigma^(1/2). Trace-normalizes, runs the coupled iteration
//   Y_{k+1} = 1/2 Y_k (3I - Z_k Y_k),  Z_{k+1} = 1/2 (3I - Z_k Y_k) Z_k,
// then rescales by sqrt(tr). Differentiable by unrolling. Adds a one-shot
// diagonal jitter of 1e-6*C when the trace is non-positive.
Tensor newton_schulz_sqrt(const Tensor& sigma, int iterations);

// Row-major upper triangle including the diagonal; requires symmetry
// within 1e-6. (B, C, C) -> (B, C(C+1)/2).
Tensor upper_tri_vec(const Tensor& Y);

Tensor cov_head(const Tensor& M, const CovPoolHead& head);  // (B,C,T,N)->(B,K)

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Decoupled logit distillation: a binary target/non-target KL plus a KL
// between the renormalized non-target distributions, weighted alpha and
// beta. KL is student-first as the default orientation; `teacher_first`
// swaps it. Both terms carry the conventional tau^2 rescale.
struct DkdLoss {
  double alpha = 1.0;
  double beta = 8.0;
  double tau = 4.0;
  bool teacher_first = false;
};

Tensor dkd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                const std::vector<int>& labels, const DkdLoss& params);

Tensor trace(const Tensor& m);          // (...,C,C) -> (...)
Tensor batch_eye_like(const Tensor& m);  // identity with m's batch shape

}  // namespace skelmamba
