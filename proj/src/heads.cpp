#include "skelmamba/heads.hpp"

#include <cmath>

namespace skelmamba {

GapHead GapHead::init(int64_t channels, int64_t n_classes, Rng& rng) {
  GapHead h;
  const double bound = 1.0 / std::sqrt(double(channels));
  h.w = Tensor::rand_uniform({channels, n_classes}, rng, -bound, bound, true);
  h.b = Tensor::zeros({n_classes}, true);
  return h;
}

Tensor gap_head(const Tensor& M, const GapHead& head) {
  if (M.rank() != 4) throw ShapeError("gap_head: input must be (B,C,T,N)");
  Tensor pooled = mean(mean(M, 3), 2);  // (B,C)
  return add(matmul(pooled, head.w), head.b);
}

CovPoolHead CovPoolHead::init(int64_t channels, int64_t n_classes,
                              int iterations, Rng& rng) {
  CovPoolHead h;
  h.iterations = iterations;
  const int64_t feat = channels * (channels + 1) / 2;
  const double bound = 1.0 / std::sqrt(double(feat));
  h.w = Tensor::rand_uniform({feat, n_classes}, rng, -bound, bound, true);
  h.b = Tensor::zeros({n_classes}, true);
  return h;
}

Tensor trace(const Tensor& m) {
  const int r = m.rank();
  if (r < 2 || m.dim(r - 1) != m.dim(r - 2)) {
    throw ShapeError("trace: expects square trailing dims, got " +
                     shape_str(m.shape()));
  }
  const int64_t C = m.dim(r - 1);
  Shape out_shape(m.shape().begin(), m.shape().end() - 2);
  const int64_t nb = shape_numel(out_shape);
  std::vector<double> out(nb, 0.0);
  const double* p = m.data();
  for (int64_t b = 0; b < nb; ++b) {
    for (int64_t i = 0; i < C; ++i) out[b] += p[b * C * C + i * C + i];
  }
  return make_op("trace", out_shape, std::move(out), {m},
                 [nb, C](detail::Node& nd) {
                   double* gm = detail::parent_grad(nd, 0);
                   if (!gm) return;
                   const double* g = nd.grad.data();
                   for (int64_t b = 0; b < nb; ++b) {
                     for (int64_t i = 0; i < C; ++i) {
                       gm[b * C * C + i * C + i] += g[b];
                     }
                   }
                 });
}

Tensor batch_eye_like(const Tensor& m) {
  const int r = m.rank();
  const int64_t C = m.dim(r - 1);
  Shape shape = m.shape();
  const int64_t nb = shape_numel(Shape(shape.begin(), shape.end() - 2));
  std::vector<double> data(size_t(nb) * C * C, 0.0);
  for (int64_t b = 0; b < nb; ++b) {
    for (int64_t i = 0; i < C; ++i) data[b * C * C + i * C + i] = 1.0;
  }
  return Tensor::from_data(shape, std::move(data));
}

Tensor cov_pool(const Tensor& O) {
  if (O.rank() != 3) throw ShapeError("cov_pool: input must be (B,C,d)");
  const int64_t d = O.dim(2);
  if (d < 2) {
    throw DataError("cov_pool: degenerate input, needs d >= 2 samples, got " +
                    std::to_string(d));
  }
  Tensor mu = mean(O, 2, /*keepdim=*/true);        // (B,C,1)
  Tensor centered = sub(O, mu);                    // broadcast over d
  Tensor prod = matmul(centered, transpose(centered, -1, -2));
  return mul_scalar(prod, 1.0 / double(d));
}

Tensor newton_schulz_sqrt(const Tensor& sigma, int iterations) {
  const int r = sigma.rank();
  if (r < 2 || sigma.dim(r - 1) != sigma.dim(r - 2)) {
    throw ShapeError("newton_schulz_sqrt: expects (...,C,C)");
  }
  const int64_t C = sigma.dim(r - 1);
  if (iterations < 1) {
    throw ConfigError("newton_schulz_sqrt: need at least one iteration");
  }

  Tensor input = sigma;
  Tensor tr = trace(input);
  // non-positive trace: jitter the diagonal once and retry
  {
    const double* pt = tr.data();
    bool bad = false;
    for (int64_t i = 0; i < tr.numel(); ++i) {
      if (!(pt[i] > 0.0)) bad = true;
    }
    if (bad) {
      Tensor jitter = mul_scalar(batch_eye_like(sigma), 1e-6 * double(C));
      input = add(sigma, jitter);
      tr = trace(input);
      const double* pt2 = tr.data();
      for (int64_t i = 0; i < tr.numel(); ++i) {
        if (!(pt2[i] > 0.0)) {
          throw NumericError(
              "newton_schulz_sqrt: trace non-positive after jitter");
        }
      }
    }
  }

  Shape tr_shape = tr.shape();
  tr_shape.push_back(1);
  tr_shape.push_back(1);
  Tensor tr_b = reshape(tr, tr_shape);  // broadcastable over (C,C)

  Tensor eye = batch_eye_like(input);
  Tensor eye3 = mul_scalar(eye, 3.0);
  Tensor y = mul(input, reciprocal(tr_b));  // Y0 = Sigma / tr
  Tensor z = eye;                           // Z0 = I
  for (int k = 0; k < iterations; ++k) {
    Tensor m = sub(eye3, matmul(z, y));  // 3I - Z Y
    Tensor y_next = mul_scalar(matmul(y, m), 0.5);
    Tensor z_next = mul_scalar(matmul(m, z), 0.5);
    y = y_next;
    z = z_next;
  }
  return mul(y, sqrt(tr_b));  // restore magnitude
}

Tensor upper_tri_vec(const Tensor& Y) {
  const int r = Y.rank();
  if (r < 2 || Y.dim(r - 1) != Y.dim(r - 2)) {
    throw ShapeError("upper_tri_vec: expects (...,C,C)");
  }
  const int64_t C = Y.dim(r - 1);
  Shape batch(Y.shape().begin(), Y.shape().end() - 2);
  const int64_t nb = shape_numel(batch);
  const double* p = Y.data();
  for (int64_t b = 0; b < nb; ++b) {
    const double* m = p + b * C * C;
    for (int64_t i = 0; i < C; ++i) {
      for (int64_t j = i + 1; j < C; ++j) {
        if (std::fabs(m[i * C + j] - m[j * C + i]) > 1e-6) {
          throw ConfigError("upper_tri_vec: input asymmetric beyond 1e-6");
        }
      }
    }
  }
  const int64_t L = C * (C + 1) / 2;
  Shape out_shape = batch;
  out_shape.push_back(L);
  std::vector<double> out(size_t(nb) * L);
  for (int64_t b = 0; b < nb; ++b) {
    const double* m = p + b * C * C;
    int64_t k = 0;
    for (int64_t i = 0; i < C; ++i) {
      for (int64_t j = i; j < C; ++j) out[b * L + k++] = m[i * C + j];
    }
  }
  return make_op("upper_tri_vec", out_shape, std::move(out), {Y},
                 [nb, C, L](detail::Node& nd) {
                   double* gy = detail::parent_grad(nd, 0);
                   if (!gy) return;
                   const double* g = nd.grad.data();
                   for (int64_t b = 0; b < nb; ++b) {
                     int64_t k = 0;
                     for (int64_t i = 0; i < C; ++i) {
                       for (int64_t j = i; j < C; ++j) {
                         gy[b * C * C + i * C + j] += g[b * L + k++];
                       }
                     }
                   }
                 });
}

Tensor cov_head(const Tensor& M, const CovPoolHead& head) {
  if (M.rank() != 4) throw ShapeError("cov_head: input must be (B,C,T,N)");
  const int64_t B = M.dim(0), C = M.dim(1), T = M.dim(2), N = M.dim(3);
  Tensor O = reshape(M, {B, C, T * N});
  Tensor sigma = cov_pool(O);
  Tensor y = newton_schulz_sqrt(sigma, head.iterations);
  // the iteration loses exact symmetry in floating point; symmetrize
  // before taking the upper triangle
  Tensor y_sym = mul_scalar(add(y, transpose(y, -1, -2)), 0.5);
  Tensor feat = upper_tri_vec(y_sym);
  return add(matmul(feat, head.w), head.b);
}

// ----------------------------------------------------------------- losses

namespace {

// picks out[b] = x[b, labels[b]]
Tensor select_labels(const Tensor& x, const std::vector<int>& labels) {
  const int64_t B = x.dim(0), K = x.dim(1);
  if (static_cast<int64_t>(labels.size()) != B) {
    throw ShapeError("labels length does not match batch");
  }
  for (int v : labels) {
    if (v < 0 || v >= K) {
      throw DataError("label " + std::to_string(v) + " out of range [0," +
                      std::to_string(K) + ")");
    }
  }
  std::vector<double> out(B);
  const double* p = x.data();
  for (int64_t b = 0; b < B; ++b) out[b] = p[b * K + labels[b]];
  return make_op("select_labels", {B}, std::move(out), {x},
                 [labels, K](detail::Node& nd) {
                   double* gx = detail::parent_grad(nd, 0);
                   if (!gx) return;
                   const double* g = nd.grad.data();
                   for (size_t b = 0; b < labels.size(); ++b) {
                     gx[b * K + labels[b]] += g[b];
                   }
                 });
}

Tensor onehot_const(const std::vector<int>& labels, int64_t K) {
  const int64_t B = static_cast<int64_t>(labels.size());
  std::vector<double> d(B * K, 0.0);
  for (int64_t b = 0; b < B; ++b) d[b * K + labels[b]] = 1.0;
  return Tensor::from_data({B, K}, std::move(d));
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits must be (B,K)");
  }
  Tensor ls = log_softmax(logits, 1);
  Tensor picked = select_labels(ls, labels);
  return neg(mean(picked));
}

Tensor dkd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                const std::vector<int>& labels, const DkdLoss& params) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("dkd_loss: student/teacher logits must match, got " +
                     shape_str(student_logits.shape()) + " vs " +
                     shape_str(teacher_logits.shape()));
  }
  if (student_logits.rank() != 2) {
    throw ShapeError("dkd_loss: logits must be (B,K)");
  }
  const int64_t K = student_logits.dim(1);
  if (K < 2) {
    throw ConfigError(
        "dkd_loss: needs at least 2 classes for the non-target term");
  }
  const double inv_tau = 1.0 / params.tau;
  Tensor s = softmax(mul_scalar(student_logits, inv_tau), 1);
  Tensor t = softmax(mul_scalar(teacher_logits.detach(), inv_tau), 1);

  Tensor onehot = onehot_const(labels, K);
  Tensor mask = sub(Tensor::full({1}, 1.0), onehot);  // non-target indicator

  // binary split: (target mass, non-target mass); tiny floor keeps the
  // logs finite in saturated cases without moving the minimum
  auto guarded = [](const Tensor& x) { return add_scalar(x, 1e-30); };
  Tensor pt_s = guarded(sum(mul(s, onehot), 1));
  Tensor pt_t = guarded(sum(mul(t, onehot), 1));
  Tensor pn_s = guarded(sum(mul(s, mask), 1));
  Tensor pn_t = guarded(sum(mul(t, mask), 1));

  auto kl2 = [](const Tensor& a1, const Tensor& a2, const Tensor& b1,
                const Tensor& b2) {
    // KL((a1,a2) || (b1,b2)) elementwise over the batch
    Tensor term1 = mul(a1, sub(log(a1), log(b1)));
    Tensor term2 = mul(a2, sub(log(a2), log(b2)));
    return add(term1, term2);
  };
  Tensor takd = params.teacher_first ? kl2(pt_t, pn_t, pt_s, pn_s)
                                     : kl2(pt_s, pn_s, pt_t, pn_t);

  // renormalized non-target distributions
  Tensor pn_s_keep = reshape(pn_s, {pn_s.dim(0), 1});
  Tensor pn_t_keep = reshape(pn_t, {pn_t.dim(0), 1});
  Tensor m_s = guarded(mul(mul(s, mask), reciprocal(pn_s_keep)));
  Tensor m_t = guarded(mul(mul(t, mask), reciprocal(pn_t_keep)));
  Tensor first = params.teacher_first ? m_t : m_s;
  Tensor second = params.teacher_first ? m_s : m_t;
  Tensor elem = mul(mask, mul(first, sub(log(first), log(second))));
  Tensor nakd = sum(elem, 1);

  const double tau2 = params.tau * params.tau;
  Tensor loss = add(mul_scalar(takd, params.alpha * tau2),
                    mul_scalar(nakd, params.beta * tau2));
  return mean(loss);
}

}  // namespace skelmamba
