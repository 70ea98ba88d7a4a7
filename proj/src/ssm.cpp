#include "skelmamba/ssm.hpp"

#include <cmath>
#include <cstring>

namespace skelmamba {

namespace {

constexpr double kSeriesThreshold = 1e-4;

// Bbar and its partials for one element. The exact closed form for a
// diagonal system is (exp(dA)-1)/A * B; delta cancels out of the inverse.
struct BbarEval {
  double value;
  double d_delta;
  double d_a;
  double d_b;
};

inline BbarEval bbar_eval(double a, double b, double dt, ZohMode mode) {
  BbarEval r{};
  if (mode == ZohMode::simplified) {
    r.value = dt * b;
    r.d_delta = b;
    r.d_a = 0.0;
    r.d_b = dt;
    return r;
  }
  const double da = dt * a;
  if (std::fabs(da) < kSeriesThreshold) {
    // series around da = 0: Bbar = dt*B*(1 + da/2)
    r.value = dt * b * (1.0 + 0.5 * da);
    r.d_delta = b * (1.0 + da);
    r.d_a = 0.5 * dt * dt * b;
    r.d_b = dt * (1.0 + 0.5 * da);
  } else {
    const double ea = std::exp(da);
    r.value = (ea - 1.0) / a * b;
    r.d_delta = ea * b;
    r.d_a = b * (dt * ea * a - (ea - 1.0)) / (a * a);
    r.d_b = (ea - 1.0) / a;
  }
  return r;
}

}  // namespace

// ------------------------------------------------------------------ discretize

std::pair<Tensor, Tensor> discretize(const Tensor& A, const Tensor& B,
                                     const Tensor& delta, ZohMode mode) {
  const double* pd = delta.data();
  for (int64_t i = 0; i < delta.numel(); ++i) {
    if (!(pd[i] > 0.0)) {
      throw ConfigError("discretize: delta must be strictly positive");
    }
  }
  Shape common = broadcast_shape(broadcast_shape(A.shape(), B.shape()),
                                 delta.shape());
  Tensor a = A.shape() == common ? A : broadcast_to(A, common);
  Tensor b = B.shape() == common ? B : broadcast_to(B, common);
  Tensor dt = delta.shape() == common ? delta : broadcast_to(delta, common);

  Tensor a_bar = exp(mul(dt, a));

  const int64_t n = shape_numel(common);
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();
  const double* pdt = dt.data();
  for (int64_t i = 0; i < n; ++i) {
    out[i] = bbar_eval(pa[i], pb[i], pdt[i], mode).value;
  }
  Tensor b_bar = make_op(
      "zoh_bbar", common, std::move(out), {a, b, dt}, [mode](detail::Node& nd) {
        const double* g = nd.grad.data();
        const double* pa2 = nd.parents[0]->value.data();
        const double* pb2 = nd.parents[1]->value.data();
        const double* pd2 = nd.parents[2]->value.data();
        double* ga = detail::parent_grad(nd, 0);
        double* gb = detail::parent_grad(nd, 1);
        double* gd = detail::parent_grad(nd, 2);
        for (int64_t i = 0; i < nd.numel(); ++i) {
          BbarEval e = bbar_eval(pa2[i], pb2[i], pd2[i], mode);
          if (ga) ga[i] += g[i] * e.d_a;
          if (gb) gb[i] += g[i] * e.d_b;
          if (gd) gd[i] += g[i] * e.d_delta;
        }
      });
  return {a_bar, b_bar};
}

// -------------------------------------------------------------- fused scan op

Tensor scan_recurrence(const Tensor& x, const Tensor& delta, const Tensor& A,
                       const Tensor& B, const Tensor& C, ZohMode mode,
                       int64_t chunk) {
  if (x.rank() != 3) {
    throw ShapeError("scan_recurrence: x must be (S,T,D), got " +
                     shape_str(x.shape()));
  }
  const int64_t S = x.dim(0), T = x.dim(1), D = x.dim(2);
  if (D <= 0) throw ConfigError("scan_recurrence: non-positive inner width");
  const int64_t N = A.dim(1);
  if (A.dim(0) != D) {
    throw ShapeError("scan_recurrence: A must be (D,N) with D=" +
                     std::to_string(D));
  }
  if (delta.shape() != x.shape()) {
    throw ShapeError("scan_recurrence: delta shape mismatch");
  }
  Shape sel{S, T, N};
  if (B.shape() != sel || C.shape() != sel) {
    throw ShapeError("scan_recurrence: B/C must be (S,T,N)");
  }
  if (chunk < 0) throw ConfigError("scan_recurrence: chunk must be positive");
  // cap the discretization scratch so long sequences stay cache-resident;
  // block boundaries do not change any per-element arithmetic
  const int64_t block =
      chunk == 0 ? std::max<int64_t>(1, std::min<int64_t>(T, 64)) : chunk;

  const bool needs_grad =
      grad_enabled() && (x.requires_grad() || delta.requires_grad() ||
                         A.requires_grad() || B.requires_grad() ||
                         C.requires_grad());

  std::vector<double> y(S * T * D, 0.0);
  // hidden-state trajectory, kept only when the backward pass needs it
  auto h_all = std::make_shared<std::vector<double>>();
  if (needs_grad) h_all->assign(size_t(S) * T * D * N, 0.0);

  const double* px = x.data();
  const double* pdt = delta.data();
  const double* pa = A.data();
  const double* pb = B.data();
  const double* pc = C.data();

  std::vector<double> h(size_t(D) * N);
  std::vector<double> abar_blk(size_t(block) * D * N);
  std::vector<double> bbar_blk(size_t(block) * D * N);

  for (int64_t s = 0; s < S; ++s) {
    std::fill(h.begin(), h.end(), 0.0);  // h_0 = 0 at sequence start
    for (int64_t t0 = 0; t0 < T; t0 += block) {
      const int64_t tb = std::min(block, T - t0);
      // discretize the block
      for (int64_t dt_i = 0; dt_i < tb; ++dt_i) {
        const int64_t t = t0 + dt_i;
        for (int64_t d = 0; d < D; ++d) {
          const double dtv = pdt[(s * T + t) * D + d];
          // dtv == 0 happens when softplus underflows in f32 mode; the
          // series branch turns it into an exact identity step
          if (!(dtv >= 0.0)) {
            if (dtv < 0.0) {
              throw ConfigError("scan_recurrence: delta must be positive");
            }
            throw NumericError("scan_recurrence: non-finite step size");
          }
          const double* arow = pa + d * N;
          double* ab = abar_blk.data() + (dt_i * D + d) * N;
          double* bb = bbar_blk.data() + (dt_i * D + d) * N;
          const double* brow = pb + (s * T + t) * N;
          for (int64_t n = 0; n < N; ++n) {
            ab[n] = std::exp(dtv * arow[n]);
            bb[n] = bbar_eval(arow[n], brow[n], dtv, mode).value;
          }
        }
      }
      // scan the block
      for (int64_t dt_i = 0; dt_i < tb; ++dt_i) {
        const int64_t t = t0 + dt_i;
        const double* crow = pc + (s * T + t) * N;
        for (int64_t d = 0; d < D; ++d) {
          const double xv = px[(s * T + t) * D + d];
          const double* ab = abar_blk.data() + (dt_i * D + d) * N;
          const double* bb = bbar_blk.data() + (dt_i * D + d) * N;
          double* hd = h.data() + d * N;
          double acc = 0.0;
          for (int64_t n = 0; n < N; ++n) {
            hd[n] = ab[n] * hd[n] + bb[n] * xv;
            acc += crow[n] * hd[n];
          }
          y[(s * T + t) * D + d] = acc;
          if (needs_grad) {
            std::memcpy(h_all->data() + ((size_t(s) * T + t) * D + d) * N, hd,
                        N * sizeof(double));
          }
        }
      }
    }
  }

  return make_op(
      "scan_recurrence", {S, T, D}, std::move(y), {x, delta, A, B, C},
      [S, T, D, N, mode, h_all](detail::Node& nd) {
        const double* g = nd.grad.data();
        const double* px2 = nd.parents[0]->value.data();
        const double* pdt2 = nd.parents[1]->value.data();
        const double* pa2 = nd.parents[2]->value.data();
        const double* pb2 = nd.parents[3]->value.data();
        const double* pc2 = nd.parents[4]->value.data();
        double* gx = detail::parent_grad(nd, 0);
        double* gdt = detail::parent_grad(nd, 1);
        double* ga = detail::parent_grad(nd, 2);
        double* gb = detail::parent_grad(nd, 3);
        double* gc = detail::parent_grad(nd, 4);
        const double* h = h_all->data();

        // gh_carry[n] = Abar_{t+1} (*) dL/dh_{t+1}, flowing into h_t
        std::vector<double> carry(size_t(D) * N);
        for (int64_t s = 0; s < S; ++s) {
          std::fill(carry.begin(), carry.end(), 0.0);
          for (int64_t t = T - 1; t >= 0; --t) {
            const double* crow = pc2 + (s * T + t) * N;
            const double* brow = pb2 + (s * T + t) * N;
            for (int64_t d = 0; d < D; ++d) {
              const double gy = g[(s * T + t) * D + d];
              const double xv = px2[(s * T + t) * D + d];
              const double dtv = pdt2[(s * T + t) * D + d];
              const double* arow = pa2 + d * N;
              const double* ht = h + ((size_t(s) * T + t) * D + d) * N;
              const double* hprev =
                  t > 0 ? h + ((size_t(s) * T + t - 1) * D + d) * N : nullptr;
              double* cr = carry.data() + d * N;
              double gx_acc = 0.0, gdt_acc = 0.0;
              for (int64_t n = 0; n < N; ++n) {
                const double gh = gy * crow[n] + cr[n];
                if (gc) gc[(s * T + t) * N + n] += gy * ht[n];
                const double hp = hprev ? hprev[n] : 0.0;
                const double abar = std::exp(dtv * arow[n]);
                const BbarEval e = bbar_eval(arow[n], brow[n], dtv, mode);
                const double g_abar = gh * hp;
                const double g_bbar = gh * xv;
                gx_acc += gh * e.value;
                gdt_acc += g_abar * arow[n] * abar + g_bbar * e.d_delta;
                if (ga) {
                  ga[d * N + n] += g_abar * dtv * abar + g_bbar * e.d_a;
                }
                if (gb) gb[(s * T + t) * N + n] += g_bbar * e.d_b;
                cr[n] = gh * abar;  // flows to h_{t-1}
              }
              if (gx) gx[(s * T + t) * D + d] += gx_acc;
              if (gdt) gdt[(s * T + t) * D + d] += gdt_acc;
            }
          }
        }
      });
}

// ----------------------------------------------------------------- parameters

SsmParams SsmParams::init(int64_t d_inner, int n_state, Rng& rng) {
  if (d_inner <= 0) throw ConfigError("ssm: non-positive inner width");
  if (n_state <= 0) throw ConfigError("ssm: non-positive state size");
  SsmParams p;
  p.n_state = n_state;

  // A = -(1..N) per channel
  std::vector<double> alog(size_t(d_inner) * n_state);
  for (int64_t d = 0; d < d_inner; ++d) {
    for (int n = 0; n < n_state; ++n) {
      alog[d * n_state + n] = std::log(double(n + 1));
    }
  }
  p.a_log = Tensor::from_data({d_inner, n_state}, std::move(alog), true);

  const double bound = 1.0 / std::sqrt(double(d_inner));
  p.w_b = Tensor::rand_uniform({d_inner, n_state}, rng, -bound, bound, true);
  p.w_c = Tensor::rand_uniform({d_inner, n_state}, rng, -bound, bound, true);

  const int64_t r = std::max<int64_t>(1, (d_inner + 15) / 16);
  p.w_dt_down = Tensor::rand_uniform({d_inner, r}, rng, -bound, bound, true);
  const double rbound = 1.0 / std::sqrt(double(r));
  p.w_dt_up = Tensor::rand_uniform({r, d_inner}, rng, -rbound, rbound, true);

  // sample initial dt log-uniform in [1e-3, 1e-1], bias = softplus^-1(dt)
  std::vector<double> bias(d_inner);
  for (int64_t d = 0; d < d_inner; ++d) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    bias[d] = std::log(std::expm1(dt));
  }
  p.b_dt = Tensor::from_data({d_inner}, std::move(bias), true);
  return p;
}

Tensor SsmParams::evolution() const { return neg(exp(a_log)); }

// ------------------------------------------------------------- selective scan

static Tensor selective_scan_impl(const Tensor& x, const SsmParams& p,
                                  int64_t chunk) {
  if (x.rank() != 3) {
    throw ShapeError("selective_scan: x must be (S,T,D), got " +
                     shape_str(x.shape()));
  }
  if (x.dim(2) <= 0) {
    throw ConfigError("selective_scan: non-positive inner width");
  }
  if (x.dim(2) != p.d_inner()) {
    throw ShapeError("selective_scan: channel width " +
                     std::to_string(x.dim(2)) + " does not match params " +
                     std::to_string(p.d_inner()));
  }
  if (x.dim(1) == 0) {
    return Tensor::zeros(x.shape());  // empty sequence, empty output
  }
  Tensor b_sel = matmul(x, p.w_b);  // (S,T,N)
  Tensor c_sel = matmul(x, p.w_c);  // (S,T,N)
  Tensor dt_raw = add(matmul(matmul(x, p.w_dt_down), p.w_dt_up), p.b_dt);
  Tensor delta = softplus(dt_raw);  // > 0 for all inputs
  return scan_recurrence(x, delta, p.evolution(), b_sel, c_sel, p.zoh, chunk);
}

Tensor selective_scan(const Tensor& x, const SsmParams& params) {
  return selective_scan_impl(x, params, 0);
}

Tensor selective_scan_chunked(const Tensor& x, const SsmParams& params,
                              int64_t chunk) {
  if (chunk <= 0) {
    throw ConfigError("selective_scan_chunked: chunk must be positive");
  }
  return selective_scan_impl(x, params, chunk);
}

// ------------------------------------------------------------- causal conv1d

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel,
                     const Tensor& bias) {
  if (x.rank() != 3 || kernel.rank() != 2) {
    throw ShapeError("causal_conv1d: expects x (S,T,D) and kernel (D,k)");
  }
  const int64_t S = x.dim(0), T = x.dim(1), D = x.dim(2);
  const int64_t kw = kernel.dim(1);
  if (kernel.dim(0) != D || bias.numel() != D) {
    throw ShapeError("causal_conv1d: kernel/bias width mismatch");
  }
  if (kw < 1) throw ConfigError("causal_conv1d: kernel width must be >= 1");

  std::vector<double> out(size_t(S) * T * D);
  const double* px = x.data();
  const double* pk = kernel.data();
  const double* pbias = bias.data();
  for (int64_t s = 0; s < S; ++s) {
    for (int64_t t = 0; t < T; ++t) {
      double* orow = out.data() + (s * T + t) * D;
      for (int64_t d = 0; d < D; ++d) {
        double acc = pbias[d];
        for (int64_t j = 0; j < kw; ++j) {
          const int64_t ti = t - kw + 1 + j;
          if (ti < 0) continue;  // left zero padding
          acc += pk[d * kw + j] * px[(s * T + ti) * D + d];
        }
        orow[d] = acc;
      }
    }
  }
  return make_op(
      "causal_conv1d", x.shape(), std::move(out), {x, kernel, bias},
      [S, T, D, kw](detail::Node& nd) {
        const double* g = nd.grad.data();
        const double* px2 = nd.parents[0]->value.data();
        const double* pk2 = nd.parents[1]->value.data();
        double* gx = detail::parent_grad(nd, 0);
        double* gk = detail::parent_grad(nd, 1);
        double* gbias = detail::parent_grad(nd, 2);
        for (int64_t s = 0; s < S; ++s) {
          for (int64_t t = 0; t < T; ++t) {
            const double* grow = g + (s * T + t) * D;
            for (int64_t d = 0; d < D; ++d) {
              const double gv = grow[d];
              if (gbias) gbias[d] += gv;
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t ti = t - kw + 1 + j;
                if (ti < 0) continue;
                if (gx) gx[(s * T + ti) * D + d] += gv * pk2[d * kw + j];
                if (gk) gk[d * kw + j] += gv * px2[(s * T + ti) * D + d];
              }
            }
          }
        }
      });
}

}  // namespace skelmamba
