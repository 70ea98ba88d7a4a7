#include "skelmamba/tdm.hpp"

#include <cmath>

namespace skelmamba {

ScanStrategy scan_strategy_from_string(const std::string& s) {
  if (s == "t_scan") return ScanStrategy::t_scan;
  if (s == "ts_scan") return ScanStrategy::ts_scan;
  if (s == "st_scan") return ScanStrategy::st_scan;
  if (s == "s_scan") return ScanStrategy::s_scan;
  throw ConfigError("unknown scan strategy '" + s +
                    "' (t_scan, ts_scan, st_scan, s_scan)");
}

std::string to_string(ScanStrategy s) {
  switch (s) {
    case ScanStrategy::t_scan: return "t_scan";
    case ScanStrategy::ts_scan: return "ts_scan";
    case ScanStrategy::st_scan: return "st_scan";
    case ScanStrategy::s_scan: return "s_scan";
  }
  return "?";
}

// ------------------------------------------------------------------ batchnorm

BatchNorm BatchNorm::init(int64_t channels) {
  BatchNorm bn;
  bn.gamma = Tensor::full({channels}, 1.0, true);
  bn.beta = Tensor::zeros({channels}, true);
  bn.running_mean = Tensor::zeros({channels});
  bn.running_var = Tensor::full({channels}, 1.0);
  return bn;
}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
  if (x.rank() != 4) {
    throw ShapeError("batch_norm: input must be (B,C,T,N)");
  }
  const int64_t B = x.dim(0), C = x.dim(1), T = x.dim(2), N = x.dim(3);
  if (gamma.numel() != C) throw ShapeError("batch_norm: channel mismatch");
  const int64_t lane = B * T * N;

  std::vector<double> mean_v(C), var_v(C);
  if (training) {
    const double* p = x.data();
    for (int64_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const double* row = p + (b * C + c) * T * N;
        for (int64_t i = 0; i < T * N; ++i) m += row[i];
      }
      m /= double(lane);
      double v = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const double* row = p + (b * C + c) * T * N;
        for (int64_t i = 0; i < T * N; ++i) {
          const double d = row[i] - m;
          v += d * d;
        }
      }
      v /= double(lane);
      mean_v[c] = m;
      var_v[c] = v;
      // update running stats (training-mode side effect)
      running_mean.data()[c] =
          (1.0 - momentum) * running_mean.data()[c] + momentum * m;
      running_var.data()[c] =
          (1.0 - momentum) * running_var.data()[c] + momentum * v;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean_v[c] = running_mean.data()[c];
      var_v[c] = running_var.data()[c];
    }
  }

  std::vector<double> out(x.numel());
  const double* p = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  std::vector<double> rstd(C);
  for (int64_t c = 0; c < C; ++c) rstd[c] = 1.0 / std::sqrt(var_v[c] + eps);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const double* row = p + (b * C + c) * T * N;
      double* orow = out.data() + (b * C + c) * T * N;
      const double m = mean_v[c], r = rstd[c], g = pg[c], bi = pb[c];
      for (int64_t i = 0; i < T * N; ++i) orow[i] = (row[i] - m) * r * g + bi;
    }
  }

  const double eps_ = eps;
  return make_op(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [B, C, T, N, lane, training, mean_v = std::move(mean_v),
       var_v = std::move(var_v), eps_](detail::Node& nd) {
        const double* g = nd.grad.data();
        const double* px = nd.parents[0]->value.data();
        const double* pg2 = nd.parents[1]->value.data();
        double* gx = detail::parent_grad(nd, 0);
        double* gg = detail::parent_grad(nd, 1);
        double* gb = detail::parent_grad(nd, 2);
        for (int64_t c = 0; c < C; ++c) {
          const double m = mean_v[c];
          const double r = 1.0 / std::sqrt(var_v[c] + eps_);
          double sum_g = 0.0, sum_g_xhat = 0.0;
          for (int64_t b = 0; b < B; ++b) {
            const double* grow = g + (b * C + c) * T * N;
            const double* xrow = px + (b * C + c) * T * N;
            for (int64_t i = 0; i < T * N; ++i) {
              sum_g += grow[i];
              sum_g_xhat += grow[i] * (xrow[i] - m) * r;
            }
          }
          if (gg) gg[c] += sum_g_xhat;
          if (gb) gb[c] += sum_g;
          if (gx) {
            const double gam = pg2[c];
            for (int64_t b = 0; b < B; ++b) {
              const double* grow = g + (b * C + c) * T * N;
              const double* xrow = px + (b * C + c) * T * N;
              double* gxrow = gx + (b * C + c) * T * N;
              for (int64_t i = 0; i < T * N; ++i) {
                const double xhat = (xrow[i] - m) * r;
                if (training) {
                  gxrow[i] += gam * r *
                              (grow[i] - sum_g / double(lane) -
                               xhat * sum_g_xhat / double(lane));
                } else {
                  gxrow[i] += gam * r * grow[i];  // fixed statistics
                }
              }
            }
          }
        }
      });
}

// ----------------------------------------------------------------- components

TdmBranch TdmBranch::init(int64_t c_half, int64_t c_inner, int n_state,
                          int conv_width, Rng& rng) {
  TdmBranch br;
  const double bound = 1.0 / std::sqrt(double(c_half));
  br.w_f1 = Tensor::rand_uniform({c_half, c_inner}, rng, -bound, bound, true);
  br.w_f2 = Tensor::rand_uniform({c_half, c_inner}, rng, -bound, bound, true);
  const double kb = 1.0 / std::sqrt(double(conv_width));
  br.conv_kernel =
      Tensor::rand_uniform({c_inner, conv_width}, rng, -kb, kb, true);
  br.conv_bias = Tensor::zeros({c_inner}, true);
  Rng ssm_rng = rng.fork("ssm");
  br.ssm = SsmParams::init(c_inner, n_state, ssm_rng);
  const double ob = 1.0 / std::sqrt(double(c_inner));
  br.w_f3 = Tensor::rand_uniform({c_inner, c_half}, rng, -ob, ob, true);
  return br;
}

TdmBlock TdmBlock::init(int64_t channels, const Options& opt, Rng& rng) {
  if (channels <= 0 || channels % 2 != 0) {
    throw ConfigError("tdm: channel width must be even, got " +
                      std::to_string(channels));
  }
  if (opt.pool_stride != 1 && opt.pool_stride != 2) {
    throw ConfigError("tdm: pool stride must be 1 or 2");
  }
  TdmBlock b;
  b.channels = channels;
  const int64_t ch = channels / 2;
  const int64_t ci = ch * opt.expand;
  b.ln_in_gamma = Tensor::full({channels}, 1.0, true);
  b.ln_in_beta = Tensor::zeros({channels}, true);
  const double bound = 1.0 / std::sqrt(double(channels));
  b.proj_w = Tensor::rand_uniform({channels, ch}, rng, -bound, bound, true);
  b.proj_b = Tensor::zeros({ch}, true);
  b.bn = BatchNorm::init(ch);
  Rng mti_rng = rng.fork("mti");
  b.mti = MtiModule::init(ch, opt.mti_scales, mti_rng);
  Rng fwd_rng = rng.fork("fwd");
  Rng bwd_rng = rng.fork("bwd");
  b.fwd = TdmBranch::init(ch, ci, opt.n_state, opt.conv_width, fwd_rng);
  b.bwd = TdmBranch::init(ch, ci, opt.n_state, opt.conv_width, bwd_rng);
  b.ln_fuse_gamma = Tensor::full({channels}, 1.0, true);
  b.ln_fuse_beta = Tensor::zeros({channels}, true);
  b.pool_stride = opt.pool_stride;
  b.scan = opt.scan;
  b.residual = opt.residual;
  return b;
}

Tensor channel_project(const Tensor& H, TdmBlock& block, bool training) {
  const int64_t C = H.dim(1);
  if (C % 2 != 0) {
    throw ConfigError("channel_project: channel width must be even, got " +
                      std::to_string(C));
  }
  if (C != block.channels) {
    throw ShapeError("channel_project: block built for " +
                     std::to_string(block.channels) + " channels");
  }
  // LN over the channel axis, per position
  Tensor xn = layer_norm(H, 1, block.ln_in_gamma, block.ln_in_beta, 1e-5);
  // 1x1 conv as a channel-last matmul
  Tensor xl = permute(xn, {0, 2, 3, 1});                 // (B,T,N,C)
  Tensor proj = add(matmul(xl, block.proj_w), block.proj_b);
  Tensor back = permute(proj, {0, 3, 1, 2});             // (B,C/2,T,N)
  return relu(block.bn.forward(back, training));
}

Tensor make_scan_sequence(const Tensor& omega, ScanStrategy s) {
  const int64_t B = omega.dim(0), C = omega.dim(1), T = omega.dim(2),
                N = omega.dim(3);
  switch (s) {
    case ScanStrategy::t_scan:
      // one temporal token sequence per (batch, joint)
      return reshape(permute(omega, {0, 3, 2, 1}), {B * N, T, C});
    case ScanStrategy::s_scan:
      return reshape(permute(omega, {0, 2, 3, 1}), {B * T, N, C});
    case ScanStrategy::ts_scan:
      // joint-major: v_{1,1..T}, v_{2,1..T}, ...
      return reshape(permute(omega, {0, 3, 2, 1}), {B, N * T, C});
    case ScanStrategy::st_scan:
      // frame-major: v_{1..N,1}, v_{1..N,2}, ...
      return reshape(permute(omega, {0, 2, 3, 1}), {B, T * N, C});
  }
  throw ConfigError("make_scan_sequence: bad strategy");
}

Tensor unmake_scan_sequence(const Tensor& seq, ScanStrategy s, int64_t B,
                            int64_t T, int64_t N) {
  const int64_t C = seq.dim(2);
  switch (s) {
    case ScanStrategy::t_scan:
      return permute(reshape(seq, {B, N, T, C}), {0, 3, 2, 1});
    case ScanStrategy::s_scan:
      return permute(reshape(seq, {B, T, N, C}), {0, 3, 1, 2});
    case ScanStrategy::ts_scan:
      return permute(reshape(seq, {B, N, T, C}), {0, 3, 2, 1});
    case ScanStrategy::st_scan:
      return permute(reshape(seq, {B, T, N, C}), {0, 3, 1, 2});
  }
  throw ConfigError("unmake_scan_sequence: bad strategy");
}

Tensor temporal_pool(const Tensor& x, int stride, PoolKind kind) {
  if (stride == 1) return x;
  if (stride != 2) throw ConfigError("temporal_pool: stride must be 1 or 2");
  const int64_t B = x.dim(0), C = x.dim(1), T = x.dim(2), N = x.dim(3);
  const int64_t To = (T + 1) / 2;  // ceil
  std::vector<double> out(size_t(B) * C * To * N);
  std::vector<uint8_t> argmax;  // for max pooling backward
  if (kind == PoolKind::max) argmax.assign(out.size(), 0);
  const double* p = x.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    for (int64_t to = 0; to < To; ++to) {
      const int64_t t0 = 2 * to;
      const bool pair = t0 + 1 < T;
      const double* r0 = p + (bc * T + t0) * N;
      const double* r1 = pair ? p + (bc * T + t0 + 1) * N : nullptr;
      double* orow = out.data() + (bc * To + to) * N;
      for (int64_t n = 0; n < N; ++n) {
        if (kind == PoolKind::average) {
          orow[n] = pair ? 0.5 * (r0[n] + r1[n]) : r0[n];
        } else {
          if (pair && r1[n] > r0[n]) {
            orow[n] = r1[n];
            argmax[(bc * To + to) * N + n] = 1;
          } else {
            orow[n] = r0[n];
          }
        }
      }
    }
  }
  return make_op(
      "temporal_pool", {B, C, To, N}, std::move(out), {x},
      [B, C, T, N, To, kind, argmax = std::move(argmax)](detail::Node& nd) {
        double* gx = detail::parent_grad(nd, 0);
        if (!gx) return;
        const double* g = nd.grad.data();
        for (int64_t bc = 0; bc < B * C; ++bc) {
          for (int64_t to = 0; to < To; ++to) {
            const int64_t t0 = 2 * to;
            const bool pair = t0 + 1 < T;
            const double* grow = g + (bc * To + to) * N;
            double* g0 = gx + (bc * T + t0) * N;
            double* g1 = pair ? gx + (bc * T + t0 + 1) * N : nullptr;
            for (int64_t n = 0; n < N; ++n) {
              if (kind == PoolKind::average) {
                if (pair) {
                  g0[n] += 0.5 * grow[n];
                  g1[n] += 0.5 * grow[n];
                } else {
                  g0[n] += grow[n];
                }
              } else {
                if (pair && argmax[(bc * To + to) * N + n]) {
                  g1[n] += grow[n];
                } else {
                  g0[n] += grow[n];
                }
              }
            }
          }
        }
      });
}

// ------------------------------------------------------------------- forward

namespace {

Tensor branch_forward(const Tensor& m, const TdmBranch& br) {
  Tensor x = matmul(m, br.w_f1);
  Tensor z = matmul(m, br.w_f2);
  Tensor u = silu(causal_conv1d(x, br.conv_kernel, br.conv_bias));
  Tensor scanned = selective_scan(u, br.ssm);
  Tensor gated = mul(scanned, silu(z));
  return matmul(gated, br.w_f3);
}

}  // namespace

TdmIntermediates tdm_forward_full(const Tensor& H, TdmBlock& block,
                                  bool training) {
  if (H.rank() != 4) {
    throw ShapeError("tdm_forward: input must be (B,C,T,N)");
  }
  const int64_t B = H.dim(0), T = H.dim(2), N = H.dim(3);
  if (block.pool_stride == 2 && T < 2) {
    throw ConfigError("tdm_forward: T must be >= 2 when pooling with stride 2");
  }

  Tensor projected = channel_project(H, block, training);
  Tensor omega = mti_forward(projected, block.mti);

  Tensor m_plus = make_scan_sequence(omega, block.scan);  // (S,L,C/2)
  Tensor m_minus = flip(m_plus, 1);

  TdmIntermediates out;
  out.forward_branch = branch_forward(m_plus, block.fwd);
  out.backward_branch = branch_forward(m_minus, block.bwd);

  Tensor fused = concat({out.forward_branch, flip(out.backward_branch, 1)}, 2);
  Tensor normed =
      layer_norm(fused, -1, block.ln_fuse_gamma, block.ln_fuse_beta, 1e-5);
  Tensor grid = unmake_scan_sequence(normed, block.scan, B, T, N);
  if (block.residual) grid = add(grid, H);
  out.output = temporal_pool(grid, block.pool_stride, block.pool);
  return out;
}

Tensor tdm_forward(const Tensor& H, TdmBlock& block, bool training) {
  return tdm_forward_full(H, block, training).output;
}

int64_t tdm_block_param_count(int64_t C, int n_scales, int n_state,
                              int conv_width, int expand) {
  const int64_t ch = C / 2;
  const int64_t ci = ch * expand;
  const int64_t r = std::max<int64_t>(1, (ci + 15) / 16);  // dt rank
  int64_t total = 0;
  total += 2 * C;                       // input LN
  total += C * ch + ch;                 // 1x1 projection
  total += 2 * ch;                      // batch norm affine
  total += n_scales * (ch * ch + ch);   // cycle layers
  const int64_t branch = 2 * ch * ci                  // f1, f2
                         + ci * conv_width + ci       // causal conv
                         + 3 * ci * n_state           // a_log, w_b, w_c
                         + ci * r + r * ci + ci       // dt projection
                         + ci * ch;                   // f3
  total += 2 * branch;
  total += 2 * C;  // fusion LN
  return total;
}

}  // namespace skelmamba
