#include "skelmamba/attention.hpp"

#include <cmath>
#include <cstring>

namespace skelmamba {

namespace {

// R[i,j,h,:] = E[hop_bucket(i,j), h, :], scatter-add on the way back.
Tensor hop_gather(const Tensor& embed, const std::vector<int>& bucket,
                  int64_t n_joints) {
  const int64_t H = embed.dim(1), D = embed.dim(2);
  std::vector<double> out(size_t(n_joints) * n_joints * H * D);
  const double* pe = embed.data();
  for (int64_t i = 0; i < n_joints; ++i) {
    for (int64_t j = 0; j < n_joints; ++j) {
      const int hb = bucket[i * n_joints + j];
      std::memcpy(out.data() + (i * n_joints + j) * H * D, pe + hb * H * D,
                  H * D * sizeof(double));
    }
  }
  return make_op("hop_gather", {n_joints, n_joints, H, D}, std::move(out),
                 {embed}, [bucket, n_joints, H, D](detail::Node& nd) {
                   double* ge = detail::parent_grad(nd, 0);
                   if (!ge) return;
                   const double* g = nd.grad.data();
                   for (int64_t i = 0; i < n_joints; ++i) {
                     for (int64_t j = 0; j < n_joints; ++j) {
                       const int hb = bucket[i * n_joints + j];
                       const double* src = g + (i * n_joints + j) * H * D;
                       double* dst = ge + hb * H * D;
                       for (int64_t k = 0; k < H * D; ++k) dst[k] += src[k];
                     }
                   }
                 });
}

// rel[b,t,h,i,j] = sum_d Q[b,t,h,i,d] * R[i,j,h,d]
Tensor qr_rel_logits(const Tensor& Q, const Tensor& R) {
  const int64_t B = Q.dim(0), T = Q.dim(1), H = Q.dim(2), N = Q.dim(3),
                D = Q.dim(4);
  std::vector<double> out(size_t(B) * T * H * N * N);
  const double* pq = Q.data();
  const double* pr = R.data();
  for (int64_t bt = 0; bt < B * T; ++bt) {
    for (int64_t h = 0; h < H; ++h) {
      for (int64_t i = 0; i < N; ++i) {
        const double* qrow = pq + ((bt * H + h) * N + i) * D;
        double* orow = out.data() + ((bt * H + h) * N + i) * N;
        for (int64_t j = 0; j < N; ++j) {
          const double* rrow = pr + ((i * N + j) * H + h) * D;
          double acc = 0.0;
          for (int64_t d = 0; d < D; ++d) acc += qrow[d] * rrow[d];
          orow[j] = acc;
        }
      }
    }
  }
  return make_op(
      "qr_rel_logits", {B, T, H, N, N}, std::move(out), {Q, R},
      [B, T, H, N, D](detail::Node& nd) {
        const double* g = nd.grad.data();
        const double* pq2 = nd.parents[0]->value.data();
        const double* pr2 = nd.parents[1]->value.data();
        double* gq = detail::parent_grad(nd, 0);
        double* gr = detail::parent_grad(nd, 1);
        for (int64_t bt = 0; bt < B * T; ++bt) {
          for (int64_t h = 0; h < H; ++h) {
            for (int64_t i = 0; i < N; ++i) {
              const double* grow = g + ((bt * H + h) * N + i) * N;
              const double* qrow = pq2 + ((bt * H + h) * N + i) * D;
              double* gqrow = gq ? gq + ((bt * H + h) * N + i) * D : nullptr;
              for (int64_t j = 0; j < N; ++j) {
                const double gv = grow[j];
                const double* rrow = pr2 + ((i * N + j) * H + h) * D;
                if (gqrow) {
                  for (int64_t d = 0; d < D; ++d) gqrow[d] += gv * rrow[d];
                }
                if (gr) {
                  double* grrow = gr + ((i * N + j) * H + h) * D;
                  for (int64_t d = 0; d < D; ++d) grrow[d] += gv * qrow[d];
                }
              }
            }
          }
        }
      });
}

}  // namespace

SpatialAttnLayer SpatialAttnLayer::init(int64_t channels, int heads,
                                        int max_hop, Rng& rng) {
  if (heads <= 0 || channels % heads != 0) {
    throw ConfigError("spatial attention: channels " +
                      std::to_string(channels) +
                      " must divide evenly into heads " +
                      std::to_string(heads));
  }
  SpatialAttnLayer l;
  l.heads = heads;
  l.max_hop = max_hop;
  l.ln_gamma = Tensor::full({channels}, 1.0, true);
  l.ln_beta = Tensor::zeros({channels}, true);
  const double bound = 1.0 / std::sqrt(double(channels));
  l.wq = Tensor::rand_uniform({channels, channels}, rng, -bound, bound, true);
  l.wk = Tensor::rand_uniform({channels, channels}, rng, -bound, bound, true);
  l.wv = Tensor::rand_uniform({channels, channels}, rng, -bound, bound, true);
  l.wo = Tensor::rand_uniform({channels, channels}, rng, -bound, bound, true);
  l.hop_embed = Tensor::rand_normal({max_hop + 1, heads, channels / heads},
                                    rng, 0.0, 0.02, true);
  return l;
}

SpatialAttnResult spatial_attention_full(const Tensor& H,
                                         const SpatialAttnLayer& layer,
                                         const SkeletonTopology& topology) {
  if (H.rank() != 4) {
    throw ShapeError("spatial_attention: input must be (B,C,T,N), got " +
                     shape_str(H.shape()));
  }
  const int64_t B = H.dim(0), C = H.dim(1), T = H.dim(2), N = H.dim(3);
  if (layer.heads <= 0 || C % layer.heads != 0) {
    throw ConfigError("spatial_attention: channels " + std::to_string(C) +
                      " not divisible by heads " +
                      std::to_string(layer.heads));
  }
  if (topology.n_joints != N) {
    throw ShapeError("spatial_attention: topology has " +
                     std::to_string(topology.n_joints) + " joints, input " +
                     std::to_string(N));
  }
  const int64_t nh = layer.heads;
  const int64_t dh = C / nh;

  // channel-last view, pre-norm
  Tensor x = permute(H, {0, 2, 3, 1});  // (B,T,N,C)
  Tensor xn = layer_norm(x, -1, layer.ln_gamma, layer.ln_beta, 1e-5);

  auto heads_view = [&](const Tensor& t) {
    return permute(reshape(t, {B, T, N, nh, dh}), {0, 1, 3, 2, 4});
  };
  Tensor q = heads_view(matmul(xn, layer.wq));  // (B,T,h,N,dh)
  Tensor k = heads_view(matmul(xn, layer.wk));
  Tensor v = heads_view(matmul(xn, layer.wv));

  // hop buckets, clamped
  std::vector<int> bucket(size_t(N) * N);
  for (int64_t i = 0; i < N; ++i) {
    for (int64_t j = 0; j < N; ++j) {
      bucket[i * N + j] = std::min(topology.hop[i][j], layer.max_hop);
    }
  }
  Tensor rel_table = hop_gather(layer.hop_embed, bucket, N);  // (N,N,h,dh)

  Tensor logits = add(matmul(q, transpose(k, -1, -2)), qr_rel_logits(q, rel_table));
  if (layer.scale_logits) {
    logits = mul_scalar(logits, 1.0 / std::sqrt(double(dh)));
  }
  Tensor attn = softmax(logits, -1);  // (B,T,h,N,N)

  Tensor ctx = matmul(attn, v);  // (B,T,h,N,dh)
  Tensor merged = reshape(permute(ctx, {0, 1, 3, 2, 4}), {B, T, N, C});
  Tensor out = add(x, matmul(merged, layer.wo));  // residual

  SpatialAttnResult r;
  r.output = permute(out, {0, 3, 1, 2});  // back to (B,C,T,N)
  r.weights = attn;
  return r;
}

Tensor spatial_attention(const Tensor& H, const SpatialAttnLayer& layer,
                         const SkeletonTopology& topology) {
  return spatial_attention_full(H, layer, topology).output;
}

}  // namespace skelmamba
