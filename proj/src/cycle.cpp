#include "skelmamba/cycle.hpp"

#include <cmath>

namespace skelmamba {

CycleFcLayer CycleFcLayer::init(int64_t c_in, int64_t c_out, int kernel_size,
                                Rng& rng) {
  if (kernel_size <= 0) {
    throw ConfigError("cycle_fc: kernel size must be positive");
  }
  CycleFcLayer l;
  l.kernel_size = kernel_size;
  const double bound = 1.0 / std::sqrt(double(c_in));
  l.weight = Tensor::rand_uniform({c_in, c_out}, rng, -bound, bound, true);
  l.bias = Tensor::zeros({c_out}, true);
  return l;
}

int64_t CycleFcLayer::param_count() const {
  return weight.numel() + bias.numel();
}

int CycleFcLayer::time_offset(int64_t channel) const {
  const int m = static_cast<int>(channel % kernel_size);
  return offset_rule == CycleOffset::literal ? m - 1 : m - kernel_size / 2;
}

Tensor cycle_fc(const Tensor& H, const CycleFcLayer& layer) {
  if (H.rank() != 4) {
    throw ShapeError("cycle_fc: input must be (B,C,T,N), got " +
                     shape_str(H.shape()));
  }
  if (layer.kernel_size <= 0) {
    throw ConfigError("cycle_fc: kernel size must be positive");
  }
  const int64_t B = H.dim(0), C_in = H.dim(1), T = H.dim(2), N = H.dim(3);
  if (T < 1) throw ShapeError("cycle_fc: empty time axis");
  if (layer.weight.dim(0) != C_in) {
    throw ShapeError("cycle_fc: weight rows " +
                     std::to_string(layer.weight.dim(0)) +
                     " do not match input channels " + std::to_string(C_in));
  }
  const int64_t C_out = layer.weight.dim(1);
  if (layer.kernel_size > T) {
    warn("cycle_fc: kernel size " + std::to_string(layer.kernel_size) +
         " exceeds sequence length " + std::to_string(T) +
         "; offsets wrap around");
  }

  // source time index per input channel, for every output t
  const bool wrap = layer.boundary == CycleBoundary::wrap;
  std::vector<int> off(C_in);
  for (int64_t c = 0; c < C_in; ++c) off[c] = layer.time_offset(c);

  auto src_t = [T, wrap](int64_t t, int o) -> int64_t {
    int64_t ti = t + o;
    if (wrap) {
      ti %= T;
      if (ti < 0) ti += T;
      return ti;
    }
    return (ti < 0 || ti >= T) ? -1 : ti;  // -1 reads zero
  };

  std::vector<double> out(size_t(B) * C_out * T * N, 0.0);
  const double* ph = H.data();
  const double* pw = layer.weight.data();
  const double* pb = layer.bias.data();

  for (int64_t b = 0; b < B; ++b) {
    for (int64_t t = 0; t < T; ++t) {
      for (int64_t c = 0; c < C_in; ++c) {
        const int64_t ti = src_t(t, off[c]);
        if (ti < 0) continue;
        const double* hrow = ph + ((b * C_in + c) * T + ti) * N;
        const double* wrow = pw + c * C_out;
        for (int64_t o = 0; o < C_out; ++o) {
          const double wv = wrow[o];
          if (wv == 0.0) continue;
          double* orow = out.data() + ((b * C_out + o) * T + t) * N;
          for (int64_t n = 0; n < N; ++n) orow[n] += wv * hrow[n];
        }
      }
      for (int64_t o = 0; o < C_out; ++o) {
        double* orow = out.data() + ((b * C_out + o) * T + t) * N;
        for (int64_t n = 0; n < N; ++n) orow[n] += pb[o];
      }
    }
  }

  return make_op(
      "cycle_fc", {B, C_out, T, N}, std::move(out),
      {H, layer.weight, layer.bias},
      [B, C_in, C_out, T, N, off, src_t](detail::Node& nd) {
        const double* g = nd.grad.data();
        const double* ph2 = nd.parents[0]->value.data();
        const double* pw2 = nd.parents[1]->value.data();
        double* gh = detail::parent_grad(nd, 0);
        double* gw = detail::parent_grad(nd, 1);
        double* gb = detail::parent_grad(nd, 2);
        for (int64_t b = 0; b < B; ++b) {
          for (int64_t t = 0; t < T; ++t) {
            for (int64_t c = 0; c < C_in; ++c) {
              const int64_t ti = src_t(t, off[c]);
              if (ti < 0) continue;
              const double* hrow = ph2 + ((b * C_in + c) * T + ti) * N;
              double* ghrow = gh ? gh + ((b * C_in + c) * T + ti) * N : nullptr;
              const double* wrow = pw2 + c * C_out;
              for (int64_t o = 0; o < C_out; ++o) {
                const double* grow = g + ((b * C_out + o) * T + t) * N;
                if (ghrow) {
                  const double wv = wrow[o];
                  for (int64_t n = 0; n < N; ++n) ghrow[n] += wv * grow[n];
                }
                if (gw) {
                  double acc = 0.0;
                  for (int64_t n = 0; n < N; ++n) acc += hrow[n] * grow[n];
                  gw[c * C_out + o] += acc;
                }
              }
            }
            if (gb) {
              for (int64_t o = 0; o < C_out; ++o) {
                const double* grow = g + ((b * C_out + o) * T + t) * N;
                for (int64_t n = 0; n < N; ++n) gb[o] += grow[n];
              }
            }
          }
        }
      });
}

MtiModule MtiModule::init(int64_t channels, const std::vector<int>& sizes,
                          Rng& rng) {
  MtiModule m;
  for (size_t i = 0; i < sizes.size(); ++i) {
    Rng r = rng.fork("cycle_k" + std::to_string(sizes[i]));
    m.scales.push_back(CycleFcLayer::init(channels, channels, sizes[i], r));
  }
  return m;
}

Tensor mti_forward(const Tensor& H, const MtiModule& module) {
  const int64_t C = H.dim(1);
  for (const auto& layer : module.scales) {
    if (layer.weight.dim(0) != C || layer.weight.dim(1) != C) {
      throw ConfigError(
          "mti_forward: every scale must preserve the channel width (got " +
          std::to_string(layer.weight.dim(0)) + "->" +
          std::to_string(layer.weight.dim(1)) + ", need " + std::to_string(C) +
          ")");
    }
  }
  Tensor out = H;
  for (const auto& layer : module.scales) {
    out = add(out, cycle_fc(H, layer));
  }
  return out;
}

}  // namespace skelmamba
