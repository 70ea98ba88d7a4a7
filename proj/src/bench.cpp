#include "skelmamba/bench.hpp"

#include <algorithm>
#include <cstdio>

#include "skelmamba/ssm.hpp"

namespace skelmamba {

std::vector<BenchRow> bench_scan(const std::vector<int64_t>& lengths,
                                 int64_t d_inner, int n_state, int streams,
                                 int warmup, int reps, uint64_t seed) {
  if (lengths.empty()) throw ConfigError("bench_scan: no lengths given");
  Rng rng(seed);
  SsmParams params = SsmParams::init(d_inner, n_state, rng);

  std::vector<BenchRow> rows;
  NoGradGuard ng;
  for (size_t li = 0; li < lengths.size(); ++li) {
    const int64_t T = lengths[li];
    if (T < 1) throw ConfigError("bench_scan: lengths must be positive");
    Tensor x = Tensor::rand_uniform({streams, T, d_inner}, rng, -1.0, 1.0);

    for (int w = 0; w < warmup; ++w) {
      Tensor y = selective_scan(x, params);
      (void)y;
    }
    std::vector<double> times_ms;
    times_ms.reserve(reps);
    for (int r = 0; r < reps; ++r) {
      const double t0 = now_seconds();
      Tensor y = selective_scan(x, params);
      const double t1 = now_seconds();
      (void)y;
      times_ms.push_back((t1 - t0) * 1e3);
    }
    std::sort(times_ms.begin(), times_ms.end());
    BenchRow row;
    row.T = T;
    double sum = 0.0;
    for (double t : times_ms) sum += t;
    row.mean_ms = sum / times_ms.size();
    row.p50_ms = times_ms[times_ms.size() / 2];
    row.p95_ms = times_ms[std::min(times_ms.size() - 1,
                                   size_t(0.95 * times_ms.size()))];
    // medians are steadier than means under scheduler noise
    row.ratio_vs_prev = rows.empty() ? 0.0 : row.p50_ms / rows.back().p50_ms;
    rows.push_back(row);
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "T,mean_ms,p50_ms,p95_ms,ratio_vs_prev\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.4f,%.4f,%.4f,%.4f\n",
                  static_cast<long long>(r.T), r.mean_ms, r.p50_ms, r.p95_ms,
                  r.ratio_vs_prev);
    out += buf;
  }
  return out;
}

}  // namespace skelmamba
