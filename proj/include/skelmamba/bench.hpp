#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace skelmamba {

struct BenchRow {
  int64_t T = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double ratio_vs_prev = 0.0;  // p50(T) / p50(previous T); 0 for the first
};

// Times selective_scan forward (no grad) at each sequence length.
std::vector<BenchRow> bench_scan(const std::vector<int64_t>& lengths,
                                 int64_t d_inner, int n_state, int streams,
                                 int warmup, int reps, uint64_t seed);

// CSV with the fixed header T,mean_ms,p50_ms,p95_ms,ratio_vs_prev.
std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace skelmamba
