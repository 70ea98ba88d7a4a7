#include "skelmamba/util.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>

namespace skelmamba {

namespace {
std::atomic<Precision> g_precision{Precision::f64};
std::atomic<bool> g_strict_finite{
#ifdef NDEBUG
    false
#else
    true
#endif
};

uint64_t splitmix64(uint64_t& s) {
  s += 0x9e3779b97f4a7c15ULL;
  uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

Precision default_precision() { return g_precision.load(std::memory_order_relaxed); }
void set_default_precision(Precision p) { g_precision.store(p, std::memory_order_relaxed); }

void apply_precision(double* data, int64_t n) {
  if (g_precision.load(std::memory_order_relaxed) == Precision::f32) {
    for (int64_t i = 0; i < n; ++i) {
      data[i] = static_cast<double>(static_cast<float>(data[i]));
    }
  }
}

bool strict_finite_checks() { return g_strict_finite.load(std::memory_order_relaxed); }
void set_strict_finite_checks(bool on) { g_strict_finite.store(on, std::memory_order_relaxed); }

Rng::Rng(uint64_t seed) : state_(seed ^ 0xc2b2ae3d27d4eb4fULL) {
  // burn a few outputs so nearby seeds decorrelate
  for (int i = 0; i < 4; ++i) splitmix64(state_);
}

uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  while (u1 <= 1e-300) u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

int64_t Rng::randint(int64_t n) {
  return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
}

Rng Rng::fork(const std::string& tag) const {
  Rng child(state_ ^ fnv1a64(tag));
  return child;
}

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string env_fingerprint() {
  std::string s = "cxx=";
#if defined(__clang__)
  s += "clang-" + std::to_string(__clang_major__);
#elif defined(__GNUC__)
  s += "gcc-" + std::to_string(__GNUC__) + "." + std::to_string(__GNUC_MINOR__);
#else
  s += "unknown";
#endif
#if defined(__linux__)
  s += " os=linux";
#elif defined(__APPLE__)
  s += " os=darwin";
#else
  s += " os=other";
#endif
  s += " build=";
#ifdef NDEBUG
  s += "release";
#else
  s += "debug";
#endif
  return s;
}

void warn(const std::string& msg) { std::fprintf(stderr, "warning: %s\n", msg.c_str()); }

}  // namespace skelmamba
