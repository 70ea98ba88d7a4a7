#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace skelmamba {

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError -> 1 (usage), DataError -> 2, NumericError -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};
struct DataError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

// Compute precision. f64 is the default; training runs switch to f32,
// which rounds every op result through single precision (storage stays
// double so both modes share one code path).
enum class Precision { f32, f64 };

Precision default_precision();
void set_default_precision(Precision p);

// Applies the active precision to a freshly computed buffer.
void apply_precision(double* data, int64_t n);

// When on, every op asserts that its output is finite. Tests and debug
// builds enable it; training checks only at the loss.
bool strict_finite_checks();
void set_strict_finite_checks(bool on);

// Deterministic RNG. Box-Muller normals on top of splitmix/mt19937_64 so
// that streams are reproducible independent of the standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal
  int64_t randint(int64_t n);            // [0, n)

  // Derives an independent stream keyed by a label, e.g. per-module init.
  Rng fork(const std::string& tag) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[randint(i + 1)]);
    }
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

uint64_t fnv1a64(const std::string& s);

double now_seconds();

std::string env_fingerprint();  // compiler / platform / build info one-liner

void warn(const std::string& msg);  // one-line warning on stderr

}  // namespace skelmamba
