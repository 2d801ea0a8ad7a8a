#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tst {

// Failure classes map onto CLI exit codes: usage/config -> 1, data -> 2,
// numeric -> 3.
enum class ErrorKind { usage, config, data, numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

#define TST_REQUIRE(cond, kind, msg)                        \
  do {                                                      \
    if (!(cond)) ::tst::fail(::tst::ErrorKind::kind, msg);  \
  } while (0)

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), int64_t{1},
                         [](int64_t a, int64_t b) { return a * b; });
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Deterministic random stream. The raw engine is seeded explicitly and the
// real-valued mappings are fixed here rather than delegated to
// std::*_distribution, so identically seeded streams replay identically.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix(seed)) {}

  uint64_t next_u64() {
    // xorshift64*, full period for nonzero state.
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + int64_t(uniform() * double(hi - lo + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Marsaglia polar method; caches the spare deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  // Derives an independent stream; used to give model components their own
  // parameter streams so removing one component does not shift the others.
  Rng fork(const std::string& tag) const {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : tag) {
      h ^= uint64_t(uint8_t(c));
      h *= 0x100000001B3ULL;
    }
    return Rng(state_ ^ h);
  }

 private:
  static uint64_t splitmix(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x = x ^ (x >> 31);
    return x ? x : 0x853C49E6748FEA9BULL;
  }

  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= uint64_t(uint8_t(c));
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Multiply-accumulate meter. Dense kernels (matrix products, convolutions,
// attention products) report the exact count they execute; everything else
// (normalization, activations, pooling, interpolation) stays silent by
// convention, matching the analytic cost model.
struct MacCounter {
  static bool& enabled() {
    static thread_local bool on = false;
    return on;
  }
  static uint64_t& count() {
    static thread_local uint64_t n = 0;
    return n;
  }
  static void add(uint64_t n) {
    if (enabled()) count() += n;
  }
  static void reset() { count() = 0; }
};

struct MacMeterScope {
  MacMeterScope() {
    MacCounter::reset();
    MacCounter::enabled() = true;
  }
  ~MacMeterScope() { MacCounter::enabled() = false; }
  uint64_t count() const { return MacCounter::count(); }
};

}  // namespace tst
