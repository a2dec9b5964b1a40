#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mmae {

// Exit-code-bearing error categories used across the library and the CLI.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// splitmix64; used to derive independent seeds from (seed, stream tags).
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0,
                            uint64_t c = 0) {
  uint64_t s = mix64(seed);
  s = mix64(s ^ a);
  s = mix64(s ^ b);
  s = mix64(s ^ c);
  return s;
}

// Deterministic RNG wrapper. Distribution code is hand-rolled so that the
// same seed yields the same stream on every platform/stdlib.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(mix64(seed)) {}

  uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  uint64_t uniform_int(uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  // standard normal via Box-Muller (spare cached)
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double exponential(double rate) {
    double u = uniform();
    if (u >= 1.0) u = 0.9999999999999999;
    return -std::log(1.0 - u) / rate;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mmae
