#pragma once

// Deterministic random numbers.  All draws go through this wrapper rather
// than the standard-library distributions, whose outputs are not pinned by
// the standard and may differ between libstdc++ versions.  The exact draw
// sequence is part of the reproducibility contract (bitwise identical runs
// and checkpoints for a given seed).

#include <cmath>
#include <cstdint>
#include <random>

namespace dvae {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed, e.g. one per training step.  Stateless
// derivation is what makes interrupt-and-resume reproduce an uninterrupted
// run: step k draws from mix_seed(seed, k) no matter how we got to step k.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  return splitmix64(splitmix64(seed) ^ splitmix64(~salt));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t raw() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  uint64_t below(uint64_t n) {
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal via Box-Muller; the spare value is cached, so a fixed
  // number of calls always consumes a fixed number of engine words.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]: keeps the log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dvae
