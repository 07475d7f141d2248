#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

// Deterministic RNG used everywhere randomness appears. We deliberately avoid
// std::mt19937 + std::*_distribution: the distributions are not pinned by the
// standard, so sequences would differ across standard libraries. SplitMix64 is
// a well-known 64-bit mixer with trivially portable output.
namespace sshield {

inline uint64_t splitmix64_mix(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Stable mapping (base, index) -> independent stream seed. Used for per-pass
// and per-sample streams so results never depend on evaluation order.
inline uint64_t derive_seed(uint64_t base, uint64_t index) {
  uint64_t h = base + 0x9E3779B97F4A7C15ull * (index + 1);
  return splitmix64_mix(h ^ (h >> 32) ^ 0x123456789ABCDEFull);
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b) {
  return derive_seed(derive_seed(base, a), b);
}

class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return splitmix64_mix(state_);
  }

  // [0, 1), 24 bits of mantissa so the float is exact
  float uniform() { return float(next_u64() >> 40) * 0x1p-24f; }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // In [0, n); n must be > 0. Modulo bias is negligible for our n << 2^64.
  int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

  bool bernoulli(float p) { return uniform() < p; }

  // Box-Muller; second value cached. Double math internally so the pair is
  // well conditioned even for tiny u1.
  float normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = (double(next_u64() >> 11) + 0.5) * 0x1p-53;  // (0,1)
    double u2 = double(next_u64() >> 11) * 0x1p-53;          // [0,1)
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 2.0 * std::numbers::pi * u2;
    cached_ = float(r * std::sin(t));
    has_cached_ = true;
    return float(r * std::cos(t));
  }

  // Fisher-Yates
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      int j = int(next_u64() % uint64_t(i + 1));
      std::swap(p[i], p[j]);
    }
    return p;
  }

 private:
  uint64_t state_;
  float cached_ = 0.f;
  bool has_cached_ = false;
};

}  // namespace sshield
