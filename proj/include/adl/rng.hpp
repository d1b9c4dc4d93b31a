#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace adl {

// Deterministic PRNG with a fully specified implementation (splitmix64), so
// seeded runs reproduce bit-exactly regardless of the standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be > 0.
  uint64_t next_below(uint64_t n) {
    // Rejection sampling on the top bits keeps the draw unbiased.
    uint64_t threshold = (~n + 1) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  /// Uniform float in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    // Guard: log(0) would blow up; the smallest representable draw is fine.
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      size_t j = size_t(next_below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  /// Derives an independent stream; used for per-document / per-sample seeding.
  Rng fork(uint64_t stream) {
    Rng child(next_u64() ^ (0x632be59bd9b4e019ull * (stream + 1)));
    return child;
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Stable 64-bit seed derived from a string label (FNV-1a).
inline uint64_t seed_from_label(const std::string& label, uint64_t base = 0) {
  uint64_t h = 0xcbf29ce484222325ull ^ base;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace adl
