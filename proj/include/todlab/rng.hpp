#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>
#include <vector>

namespace todlab {

// Deterministic generator used for every random decision in the project.
// SplitMix64 is small, fast, and identical on every platform, which keeps
// training runs reproducible from (seed) alone.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; two uniforms per draw, no cached spare,
  // so the stream position is a pure function of the call count.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  Rng r(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
  return r.next_u64();
}

inline uint64_t hash_str(std::string_view s) {
  // FNV-1a
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Derive an independent sub-stream seed from a root seed, a stream label,
// and up to two indices. Distinct labels give non-overlapping streams.
inline uint64_t derive_seed(uint64_t root, std::string_view label, uint64_t i = 0,
                            uint64_t j = 0) {
  uint64_t h = mix_seed(root, hash_str(label));
  h = mix_seed(h, i);
  h = mix_seed(h, j);
  return h;
}

}  // namespace todlab
