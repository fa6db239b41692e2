#pragma once

#include <cmath>
#include <cstdint>

// Self-contained random number utilities. std::mt19937 plus the standard
// distributions would be simpler, but the C++ standard does not pin down
// distribution algorithms, and every sampled value here must be bit-stable
// across standard library versions. splitmix64 and Box-Muller are fixed
// algorithms, so streams reproduce exactly given a seed.

namespace qtrain {

// splitmix64 finalizer: mixes 64 bits into 64 well-distributed bits.
inline uint64_t mix64(uint64_t x) {
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Absorb one word into a running hash state.
inline uint64_t hash_combine(uint64_t h, uint64_t v) {
  return mix64(h + 0x9e3779b97f4a7c15ull + v);
}

// Stateless counter-based value: same (seed, a, b, c) always gives the same
// word, independent of call order. Used for batch sampling and diagnostics
// so that sample k of run r never depends on how many draws preceded it.
inline uint64_t counter_hash(uint64_t seed, uint64_t a, uint64_t b = 0,
                             uint64_t c = 0) {
  uint64_t h = mix64(seed ^ 0x2545f4914f6cdd1dull);
  h = hash_combine(h, a);
  h = hash_combine(h, b);
  h = hash_combine(h, c);
  return h;
}

// Map 64 random bits to a double in (0, 1]. Never returns 0, safe for log().
inline double bits_to_unit(uint64_t bits) {
  return static_cast<double>((bits >> 11) + 1) * 0x1.0p-53;
}

// Sequential generator: splitmix64 stream plus Box-Muller for gaussians.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix64(state_);
  }

  // Uniform in (0, 1].
  double uniform() { return bits_to_unit(next_u64()); }

  // Standard normal. Box-Muller produces pairs; the spare is cached.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// FNV-1a 64-bit digest, used for corpus and config fingerprints.
class Fnv1a64 {
 public:
  void update(const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ull;
    }
  }
  uint64_t digest() const { return h_; }

 private:
  uint64_t h_ = 0xcbf29ce484222325ull;
};

}  // namespace qtrain
