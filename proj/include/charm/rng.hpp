#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace charm {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stream key derivation: independent streams for (seed, step, scale, role).
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t k = splitmix64(base);
  k = splitmix64(k ^ (a * 0x2545f4914f6cdd1dULL));
  k = splitmix64(k ^ (b * 0x9e3779b97f4a7c15ULL));
  k = splitmix64(k ^ (c * 0xd6e8feb86659fd93ULL));
  return k;
}

// xoshiro-free minimal generator: splitmix64 counter stream. Deterministic
// across platforms, no library distribution objects involved.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  // uniform in [0,1)
  double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (no cached state, two u64 per draw)
  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("rng: uniform_int needs n > 0");
    return (int)((__uint128_t)next_u64() * (uint64_t)n >> 64);
  }

  // draw index from a discrete distribution (probs sum to ~1)
  int sample(const std::vector<double>& probs) {
    if (probs.empty()) throw std::invalid_argument("rng: empty distribution");
    double u = uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return (int)i;
    }
    return (int)probs.size() - 1;
  }

 private:
  uint64_t state_;
};

}  // namespace charm
