#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace poolnet {

// Seeded generator with platform-stable derived draws. The engine is the
// standard 64-bit Mersenne Twister (whose output sequence is fixed by the
// standard); the distributions are implemented here because the standard
// library distributions are allowed to differ between implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::size_t uniform_index(std::size_t n);

  // Uniform double in [0, 1) with 53 random bits.
  double uniform01();

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Standard normal via Box-Muller; the spare value is discarded so that the
  // stream position depends only on the number of calls.
  double normal(double mean = 0.0, double stddev = 1.0);

  bool bernoulli(double p) { return uniform01() < p; }

  // Independent child stream; the parent advances by one draw.
  Rng derive(std::uint64_t salt);

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace poolnet
