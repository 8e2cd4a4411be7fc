#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace instformer::core {

// Deterministic RNG. std::mt19937_64 output is pinned by the standard, but the
// std:: distributions are not, so all draws are implemented here.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  int64_t below(int64_t n) { return int64_t(uniform() * double(n)) % n; }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, one value per pair of uniforms.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(below(int64_t(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream from (seed, index); used so parallel workers
  // produce the same output as a serial run.
  static uint64_t derive(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace instformer::core
