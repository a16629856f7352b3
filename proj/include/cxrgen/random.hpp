#pragma once

// Seeded random helpers. Distributions are computed here from raw mt19937_64
// output so goldens do not depend on the standard library's distribution code.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "cxrgen/tensor.hpp"

namespace cxrgen {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return static_cast<std::size_t>(r % n);
  }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[index(i)]);
  }

  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

// Mixes a base seed with a stream id so sub-generators do not overlap.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Weight leaf drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(values), true);
}

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

}  // namespace cxrgen
