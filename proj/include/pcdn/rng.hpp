#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pcdn/common.hpp"

namespace pcdn {

// Seedable, portable random source. All stochastic operations in the project
// take an explicit seed or an Rng; none reads global state. The engine is
// std::mt19937_64, whose output sequence is fixed by the standard. Variates
// are derived from raw engine output by hand (53-bit uniform, Box-Muller
// normal) instead of <random> distributions, whose streams are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller. Uses two uniforms per draw; the sine
  // branch is discarded so the stream stays stateless.
  double normal() {
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
  Index uniform_index(Index n) {
    if (n <= 0) throw DataError("Rng::uniform_index: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<Index>(x % un);
  }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (Index i = static_cast<Index>(v.size()) - 1; i > 0; --i) {
      const Index j = uniform_index(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

  // First m values of a random permutation of [0, n), returned sorted.
  std::vector<Index> sample_without_replacement(Index n, Index m);

  // Draw an index from an unnormalized weight vector.
  Index categorical(const Vector& weights);

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

// Deterministic derivation of per-purpose seeds from a base seed
// (splitmix64 over base ^ stream).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace pcdn
