#include "pcdn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pcdn {

std::vector<Index> Rng::sample_without_replacement(Index n, Index m) {
  if (m < 0 || m > n) throw DataError("sample_without_replacement: m out of range");
  std::vector<Index> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), Index{0});
  // Partial Fisher-Yates: after m swaps the prefix is a uniform m-subset.
  for (Index i = 0; i < m; ++i) {
    const Index j = i + uniform_index(n - i);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(m));
  std::sort(pool.begin(), pool.end());
  return pool;
}

Index Rng::categorical(const Vector& weights) {
  const Index n = weights.size();
  if (n == 0) throw DataError("categorical: empty weight vector");
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (!(weights[i] >= 0.0)) throw NumericError("categorical: negative or NaN weight");
    total += weights[i];
  }
  if (total <= 0.0) throw NumericError("categorical: all weights zero");
  const double target = uniform() * total;
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    acc += weights[i];
    if (target < acc) return i;
  }
  return n - 1;  // guard against rounding at the top end
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  if (is.fail()) throw DataError("Rng::set_state: malformed state string");
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = base ^ (stream + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace pcdn
