#pragma once

#include <cstdint>
#include <vector>

#include "rvnp/matrix.hpp"

namespace rvnp {

/// Deterministic, splittable random stream (xoshiro256++ seeded through
/// splitmix64). Identical (seed, stream) pairs yield identical draws on a
/// given platform; split() derives statistically independent substreams, so
/// workers never share a stream.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0);

  uint64_t next_u64();

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal (Box-Muller, no cached spare).
  double normal();
  /// Exact Poisson draw; chunked multiplicative method, valid for any rate.
  long poisson(double rate);

  /// Independent child stream; deterministic in (seed, stream, k).
  Rng split(uint64_t k) const;

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }

  void fill_normal(Matrix& m);
  void fill_uniform(Matrix& m, double lo, double hi);
  std::vector<int> permutation(int n);
  /// k distinct indices out of n (partial Fisher-Yates).
  std::vector<int> sample_without_replacement(int n, int k);

 private:
  uint64_t s_[4];
  uint64_t seed_, stream_;
};

}  // namespace rvnp
