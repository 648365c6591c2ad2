#include "rvnp/rng.hpp"

#include <cmath>

namespace rvnp {

namespace {

inline uint64_t splitmix64(uint64_t& x) {
  uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

Rng::Rng(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {
  uint64_t x = seed ^ (0x6a09e667f3bcc909ULL + stream * 0x9e3779b97f4a7c15ULL);
  // Mix twice so nearby (seed, stream) pairs decorrelate.
  splitmix64(x);
  for (auto& s : s_) s = splitmix64(x);
}

uint64_t Rng::next_u64() {
  const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
  const uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  // Box-Muller; reject u1 == 0 so log stays finite.
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

long Rng::poisson(double rate) {
  if (rate < 0.0 || !std::isfinite(rate)) throw ArgumentError("poisson: invalid rate");
  long total = 0;
  // Knuth's product method in chunks of <= 300 keeps exp() away from underflow.
  while (rate > 0.0) {
    const double chunk = rate > 300.0 ? 300.0 : rate;
    rate -= chunk;
    const double limit = std::exp(-chunk);
    double prod = uniform();
    long k = 0;
    while (prod > limit) {
      ++k;
      prod *= uniform();
    }
    total += k;
  }
  return total;
}

Rng Rng::split(uint64_t k) const {
  uint64_t x = stream_ ^ (k * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL);
  const uint64_t child = seed_ ^ splitmix64(x);
  return Rng(child, splitmix64(x));
}

void Rng::fill_normal(Matrix& m) {
  for (size_t i = 0; i < m.size(); ++i) m[i] = normal();
}

void Rng::fill_uniform(Matrix& m, double lo, double hi) {
  for (size_t i = 0; i < m.size(); ++i) m[i] = uniform(lo, hi);
}

std::vector<int> Rng::permutation(int n) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(next_u64() % static_cast<uint64_t>(i + 1));
    std::swap(p[i], p[j]);
  }
  return p;
}

std::vector<int> Rng::sample_without_replacement(int n, int k) {
  if (k > n) throw ArgumentError("sample_without_replacement: k > n");
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(next_u64() % static_cast<uint64_t>(n - i));
    std::swap(p[i], p[j]);
  }
  p.resize(k);
  return p;
}

}  // namespace rvnp
