#pragma once

#include <span>

#include "rvnp/matrix.hpp"

namespace rvnp {

/// Lower-triangular factor L with strictly positive diagonal; L*L^T is the
/// represented SPD matrix.
struct CholeskyFactor {
  Matrix lower;

  int dim() const { return lower.rows(); }
  double log_det_cov() const;           // log det(L L^T) = 2 sum log L_ii
  Matrix cov() const;                   // L L^T
  Vector solve_lower(const Vector& b) const;  // L w = b
};

/// log sum_i exp(v_i), max-shifted. Entries may be -inf; empty input throws.
double logsumexp(std::span<const double> v);
inline double logsumexp(const Vector& v) { return logsumexp(std::span<const double>(v)); }

/// Factor a symmetric positive definite matrix. On a non-positive pivot a
/// jitter of 1e-8*I is added once (learned covariances can brush singularity
/// early in training); a second failure raises DecompositionError naming the
/// failing pivot.
CholeskyFactor cholesky(const Matrix& a);

/// Multivariate normal log-density evaluated through the factor (never forms
/// an explicit inverse).
double gaussian_logpdf(const Vector& x, const Vector& mean, const CholeskyFactor& cov);

double dot(const Vector& a, const Vector& b);
double norm2(std::span<const double> v);

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

}  // namespace rvnp
