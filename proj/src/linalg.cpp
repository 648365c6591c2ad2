#include "rvnp/linalg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace rvnp {

using EigenRowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const EigenRowMajor>;
using MutMap = Eigen::Map<EigenRowMajor>;

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ArgumentError("matmul: inner dims " + a.shape_str() + " vs " + b.shape_str());
  Matrix out(a.rows(), b.cols());
  MutMap(out.data(), out.rows(), out.cols()) =
      ConstMap(a.data(), a.rows(), a.cols()) * ConstMap(b.data(), b.rows(), b.cols());
  return out;
}

double logsumexp(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("logsumexp: empty input");
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) {
    if (std::isnan(x)) throw NumericError("logsumexp: NaN entry");
    mx = std::max(mx, x);
  }
  if (mx == -std::numeric_limits<double>::infinity()) return mx;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

namespace {

// Plain in-place lower Cholesky; returns failing pivot index or -1.
int try_factor(Matrix& m) {
  const int n = m.rows();
  for (int j = 0; j < n; ++j) {
    double d = m(j, j);
    for (int k = 0; k < j; ++k) d -= m(j, k) * m(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return j;
    const double ljj = std::sqrt(d);
    m(j, j) = ljj;
    for (int i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (int k = 0; k < j; ++k) s -= m(i, k) * m(j, k);
      m(i, j) = s / ljj;
    }
  }
  // zero the upper triangle
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m(i, j) = 0.0;
  return -1;
}

}  // namespace

CholeskyFactor cholesky(const Matrix& a) {
  if (a.rows() != a.cols()) throw ArgumentError("cholesky: matrix not square");
  Matrix m = a;
  int pivot = try_factor(m);
  if (pivot >= 0) {
    m = a;
    for (int i = 0; i < a.rows(); ++i) m(i, i) += 1e-8;
    pivot = try_factor(m);
    if (pivot >= 0)
      throw DecompositionError("cholesky: matrix not positive definite, pivot " +
                               std::to_string(pivot));
  }
  return CholeskyFactor{std::move(m)};
}

double CholeskyFactor::log_det_cov() const {
  double s = 0.0;
  for (int i = 0; i < lower.rows(); ++i) s += std::log(lower(i, i));
  return 2.0 * s;
}

Matrix CholeskyFactor::cov() const {
  const int n = lower.rows();
  Matrix out(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      double s = 0.0;
      for (int k = 0; k <= std::min(i, j); ++k) s += lower(i, k) * lower(j, k);
      out(i, j) = s;
      out(j, i) = s;
    }
  return out;
}

Vector CholeskyFactor::solve_lower(const Vector& b) const {
  const int n = lower.rows();
  if (static_cast<int>(b.size()) != n) throw ArgumentError("solve_lower: dim mismatch");
  Vector w(n);
  for (int i = 0; i < n; ++i) {
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= lower(i, k) * w[k];
    w[i] = s / lower(i, i);
  }
  return w;
}

double gaussian_logpdf(const Vector& x, const Vector& mean, const CholeskyFactor& cov) {
  const int n = cov.dim();
  if (static_cast<int>(x.size()) != n || static_cast<int>(mean.size()) != n)
    throw ArgumentError("gaussian_logpdf: dimension mismatch");
  Vector delta(n);
  for (int i = 0; i < n; ++i) delta[i] = x[i] - mean[i];
  const Vector w = cov.solve_lower(delta);
  double quad = 0.0;
  for (double wi : w) quad += wi * wi;
  return -0.5 * (n * kLogTwoPi + cov.log_det_cov() + quad);
}

double dot(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace rvnp
