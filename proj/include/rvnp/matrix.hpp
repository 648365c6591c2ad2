#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace rvnp {

using Vector = std::vector<double>;

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DecompositionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TaskError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of 64-bit floats. A row/column vector is a
/// Matrix with one row/column.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), d_(static_cast<size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw ArgumentError("Matrix: negative shape");
  }

  static Matrix from_rows(int rows, int cols, std::initializer_list<double> v) {
    Matrix m(rows, cols);
    if (v.size() != m.d_.size()) throw ArgumentError("Matrix::from_rows: size mismatch");
    std::copy(v.begin(), v.end(), m.d_.begin());
    return m;
  }
  static Matrix row(const Vector& v) {
    Matrix m(1, static_cast<int>(v.size()));
    m.d_ = v;
    return m;
  }
  static Matrix col(const Vector& v) {
    Matrix m(static_cast<int>(v.size()), 1);
    m.d_ = v;
    return m;
  }
  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return d_.size(); }
  bool empty() const { return d_.empty(); }

  double& operator()(int i, int j) { return d_[static_cast<size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return d_[static_cast<size_t>(i) * cols_ + j]; }
  double& operator[](size_t k) { return d_[k]; }
  double operator[](size_t k) const { return d_[k]; }

  double* data() { return d_.data(); }
  const double* data() const { return d_.data(); }
  Vector& raw() { return d_; }
  const Vector& raw() const { return d_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double x : d_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  Vector row_vec(int i) const {
    return Vector(d_.begin() + static_cast<size_t>(i) * cols_,
                  d_.begin() + static_cast<size_t>(i + 1) * cols_);
  }
  void set_row(int i, const Vector& v) {
    if (static_cast<int>(v.size()) != cols_) throw ArgumentError("set_row: size mismatch");
    std::copy(v.begin(), v.end(), d_.begin() + static_cast<size_t>(i) * cols_);
  }

  std::string shape_str() const {
    return "[" + std::to_string(rows_) + "," + std::to_string(cols_) + "]";
  }

 private:
  int rows_ = 0, cols_ = 0;
  Vector d_;
};

// a @ b, Eigen-backed (see matrix-private impl in tape.cpp / linalg.cpp users).
Matrix matmul(const Matrix& a, const Matrix& b);

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b))
    throw ArgumentError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                        b.shape_str());
}

}  // namespace rvnp
