#include "rvnp/tape.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "rvnp/linalg.hpp"

namespace rvnp {

namespace {

using EigenRowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const EigenRowMajor>;
using MutMap = Eigen::Map<EigenRowMajor>;

inline ConstMap emap(const Matrix& m) { return ConstMap(m.data(), m.rows(), m.cols()); }
inline MutMap emap(Matrix& m) { return MutMap(m.data(), m.rows(), m.cols()); }

constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

inline double stable_softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

int ParamStore::add(const std::string& name, int rows, int cols, bool decay) {
  ParamSegment s;
  s.name = name;
  s.rows = rows;
  s.cols = cols;
  s.offset = static_cast<int>(values_.size());
  s.decay = decay;
  segs_.push_back(s);
  values_.resize(values_.size() + static_cast<size_t>(rows) * cols, 0.0);
  grads_.resize(values_.size(), 0.0);
  return static_cast<int>(segs_.size()) - 1;
}

Matrix ParamStore::get(int seg) const {
  const ParamSegment& s = segs_[seg];
  Matrix m(s.rows, s.cols);
  std::copy(values_.begin() + s.offset,
            values_.begin() + s.offset + static_cast<size_t>(s.rows) * s.cols,
            m.raw().begin());
  return m;
}

void ParamStore::set(int seg, const Matrix& m) {
  const ParamSegment& s = segs_[seg];
  if (m.rows() != s.rows || m.cols() != s.cols)
    throw ArgumentError("ParamStore::set: shape mismatch for " + s.name);
  std::copy(m.raw().begin(), m.raw().end(), values_.begin() + s.offset);
}

void ParamStore::fill(int seg, double v) {
  const ParamSegment& s = segs_[seg];
  std::fill(values_.begin() + s.offset,
            values_.begin() + s.offset + static_cast<size_t>(s.rows) * s.cols, v);
}

void ParamStore::init_normal(int seg, Rng& rng, double scale) {
  const ParamSegment& s = segs_[seg];
  for (int k = 0; k < s.rows * s.cols; ++k) values_[s.offset + k] = scale * rng.normal();
}

int ParamStore::find(const std::string& name) const {
  for (size_t i = 0; i < segs_.size(); ++i)
    if (segs_[i].name == name) return static_cast<int>(i);
  return -1;
}

// ---------------------------------------------------------------------------
// Tape basics

Var Tape::push(Matrix val, bool requires_grad, std::function<void(Tape&, Node&)> back) {
  Node n;
  n.val = std::move(val);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix v) { return push(std::move(v), false, nullptr); }

Var Tape::input(Matrix v, bool track) { return push(std::move(v), track, nullptr); }

Var Tape::param(ParamStore& store, int seg) {
  Var v = push(store.get(seg), true, nullptr);
  nodes_[v.id].store = &store;
  nodes_[v.id].store_offset = store.segment(seg).offset;
  return v;
}

Var Tape::frozen(const ParamStore& store, int seg) { return constant(store.get(seg)); }

Matrix Tape::grad_of(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Matrix(n.val.rows(), n.val.cols());
  return n.grad;
}

Matrix& Tape::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Matrix(n.val.rows(), n.val.cols());
  return n.grad;
}

void Tape::accumulate(int id, const Matrix& g) {
  if (!nodes_[id].requires_grad) return;
  Matrix& buf = grad_buf(id);
  double* b = buf.data();
  const double* s = g.data();
  for (size_t k = 0; k < buf.size(); ++k) b[k] += s[k];
}

void Tape::backward(Var root) {
  Node& r = nodes_[root.id];
  if (r.val.rows() != 1 || r.val.cols() != 1)
    throw ArgumentError("backward: root must be a scalar node");
  if (!r.requires_grad) return;
  grad_buf(root.id)(0, 0) += 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.back) n.back(*this, n);
    if (n.store) {
      double* g = n.store->grads().data() + n.store_offset;
      const double* s = n.grad.data();
      for (size_t k = 0; k < n.grad.size(); ++k) g[k] += s[k];
    }
  }
}

// ---------------------------------------------------------------------------
// arithmetic

Var Tape::matmul(Var a, Var b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  if (A.cols() != B.rows())
    throw ArgumentError("tape matmul: inner dims " + A.shape_str() + " vs " + B.shape_str());
  Matrix out(A.rows(), B.cols());
  emap(out) = emap(A) * emap(B);
  const bool rg = tracked(a) || tracked(b);
  return push(std::move(out), rg, [a, b](Tape& t, Node& self) {
    const Matrix& A = t.val(a);
    const Matrix& B = t.val(b);
    if (t.tracked(a)) {
      Matrix& ga = t.grad_buf(a.id);
      emap(ga) += emap(self.grad) * emap(B).transpose();
    }
    if (t.tracked(b)) {
      Matrix& gb = t.grad_buf(b.id);
      emap(gb) += emap(A).transpose() * emap(self.grad);
    }
  });
}

Var Tape::add(Var a, Var b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  check_same_shape(A, B, "tape add");
  Matrix out = A;
  for (size_t k = 0; k < out.size(); ++k) out[k] += B[k];
  const bool rg = tracked(a) || tracked(b);
  return push(std::move(out), rg, [a, b](Tape& t, Node& self) {
    t.accumulate(a.id, self.grad);
    t.accumulate(b.id, self.grad);
  });
}

Var Tape::sub(Var a, Var b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  check_same_shape(A, B, "tape sub");
  Matrix out = A;
  for (size_t k = 0; k < out.size(); ++k) out[k] -= B[k];
  const bool rg = tracked(a) || tracked(b);
  return push(std::move(out), rg, [a, b](Tape& t, Node& self) {
    t.accumulate(a.id, self.grad);
    if (t.tracked(b)) {
      Matrix& gb = t.grad_buf(b.id);
      for (size_t k = 0; k < gb.size(); ++k) gb[k] -= self.grad[k];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  check_same_shape(A, B, "tape mul");
  Matrix out = A;
  for (size_t k = 0; k < out.size(); ++k) out[k] *= B[k];
  const bool rg = tracked(a) || tracked(b);
  return push(std::move(out), rg, [a, b](Tape& t, Node& self) {
    const Matrix& A = t.val(a);
    const Matrix& B = t.val(b);
    if (t.tracked(a)) {
      Matrix& ga = t.grad_buf(a.id);
      for (size_t k = 0; k < ga.size(); ++k) ga[k] += self.grad[k] * B[k];
    }
    if (t.tracked(b)) {
      Matrix& gb = t.grad_buf(b.id);
      for (size_t k = 0; k < gb.size(); ++k) gb[k] += self.grad[k] * A[k];
    }
  });
}

Var Tape::div(Var a, Var b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  check_same_shape(A, B, "tape div");
  Matrix out = A;
  for (size_t k = 0; k < out.size(); ++k) out[k] /= B[k];
  const bool rg = tracked(a) || tracked(b);
  return push(std::move(out), rg, [a, b](Tape& t, Node& self) {
    const Matrix& A = t.val(a);
    const Matrix& B = t.val(b);
    if (t.tracked(a)) {
      Matrix& ga = t.grad_buf(a.id);
      for (size_t k = 0; k < ga.size(); ++k) ga[k] += self.grad[k] / B[k];
    }
    if (t.tracked(b)) {
      Matrix& gb = t.grad_buf(b.id);
      for (size_t k = 0; k < gb.size(); ++k)
        gb[k] -= self.grad[k] * A[k] / (B[k] * B[k]);
    }
  });
}

Var Tape::add_rowvec(Var a, Var r) {
  const Matrix& A = val(a);
  const Matrix& R = val(r);
  if (R.rows() != 1 || R.cols() != A.cols())
    throw ArgumentError("add_rowvec: bias shape " + R.shape_str());
  Matrix out = A;
  for (int i = 0; i < A.rows(); ++i)
    for (int j = 0; j < A.cols(); ++j) out(i, j) += R(0, j);
  const bool rg = tracked(a) || tracked(r);
  return push(std::move(out), rg, [a, r](Tape& t, Node& self) {
    t.accumulate(a.id, self.grad);
    if (t.tracked(r)) {
      Matrix& gr = t.grad_buf(r.id);
      for (int i = 0; i < self.grad.rows(); ++i)
        for (int j = 0; j < self.grad.cols(); ++j) gr(0, j) += self.grad(i, j);
    }
  });
}

Var Tape::scale(Var a, double c) {
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) out[k] *= c;
  return push(std::move(out), tracked(a), [a, c](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k) ga[k] += c * self.grad[k];
  });
}

Var Tape::add_const(Var a, double c) {
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) out[k] += c;
  return push(std::move(out), tracked(a),
              [a](Tape& t, Node& self) { t.accumulate(a.id, self.grad); });
}

// ---------------------------------------------------------------------------
// elementwise

Var Tape::square(Var a) {
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) out[k] *= out[k];
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    const Matrix& A = t.val(a);
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k) ga[k] += 2.0 * A[k] * self.grad[k];
  });
}

Var Tape::sqrt_(Var a) {
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) out[k] = std::sqrt(out[k]);
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k) ga[k] += 0.5 / self.val[k] * self.grad[k];
  });
}

Var Tape::log_(Var a) {
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) out[k] = std::log(out[k]);
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    const Matrix& A = t.val(a);
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k) ga[k] += self.grad[k] / A[k];
  });
}

Var Tape::exp_(Var a) {
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) out[k] = std::exp(out[k]);
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k) ga[k] += self.val[k] * self.grad[k];
  });
}

Var Tape::relu(Var a) {
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) out[k] = out[k] > 0.0 ? out[k] : 0.0;
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    const Matrix& A = t.val(a);
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k)
      if (A[k] > 0.0) ga[k] += self.grad[k];
  });
}

Var Tape::gelu(Var a) {
  // exact gaussian gelu: x * Phi(x)
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) {
    const double x = out[k];
    out[k] = x * 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  }
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    const Matrix& A = t.val(a);
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k) {
      const double x = A[k];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga[k] += (cdf + x * pdf) * self.grad[k];
    }
  });
}

Var Tape::softplus(Var a) {
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) out[k] = stable_softplus(out[k]);
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    const Matrix& A = t.val(a);
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k) ga[k] += sigmoid(A[k]) * self.grad[k];
  });
}

Var Tape::clamp(Var a, double lo, double hi) {
  Matrix out = val(a);
  for (size_t k = 0; k < out.size(); ++k) out[k] = std::min(hi, std::max(lo, out[k]));
  return push(std::move(out), tracked(a), [a, lo, hi](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    const Matrix& A = t.val(a);
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k)
      if (A[k] >= lo && A[k] <= hi) ga[k] += self.grad[k];
  });
}

Var Tape::select(const Matrix& mask, Var a, Var b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  check_same_shape(A, B, "select");
  check_same_shape(A, mask, "select mask");
  Matrix out = A;
  for (size_t k = 0; k < out.size(); ++k) out[k] = mask[k] != 0.0 ? A[k] : B[k];
  const bool rg = tracked(a) || tracked(b);
  return push(std::move(out), rg, [a, b, mask](Tape& t, Node& self) {
    if (t.tracked(a)) {
      Matrix& ga = t.grad_buf(a.id);
      for (size_t k = 0; k < ga.size(); ++k)
        if (mask[k] != 0.0) ga[k] += self.grad[k];
    }
    if (t.tracked(b)) {
      Matrix& gb = t.grad_buf(b.id);
      for (size_t k = 0; k < gb.size(); ++k)
        if (mask[k] == 0.0) gb[k] += self.grad[k];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions / shape

Var Tape::sum_all(Var a) {
  const Matrix& A = val(a);
  double s = 0.0;
  for (size_t k = 0; k < A.size(); ++k) s += A[k];
  Matrix out(1, 1);
  out(0, 0) = s;
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    const double g = self.grad(0, 0);
    for (size_t k = 0; k < ga.size(); ++k) ga[k] += g;
  });
}

Var Tape::mean_all(Var a) {
  const size_t n = val(a).size();
  if (n == 0) throw ArgumentError("mean_all: empty matrix");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var Tape::row_sum(Var a) {
  const Matrix& A = val(a);
  Matrix out(A.rows(), 1);
  for (int i = 0; i < A.rows(); ++i) {
    double s = 0.0;
    for (int j = 0; j < A.cols(); ++j) s += A(i, j);
    out(i, 0) = s;
  }
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    for (int i = 0; i < ga.rows(); ++i)
      for (int j = 0; j < ga.cols(); ++j) ga(i, j) += self.grad(i, 0);
  });
}

Var Tape::reshape(Var a, int rows, int cols) {
  const Matrix& A = val(a);
  if (static_cast<size_t>(rows) * cols != A.size())
    throw ArgumentError("reshape: size mismatch");
  Matrix out(rows, cols);
  out.raw() = A.raw();
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    for (size_t k = 0; k < ga.size(); ++k) ga[k] += self.grad[k];
  });
}

Var Tape::slice_cols(Var a, int j0, int j1) {
  const Matrix& A = val(a);
  if (j0 < 0 || j1 > A.cols() || j0 >= j1) throw ArgumentError("slice_cols: bad range");
  Matrix out(A.rows(), j1 - j0);
  for (int i = 0; i < A.rows(); ++i)
    for (int j = j0; j < j1; ++j) out(i, j - j0) = A(i, j);
  return push(std::move(out), tracked(a), [a, j0](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    for (int i = 0; i < self.grad.rows(); ++i)
      for (int j = 0; j < self.grad.cols(); ++j) ga(i, j0 + j) += self.grad(i, j);
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: no parts");
  const int rows = val(parts[0]).rows();
  int cols = 0;
  bool rg = false;
  for (Var p : parts) {
    if (val(p).rows() != rows) throw ArgumentError("concat_cols: row mismatch");
    cols += val(p).cols();
    rg = rg || tracked(p);
  }
  Matrix out(rows, cols);
  int at = 0;
  for (Var p : parts) {
    const Matrix& P = val(p);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < P.cols(); ++j) out(i, at + j) = P(i, j);
    at += P.cols();
  }
  return push(std::move(out), rg, [parts](Tape& t, Node& self) {
    int at = 0;
    for (Var p : parts) {
      const int pc = t.val(p).cols();
      if (t.tracked(p)) {
        Matrix& gp = t.grad_buf(p.id);
        for (int i = 0; i < gp.rows(); ++i)
          for (int j = 0; j < pc; ++j) gp(i, j) += self.grad(i, at + j);
      }
      at += pc;
    }
  });
}

Var Tape::gather_cols(Var a, std::vector<int> idx) {
  const Matrix& A = val(a);
  if (static_cast<int>(idx.size()) != A.rows())
    throw ArgumentError("gather_cols: index count != rows");
  Matrix out(A.rows(), 1);
  for (int i = 0; i < A.rows(); ++i) {
    if (idx[i] < 0 || idx[i] >= A.cols()) throw ArgumentError("gather_cols: index range");
    out(i, 0) = A(i, idx[i]);
  }
  return push(std::move(out), tracked(a), [a, idx = std::move(idx)](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    for (int i = 0; i < ga.rows(); ++i) ga(i, idx[i]) += self.grad(i, 0);
  });
}

Var Tape::repeat_rows(Var a, int times) {
  const Matrix& A = val(a);
  if (times < 1) throw ArgumentError("repeat_rows: times < 1");
  Matrix out(A.rows() * times, A.cols());
  for (int i = 0; i < A.rows(); ++i)
    for (int r = 0; r < times; ++r)
      for (int j = 0; j < A.cols(); ++j) out(i * times + r, j) = A(i, j);
  return push(std::move(out), tracked(a), [a, times](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    for (int i = 0; i < ga.rows(); ++i)
      for (int r = 0; r < times; ++r)
        for (int j = 0; j < ga.cols(); ++j) ga(i, j) += self.grad(i * times + r, j);
  });
}

Var Tape::diag_embed(Var v) {
  const Matrix& V = val(v);
  if (V.rows() != 1) throw ArgumentError("diag_embed: expects a row vector");
  const int n = V.cols();
  Matrix out(n, n);
  for (int i = 0; i < n; ++i) out(i, i) = V(0, i);
  return push(std::move(out), tracked(v), [v](Tape& t, Node& self) {
    if (!t.tracked(v)) return;
    Matrix& gv = t.grad_buf(v.id);
    for (int i = 0; i < gv.cols(); ++i) gv(0, i) += self.grad(i, i);
  });
}

// ---------------------------------------------------------------------------
// structured

Var Tape::softmax_rows(Var a) {
  const Matrix& A = val(a);
  Matrix out = A;
  for (int i = 0; i < A.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < A.cols(); ++j) mx = std::max(mx, A(i, j));
    double s = 0.0;
    for (int j = 0; j < A.cols(); ++j) s += (out(i, j) = std::exp(A(i, j) - mx));
    for (int j = 0; j < A.cols(); ++j) out(i, j) /= s;
  }
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    const Matrix& Y = self.val;
    for (int i = 0; i < ga.rows(); ++i) {
      double inner = 0.0;
      for (int j = 0; j < ga.cols(); ++j) inner += self.grad(i, j) * Y(i, j);
      for (int j = 0; j < ga.cols(); ++j)
        ga(i, j) += Y(i, j) * (self.grad(i, j) - inner);
    }
  });
}

Var Tape::logsumexp_rows(Var a) {
  const Matrix& A = val(a);
  Matrix out(A.rows(), 1);
  for (int i = 0; i < A.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < A.cols(); ++j) {
      if (std::isnan(A(i, j))) throw NumericError("logsumexp_rows: NaN entry");
      mx = std::max(mx, A(i, j));
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      out(i, 0) = mx;
      continue;
    }
    double s = 0.0;
    for (int j = 0; j < A.cols(); ++j) s += std::exp(A(i, j) - mx);
    out(i, 0) = mx + std::log(s);
  }
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    const Matrix& A = t.val(a);
    Matrix& ga = t.grad_buf(a.id);
    for (int i = 0; i < ga.rows(); ++i) {
      if (self.val(i, 0) == -std::numeric_limits<double>::infinity()) continue;
      for (int j = 0; j < ga.cols(); ++j) {
        const double w = std::exp(A(i, j) - self.val(i, 0));
        if (w > 0.0) ga(i, j) += self.grad(i, 0) * w;
      }
    }
  });
}

Var Tape::cumsum_rows(Var a) {
  const Matrix& A = val(a);
  Matrix out = A;
  for (int i = 0; i < A.rows(); ++i)
    for (int j = 1; j < A.cols(); ++j) out(i, j) += out(i, j - 1);
  return push(std::move(out), tracked(a), [a](Tape& t, Node& self) {
    if (!t.tracked(a)) return;
    Matrix& ga = t.grad_buf(a.id);
    for (int i = 0; i < ga.rows(); ++i) {
      double acc = 0.0;
      for (int j = ga.cols() - 1; j >= 0; --j) {
        acc += self.grad(i, j);
        ga(i, j) += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// fused gaussian log-pdf

Var Tape::mvn_logpdf(Var delta, Var var_diag, Var lam) {
  const Matrix& D = val(delta);
  const Matrix& V = val(var_diag);
  const Matrix& L = val(lam);
  const int n = D.rows();
  const int l = D.cols();
  if (V.cols() != l || (V.rows() != 1 && V.rows() != n))
    throw ArgumentError("mvn_logpdf: var_diag shape " + V.shape_str());
  if (L.rows() != l || L.cols() != l)
    throw ArgumentError("mvn_logpdf: lam shape " + L.shape_str());

  // Sigma = Diag(v) + lam lam^T, factored per row.
  Matrix lamlamT(l, l);
  emap(lamlamT) = emap(L) * emap(L).transpose();

  Matrix out(n, 1);
  std::vector<CholeskyFactor> factors;
  factors.reserve(n);
  for (int i = 0; i < n; ++i) {
    Matrix sigma = lamlamT;
    const int vrow = V.rows() == 1 ? 0 : i;
    for (int j = 0; j < l; ++j) sigma(j, j) += V(vrow, j);
    CholeskyFactor f = cholesky(sigma);
    const Vector w = f.solve_lower(D.row_vec(i));
    double quad = 0.0;
    for (double x : w) quad += x * x;
    out(i, 0) = -0.5 * (l * kLogTwoPi + f.log_det_cov() + quad);
    factors.push_back(std::move(f));
  }

  const bool rg = tracked(delta) || tracked(var_diag) || tracked(lam);
  return push(std::move(out), rg,
              [delta, var_diag, lam, factors = std::move(factors)](Tape& t, Node& self) {
    const Matrix& D = t.val(delta);
    const Matrix& V = t.val(var_diag);
    const Matrix& L = t.val(lam);
    const int n = D.rows();
    const int l = D.cols();
    const bool gd = t.tracked(delta);
    const bool gv = t.tracked(var_diag);
    const bool gl = t.tracked(lam);
    Eigen::MatrixXd lamE = emap(L);
    Eigen::MatrixXd glam = Eigen::MatrixXd::Zero(l, l);
    Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(l, l);
    for (int i = 0; i < n; ++i) {
      const double g = self.grad(i, 0);
      if (g == 0.0) continue;
      const CholeskyFactor& f = factors[i];
      Eigen::Map<const EigenRowMajor> lowE(f.lower.data(), l, l);
      // A = Sigma^{-1} via the factor
      Eigen::MatrixXd A = lowE.template triangularView<Eigen::Lower>().solve(eye);
      A = lowE.transpose().template triangularView<Eigen::Upper>().solve(A);
      Eigen::VectorXd d(l);
      for (int j = 0; j < l; ++j) d(j) = D(i, j);
      Eigen::VectorXd Ad = A * d;
      if (gd) {
        Matrix& gD = t.grad_buf(delta.id);
        for (int j = 0; j < l; ++j) gD(i, j) += -g * Ad(j);
      }
      if (gv || gl) {
        // dlogp/dSigma = 0.5 * (Ad Ad^T - A)
        Eigen::MatrixXd GS = 0.5 * (Ad * Ad.transpose() - A);
        if (gv) {
          Matrix& gV = t.grad_buf(var_diag.id);
          const int vrow = V.rows() == 1 ? 0 : i;
          for (int j = 0; j < l; ++j) gV(vrow, j) += g * GS(j, j);
        }
        if (gl) glam += g * 2.0 * (GS * lamE);
      }
    }
    if (gl) {
      Matrix& gL = t.grad_buf(lam.id);
      for (int r = 0; r < l; ++r)
        for (int c = 0; c < l; ++c) gL(r, c) += glam(r, c);
    }
  });
}

// ---------------------------------------------------------------------------
// grad check

double grad_check(const std::function<Var(Tape&, Var)>& f, const Vector& point) {
  const int n = static_cast<int>(point.size());
  Vector analytic(n);
  {
    Tape t;
    Var x = t.input(Matrix::row(point), true);
    Var y = f(t, x);
    if (!t.val(y).all_finite())
      throw NumericError("grad_check: non-finite function value at point");
    t.backward(y);
    const Matrix g = t.grad_of(x);
    for (int i = 0; i < n; ++i) analytic[i] = g(0, i);
  }
  auto eval = [&](const Vector& p) {
    Tape t;
    Var x = t.input(Matrix::row(p), false);
    Var y = f(t, x);
    const double v = t.val(y)(0, 0);
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite value near point");
    return v;
  };
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    const double h = 1e-5 * (1.0 + std::abs(point[i]));
    Vector p = point;
    p[i] = point[i] + h;
    const double fp = eval(p);
    p[i] = point[i] - h;
    const double fm = eval(p);
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(fd), std::abs(analytic[i])});
    worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace rvnp
