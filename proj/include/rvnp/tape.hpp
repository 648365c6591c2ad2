#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rvnp/matrix.hpp"
#include "rvnp/rng.hpp"

namespace rvnp {

/// Named slice of a flat trainable parameter vector. `decay` marks whether
/// decoupled weight decay applies; scale-like parameters (Cholesky diagonals,
/// off-diagonal factors, spline derivative raws) opt out.
struct ParamSegment {
  std::string name;
  int rows = 0, cols = 0;
  int offset = 0;
  bool decay = true;
};

class ParamStore {
 public:
  int add(const std::string& name, int rows, int cols, bool decay = true);

  Matrix get(int seg) const;
  void set(int seg, const Matrix& m);
  void fill(int seg, double v);
  void init_normal(int seg, Rng& rng, double scale);

  int size() const { return static_cast<int>(values_.size()); }
  Vector& values() { return values_; }
  const Vector& values() const { return values_; }
  Vector& grads() { return grads_; }
  const Vector& grads() const { return grads_; }
  void zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

  const std::vector<ParamSegment>& segments() const { return segs_; }
  const ParamSegment& segment(int seg) const { return segs_[seg]; }
  int find(const std::string& name) const;

 private:
  Vector values_, grads_;
  std::vector<ParamSegment> segs_;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over Matrix-valued nodes. A fixed set of primitives
/// (affine ops, elementwise nonlinearities, logsumexp, gather/scatter and the
/// fused Gaussian log-pdf) covers every loss graph in the project; each
/// adjoint matches central finite differences (see grad_check).
class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  Var constant(Matrix v);
  Var input(Matrix v, bool track = true);
  Var param(ParamStore& store, int seg);
  /// Parameter leaf without gradient tracking (frozen module).
  Var frozen(const ParamStore& store, int seg);

  const Matrix& val(Var v) const { return nodes_[v.id].val; }
  /// Gradient of the last backward() root w.r.t. this node (zeros if unused).
  Matrix grad_of(Var v) const;

  // arithmetic
  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var add_rowvec(Var a, Var r);  // r is [1, n], broadcast over rows
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var neg(Var a) { return scale(a, -1.0); }

  // elementwise
  Var square(Var a);
  Var sqrt_(Var a);
  Var log_(Var a);
  Var exp_(Var a);
  Var relu(Var a);
  Var gelu(Var a);
  Var softplus(Var a);
  Var clamp(Var a, double lo, double hi);
  /// mask is a constant 0/1 matrix: out = mask ? a : b.
  Var select(const Matrix& mask, Var a, Var b);

  // reductions / shape
  Var sum_all(Var a);
  Var mean_all(Var a);
  Var row_sum(Var a);
  Var reshape(Var a, int rows, int cols);
  Var slice_cols(Var a, int j0, int j1);
  Var concat_cols(const std::vector<Var>& parts);
  Var gather_cols(Var a, std::vector<int> idx);
  Var repeat_rows(Var a, int times);  // row i -> rows i*times..i*times+times-1
  Var diag_embed(Var v);              // [1,n] -> [n,n]

  // structured
  Var softmax_rows(Var a);
  Var logsumexp_rows(Var a);
  Var cumsum_rows(Var a);

  /// Fused multivariate normal log-density, one value per row of delta:
  /// logp_i = log N(delta_i; 0, Sigma_i), Sigma_i = Diag(var_diag_i) + L L^T.
  /// var_diag may have one row (shared across the batch). L is used as-is;
  /// callers mask it to the intended triangle.
  Var mvn_logpdf(Var delta, Var var_diag, Var lam);

  void backward(Var root);

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix val;
    Matrix grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::function<void(Tape&, Node&)> back;
    ParamStore* store = nullptr;
    int store_offset = 0;
  };

  std::vector<Node> nodes_;

  Var push(Matrix val, bool requires_grad, std::function<void(Tape&, Node&)> back);
  bool tracked(Var v) const { return nodes_[v.id].requires_grad; }
  Matrix& grad_buf(int id);
  void accumulate(int id, const Matrix& g);

  friend double grad_check_impl(const std::function<Var(Tape&, Var)>&, const Vector&);
};

/// Max relative error between the tape gradient of f at `point` and central
/// finite differences with step h = 1e-5 * (1 + |x_i|).
double grad_check(const std::function<Var(Tape&, Var)>& f, const Vector& point);

}  // namespace rvnp
