#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "rvnp/linalg.hpp"
#include "rvnp/nets.hpp"
#include "rvnp/rng.hpp"
#include "rvnp/tape.hpp"

using namespace rvnp;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("logsumexp basics") {
  CHECK(logsumexp(Vector{3.7}) == doctest::Approx(3.7).epsilon(1e-15));
  CHECK(logsumexp(Vector{0.0, 0.0}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(logsumexp(Vector{}), ArgumentError);
  CHECK(logsumexp(Vector{-kInf, 1.0}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(logsumexp(Vector{-kInf, -kInf}) == -kInf);
  // no overflow for large entries
  CHECK(std::isfinite(logsumexp(Vector{700.0, 699.0}) - 700.0));
}

TEST_CASE("logsumexp matches extended-precision oracle") {
  Rng rng(42);
  for (int rep = 0; rep < 5; ++rep) {
    Vector v(100);
    for (double& x : v) x = rng.uniform(-50.0, 50.0);
    const double got = logsumexp(v);
    const double want = oracle::logsumexp_longdouble(v);
    CHECK(std::abs(got - want) / std::abs(want) < 1e-12);
  }
}

TEST_CASE("logsumexp shift invariance") {
  Rng rng(7);
  Vector v(37);
  for (double& x : v) x = rng.uniform(-5.0, 5.0);
  const double base = logsumexp(v);
  for (double c : {-310.0, -3.5, 0.25, 100.0}) {
    Vector shifted = v;
    for (double& x : shifted) x += c;
    CHECK(logsumexp(shifted) - c == doctest::Approx(base).epsilon(1e-13));
  }
}

TEST_CASE("cholesky identity and hand example") {
  const CholeskyFactor id = cholesky(Matrix::identity(3));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(id.lower(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-15));

  const Matrix a = Matrix::from_rows(2, 2, {4, 2, 2, 3});
  const CholeskyFactor f = cholesky(a);
  CHECK(f.lower(0, 0) == doctest::Approx(2.0));
  CHECK(f.lower(1, 0) == doctest::Approx(1.0));
  CHECK(f.lower(1, 1) == doctest::Approx(std::sqrt(2.0)));
  CHECK(f.lower(0, 1) == 0.0);
}

TEST_CASE("cholesky rejects indefinite matrices naming the pivot") {
  const Matrix a = Matrix::from_rows(2, 2, {1, 2, 2, 1});
  CHECK_THROWS_WITH_AS(cholesky(a), doctest::Contains("pivot 1"), DecompositionError);
}

TEST_CASE("cholesky jitter rescues a semidefinite matrix once") {
  const Matrix a = Matrix::from_rows(2, 2, {1, 1, 1, 1});
  const CholeskyFactor f = cholesky(a);  // singular, saved by 1e-8 jitter
  const Matrix r = f.cov();
  CHECK(r(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r(1, 0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("cholesky reconstruction on random SPD matrices") {
  Rng rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 2 + static_cast<int>(rng.next_u64() % 6);
    Matrix b(n, n);
    rng.fill_normal(b);
    Matrix a(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double s = i == j ? 0.5 : 0.0;
        for (int k = 0; k < n; ++k) s += b(i, k) * b(j, k);
        a(i, j) = s;
      }
    const Matrix r = cholesky(a).cov();
    double num = 0.0, den = 0.0;
    for (size_t k = 0; k < a.size(); ++k) {
      num += (r[k] - a[k]) * (r[k] - a[k]);
      den += a[k] * a[k];
    }
    CHECK(std::sqrt(num / den) < 1e-10);
  }
}

TEST_CASE("gaussian_logpdf closed forms") {
  for (int d : {1, 3, 6}) {
    const Vector zero(d, 0.0);
    const CholeskyFactor id = cholesky(Matrix::identity(d));
    CHECK(gaussian_logpdf(zero, zero, id) ==
          doctest::Approx(-0.5 * d * kLogTwoPi).epsilon(1e-14));
  }
  const CholeskyFactor one = cholesky(Matrix::identity(1));
  CHECK(gaussian_logpdf({1.0}, {0.0}, one) ==
        doctest::Approx(-0.5 - 0.5 * kLogTwoPi).epsilon(1e-14));
  CHECK_THROWS_AS(gaussian_logpdf({1.0, 2.0}, {0.0}, one), ArgumentError);
}

TEST_CASE("gaussian_logpdf matches explicit-inverse oracle") {
  Rng rng(11);
  for (int rep = 0; rep < 8; ++rep) {
    const int d = 4;
    Matrix b(d, d);
    rng.fill_normal(b);
    Matrix cov(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        double s = i == j ? 0.3 : 0.0;
        for (int k = 0; k < d; ++k) s += b(i, k) * b(j, k);
        cov(i, j) = s;
      }
    Vector x(d), mean(d);
    for (int i = 0; i < d; ++i) {
      x[i] = rng.normal();
      mean[i] = rng.normal();
    }
    const double got = gaussian_logpdf(x, mean, cholesky(cov));
    const double want = oracle::mvn_logpdf_explicit(x, mean, cov);
    CHECK(std::abs(got - want) / std::abs(want) < 1e-10);
  }
}

TEST_CASE("rng determinism and splitting") {
  Rng a(123), b(123);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng base(9);
  Rng c1 = base.split(1), c2 = base.split(2), c1b = Rng(9).split(1);
  CHECK(c1.next_u64() == c1b.next_u64());
  CHECK(c1.next_u64() != c2.next_u64());

  Rng u(5);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("poisson moments for small and large rates") {
  Rng rng(77);
  for (double lam : {3.0, 40.0, 1500.0}) {
    const int n = 20000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double k = static_cast<double>(rng.poisson(lam));
      s += k;
      s2 += k * k;
    }
    const double m = s / n;
    const double v = s2 / n - m * m;
    CHECK(std::abs(m - lam) < 5.0 * std::sqrt(lam / n));
    CHECK(std::abs(v - lam) / lam < 0.1);
  }
  Rng z(1);
  CHECK(z.poisson(0.0) == 0);
}

// ---------------------------------------------------------------------------
// tape adjoints

namespace {

// Each builder maps an [1,n] input var to a scalar var through the primitive
// under test; grad_check compares against central differences.
using Builder = std::function<Var(Tape&, Var)>;

void check_primitive(const Builder& f, int dim, uint64_t seed, double tol,
                     double lo = -2.0, double hi = 2.0) {
  Rng rng(seed);
  for (int rep = 0; rep < 10; ++rep) {
    Vector p(dim);
    for (double& x : p) x = rng.uniform(lo, hi);
    CHECK(grad_check(f, p) < tol);
  }
}

}  // namespace

TEST_CASE("adjoints of arithmetic and elementwise primitives") {
  Matrix w = Matrix::from_rows(4, 3, {0.3, -1.2, 0.7, 0.1, 0.5, -0.4, 1.1, 0.2, -0.9, -0.6, 0.8, 0.05});

  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.matmul(x, t.constant(w))); }, 4, 1,
                  1e-7);
  check_primitive([&](Tape& t, Var x) { return t.mean_all(t.mul(x, x)); }, 5, 2, 1e-7);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.div(x, t.add_const(t.square(x), 1.5))); },
                  5, 3, 1e-6);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.gelu(x)); }, 6, 4, 1e-6);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.relu(x)); }, 6, 5, 1e-5);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.softplus(x)); }, 6, 6, 1e-7);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.exp_(x)); }, 4, 7, 1e-7);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.log_(t.add_const(t.square(x), 1.0))); },
                  4, 8, 1e-7);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.sqrt_(t.add_const(t.square(x), 0.5))); },
                  4, 9, 1e-7);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.square(t.cumsum_rows(x))); }, 6, 10,
                  1e-7);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.square(t.softmax_rows(x))); }, 6, 11,
                  1e-6);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.logsumexp_rows(x)); }, 6, 12, 1e-7);
  check_primitive(
      [&](Tape& t, Var x) {
        Var r = t.reshape(x, 2, 3);
        Var a = t.slice_cols(r, 0, 2);
        Var b = t.slice_cols(r, 2, 3);
        return t.sum_all(t.square(t.concat_cols({b, a})));
      },
      6, 13, 1e-7);
  check_primitive(
      [&](Tape& t, Var x) {
        Var r = t.reshape(x, 3, 2);
        return t.sum_all(t.square(t.gather_cols(r, {1, 0, 1})));
      },
      6, 14, 1e-7);
  check_primitive(
      [&](Tape& t, Var x) { return t.sum_all(t.square(t.repeat_rows(t.reshape(x, 2, 2), 3))); }, 4,
      15, 1e-7);
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.square(t.diag_embed(x))); }, 4, 16,
                  1e-7);
  check_primitive(
      [&](Tape& t, Var x) {
        Matrix mask = Matrix::from_rows(1, 4, {1, 0, 1, 0});
        return t.sum_all(t.select(mask, t.square(x), t.scale(x, 3.0)));
      },
      4, 17, 1e-7);
  check_primitive(
      [&](Tape& t, Var x) {
        Var a = t.slice_cols(x, 0, 3);
        Var b = t.slice_cols(x, 3, 6);
        return t.sum_all(t.mul(t.add(a, b), t.sub(a, b)));
      },
      6, 18, 1e-7);
  check_primitive(
      [&](Tape& t, Var x) {
        Var m = t.reshape(x, 2, 3);
        Var bias = t.constant(Matrix::from_rows(1, 3, {0.3, -0.2, 0.9}));
        return t.sum_all(t.square(t.add_rowvec(m, bias)));
      },
      6, 19, 1e-7);
  // clamp passes gradients through the interior only
  check_primitive([&](Tape& t, Var x) { return t.sum_all(t.square(t.clamp(x, -1.0, 1.0))); }, 5,
                  20, 1e-5);
}

TEST_CASE("adjoint of the fused gaussian log-pdf") {
  // gradient w.r.t. delta, a shared diagonal (through softplus) and the factor
  check_primitive(
      [&](Tape& t, Var x) {
        Var delta = t.reshape(t.slice_cols(x, 0, 6), 2, 3);
        Var vdiag = t.add_const(t.softplus(t.slice_cols(x, 6, 9)), 0.05);  // [1,3]
        Var lam = t.reshape(t.scale(t.slice_cols(x, 9, 18), 0.4), 3, 3);
        return t.sum_all(t.mvn_logpdf(delta, vdiag, lam));
      },
      18, 21, 1e-6);
  // per-row diagonal variant (the theta-dependent error model path)
  check_primitive(
      [&](Tape& t, Var x) {
        Var delta = t.reshape(t.slice_cols(x, 0, 4), 2, 2);
        Var vdiag = t.add_const(t.softplus(t.reshape(t.slice_cols(x, 4, 8), 2, 2)), 0.05);
        Var lam = t.reshape(t.scale(t.slice_cols(x, 8, 12), 0.3), 2, 2);
        return t.sum_all(t.mvn_logpdf(delta, vdiag, lam));
      },
      12, 22, 1e-6);
}

TEST_CASE("grad_check on quadratic is nearly exact") {
  Rng rng(13);
  for (int rep = 0; rep < 3; ++rep) {
    Vector p(7);
    for (double& x : p) x = rng.uniform(-3.0, 3.0);
    const double err = grad_check(
        [](Tape& t, Var x) { return t.scale(t.sum_all(t.square(x)), 0.5); }, p);
    CHECK(err < 1e-8);
  }
}

TEST_CASE("grad_check on gaussian log-pdf in the mean") {
  Rng rng(14);
  const int d = 3;
  Vector x_obs(d);
  for (double& v : x_obs) v = rng.normal();
  const double err = grad_check(
      [&](Tape& t, Var mean) {
        Var delta = t.sub(t.constant(Matrix::row(x_obs)), mean);
        Var vdiag = t.constant(Matrix::from_rows(1, d, {1.3, 0.8, 2.0}));
        Var lam = t.constant(Matrix(d, d));
        return t.sum_all(t.mvn_logpdf(delta, vdiag, lam));
      },
      Vector{0.3, -0.4, 1.2});
  CHECK(err < 1e-4);
}

TEST_CASE("tape logsumexp excludes -inf rows without NaN") {
  Tape t;
  Matrix a = Matrix::from_rows(2, 2, {-kInf, 0.5, -kInf, -kInf});
  Var v = t.input(a, true);
  Var ls = t.logsumexp_rows(v);
  CHECK(t.val(ls)(0, 0) == doctest::Approx(0.5));
  CHECK(t.val(ls)(1, 0) == -kInf);
}

// ---------------------------------------------------------------------------
// optimizer and training loop

TEST_CASE("adam: zero gradient with zero weight decay leaves params unchanged") {
  ParamStore store;
  const int seg = store.add("p", 1, 3, true);
  store.set(seg, Matrix::from_rows(1, 3, {1.0, -2.0, 3.0}));
  AdamState st;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  store.zero_grads();
  adam_step(st, store, cfg);
  const Matrix p = store.get(seg);
  CHECK(p(0, 0) == 1.0);
  CHECK(p(0, 1) == -2.0);
  CHECK(p(0, 2) == 3.0);
}

TEST_CASE("adam: constant gradient approaches -lr*sign(g) steps") {
  ParamStore store;
  const int seg = store.add("p", 1, 2, true);
  AdamState st;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.warmup_steps = 0;
  double prev0 = 0.0;
  for (int i = 0; i < 200; ++i) {
    prev0 = store.values()[0];
    store.grads()[0] = 2.5;
    store.grads()[1] = -0.3;
    adam_step(st, store, cfg);
  }
  CHECK(store.values()[0] - prev0 == doctest::Approx(-cfg.lr).epsilon(1e-3));
}

TEST_CASE("gradient clipping at global norm 10") {
  Vector g(100, 10.0);  // norm 100
  CHECK(norm2(g) == doctest::Approx(100.0));
  const double f = clip_factor(g, 10.0);
  CHECK(f == doctest::Approx(0.1));
  for (double& x : g) x *= f;
  CHECK(norm2(g) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(clip_factor(Vector{1.0, 2.0}, 10.0) == 1.0);
}

TEST_CASE("adam warmup scales the learning rate exactly") {
  // single step s: lr_s = lr * s / warmup; with constant unit gradient the
  // first update is -lr_1 * g/(|g| + eps) ~ -lr/warmup
  ParamStore store;
  store.add("p", 1, 1, true);
  AdamState st;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  store.grads()[0] = 1.0;
  adam_step(st, store, cfg);
  CHECK(store.values()[0] ==
        doctest::Approx(-cfg.lr * 1.0 / cfg.warmup_steps).epsilon(1e-6));
}

TEST_CASE("adam skips weight decay on no-decay segments") {
  ParamStore store;
  const int w = store.add("w", 1, 1, true);
  const int s = store.add("scale", 1, 1, false);
  store.fill(w, 2.0);
  store.fill(s, 2.0);
  AdamState st;
  AdamConfig cfg;
  cfg.weight_decay = 0.1;
  store.zero_grads();
  adam_step(st, store, cfg);
  CHECK(store.values()[0] < 2.0);         // decayed
  CHECK(store.values()[1] == 2.0);        // scale param untouched
}

TEST_CASE("adam raises on non-finite gradients with the step index") {
  ParamStore store;
  store.add("p", 1, 1, true);
  AdamState st;
  store.grads()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(adam_step(st, store, AdamConfig{}), TrainingError);
}

namespace {

TrainProblem quadratic_problem(ParamStore& store, int seg, const Vector& target) {
  TrainProblem prob;
  prob.n_items = 64;
  prob.stores = {&store};
  prob.eval = [&store, seg, target](const std::vector<int>&, Rng&, bool grads) {
    Tape t;
    Var p = grads ? t.param(store, seg) : t.frozen(store, seg);
    Var d = t.sub(p, t.constant(Matrix::row(target)));
    Var loss = t.sum_all(t.square(d));
    if (grads) t.backward(loss);
    return t.val(loss)(0, 0);
  };
  return prob;
}

}  // namespace

TEST_CASE("train_loop converges on a quadratic") {
  ParamStore store;
  const int seg = store.add("p", 1, 3, true);
  const Vector target{0.7, -1.3, 2.1};
  TrainProblem prob = quadratic_problem(store, seg, target);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.iterations = 500;
  cfg.patience = 500;
  cfg.adam.weight_decay = 0.0;
  cfg.adam.warmup_steps = 10;
  train_loop(prob, cfg, Rng(5));
  const Matrix p = store.get(seg);
  for (int j = 0; j < 3; ++j) CHECK(std::abs(p(0, j) - target[j]) < 1e-3);
}

TEST_CASE("train_loop stops at best + patience on a stagnant loss") {
  ParamStore store;
  store.add("p", 1, 1, true);
  TrainProblem prob;
  prob.n_items = 20;
  prob.stores = {&store};
  prob.eval = [](const std::vector<int>&, Rng&, bool) { return 1.0; };
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.iterations = 500;
  cfg.patience = 17;
  TrainResult res = train_loop(prob, cfg, Rng(1));
  CHECK(res.best_iteration == 0);
  CHECK(res.iterations_run == 18);  // stops at best + patience
}

TEST_CASE("train_loop is deterministic under a fixed seed") {
  auto run = [] {
    ParamStore store;
    const int seg = store.add("p", 1, 3, true);
    const Vector target{0.2, 0.4, -0.9};
    TrainProblem prob = quadratic_problem(store, seg, target);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.iterations = 40;
    cfg.adam.warmup_steps = 10;
    return train_loop(prob, cfg, Rng(99));
  };
  const TrainResult a = run(), b = run();
  REQUIRE(a.train_history.size() == b.train_history.size());
  for (size_t i = 0; i < a.train_history.size(); ++i)
    CHECK(a.train_history[i] == b.train_history[i]);
}

TEST_CASE("train_loop aborts on NaN loss and keeps the best parameters") {
  ParamStore store;
  const int seg = store.add("p", 1, 1, true);
  store.fill(seg, 4.0);
  int calls = 0;
  TrainProblem prob;
  prob.n_items = 10;
  prob.stores = {&store};
  prob.eval = [&](const std::vector<int>&, Rng&, bool grads) {
    ++calls;
    if (calls > 12) return std::numeric_limits<double>::quiet_NaN();
    Tape t;
    Var p = grads ? t.param(store, seg) : t.frozen(store, seg);
    Var loss = t.sum_all(t.square(p));
    if (grads) t.backward(loss);
    return t.val(loss)(0, 0);
  };
  TrainConfig cfg;
  cfg.batch_size = 10;
  cfg.iterations = 100;
  cfg.adam.weight_decay = 0.0;
  TrainResult res = train_loop(prob, cfg, Rng(3));
  CHECK(res.aborted_non_finite);
  CHECK(std::isfinite(store.values()[0]));
}
