#include "rvnp/flow.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "rvnp/checkpoint.hpp"
#include "rvnp/linalg.hpp"

namespace rvnp {

namespace {
constexpr double kMinBinWidth = 1e-3;
constexpr double kMinDerivative = 1e-3;
}  // namespace

ConditionalFlow::ConditionalFlow(const FlowConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.event_dim < 1) throw ArgumentError("flow: event_dim must be >= 1");
  if (cfg.context_dim < 0) throw ArgumentError("flow: negative context_dim");
  if (cfg.bins < 2) throw ArgumentError("flow: need at least 2 bins");
  Rng init_rng = rng.split(7);
  const int d = cfg.event_dim;
  for (int i = 0; i < cfg.layers; ++i) {
    Layer l;
    if (d == 1) {
      l.id_dim = 0;
      l.tr_dim = 1;
      l.swap = false;  // degenerate coupling: context-only conditioner
    } else if (i % 2 == 0) {
      l.id_dim = d / 2;       // even layers transform the larger block
      l.tr_dim = d - d / 2;
      l.swap = false;
    } else {
      l.tr_dim = d / 2;
      l.id_dim = d - d / 2;
      l.swap = true;
    }
    const int in = l.id_dim + cfg.context_dim;
    const int out = l.tr_dim * (3 * cfg.bins - 1);
    l.conditioner = Mlp(store_, "layer" + std::to_string(i), {in, cfg.hidden, cfg.hidden, out},
                        Activation::Gelu, /*zero_init_last=*/true, init_rng);
    layers_.push_back(std::move(l));
  }
}

Var ConditionalFlow::base_logpdf(Tape& t, Var u) const {
  const int d = t.val(u).cols();
  return t.add_const(t.scale(t.row_sum(t.square(u)), -0.5), -0.5 * d * kLogTwoPi);
}

std::pair<Var, Var> ConditionalFlow::split(Tape& t, Var x, const Layer& l) const {
  const int d = cfg_.event_dim;
  if (l.id_dim == 0) return {Var{}, x};
  if (!l.swap)
    return {t.slice_cols(x, 0, l.id_dim), t.slice_cols(x, l.id_dim, d)};
  return {t.slice_cols(x, l.tr_dim, d), t.slice_cols(x, 0, l.tr_dim)};
}

Var ConditionalFlow::merge(Tape& t, Var id_part, Var tr_part, const Layer& l) const {
  if (l.id_dim == 0) return tr_part;
  if (!l.swap) return t.concat_cols({id_part, tr_part});
  return t.concat_cols({tr_part, id_part});
}

Var ConditionalFlow::conditioner_input(Tape& t, Var id_part, Var context, int n) const {
  const bool has_ctx = cfg_.context_dim > 0;
  if (!id_part.valid()) {
    if (has_ctx) return context;
    return t.constant(Matrix(n, 0));
  }
  if (!has_ctx) return id_part;
  return t.concat_cols({id_part, context});
}

// Monotone rational-quadratic spline (Durkan-style knots), identity outside
// [-B, B]. inp is [n, tr_dim]; raw_params are the conditioner pre-activations
// [n, tr_dim*(3*bins-1)] laid out per transformed dimension.
std::pair<Var, Var> ConditionalFlow::spline(Tape& t, Var inp, Var raw_params,
                                            bool forward) const {
  const int n = t.val(inp).rows();
  const int dt = t.val(inp).cols();
  const int K = cfg_.bins;
  const double B = cfg_.tail_bound;
  const int R = n * dt;

  Var x = t.reshape(inp, R, 1);
  Var p = t.reshape(raw_params, R, 3 * K - 1);
  Var wraw = t.slice_cols(p, 0, K);
  Var hraw = t.slice_cols(p, K, 2 * K);
  Var draw = t.slice_cols(p, 2 * K, 3 * K - 1);

  Var widths =
      t.scale(t.add_const(t.scale(t.softmax_rows(wraw), 1.0 - K * kMinBinWidth), kMinBinWidth),
              2.0 * B);
  Var heights =
      t.scale(t.add_const(t.scale(t.softmax_rows(hraw), 1.0 - K * kMinBinWidth), kMinBinWidth),
              2.0 * B);
  Var knots_x = t.concat_cols({t.constant(Matrix(R, 1, -B)), t.add_const(t.cumsum_rows(widths), -B)});
  Var knots_y = t.concat_cols({t.constant(Matrix(R, 1, -B)), t.add_const(t.cumsum_rows(heights), -B)});

  const double c0 = softplus_inverse(1.0 - kMinDerivative);  // unit slope at init
  Var dint = t.add_const(t.softplus(t.add_const(draw, c0)), kMinDerivative);
  Var ones = t.constant(Matrix(R, 1, 1.0));
  Var dfull = t.concat_cols({ones, dint, ones});  // boundary slopes pinned to 1

  // interior mask and bin location come from values; both are piecewise
  // constant in the parameters
  const Matrix& xv = t.val(x);
  Matrix mask(R, 1);
  for (int r = 0; r < R; ++r) mask(r, 0) = std::abs(xv(r, 0)) <= B ? 1.0 : 0.0;
  Var xc = t.clamp(x, -B, B);
  const Matrix& xcv = t.val(xc);
  const Matrix& kn = t.val(forward ? knots_x : knots_y);
  std::vector<int> idx(R), idx1(R);
  for (int r = 0; r < R; ++r) {
    int k = 0;
    while (k + 1 < K && kn(r, k + 1) <= xcv(r, 0)) ++k;
    idx[r] = k;
    idx1[r] = k + 1;
  }

  Var wk = t.gather_cols(widths, idx);
  Var hk = t.gather_cols(heights, idx);
  Var xk = t.gather_cols(knots_x, idx);
  Var yk = t.gather_cols(knots_y, idx);
  Var dk = t.gather_cols(dfull, idx);
  Var dk1 = t.gather_cols(dfull, idx1);
  Var s = t.div(hk, wk);

  Var th;
  if (forward) {
    th = t.div(t.sub(xc, xk), wk);
  } else {
    // solve the rational quadratic for theta; the 2c/(-b - sqrt(disc)) root
    // stays stable when the leading coefficient vanishes
    Var dy = t.sub(xc, yk);
    Var coef = t.sub(t.add(dk1, dk), t.scale(s, 2.0));
    Var qa = t.add(t.mul(hk, t.sub(s, dk)), t.mul(dy, coef));
    Var qb = t.sub(t.mul(hk, dk), t.mul(dy, coef));
    Var qc = t.neg(t.mul(s, dy));
    Var disc = t.sub(t.square(qb), t.scale(t.mul(qa, qc), 4.0));
    disc = t.clamp(disc, 0.0, std::numeric_limits<double>::infinity());
    th = t.div(t.scale(qc, 2.0), t.neg(t.add(qb, t.sqrt_(disc))));
  }
  th = t.clamp(th, 0.0, 1.0);
  Var one_minus = t.sub(ones, th);
  Var th1m = t.mul(th, one_minus);
  Var den = t.add(s, t.mul(t.sub(t.add(dk1, dk), t.scale(s, 2.0)), th1m));
  Var dnum = t.mul(t.square(s),
                   t.add(t.add(t.mul(dk1, t.square(th)), t.mul(t.scale(s, 2.0), th1m)),
                         t.mul(dk, t.square(one_minus))));
  Var logdet_fwd = t.sub(t.log_(dnum), t.scale(t.log_(den), 2.0));

  Var out_el, ld_el;
  if (forward) {
    Var num = t.mul(hk, t.add(t.mul(s, t.square(th)), t.mul(dk, th1m)));
    out_el = t.add(yk, t.div(num, den));
    ld_el = logdet_fwd;
  } else {
    out_el = t.add(xk, t.mul(th, wk));
    ld_el = t.neg(logdet_fwd);
  }
  Var out = t.select(mask, out_el, x);
  Var ld = t.select(mask, ld_el, t.constant(Matrix(R, 1)));
  return {t.reshape(out, n, dt), t.row_sum(t.reshape(ld, n, dt))};
}

std::pair<Var, Var> ConditionalFlow::forward_tape(Tape& t, Var u, Var context, bool train) {
  const int n = t.val(u).rows();
  if (t.val(u).cols() != cfg_.event_dim)
    throw ArgumentError("flow forward: event dim mismatch");
  if (cfg_.context_dim > 0 &&
      (t.val(context).rows() != n || t.val(context).cols() != cfg_.context_dim))
    throw ArgumentError("flow forward: context shape mismatch");
  Var h = u;
  Var total = t.constant(Matrix(n, 1));
  for (size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    auto [idp, trp] = split(t, h, l);
    Var cin = conditioner_input(t, idp, context, n);
    Var raw = train ? l.conditioner.forward(t, cin, store_, true)
                    : l.conditioner.forward_frozen(t, cin, store_);
    auto [y, ld] = spline(t, trp, raw, /*forward=*/true);
    h = merge(t, idp, y, l);
    total = t.add(total, ld);
    if (!t.val(h).all_finite())
      throw NumericError("flow forward: non-finite output at layer " + std::to_string(i));
  }
  return {h, total};
}

std::pair<Var, Var> ConditionalFlow::inverse_tape(Tape& t, Var x, Var context, bool train) {
  const int n = t.val(x).rows();
  if (t.val(x).cols() != cfg_.event_dim)
    throw ArgumentError("flow inverse: event dim mismatch");
  if (cfg_.context_dim > 0 &&
      (t.val(context).rows() != n || t.val(context).cols() != cfg_.context_dim))
    throw ArgumentError("flow inverse: context shape mismatch");
  Var h = x;
  Var total = t.constant(Matrix(n, 1));
  for (size_t i = layers_.size(); i-- > 0;) {
    const Layer& l = layers_[i];
    auto [idp, trp] = split(t, h, l);
    Var cin = conditioner_input(t, idp, context, n);
    Var raw = train ? l.conditioner.forward(t, cin, store_, true)
                    : l.conditioner.forward_frozen(t, cin, store_);
    auto [u, ld] = spline(t, trp, raw, /*forward=*/false);
    h = merge(t, idp, u, l);
    total = t.add(total, ld);
    if (!t.val(h).all_finite())
      throw NumericError("flow inverse: non-finite output at layer " + std::to_string(i));
  }
  return {h, total};
}

Var ConditionalFlow::log_prob_tape(Tape& t, Var x, Var context, bool train) {
  auto [u, ld_inv] = inverse_tape(t, x, context, train);
  return t.add(base_logpdf(t, u), ld_inv);
}

std::pair<Var, Var> ConditionalFlow::sample_tape(Tape& t, Var context, Rng& rng, bool train) {
  const int n = t.val(context).rows();
  if (n < 1) throw ArgumentError("flow sample: empty context batch");
  Matrix noise(n, cfg_.event_dim);
  rng.fill_normal(noise);
  Var u = t.constant(std::move(noise));
  Var base_lp = base_logpdf(t, u);  // constant: u carries no gradient
  auto [x, ld] = forward_tape(t, u, context, train);
  return {x, t.sub(base_lp, ld)};
}

// ---------------------------------------------------------------------------
// value-level API

std::pair<Vector, double> ConditionalFlow::forward(const Vector& u, const Vector& context) {
  Tape t;
  Var uv = t.constant(Matrix::row(u));
  Var cv = t.constant(Matrix::row(context));
  auto [x, ld] = forward_tape(t, uv, cv, false);
  return {t.val(x).row_vec(0), t.val(ld)(0, 0)};
}

std::pair<Vector, double> ConditionalFlow::inverse(const Vector& x, const Vector& context) {
  Tape t;
  Var xv = t.constant(Matrix::row(x));
  Var cv = t.constant(Matrix::row(context));
  auto [u, ld] = inverse_tape(t, xv, cv, false);
  return {t.val(u).row_vec(0), t.val(ld)(0, 0)};
}

double ConditionalFlow::log_prob(const Vector& x, const Vector& context) {
  Tape t;
  Var lp = log_prob_tape(t, t.constant(Matrix::row(x)), t.constant(Matrix::row(context)), false);
  return t.val(lp)(0, 0);
}

Vector ConditionalFlow::log_prob_batch(const Matrix& x, const Matrix& context) {
  Tape t;
  Var lp = log_prob_tape(t, t.constant(x), t.constant(context), false);
  return t.val(lp).raw();
}

FlowSample ConditionalFlow::sample(const Vector& context, int n, Rng& rng) {
  if (n < 1) throw ArgumentError("flow sample: n must be >= 1");
  Matrix ctx(n, cfg_.context_dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < cfg_.context_dim; ++j) ctx(i, j) = context[j];
  Tape t;
  auto [x, lp] = sample_tape(t, t.constant(std::move(ctx)), rng, false);
  return {t.val(x), t.val(lp).raw()};
}

// ---------------------------------------------------------------------------
// persistence

std::string ConditionalFlow::arch_string() const {
  std::ostringstream os;
  os << "flow;event=" << cfg_.event_dim << ";ctx=" << cfg_.context_dim
     << ";layers=" << cfg_.layers << ";bins=" << cfg_.bins << ";tail=" << cfg_.tail_bound
     << ";hidden=" << cfg_.hidden;
  return os.str();
}

void ConditionalFlow::save(const std::string& path) const {
  Checkpoint c;
  c.kind = Checkpoint::kFlow;
  c.arch = arch_string();
  c.params = store_.values();
  save_checkpoint(path, c);
}

ConditionalFlow ConditionalFlow::load(const std::string& path) {
  Checkpoint c = load_checkpoint(path);
  if (c.kind != Checkpoint::kFlow) throw IoError("checkpoint is not a flow: " + path);
  FlowConfig cfg;
  std::istringstream is(c.arch);
  std::string tok;
  while (std::getline(is, tok, ';')) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = tok.substr(0, eq);
    const std::string val = tok.substr(eq + 1);
    if (key == "event") cfg.event_dim = std::stoi(val);
    else if (key == "ctx") cfg.context_dim = std::stoi(val);
    else if (key == "layers") cfg.layers = std::stoi(val);
    else if (key == "bins") cfg.bins = std::stoi(val);
    else if (key == "tail") cfg.tail_bound = std::stod(val);
    else if (key == "hidden") cfg.hidden = std::stoi(val);
  }
  Rng dummy(0);
  ConditionalFlow flow(cfg, dummy);
  if (flow.store_.values().size() != c.params.size())
    throw IoError("flow checkpoint: parameter count mismatch in " + path);
  flow.store_.values() = c.params;
  return flow;
}

}  // namespace rvnp
