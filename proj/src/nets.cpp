#include "rvnp/nets.hpp"

#include <algorithm>
#include <cmath>

#include "rvnp/linalg.hpp"

namespace rvnp {

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(ParamStore& store, const std::string& prefix, std::vector<int> sizes,
         Activation act, bool zero_init_last, Rng& rng)
    : sizes_(std::move(sizes)), act_(act) {
  if (sizes_.size() < 2) throw ArgumentError("Mlp: need at least in/out sizes");
  for (size_t i = 0; i + 1 < sizes_.size(); ++i) {
    const int in = sizes_[i], out = sizes_[i + 1];
    const int w = store.add(prefix + ".w" + std::to_string(i), in, out, true);
    const int b = store.add(prefix + ".b" + std::to_string(i), 1, out, true);
    const bool last = i + 2 == sizes_.size();
    if (last && zero_init_last) {
      // zero pre-activations at init (identity-initialised flows)
    } else {
      store.init_normal(w, rng, std::sqrt(2.0 / (in + out)));
    }
    weight_segs_.push_back(w);
    bias_segs_.push_back(b);
  }
}

Var Mlp::run(Tape& t, Var x, const std::vector<Var>& leaves) const {
  Var h = x;
  const size_t n_layers = weight_segs_.size();
  for (size_t i = 0; i < n_layers; ++i) {
    h = t.add_rowvec(t.matmul(h, leaves[2 * i]), leaves[2 * i + 1]);
    if (i + 1 < n_layers) {
      switch (act_) {
        case Activation::Relu: h = t.relu(h); break;
        case Activation::Gelu: h = t.gelu(h); break;
        case Activation::Identity: break;
      }
    }
  }
  return h;
}

Var Mlp::forward(Tape& t, Var x, ParamStore& store, bool train) const {
  std::vector<Var> leaves;
  leaves.reserve(2 * weight_segs_.size());
  for (size_t i = 0; i < weight_segs_.size(); ++i) {
    leaves.push_back(train ? t.param(store, weight_segs_[i]) : t.frozen(store, weight_segs_[i]));
    leaves.push_back(train ? t.param(store, bias_segs_[i]) : t.frozen(store, bias_segs_[i]));
  }
  return run(t, x, leaves);
}

Var Mlp::forward_frozen(Tape& t, Var x, const ParamStore& store) const {
  std::vector<Var> leaves;
  for (size_t i = 0; i < weight_segs_.size(); ++i) {
    leaves.push_back(t.frozen(store, weight_segs_[i]));
    leaves.push_back(t.frozen(store, bias_segs_[i]));
  }
  return run(t, x, leaves);
}

// ---------------------------------------------------------------------------
// ConvEncoder

ConvEncoder::ConvEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  conv_out_len_ = (cfg.series_len - cfg.kernel) / cfg.stride + 1;
  if (conv_out_len_ < cfg.pooled)
    throw ArgumentError("ConvEncoder: pooled length exceeds conv output");
  conv_w_ = store_.add("conv.w", cfg.kernel, cfg.channels, true);
  conv_b_ = store_.add("conv.b", 1, cfg.channels, true);
  Rng r = rng.split(11);
  store_.init_normal(conv_w_, r, std::sqrt(2.0 / (cfg.kernel + cfg.channels)));
  head_ = Mlp(store_, "head", {cfg.pooled * cfg.channels, cfg.hidden, cfg.embed_dim},
              Activation::Gelu, false, r);

  // Fixed average-pooling matrix: positions -> pooled windows, per channel.
  pool_ = Matrix(conv_out_len_ * cfg.channels, cfg.pooled * cfg.channels);
  for (int p = 0; p < cfg.pooled; ++p) {
    // adaptive windows, [start, end)
    const int start = (p * conv_out_len_) / cfg.pooled;
    const int end = ((p + 1) * conv_out_len_) / cfg.pooled;
    for (int pos = start; pos < end; ++pos)
      for (int c = 0; c < cfg.channels; ++c)
        pool_(pos * cfg.channels + c, p * cfg.channels + c) = 1.0 / (end - start);
  }
}

Var ConvEncoder::forward(Tape& t, const Matrix& x_raw, bool train) {
  if (x_raw.cols() != cfg_.series_len)
    throw ArgumentError("encoder: series length " + std::to_string(x_raw.cols()) +
                        " != configured " + std::to_string(cfg_.series_len));
  const int n = x_raw.rows();
  // im2col over the (constant) input
  Matrix patches(n * conv_out_len_, cfg_.kernel);
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < conv_out_len_; ++p)
      for (int k = 0; k < cfg_.kernel; ++k)
        patches(i * conv_out_len_ + p, k) = x_raw(i, p * cfg_.stride + k);
  Var pv = t.constant(std::move(patches));
  Var w = train ? t.param(store_, conv_w_) : t.frozen(store_, conv_w_);
  Var b = train ? t.param(store_, conv_b_) : t.frozen(store_, conv_b_);
  Var conv = t.gelu(t.add_rowvec(t.matmul(pv, w), b));  // [n*out_len, channels]
  Var flat = t.reshape(conv, n, conv_out_len_ * cfg_.channels);
  Var pooled = t.matmul(flat, t.constant(pool_));
  return train ? head_.forward(t, pooled, store_, true) : head_.forward_frozen(t, pooled, store_);
}

Matrix ConvEncoder::embed(const Matrix& x_raw) {
  Tape t;
  Var z = forward(t, x_raw, false);
  return t.val(z);
}

// ---------------------------------------------------------------------------
// Adam

double clip_factor(const Vector& grads, double max_norm) {
  const double n = norm2(grads);
  if (!(n > max_norm)) return 1.0;
  return max_norm / n;
}

void adam_step(AdamState& state, ParamStore& store, const AdamConfig& cfg) {
  Vector& g = store.grads();
  Vector& p = store.values();
  if (state.m.empty()) {
    state.m.assign(p.size(), 0.0);
    state.v.assign(p.size(), 0.0);
  }
  for (double x : g)
    if (!std::isfinite(x))
      throw TrainingError("adam_step: non-finite gradient at step " +
                          std::to_string(state.step + 1));
  state.step += 1;
  const double warm = cfg.warmup_steps > 0
                          ? std::min(1.0, static_cast<double>(state.step) / cfg.warmup_steps)
                          : 1.0;
  const double lr = cfg.lr * warm;
  const double cf = clip_factor(g, cfg.clip_norm);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  // decoupled weight decay, skipping scale-like segments
  if (cfg.weight_decay > 0.0) {
    for (const ParamSegment& s : store.segments()) {
      if (!s.decay) continue;
      const int end = s.offset + s.rows * s.cols;
      for (int k = s.offset; k < end; ++k) p[k] -= lr * cfg.weight_decay * p[k];
    }
  }
  for (size_t k = 0; k < p.size(); ++k) {
    const double gk = g[k] * cf;
    state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * gk;
    state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * gk * gk;
    const double mhat = state.m[k] / bc1;
    const double vhat = state.v[k] / bc2;
    p[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// train loop

TrainResult train_loop(TrainProblem& problem, const TrainConfig& cfg, Rng rng) {
  if (problem.n_items <= 0) throw ArgumentError("train_loop: empty dataset");
  TrainResult res;

  Rng split_rng = rng.split(1);
  std::vector<int> order = split_rng.permutation(problem.n_items);
  int n_val = static_cast<int>(std::floor(cfg.val_fraction * problem.n_items));
  n_val = std::min(n_val, problem.n_items - 1);
  if (n_val < 0) n_val = 0;
  std::vector<int> val_idx(order.begin(), order.begin() + n_val);
  std::vector<int> train_idx(order.begin() + n_val, order.end());
  const bool has_val = !val_idx.empty();

  std::vector<AdamState> opt(problem.stores.size());
  std::vector<Vector> best;
  for (ParamStore* s : problem.stores) best.push_back(s->values());
  double best_val = std::numeric_limits<double>::infinity();
  int best_iter = -1;

  auto restore_best = [&] {
    for (size_t s = 0; s < problem.stores.size(); ++s)
      problem.stores[s]->values() = best[s];
  };

  Rng val_rng = rng.split(2);  // fixed noise so validation losses are comparable
  for (int epoch = 0; epoch < cfg.iterations; ++epoch) {
    Rng epoch_rng = rng.split(100 + static_cast<uint64_t>(epoch));
    std::vector<int> shuffled = train_idx;
    {
      std::vector<int> perm = epoch_rng.permutation(static_cast<int>(train_idx.size()));
      for (size_t i = 0; i < shuffled.size(); ++i) shuffled[i] = train_idx[perm[i]];
    }
    double train_loss = 0.0;
    int n_batches = 0;
    bool bad = false;
    for (size_t at = 0; at < shuffled.size(); at += cfg.batch_size) {
      const size_t end = std::min(shuffled.size(), at + cfg.batch_size);
      std::vector<int> batch(shuffled.begin() + at, shuffled.begin() + end);
      for (ParamStore* s : problem.stores) s->zero_grads();
      Rng batch_rng = epoch_rng.split(at);
      double loss;
      try {
        loss = problem.eval(batch, batch_rng, true);
        if (!std::isfinite(loss)) throw TrainingError("non-finite loss");
        for (size_t s = 0; s < problem.stores.size(); ++s)
          adam_step(opt[s], *problem.stores[s], cfg.adam);
      } catch (const TrainingError&) {
        bad = true;
        break;
      } catch (const NumericError&) {
        bad = true;
        break;
      }
      train_loss += loss;
      ++n_batches;
    }
    if (bad) {
      res.aborted_non_finite = true;
      break;
    }
    train_loss /= std::max(1, n_batches);

    double val_loss = train_loss;
    if (has_val) {
      Rng vr = val_rng;  // same stream every epoch
      val_loss = problem.eval(val_idx, vr, false);
    }
    if (!std::isfinite(val_loss)) {
      res.aborted_non_finite = true;
      break;
    }
    res.train_history.push_back(train_loss);
    res.val_history.push_back(val_loss);
    res.iterations_run = epoch + 1;

    if (val_loss < best_val) {
      best_val = val_loss;
      best_iter = epoch;
      for (size_t s = 0; s < problem.stores.size(); ++s)
        best[s] = problem.stores[s]->values();
    }
    if (epoch - best_iter >= cfg.patience) break;
  }

  restore_best();
  res.best_val = best_val;
  res.best_iteration = best_iter;
  return res;
}

}  // namespace rvnp
