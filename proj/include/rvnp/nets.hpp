#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rvnp/tape.hpp"

namespace rvnp {

enum class Activation { Relu, Gelu, Identity };

/// Feed-forward block whose parameters live in an external ParamStore, so a
/// composite module (flow, encoder, error model) owns one flat vector.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& prefix, std::vector<int> sizes,
      Activation act, bool zero_init_last, Rng& rng);

  Var forward(Tape& t, Var x, ParamStore& store, bool train) const;
  Var forward_frozen(Tape& t, Var x, const ParamStore& store) const;

  int in_dim() const { return sizes_.front(); }
  int out_dim() const { return sizes_.back(); }

 private:
  Var run(Tape& t, Var x, const std::vector<Var>& leaves) const;
  std::vector<int> sizes_;
  Activation act_ = Activation::Gelu;
  std::vector<int> weight_segs_, bias_segs_;
};

/// 1-D convolutional statistic encoder: conv (GELU) -> adaptive average
/// pooling -> two-layer MLP head. Input rows are raw series of fixed length.
struct EncoderConfig {
  int series_len = 200;
  int embed_dim = 4;
  int channels = 16;
  int kernel = 9;
  int stride = 4;
  int pooled = 8;
  int hidden = 100;
};

class ConvEncoder {
 public:
  ConvEncoder() = default;
  ConvEncoder(const EncoderConfig& cfg, Rng& rng);

  /// x_raw is a constant [n, series_len] batch; returns [n, embed_dim].
  Var forward(Tape& t, const Matrix& x_raw, bool train);
  Matrix embed(const Matrix& x_raw);  // value-only convenience

  const EncoderConfig& config() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

 private:
  EncoderConfig cfg_;
  int conv_w_ = -1, conv_b_ = -1;
  int conv_out_len_ = 0;
  Mlp head_;
  Matrix pool_;  // constant pooling matrix [conv_out_len*channels, pooled*channels]
  ParamStore store_;
};

// ---------------------------------------------------------------------------
// optimizer / training loop

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  double clip_norm = 10.0;
  int warmup_steps = 1000;
};

struct AdamState {
  int64_t step = 0;
  Vector m, v;
};

/// Scale factor applied to bring the global gradient norm under `max_norm`
/// (1.0 when already under).
double clip_factor(const Vector& grads, double max_norm);

/// One Adam step on a store's parameters from its accumulated gradients.
/// Global-norm clipping happens before the moment update; weight decay is
/// decoupled and skipped for segments flagged decay=false; the learning rate
/// ramps linearly over the warmup.
void adam_step(AdamState& state, ParamStore& store, const AdamConfig& cfg);

struct TrainConfig {
  int batch_size = 1024;
  int iterations = 500;  // epochs over the training split
  int patience = 100;
  double val_fraction = 0.10;
  int k_importance = 30;
  AdamConfig adam;
  bool verbose = false;
};

struct TrainResult {
  double best_val = 0.0;
  int best_iteration = -1;
  int iterations_run = 0;
  bool aborted_non_finite = false;
  Vector train_history, val_history;
};

/// A minibatch objective over an indexed dataset. eval() returns the mean
/// loss over `indices` and, when compute_grads is set, accumulates gradients
/// into each store (already zeroed by the loop).
struct TrainProblem {
  int n_items = 0;
  std::vector<ParamStore*> stores;
  std::function<double(const std::vector<int>& indices, Rng& rng, bool compute_grads)> eval;
};

/// Epoch loop with shuffled minibatches, per-store Adam, validation split,
/// early stopping, and best-parameter restoration. A non-finite loss aborts
/// and the best (last good) parameters are restored.
TrainResult train_loop(TrainProblem& problem, const TrainConfig& cfg, Rng rng);

inline double softplus_inverse(double y) { return std::log(std::expm1(y)); }

}  // namespace rvnp
