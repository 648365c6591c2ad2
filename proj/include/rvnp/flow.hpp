#pragma once

#include <utility>

#include "rvnp/nets.hpp"

namespace rvnp {

struct FlowConfig {
  int event_dim = 0;
  int context_dim = 0;
  int layers = 5;
  int bins = 15;
  double tail_bound = 10.0;
  int hidden = 52;
};

struct FlowSample {
  Matrix x;
  Vector log_prob;
};

/// Conditional normalizing flow built from rational-quadratic-spline coupling
/// layers with alternating binary masks; base distribution is standard
/// normal. Freshly constructed flows are exactly the base density (conditioner
/// last layers are zero-initialised, giving uniform bins and unit
/// derivatives), and the transform is the identity outside [-B, B].
class ConditionalFlow {
 public:
  ConditionalFlow() = default;
  ConditionalFlow(const FlowConfig& cfg, Rng& rng);

  const FlowConfig& config() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  // --- tape graph builders (batch rows) ---

  /// Base -> data map with exact log-determinant. u: [n, event], context:
  /// [n, context]; returns (x, logdet) with logdet [n, 1].
  std::pair<Var, Var> forward_tape(Tape& t, Var u, Var context, bool train);
  /// Data -> base map; returns (u, logdet_inverse).
  std::pair<Var, Var> inverse_tape(Tape& t, Var x, Var context, bool train);
  /// Base log-density at the inverse image plus the inverse log-determinant.
  Var log_prob_tape(Tape& t, Var x, Var context, bool train);
  /// Reparametrised draws: noise enters as a constant, so gradients flow
  /// through the sample path into parameters and context. Returns
  /// (x [n, event], log_prob [n, 1]).
  std::pair<Var, Var> sample_tape(Tape& t, Var context, Rng& rng, bool train);

  // --- value-level convenience API ---

  std::pair<Vector, double> forward(const Vector& u, const Vector& context);
  std::pair<Vector, double> inverse(const Vector& x, const Vector& context);
  double log_prob(const Vector& x, const Vector& context);
  Vector log_prob_batch(const Matrix& x, const Matrix& context);
  /// n iid draws for a single context vector, with their log-densities.
  FlowSample sample(const Vector& context, int n, Rng& rng);

  void save(const std::string& path) const;
  static ConditionalFlow load(const std::string& path);
  std::string arch_string() const;

 private:
  struct Layer {
    int id_dim = 0;  // untransformed block size
    int tr_dim = 0;  // transformed block size
    bool swap = false;  // true: transformed block comes first
    Mlp conditioner;
  };

  Var base_logpdf(Tape& t, Var u) const;
  // split/merge helpers for a layer's mask
  std::pair<Var, Var> split(Tape& t, Var x, const Layer& l) const;
  Var merge(Tape& t, Var id_part, Var tr_part, const Layer& l) const;
  // rational quadratic spline on one transformed block
  std::pair<Var, Var> spline(Tape& t, Var inp, Var raw_params, bool forward) const;
  Var conditioner_input(Tape& t, Var id_part, Var context, int n) const;

  FlowConfig cfg_;
  std::vector<Layer> layers_;
  ParamStore store_;
};

}  // namespace rvnp
