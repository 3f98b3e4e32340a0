#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bnlstm/batchnorm.hpp"
#include "bnlstm/rng.hpp"
#include "bnlstm/tape.hpp"

namespace bnlstm {

enum class Phase { Train, Infer };

// ---------------------------------------------------------------------------
// Parameter bundles. Stacked gate matrices use the fixed block order
// (forget, input, output, candidate); checkpoints carry the same tag.
// ---------------------------------------------------------------------------

struct RNNParams {
  Tensor w_h;  // d_h x d_h
  Tensor w_x;  // d_x x d_h
  Tensor b;    // d_h
  Tensor h0;   // d_h
};

struct BNRNNParams {
  RNNParams base;
  Tensor gamma_h;  // d_h; no shift: the shared bias b covers it
  Tensor gamma_x;  // d_h
  double epsilon = 1e-5;
  PopulationStats pop_h;
  PopulationStats pop_x;
};

struct LSTMParams {
  Tensor w_h;  // d_h x 4 d_h
  Tensor w_x;  // d_x x 4 d_h
  Tensor b;    // 4 d_h
  Tensor h0;   // d_h
  Tensor c0;   // d_h
};

struct BNLSTMParams {
  LSTMParams base;
  Tensor gamma_h;  // 4 d_h; recurrent-term scale, shift absent
  Tensor gamma_x;  // 4 d_h; input-term scale, shift absent
  Tensor gamma_c;  // d_h; cell-output scale
  Tensor beta_c;   // d_h; cell-output shift
  double epsilon = 1e-5;
  PopulationStats pop_h;
  PopulationStats pop_x;
  PopulationStats pop_c;
};

// Hidden state as plain tensors (outside any tape).
struct StepState {
  Tensor h;
  Tensor c;  // empty for tanh-RNN cells
};

// Hidden state as tape slots.
struct StepVars {
  Var h;
  Var c;
};

// Batch statistics collected by one BN step, keyed by normalizer.
struct StepStats {
  std::optional<BatchStats> h_side;
  std::optional<BatchStats> x_side;
  std::optional<BatchStats> c_side;
};

// ---------------------------------------------------------------------------
// Tape bindings: parameters become leaves so gradients reach them.
// ---------------------------------------------------------------------------

struct RNNVars {
  Var w_h, w_x, b, h0;
};
struct BNRNNVars {
  RNNVars base;
  Var gamma_h, gamma_x;
  const BNRNNParams* src = nullptr;
};
struct LSTMVars {
  Var w_h, w_x, b, h0, c0;
};
struct BNLSTMVars {
  LSTMVars base;
  Var gamma_h, gamma_x, gamma_c, beta_c;
  const BNLSTMParams* src = nullptr;
};

RNNVars bind(Tape& tape, const RNNParams& p);
BNRNNVars bind(Tape& tape, const BNRNNParams& p);
LSTMVars bind(Tape& tape, const LSTMParams& p);
BNLSTMVars bind(Tape& tape, const BNLSTMParams& p);

// ---------------------------------------------------------------------------
// Cell steps. t is 1-based; Train normalizes with current-batch statistics
// and reports them through stats_out, Infer normalizes with population
// statistics (t clamped by the beyond-t_max rule).
// ---------------------------------------------------------------------------

StepVars cell_step(Tape& tape, const RNNVars& v, const StepVars& state, Var x, int64_t t,
                   Phase phase, StepStats* stats_out);
StepVars cell_step(Tape& tape, const BNRNNVars& v, const StepVars& state, Var x, int64_t t,
                   Phase phase, StepStats* stats_out);
StepVars cell_step(Tape& tape, const LSTMVars& v, const StepVars& state, Var x, int64_t t,
                   Phase phase, StepStats* stats_out);
StepVars cell_step(Tape& tape, const BNLSTMVars& v, const StepVars& state, Var x, int64_t t,
                   Phase phase, StepStats* stats_out);

// Spec-facing aliases for the plain cells.
StepVars rnn_step(Tape& tape, const RNNVars& v, const StepVars& state, Var x);
StepVars lstm_step(Tape& tape, const LSTMVars& v, const StepVars& state, Var x);
StepVars bn_lstm_step(Tape& tape, const BNLSTMVars& v, const StepVars& state, Var x, int64_t t,
                      Phase phase, StepStats* stats_out);

// ---------------------------------------------------------------------------
// Sequence unrolling on a shared tape.
// ---------------------------------------------------------------------------

struct UnrollResult {
  std::vector<StepVars> states;  // one per timestep, in order
  std::vector<StepStats> stats;  // batch statistics per step (Train phase)
};

// Iterates the cell over timesteps t_offset+1 .. t_offset+T. Language
// modeling reads every state; classification reads the last.
template <typename Cell>
UnrollResult unroll_vars(Tape& tape, const Cell& vars, const std::vector<Var>& x_vars,
                         const StepVars& init, Phase phase, int64_t t_offset = 0) {
  if (x_vars.empty()) throw ShapeError("unroll requires T >= 1");
  UnrollResult result;
  result.states.reserve(x_vars.size());
  result.stats.resize(x_vars.size());
  StepVars state = init;
  for (size_t step = 0; step < x_vars.size(); ++step) {
    const int64_t t = t_offset + static_cast<int64_t>(step) + 1;
    state = cell_step(tape, vars, state, x_vars[step], t, phase, &result.stats[step]);
    result.states.push_back(state);
  }
  return result;
}

template <typename Cell>
UnrollResult unroll(Tape& tape, const Cell& vars, const std::vector<Tensor>& x_seq,
                    const StepVars& init, Phase phase, int64_t t_offset = 0) {
  std::vector<Var> x_vars;
  x_vars.reserve(x_seq.size());
  for (const Tensor& x : x_seq) x_vars.push_back(tape.leaf(x));
  return unroll_vars(tape, vars, x_vars, init, phase, t_offset);
}

// ---------------------------------------------------------------------------
// Initial states: learned h0 (and c0) broadcast across the batch, plus
// optional i.i.d. Gaussian noise per example. The noise keeps early
// activations from being identical across the batch, which would make the
// normalizer divide zero variance into the backward pass.
// ---------------------------------------------------------------------------

Tensor broadcast_with_noise(const Tensor& v, int64_t batch, double noise_std, Rng& rng);

StepState init_state(int64_t batch, const RNNParams& p, double noise_std, uint64_t seed);
StepState init_state(int64_t batch, const LSTMParams& p, double noise_std, uint64_t seed);

// Tape path: state depends on the h0/c0 leaves so gradients reach them.
StepVars init_state_on_tape(Tape& tape, Var h0, std::optional<Var> c0, int64_t batch,
                            double noise_std, Rng& rng);

// Folds Train-phase statistics from an unroll into population slots.
void accumulate_population(BNRNNParams& p, const UnrollResult& result, int64_t t_offset,
                           PopEstimator estimator, double momentum);
void accumulate_population(BNLSTMParams& p, const UnrollResult& result, int64_t t_offset,
                           PopEstimator estimator, double momentum);

}  // namespace bnlstm
