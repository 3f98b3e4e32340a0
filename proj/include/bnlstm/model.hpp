#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <variant>

#include "bnlstm/recurrent.hpp"

namespace bnlstm {

enum class ModelKind { Rnn, BnRnn, Lstm, BnLstm };

bool is_bn_kind(ModelKind kind);
bool is_lstm_kind(ModelKind kind);
std::string model_kind_name(ModelKind kind);
ModelKind model_kind_from_name(const std::string& name);

// A complete trainable model: one recurrent cell, an optional input
// embedding, and an affine prediction head. Exactly one of the cell
// parameter bundles is active, selected by `kind`.
struct ModelState {
  ModelKind kind = ModelKind::Lstm;
  int64_t d_x = 0;          // cell input width (embed_dim when embedding is on)
  int64_t d_h = 0;
  int64_t num_classes = 0;  // head output width; also one-hot width for LM tasks
  int64_t t_max = 0;

  RNNParams rnn;
  BNRNNParams bn_rnn;
  LSTMParams lstm;
  BNLSTMParams bn_lstm;

  Tensor embed;  // num_classes x d_x when active, numel 0 otherwise
  Tensor head_w;
  Tensor head_b;
};

struct ModelInit {
  double gamma0 = 0.1;
  double beta0 = 0.0;
  double epsilon = 1e-5;
  // "orthogonal" (default) or "identity" for the hidden-to-hidden matrix.
  std::string hidden_init = "orthogonal";
  double hidden_init_gain = 1.0;
  int64_t embed_dim = 0;  // 0 = one-hot input feeds the cell directly
  BNMode input_mode = BNMode::PerTimestep;
};

// Allocates parameter storage with all weights zero (checkpoint loading).
ModelState allocate_model(ModelKind kind, int64_t input_width, int64_t d_h, int64_t num_classes,
                          int64_t t_max, const ModelInit& init);

// Fresh initialization: orthogonal gate blocks for input weights (and
// hidden weights unless identity is requested), zero biases and initial
// states, gamma0/beta0 for the normalizers.
ModelState init_model(ModelKind kind, int64_t input_width, int64_t d_h, int64_t num_classes,
                      int64_t t_max, const ModelInit& init, uint64_t seed);

// Visits every trainable tensor in a fixed documented order (cell weights,
// then embed when present, then head). Optimizers, checkpoints and
// gradient collection all rely on this order.
void for_each_param(ModelState& m,
                    const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(const ModelState& m,
                    const std::function<void(const std::string&, const Tensor&)>& fn);

ParamSet copy_params(const ModelState& m);
void assign_params(ModelState& m, const ParamSet& params);

using CellVars = std::variant<RNNVars, BNRNNVars, LSTMVars, BNLSTMVars>;

struct BoundModel {
  CellVars cell;
  Var embed;  // invalid when embedding is off
  Var head_w;
  Var head_b;
  std::vector<std::pair<std::string, Var>> param_vars;  // for_each_param order
};

BoundModel bind_model(Tape& tape, const ModelState& m);

// h0 / optional c0 leaves of the bound cell.
Var bound_h0(const BoundModel& bm);
std::optional<Var> bound_c0(const BoundModel& bm);

UnrollResult unroll_bound(Tape& tape, const BoundModel& bm, const std::vector<Var>& x_vars,
                          const StepVars& init, Phase phase, int64_t t_offset);

void accumulate_model_population(ModelState& m, const UnrollResult& result, int64_t t_offset,
                                 PopEstimator estimator, double momentum);

// True once every population slot the model will read at inference has at
// least one update.
bool population_ready(const ModelState& m);

void reset_model_population(ModelState& m);

}  // namespace bnlstm
