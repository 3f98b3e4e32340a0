#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "bnlstm/tape.hpp"
#include "bnlstm/tensor.hpp"

namespace bnlstm {

// Scale/shift/regularizer of the normalizing transform. beta is optional:
// the recurrent cells drop the input- and recurrent-term shifts entirely
// and keep a single bias vector instead.
struct BNParams {
  Tensor gamma;
  std::optional<Tensor> beta;
  double epsilon = 1e-5;
};

// Per-feature statistics of one minibatch.
struct BatchStats {
  Tensor mean;
  Tensor var;
};

enum class BNMode { PerTimestep, Sequencewise };

enum class PopEstimator { Cumulative, Ema };

// Dataset-level statistics used at inference. PerTimestep keeps one slot
// per unrolled timestep 1..t_max; Sequencewise shares a single slot across
// time (used for input terms when batches carry padding).
struct PopulationStats {
  BNMode mode = BNMode::PerTimestep;
  int64_t t_max = 0;

  struct Slot {
    Tensor mean;
    Tensor var;
    int64_t count = 0;
  };
  std::vector<Slot> slots;

  static PopulationStats make(BNMode mode, int64_t t_max, int64_t dim);

  int64_t num_slots() const { return static_cast<int64_t>(slots.size()); }
  bool any_updated() const;
  int64_t dim() const { return slots.empty() ? 0 : slots.front().mean.numel(); }
};

struct BNTrainResult {
  Var y;
  BatchStats stats;
};

// y = beta + gamma (*) (h - mean) / sqrt(var + eps) with minibatch mean/var
// over the batch axis. Fully on the tape, so backward differentiates
// through the statistics, not around them.
BNTrainResult bn_forward_train(Tape& tape, Var h, Var gamma, std::optional<Var> beta,
                               double epsilon);

// Convenience overload binding BNParams as constant leaves (tests, frozen
// transforms). Training paths bind gamma/beta as leaves themselves so the
// optimizer can reach them.
BNTrainResult bn_forward_train(Tape& tape, Var h, const BNParams& params);

// Inference-phase transform: normalizes with stored population statistics
// for timestep t (clamped to t_max). Pure function of its inputs.
Tensor bn_forward_infer(const Tensor& h, const BNParams& params, const PopulationStats& pop,
                        int64_t t);

// Same transform expressed on a tape (statistics enter as constants); used
// when inference runs through the shared unroll path.
Var bn_forward_infer_on_tape(Tape& tape, Var h, Var gamma, std::optional<Var> beta,
                             double epsilon, const PopulationStats& pop, int64_t t);

// Folds one minibatch's statistics into slot t. Cumulative mode keeps a
// running mean of everything seen since the last reset; Ema keeps an
// exponential moving average with the given momentum.
void update_population(PopulationStats& pop, int64_t t, const BatchStats& stats,
                       PopEstimator estimator = PopEstimator::Cumulative, double momentum = 0.1);

// Slot lookup with the beyond-t_max rule: timesteps past the longest
// training length reuse the t_max statistics.
std::pair<const Tensor*, const Tensor*> stats_for_timestep(const PopulationStats& pop, int64_t t);

// Zeroes all slots and counts. Intended to be called at the start of the
// final training epoch so the statistics reflect near-final parameters.
void reset_population(PopulationStats& pop);

}  // namespace bnlstm
