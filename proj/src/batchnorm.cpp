#include "bnlstm/batchnorm.hpp"

#include <cmath>
#include <string>

#include "bnlstm/errors.hpp"

namespace bnlstm {

PopulationStats PopulationStats::make(BNMode mode, int64_t t_max, int64_t dim) {
  if (t_max < 1) throw ShapeError("population statistics require t_max >= 1");
  PopulationStats pop;
  pop.mode = mode;
  pop.t_max = t_max;
  const int64_t n = mode == BNMode::PerTimestep ? t_max : 1;
  pop.slots.resize(static_cast<size_t>(n));
  for (auto& slot : pop.slots) {
    slot.mean = Tensor({dim});
    slot.var = Tensor({dim});
    slot.count = 0;
  }
  return pop;
}

bool PopulationStats::any_updated() const {
  for (const auto& slot : slots) {
    if (slot.count > 0) return true;
  }
  return false;
}

BNTrainResult bn_forward_train(Tape& tape, Var h, Var gamma, std::optional<Var> beta,
                               double epsilon) {
  const Tensor& th = tape.value(h);
  if (th.ndim() != 2) {
    throw ShapeError("bn_forward_train expects [batch x d], got " + th.shape_string());
  }
  const int64_t m = th.rows(), d = th.cols();
  if (tape.value(gamma).numel() != d) {
    throw ShapeError("gamma length " + tape.value(gamma).shape_string() +
                     " does not match feature dim " + std::to_string(d));
  }
  if (epsilon <= 0.0) throw DomainError("bn epsilon must be > 0");

  Var mean = tape.batch_mean(h);
  Var var = tape.batch_var(h);
  Var centered = tape.sub(h, tape.broadcast_rows(mean, m));
  Var inv_std = tape.reciprocal(tape.sqrt_(tape.add(var, tape.leaf(Tensor::scalar(epsilon)))));
  Var normalized = tape.mul(centered, tape.broadcast_rows(inv_std, m));
  Var y = tape.mul(normalized, tape.broadcast_rows(gamma, m));
  if (beta) y = tape.add(y, tape.broadcast_rows(*beta, m));

  return BNTrainResult{y, BatchStats{tape.value(mean), tape.value(var)}};
}

BNTrainResult bn_forward_train(Tape& tape, Var h, const BNParams& params) {
  Var gamma = tape.leaf(params.gamma);
  std::optional<Var> beta;
  if (params.beta) beta = tape.leaf(*params.beta);
  return bn_forward_train(tape, h, gamma, beta, params.epsilon);
}

Tensor bn_forward_infer(const Tensor& h, const BNParams& params, const PopulationStats& pop,
                        int64_t t) {
  if (h.ndim() != 2) {
    throw ShapeError("bn_forward_infer expects [batch x d], got " + h.shape_string());
  }
  const auto [mean, var] = stats_for_timestep(pop, t);
  const int64_t m = h.rows(), d = h.cols();
  Tensor y({m, d});
  for (int64_t j = 0; j < d; ++j) {
    const double inv = 1.0 / std::sqrt((*var)[j] + params.epsilon);
    const double g = params.gamma[j];
    const double b = params.beta ? (*params.beta)[j] : 0.0;
    for (int64_t i = 0; i < m; ++i) {
      y.at(i, j) = b + g * (h.at(i, j) - (*mean)[j]) * inv;
    }
  }
  return y;
}

Var bn_forward_infer_on_tape(Tape& tape, Var h, Var gamma, std::optional<Var> beta,
                             double epsilon, const PopulationStats& pop, int64_t t) {
  const Tensor& th = tape.value(h);
  if (th.ndim() != 2) {
    throw ShapeError("bn_forward_infer expects [batch x d], got " + th.shape_string());
  }
  const auto [mean, var] = stats_for_timestep(pop, t);
  const int64_t m = th.rows(), d = th.cols();

  Tensor inv_std({d});
  for (int64_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt((*var)[j] + epsilon);

  Var centered = tape.sub(h, tape.broadcast_rows(tape.leaf(*mean), m));
  Var normalized = tape.mul(centered, tape.broadcast_rows(tape.leaf(std::move(inv_std)), m));
  Var y = tape.mul(normalized, tape.broadcast_rows(gamma, m));
  if (beta) y = tape.add(y, tape.broadcast_rows(*beta, m));
  return y;
}

void update_population(PopulationStats& pop, int64_t t, const BatchStats& stats,
                       PopEstimator estimator, double momentum) {
  int64_t index;
  if (pop.mode == BNMode::Sequencewise) {
    index = 0;
  } else {
    if (t < 1 || t > pop.t_max) {
      throw DomainError("update_population: timestep " + std::to_string(t) +
                        " out of range 1.." + std::to_string(pop.t_max));
    }
    index = t - 1;
  }
  auto& slot = pop.slots[static_cast<size_t>(index)];
  if (stats.mean.numel() != slot.mean.numel()) {
    throw ShapeError("population update dimension mismatch");
  }
  const int64_t d = slot.mean.numel();
  if (estimator == PopEstimator::Cumulative) {
    const double w = 1.0 / static_cast<double>(slot.count + 1);
    for (int64_t j = 0; j < d; ++j) {
      slot.mean[j] += (stats.mean[j] - slot.mean[j]) * w;
      slot.var[j] += (stats.var[j] - slot.var[j]) * w;
    }
  } else {
    if (slot.count == 0) {
      slot.mean = stats.mean;
      slot.var = stats.var;
    } else {
      for (int64_t j = 0; j < d; ++j) {
        slot.mean[j] += momentum * (stats.mean[j] - slot.mean[j]);
        slot.var[j] += momentum * (stats.var[j] - slot.var[j]);
      }
    }
  }
  slot.count += 1;
}

std::pair<const Tensor*, const Tensor*> stats_for_timestep(const PopulationStats& pop,
                                                           int64_t t) {
  if (t < 1) throw DomainError("stats_for_timestep: t must be >= 1");
  if (!pop.any_updated()) throw DomainError("population statistics unavailable");
  int64_t index = 0;
  if (pop.mode == BNMode::PerTimestep) index = std::min(t, pop.t_max) - 1;
  const auto& slot = pop.slots[static_cast<size_t>(index)];
  if (slot.count == 0) {
    throw DomainError("population statistics unavailable for timestep " +
                      std::to_string(index + 1));
  }
  return {&slot.mean, &slot.var};
}

void reset_population(PopulationStats& pop) {
  for (auto& slot : pop.slots) {
    std::fill(slot.mean.data().begin(), slot.mean.data().end(), 0.0);
    std::fill(slot.var.data().begin(), slot.var.data().end(), 0.0);
    slot.count = 0;
  }
}

}  // namespace bnlstm
