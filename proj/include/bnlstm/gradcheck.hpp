#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bnlstm/tape.hpp"

namespace bnlstm {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::vector<std::pair<std::string, double>> per_parameter_errors;
};

// Builds a scalar loss on the given tape from leaves bound to the checked
// parameters (same order as the ParamSet). Must be deterministic: it is
// re-invoked at perturbed points for the central differences.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Central-difference check of tape gradients. Relative error per coordinate
// is |a - b| / max(|a|, |b|, 1e-8); the report keeps the max per parameter.
GradCheckReport finite_diff_check(const LossBuilder& f, const ParamSet& x, double h);

// Single-tensor convenience.
GradCheckReport finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                                  double h);

}  // namespace bnlstm
