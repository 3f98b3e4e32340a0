#include "bnlstm/gradcheck.hpp"

#include <cmath>

#include "bnlstm/errors.hpp"

namespace bnlstm {

namespace {

double evaluate(const LossBuilder& f, const ParamSet& x) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(x.size());
  for (const auto& [name, t] : x.items) vars.push_back(tape.leaf(t));
  const double v = tape.scalar_value(f(tape, vars));
  if (!std::isfinite(v)) throw DomainError("finite_diff_check: non-finite function value");
  return v;
}

double relative_error(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8});
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& f, const ParamSet& x, double h) {
  if (h <= 0.0) throw DomainError("finite_diff_check requires h > 0");

  // Analytic route: one tape pass.
  std::vector<Tensor> tape_grads;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(x.size());
    for (const auto& [name, t] : x.items) vars.push_back(tape.leaf(t));
    Var loss = f(tape, vars);
    if (!std::isfinite(tape.scalar_value(loss))) {
      throw DomainError("finite_diff_check: non-finite function value");
    }
    tape.backward(loss);
    for (Var v : vars) tape_grads.push_back(tape.grad(v));
  }

  GradCheckReport report;
  ParamSet probe = x;
  for (size_t p = 0; p < x.size(); ++p) {
    Tensor& t = probe.items[p].second;
    double worst = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t[i];
      t[i] = saved + h;
      const double fp = evaluate(f, probe);
      t[i] = saved - h;
      const double fm = evaluate(f, probe);
      t[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, relative_error(fd, tape_grads[p][i]));
    }
    report.per_parameter_errors.emplace_back(x.items[p].first, worst);
    report.max_relative_error = std::max(report.max_relative_error, worst);
  }
  return report;
}

GradCheckReport finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                                  double h) {
  ParamSet set;
  set.add("x", x);
  return finite_diff_check(
      [&f](Tape& tape, const std::vector<Var>& vars) { return f(tape, vars[0]); }, set, h);
}

}  // namespace bnlstm
