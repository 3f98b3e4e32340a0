#include "bnlstm/recurrent.hpp"

#include <functional>
#include <string>

#include "bnlstm/errors.hpp"

namespace bnlstm {

namespace {

void check_state_shapes(const Tensor& h, const Tensor& x, int64_t d_h, int64_t d_x) {
  if (h.ndim() != 2 || h.cols() != d_h) {
    throw ShapeError("state h shape " + h.shape_string() + " does not match d_h " +
                     std::to_string(d_h));
  }
  if (x.ndim() != 2 || x.cols() != d_x) {
    throw ShapeError("input x shape " + x.shape_string() + " does not match d_x " +
                     std::to_string(d_x));
  }
  if (h.rows() != x.rows()) {
    throw ShapeError("state batch " + std::to_string(h.rows()) + " vs input batch " +
                     std::to_string(x.rows()));
  }
}

}  // namespace

RNNVars bind(Tape& tape, const RNNParams& p) {
  return RNNVars{tape.leaf(p.w_h), tape.leaf(p.w_x), tape.leaf(p.b), tape.leaf(p.h0)};
}

BNRNNVars bind(Tape& tape, const BNRNNParams& p) {
  BNRNNVars v;
  v.base = bind(tape, p.base);
  v.gamma_h = tape.leaf(p.gamma_h);
  v.gamma_x = tape.leaf(p.gamma_x);
  v.src = &p;
  return v;
}

LSTMVars bind(Tape& tape, const LSTMParams& p) {
  return LSTMVars{tape.leaf(p.w_h), tape.leaf(p.w_x), tape.leaf(p.b), tape.leaf(p.h0),
                  tape.leaf(p.c0)};
}

BNLSTMVars bind(Tape& tape, const BNLSTMParams& p) {
  BNLSTMVars v;
  v.base = bind(tape, p.base);
  v.gamma_h = tape.leaf(p.gamma_h);
  v.gamma_x = tape.leaf(p.gamma_x);
  v.gamma_c = tape.leaf(p.gamma_c);
  v.beta_c = tape.leaf(p.beta_c);
  v.src = &p;
  return v;
}

StepVars cell_step(Tape& tape, const RNNVars& v, const StepVars& state, Var x, int64_t, Phase,
                   StepStats*) {
  const int64_t d_h = tape.value(v.w_h).rows();
  const int64_t d_x = tape.value(v.w_x).rows();
  check_state_shapes(tape.value(state.h), tape.value(x), d_h, d_x);
  const int64_t batch = tape.value(state.h).rows();

  Var pre = tape.add(tape.add(tape.matmul(state.h, v.w_h), tape.matmul(x, v.w_x)),
                     tape.broadcast_rows(v.b, batch));
  return StepVars{tape.tanh_(pre), Var{}};
}

StepVars cell_step(Tape& tape, const BNRNNVars& v, const StepVars& state, Var x, int64_t t,
                   Phase phase, StepStats* stats_out) {
  const int64_t d_h = tape.value(v.base.w_h).rows();
  const int64_t d_x = tape.value(v.base.w_x).rows();
  check_state_shapes(tape.value(state.h), tape.value(x), d_h, d_x);
  const int64_t batch = tape.value(state.h).rows();
  const BNRNNParams& p = *v.src;

  Var rec = tape.matmul(state.h, v.base.w_h);
  Var inp = tape.matmul(x, v.base.w_x);
  Var rec_bn, inp_bn;
  if (phase == Phase::Train) {
    auto r = bn_forward_train(tape, rec, v.gamma_h, std::nullopt, p.epsilon);
    auto i = bn_forward_train(tape, inp, v.gamma_x, std::nullopt, p.epsilon);
    rec_bn = r.y;
    inp_bn = i.y;
    if (stats_out) {
      stats_out->h_side = std::move(r.stats);
      stats_out->x_side = std::move(i.stats);
    }
  } else {
    rec_bn = bn_forward_infer_on_tape(tape, rec, v.gamma_h, std::nullopt, p.epsilon, p.pop_h, t);
    inp_bn = bn_forward_infer_on_tape(tape, inp, v.gamma_x, std::nullopt, p.epsilon, p.pop_x, t);
  }
  Var pre = tape.add(tape.add(rec_bn, inp_bn), tape.broadcast_rows(v.base.b, batch));
  return StepVars{tape.tanh_(pre), Var{}};
}

namespace {

// Shared LSTM gate plumbing: pre-activations stacked (f, i, o, g), cell
// update without normalization, cell output through `cell_out`.
StepVars lstm_gates(Tape& tape, Var pre, Var c_prev, int64_t d_h,
                    const std::function<Var(Tape&, Var)>& cell_out) {
  Var f = tape.slice_cols(pre, 0, d_h);
  Var i = tape.slice_cols(pre, d_h, d_h);
  Var o = tape.slice_cols(pre, 2 * d_h, d_h);
  Var g = tape.slice_cols(pre, 3 * d_h, d_h);

  Var c_next = tape.add(tape.mul(tape.sigmoid_(f), c_prev),
                        tape.mul(tape.sigmoid_(i), tape.tanh_(g)));
  Var h_next = tape.mul(tape.sigmoid_(o), cell_out(tape, c_next));
  return StepVars{h_next, c_next};
}

}  // namespace

StepVars cell_step(Tape& tape, const LSTMVars& v, const StepVars& state, Var x, int64_t, Phase,
                   StepStats*) {
  const int64_t d_h = tape.value(v.w_h).rows();
  const int64_t d_x = tape.value(v.w_x).rows();
  check_state_shapes(tape.value(state.h), tape.value(x), d_h, d_x);
  const int64_t batch = tape.value(state.h).rows();

  Var pre = tape.add(tape.add(tape.matmul(state.h, v.w_h), tape.matmul(x, v.w_x)),
                     tape.broadcast_rows(v.b, batch));
  return lstm_gates(tape, pre, state.c, d_h,
                    [](Tape& tp, Var c) { return tp.tanh_(c); });
}

StepVars cell_step(Tape& tape, const BNLSTMVars& v, const StepVars& state, Var x, int64_t t,
                   Phase phase, StepStats* stats_out) {
  const int64_t d_h = tape.value(v.base.w_h).rows();
  const int64_t d_x = tape.value(v.base.w_x).rows();
  check_state_shapes(tape.value(state.h), tape.value(x), d_h, d_x);
  const int64_t batch = tape.value(state.h).rows();
  const BNLSTMParams& p = *v.src;

  Var rec = tape.matmul(state.h, v.base.w_h);
  Var inp = tape.matmul(x, v.base.w_x);

  Var rec_bn, inp_bn;
  if (phase == Phase::Train) {
    auto r = bn_forward_train(tape, rec, v.gamma_h, std::nullopt, p.epsilon);
    auto i = bn_forward_train(tape, inp, v.gamma_x, std::nullopt, p.epsilon);
    rec_bn = r.y;
    inp_bn = i.y;
    if (stats_out) {
      stats_out->h_side = std::move(r.stats);
      stats_out->x_side = std::move(i.stats);
    }
  } else {
    rec_bn = bn_forward_infer_on_tape(tape, rec, v.gamma_h, std::nullopt, p.epsilon, p.pop_h, t);
    inp_bn = bn_forward_infer_on_tape(tape, inp, v.gamma_x, std::nullopt, p.epsilon, p.pop_x, t);
  }

  Var pre = tape.add(tape.add(rec_bn, inp_bn), tape.broadcast_rows(v.base.b, batch));

  // The cell update itself is left unnormalized; only the cell *output*
  // passes through BN, so gradient flow through c is preserved.
  auto cell_out = [&](Tape& tp, Var c) -> Var {
    if (phase == Phase::Train) {
      auto r = bn_forward_train(tp, c, v.gamma_c, v.beta_c, p.epsilon);
      if (stats_out) stats_out->c_side = std::move(r.stats);
      return tp.tanh_(r.y);
    }
    return tp.tanh_(
        bn_forward_infer_on_tape(tp, c, v.gamma_c, v.beta_c, p.epsilon, p.pop_c, t));
  };
  return lstm_gates(tape, pre, state.c, d_h, cell_out);
}

StepVars rnn_step(Tape& tape, const RNNVars& v, const StepVars& state, Var x) {
  return cell_step(tape, v, state, x, 1, Phase::Train, nullptr);
}

StepVars lstm_step(Tape& tape, const LSTMVars& v, const StepVars& state, Var x) {
  return cell_step(tape, v, state, x, 1, Phase::Train, nullptr);
}

StepVars bn_lstm_step(Tape& tape, const BNLSTMVars& v, const StepVars& state, Var x, int64_t t,
                      Phase phase, StepStats* stats_out) {
  return cell_step(tape, v, state, x, t, phase, stats_out);
}

Tensor broadcast_with_noise(const Tensor& v, int64_t batch, double noise_std, Rng& rng) {
  if (noise_std < 0.0) throw DomainError("noise_std must be >= 0");
  const int64_t d = v.numel();
  Tensor out({batch, d});
  for (int64_t i = 0; i < batch; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      out.at(i, j) = v[j] + (noise_std > 0.0 ? rng.normal(0.0, noise_std) : 0.0);
    }
  }
  return out;
}

StepState init_state(int64_t batch, const RNNParams& p, double noise_std, uint64_t seed) {
  Rng rng(seed);
  return StepState{broadcast_with_noise(p.h0, batch, noise_std, rng), Tensor{}};
}

StepState init_state(int64_t batch, const LSTMParams& p, double noise_std, uint64_t seed) {
  Rng rng(seed);
  StepState s;
  s.h = broadcast_with_noise(p.h0, batch, noise_std, rng);
  s.c = broadcast_with_noise(p.c0, batch, noise_std, rng);
  return s;
}

StepVars init_state_on_tape(Tape& tape, Var h0, std::optional<Var> c0, int64_t batch,
                            double noise_std, Rng& rng) {
  StepVars s;
  s.h = tape.broadcast_rows(h0, batch);
  if (noise_std > 0.0) {
    s.h = tape.add(s.h, tape.leaf(rng.randn({batch, tape.value(h0).numel()}, noise_std)));
  }
  if (c0) {
    s.c = tape.broadcast_rows(*c0, batch);
    if (noise_std > 0.0) {
      s.c = tape.add(s.c, tape.leaf(rng.randn({batch, tape.value(*c0).numel()}, noise_std)));
    }
  }
  return s;
}

namespace {

void accumulate_side(PopulationStats& pop, const std::optional<BatchStats>& stats, int64_t t,
                     PopEstimator estimator, double momentum) {
  if (!stats) return;
  // Sequencewise slots clamp internally; per-timestep slots clamp to t_max
  // so statistics past the configured horizon keep feeding the last slot.
  int64_t slot_t = t;
  if (pop.mode == BNMode::PerTimestep && slot_t > pop.t_max) slot_t = pop.t_max;
  update_population(pop, slot_t, *stats, estimator, momentum);
}

}  // namespace

void accumulate_population(BNRNNParams& p, const UnrollResult& result, int64_t t_offset,
                           PopEstimator estimator, double momentum) {
  for (size_t step = 0; step < result.stats.size(); ++step) {
    const int64_t t = t_offset + static_cast<int64_t>(step) + 1;
    accumulate_side(p.pop_h, result.stats[step].h_side, t, estimator, momentum);
    accumulate_side(p.pop_x, result.stats[step].x_side, t, estimator, momentum);
  }
}

void accumulate_population(BNLSTMParams& p, const UnrollResult& result, int64_t t_offset,
                           PopEstimator estimator, double momentum) {
  for (size_t step = 0; step < result.stats.size(); ++step) {
    const int64_t t = t_offset + static_cast<int64_t>(step) + 1;
    accumulate_side(p.pop_h, result.stats[step].h_side, t, estimator, momentum);
    accumulate_side(p.pop_x, result.stats[step].x_side, t, estimator, momentum);
    accumulate_side(p.pop_c, result.stats[step].c_side, t, estimator, momentum);
  }
}

}  // namespace bnlstm
