#include "bnlstm/model.hpp"

#include "bnlstm/errors.hpp"
#include "bnlstm/optim.hpp"

namespace bnlstm {

bool is_bn_kind(ModelKind kind) { return kind == ModelKind::BnRnn || kind == ModelKind::BnLstm; }
bool is_lstm_kind(ModelKind kind) { return kind == ModelKind::Lstm || kind == ModelKind::BnLstm; }

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::Rnn:
      return "rnn";
    case ModelKind::BnRnn:
      return "bn-rnn";
    case ModelKind::Lstm:
      return "lstm";
    case ModelKind::BnLstm:
      return "bn-lstm";
  }
  return "?";
}

ModelKind model_kind_from_name(const std::string& name) {
  if (name == "rnn") return ModelKind::Rnn;
  if (name == "bn-rnn") return ModelKind::BnRnn;
  if (name == "lstm") return ModelKind::Lstm;
  if (name == "bn-lstm") return ModelKind::BnLstm;
  throw ConfigError("unknown model kind '" + name + "'");
}

ModelState allocate_model(ModelKind kind, int64_t input_width, int64_t d_h, int64_t num_classes,
                          int64_t t_max, const ModelInit& init) {
  if (input_width < 1 || d_h < 1 || num_classes < 1 || t_max < 1) {
    throw ConfigError("model dimensions must be >= 1");
  }
  ModelState m;
  m.kind = kind;
  m.d_h = d_h;
  m.num_classes = num_classes;
  m.t_max = t_max;
  m.d_x = init.embed_dim > 0 ? init.embed_dim : input_width;
  if (init.embed_dim > 0) m.embed = Tensor({input_width, init.embed_dim});

  const int64_t d_x = m.d_x;
  switch (kind) {
    case ModelKind::Rnn:
    case ModelKind::BnRnn: {
      RNNParams base;
      base.w_h = Tensor({d_h, d_h});
      base.w_x = Tensor({d_x, d_h});
      base.b = Tensor({d_h});
      base.h0 = Tensor({d_h});
      if (kind == ModelKind::Rnn) {
        m.rnn = std::move(base);
      } else {
        m.bn_rnn.base = std::move(base);
        m.bn_rnn.gamma_h = Tensor({d_h});
        m.bn_rnn.gamma_x = Tensor({d_h});
        m.bn_rnn.epsilon = init.epsilon;
        m.bn_rnn.pop_h = PopulationStats::make(BNMode::PerTimestep, t_max, d_h);
        m.bn_rnn.pop_x = PopulationStats::make(init.input_mode, t_max, d_h);
      }
      break;
    }
    case ModelKind::Lstm:
    case ModelKind::BnLstm: {
      LSTMParams base;
      base.w_h = Tensor({d_h, 4 * d_h});
      base.w_x = Tensor({d_x, 4 * d_h});
      base.b = Tensor({4 * d_h});
      base.h0 = Tensor({d_h});
      base.c0 = Tensor({d_h});
      if (kind == ModelKind::Lstm) {
        m.lstm = std::move(base);
      } else {
        m.bn_lstm.base = std::move(base);
        m.bn_lstm.gamma_h = Tensor({4 * d_h});
        m.bn_lstm.gamma_x = Tensor({4 * d_h});
        m.bn_lstm.gamma_c = Tensor({d_h});
        m.bn_lstm.beta_c = Tensor({d_h});
        m.bn_lstm.epsilon = init.epsilon;
        m.bn_lstm.pop_h = PopulationStats::make(BNMode::PerTimestep, t_max, 4 * d_h);
        m.bn_lstm.pop_x = PopulationStats::make(init.input_mode, t_max, 4 * d_h);
        m.bn_lstm.pop_c = PopulationStats::make(BNMode::PerTimestep, t_max, d_h);
      }
      break;
    }
  }
  m.head_w = Tensor({d_h, num_classes});
  m.head_b = Tensor({num_classes});
  return m;
}

ModelState init_model(ModelKind kind, int64_t input_width, int64_t d_h, int64_t num_classes,
                      int64_t t_max, const ModelInit& init, uint64_t seed) {
  ModelState m = allocate_model(kind, input_width, d_h, num_classes, t_max, init);
  const bool identity_hidden = init.hidden_init == "identity";
  if (!identity_hidden && init.hidden_init != "orthogonal") {
    throw ConfigError("hidden_init must be 'orthogonal' or 'identity', got '" +
                      init.hidden_init + "'");
  }
  const int64_t gates = is_lstm_kind(kind) ? 4 : 1;
  Tensor w_h = identity_hidden
                   ? block_identity_init(d_h, gates, init.hidden_init_gain)
                   : block_orthogonal_init(d_h, d_h, gates, seed + 11);
  Tensor w_x = block_orthogonal_init(m.d_x, d_h, gates, seed + 23);

  switch (kind) {
    case ModelKind::Rnn:
      m.rnn.w_h = std::move(w_h);
      m.rnn.w_x = std::move(w_x);
      break;
    case ModelKind::BnRnn:
      m.bn_rnn.base.w_h = std::move(w_h);
      m.bn_rnn.base.w_x = std::move(w_x);
      m.bn_rnn.gamma_h = Tensor::full({d_h}, init.gamma0);
      m.bn_rnn.gamma_x = Tensor::full({d_h}, init.gamma0);
      break;
    case ModelKind::Lstm:
      m.lstm.w_h = std::move(w_h);
      m.lstm.w_x = std::move(w_x);
      break;
    case ModelKind::BnLstm:
      m.bn_lstm.base.w_h = std::move(w_h);
      m.bn_lstm.base.w_x = std::move(w_x);
      m.bn_lstm.gamma_h = Tensor::full({4 * d_h}, init.gamma0);
      m.bn_lstm.gamma_x = Tensor::full({4 * d_h}, init.gamma0);
      m.bn_lstm.gamma_c = Tensor::full({d_h}, init.gamma0);
      m.bn_lstm.beta_c = Tensor::full({d_h}, init.beta0);
      break;
  }
  if (m.embed.numel() > 0) m.embed = orthogonal_init(input_width, init.embed_dim, seed + 37);
  m.head_w = orthogonal_init(d_h, num_classes, seed + 41);
  return m;
}

namespace {

template <typename Model, typename Fn>
void visit_params(Model& m, const Fn& fn) {
  switch (m.kind) {
    case ModelKind::Rnn:
      fn("w_h", m.rnn.w_h);
      fn("w_x", m.rnn.w_x);
      fn("b", m.rnn.b);
      fn("h0", m.rnn.h0);
      break;
    case ModelKind::BnRnn:
      fn("w_h", m.bn_rnn.base.w_h);
      fn("w_x", m.bn_rnn.base.w_x);
      fn("b", m.bn_rnn.base.b);
      fn("h0", m.bn_rnn.base.h0);
      fn("gamma_h", m.bn_rnn.gamma_h);
      fn("gamma_x", m.bn_rnn.gamma_x);
      break;
    case ModelKind::Lstm:
      fn("w_h", m.lstm.w_h);
      fn("w_x", m.lstm.w_x);
      fn("b", m.lstm.b);
      fn("h0", m.lstm.h0);
      fn("c0", m.lstm.c0);
      break;
    case ModelKind::BnLstm:
      fn("w_h", m.bn_lstm.base.w_h);
      fn("w_x", m.bn_lstm.base.w_x);
      fn("b", m.bn_lstm.base.b);
      fn("h0", m.bn_lstm.base.h0);
      fn("c0", m.bn_lstm.base.c0);
      fn("gamma_h", m.bn_lstm.gamma_h);
      fn("gamma_x", m.bn_lstm.gamma_x);
      fn("gamma_c", m.bn_lstm.gamma_c);
      fn("beta_c", m.bn_lstm.beta_c);
      break;
  }
  if (m.embed.numel() > 0) fn("embed", m.embed);
  fn("head_w", m.head_w);
  fn("head_b", m.head_b);
}

}  // namespace

void for_each_param(ModelState& m,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_params(m, fn);
}

void for_each_param(const ModelState& m,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
  visit_params(m, fn);
}

ParamSet copy_params(const ModelState& m) {
  ParamSet set;
  for_each_param(m, [&set](const std::string& name, const Tensor& t) { set.add(name, t); });
  return set;
}

void assign_params(ModelState& m, const ParamSet& params) {
  size_t index = 0;
  for_each_param(m, [&params, &index](const std::string& name, Tensor& t) {
    const auto& [pname, value] = params.items.at(index++);
    if (pname != name || !t.same_shape(value)) {
      throw ShapeError("parameter mismatch assigning '" + name + "'");
    }
    t = value;
  });
  if (index != params.size()) throw ShapeError("parameter count mismatch in assign_params");
}

BoundModel bind_model(Tape& tape, const ModelState& m) {
  BoundModel bm;
  switch (m.kind) {
    case ModelKind::Rnn: {
      RNNVars v = bind(tape, m.rnn);
      bm.param_vars = {{"w_h", v.w_h}, {"w_x", v.w_x}, {"b", v.b}, {"h0", v.h0}};
      bm.cell = v;
      break;
    }
    case ModelKind::BnRnn: {
      BNRNNVars v = bind(tape, m.bn_rnn);
      bm.param_vars = {{"w_h", v.base.w_h}, {"w_x", v.base.w_x},   {"b", v.base.b},
                       {"h0", v.base.h0},   {"gamma_h", v.gamma_h}, {"gamma_x", v.gamma_x}};
      bm.cell = v;
      break;
    }
    case ModelKind::Lstm: {
      LSTMVars v = bind(tape, m.lstm);
      bm.param_vars = {
          {"w_h", v.w_h}, {"w_x", v.w_x}, {"b", v.b}, {"h0", v.h0}, {"c0", v.c0}};
      bm.cell = v;
      break;
    }
    case ModelKind::BnLstm: {
      BNLSTMVars v = bind(tape, m.bn_lstm);
      bm.param_vars = {{"w_h", v.base.w_h},     {"w_x", v.base.w_x},
                       {"b", v.base.b},         {"h0", v.base.h0},
                       {"c0", v.base.c0},       {"gamma_h", v.gamma_h},
                       {"gamma_x", v.gamma_x},  {"gamma_c", v.gamma_c},
                       {"beta_c", v.beta_c}};
      bm.cell = v;
      break;
    }
  }
  if (m.embed.numel() > 0) {
    bm.embed = tape.leaf(m.embed);
    bm.param_vars.emplace_back("embed", bm.embed);
  }
  bm.head_w = tape.leaf(m.head_w);
  bm.head_b = tape.leaf(m.head_b);
  bm.param_vars.emplace_back("head_w", bm.head_w);
  bm.param_vars.emplace_back("head_b", bm.head_b);
  return bm;
}

Var bound_h0(const BoundModel& bm) {
  return std::visit(
      [](const auto& v) -> Var {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, RNNVars> || std::is_same_v<T, LSTMVars>) {
          return v.h0;
        } else {
          return v.base.h0;
        }
      },
      bm.cell);
}

std::optional<Var> bound_c0(const BoundModel& bm) {
  return std::visit(
      [](const auto& v) -> std::optional<Var> {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, LSTMVars>) {
          return v.c0;
        } else if constexpr (std::is_same_v<T, BNLSTMVars>) {
          return v.base.c0;
        } else {
          return std::nullopt;
        }
      },
      bm.cell);
}

UnrollResult unroll_bound(Tape& tape, const BoundModel& bm, const std::vector<Var>& x_vars,
                          const StepVars& init, Phase phase, int64_t t_offset) {
  return std::visit(
      [&](const auto& v) { return unroll_vars(tape, v, x_vars, init, phase, t_offset); },
      bm.cell);
}

void accumulate_model_population(ModelState& m, const UnrollResult& result, int64_t t_offset,
                                 PopEstimator estimator, double momentum) {
  if (m.kind == ModelKind::BnRnn) {
    accumulate_population(m.bn_rnn, result, t_offset, estimator, momentum);
  } else if (m.kind == ModelKind::BnLstm) {
    accumulate_population(m.bn_lstm, result, t_offset, estimator, momentum);
  }
}

bool population_ready(const ModelState& m) {
  auto ready = [](const PopulationStats& pop) {
    for (const auto& slot : pop.slots) {
      if (slot.count == 0) return false;
    }
    return true;
  };
  if (m.kind == ModelKind::BnRnn) return ready(m.bn_rnn.pop_h) && ready(m.bn_rnn.pop_x);
  if (m.kind == ModelKind::BnLstm) {
    return ready(m.bn_lstm.pop_h) && ready(m.bn_lstm.pop_x) && ready(m.bn_lstm.pop_c);
  }
  return true;
}

void reset_model_population(ModelState& m) {
  if (m.kind == ModelKind::BnRnn) {
    reset_population(m.bn_rnn.pop_h);
    reset_population(m.bn_rnn.pop_x);
  } else if (m.kind == ModelKind::BnLstm) {
    reset_population(m.bn_lstm.pop_h);
    reset_population(m.bn_lstm.pop_x);
    reset_population(m.bn_lstm.pop_c);
  }
}

}  // namespace bnlstm
