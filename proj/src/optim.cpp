#include "bnlstm/optim.hpp"

#include <cmath>
#include <string>

#include "bnlstm/errors.hpp"
#include "bnlstm/rng.hpp"

namespace bnlstm {

OptimState OptimState::make(const OptimConfig& config, const ParamSet& params) {
  OptimState state;
  state.config = config;
  if (config.kind != OptimKind::Sgd) {
    for (const auto& [name, t] : params.items) {
      state.acc1.add(name, Tensor(t.shape()));
      state.acc2.add(name, Tensor(t.shape()));
    }
  }
  return state;
}

double global_grad_norm(const ParamSet& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads.items) {
    for (int64_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
  }
  return std::sqrt(sq);
}

void clip_gradients(ParamSet& grads, const ClipConfig& config) {
  if (config.threshold <= 0.0) throw DomainError("clip threshold must be > 0");
  for (const auto& [name, g] : grads.items) {
    if (!g.all_finite()) throw DivergenceError("non-finite gradient in '" + name + "'");
  }
  switch (config.mode) {
    case ClipMode::GlobalNorm: {
      const double norm = global_grad_norm(grads);
      if (norm > config.threshold) {
        const double s = config.threshold / norm;
        for (auto& [name, g] : grads.items) {
          for (int64_t i = 0; i < g.numel(); ++i) g[i] *= s;
        }
      }
      break;
    }
    case ClipMode::PerParamNorm: {
      for (auto& [name, g] : grads.items) {
        double sq = 0.0;
        for (int64_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
        const double norm = std::sqrt(sq);
        if (norm > config.threshold) {
          const double s = config.threshold / norm;
          for (int64_t i = 0; i < g.numel(); ++i) g[i] *= s;
        }
      }
      break;
    }
    case ClipMode::Value: {
      for (auto& [name, g] : grads.items) {
        for (int64_t i = 0; i < g.numel(); ++i) {
          g[i] = std::min(config.threshold, std::max(-config.threshold, g[i]));
        }
      }
      break;
    }
  }
}

void step(OptimState& opt, ParamSet& params, const ParamSet& grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("optimizer: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(grads.size()) + " grads");
  }
  const OptimConfig& cfg = opt.config;
  opt.step_count += 1;

  for (size_t p = 0; p < params.size(); ++p) {
    auto& [pname, param] = params.items[p];
    const auto& [gname, grad] = grads.items[p];
    if (pname != gname || !param.same_shape(grad)) {
      throw ShapeError("optimizer: mismatched entry '" + pname + "' vs '" + gname + "'");
    }
    const int64_t n = param.numel();

    switch (cfg.kind) {
      case OptimKind::Sgd: {
        for (int64_t i = 0; i < n; ++i) param[i] -= cfg.learning_rate * grad[i];
        break;
      }
      case OptimKind::RmsProp: {
        Tensor& ms = opt.acc1.items[p].second;
        Tensor& mom = opt.acc2.items[p].second;
        for (int64_t i = 0; i < n; ++i) {
          ms[i] = cfg.rmsprop_decay * ms[i] + (1.0 - cfg.rmsprop_decay) * grad[i] * grad[i];
          const double u = cfg.learning_rate * grad[i] / std::sqrt(ms[i] + cfg.stabilizer);
          mom[i] = cfg.rmsprop_momentum * mom[i] + u;
          param[i] -= mom[i];
        }
        break;
      }
      case OptimKind::Adam: {
        Tensor& m1 = opt.acc1.items[p].second;
        Tensor& m2 = opt.acc2.items[p].second;
        const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(opt.step_count));
        const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(opt.step_count));
        for (int64_t i = 0; i < n; ++i) {
          m1[i] = cfg.adam_beta1 * m1[i] + (1.0 - cfg.adam_beta1) * grad[i];
          m2[i] = cfg.adam_beta2 * m2[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
          const double mhat = m1[i] / bc1;
          const double vhat = m2[i] / bc2;
          param[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.stabilizer);
        }
        break;
      }
    }
    if (!param.all_finite()) {
      throw DivergenceError("non-finite parameter after update of '" + pname + "'");
    }
  }
}

namespace {

// Modified Gram-Schmidt with a second orthogonalization pass. Gaussian
// draws are well-conditioned, so two passes reach machine-precision
// orthonormality; the positive column norms make the factor unique.
Tensor orthonormal_columns(int64_t m, int64_t n, Rng& rng) {
  Tensor q = rng.randn({m, n});
  for (int64_t j = 0; j < n; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (int64_t i = 0; i < j; ++i) {
        double dot = 0.0;
        for (int64_t r = 0; r < m; ++r) dot += q.at(r, i) * q.at(r, j);
        for (int64_t r = 0; r < m; ++r) q.at(r, j) -= dot * q.at(r, i);
      }
    }
    double norm = 0.0;
    for (int64_t r = 0; r < m; ++r) norm += q.at(r, j) * q.at(r, j);
    norm = std::sqrt(norm);
    for (int64_t r = 0; r < m; ++r) q.at(r, j) /= norm;
  }
  return q;
}

}  // namespace

Tensor orthogonal_init(int64_t rows, int64_t cols, uint64_t seed) {
  if (rows < 1 || cols < 1) throw ShapeError("orthogonal_init requires rows, cols >= 1");
  Rng rng(seed);
  if (rows >= cols) return orthonormal_columns(rows, cols, rng);
  // Wide case: orthonormalize the transpose so the rows come out orthonormal.
  Tensor q = orthonormal_columns(cols, rows, rng);
  Tensor out({rows, cols});
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) out.at(i, j) = q.at(j, i);
  }
  return out;
}

Tensor identity_init(int64_t d, double gain) {
  if (d < 1) throw ShapeError("identity_init requires d >= 1");
  Tensor t({d, d});
  for (int64_t i = 0; i < d; ++i) t.at(i, i) = gain;
  return t;
}

Tensor block_orthogonal_init(int64_t rows, int64_t cols_per_block, int64_t num_blocks,
                             uint64_t seed) {
  Tensor out({rows, cols_per_block * num_blocks});
  for (int64_t blk = 0; blk < num_blocks; ++blk) {
    Tensor q = orthogonal_init(rows, cols_per_block, seed + static_cast<uint64_t>(blk));
    for (int64_t i = 0; i < rows; ++i) {
      for (int64_t j = 0; j < cols_per_block; ++j) {
        out.at(i, blk * cols_per_block + j) = q.at(i, j);
      }
    }
  }
  return out;
}

Tensor block_identity_init(int64_t d, int64_t num_blocks, double gain) {
  Tensor out({d, d * num_blocks});
  for (int64_t blk = 0; blk < num_blocks; ++blk) {
    for (int64_t i = 0; i < d; ++i) out.at(i, blk * d + i) = gain;
  }
  return out;
}

}  // namespace bnlstm
