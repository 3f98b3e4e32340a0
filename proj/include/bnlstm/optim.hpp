#pragma once

#include <cstdint>

#include "bnlstm/tensor.hpp"

namespace bnlstm {

enum class OptimKind { Sgd, RmsProp, Adam };

struct OptimConfig {
  OptimKind kind = OptimKind::Sgd;
  double learning_rate = 1e-3;
  double rmsprop_decay = 0.9;      // mean-square accumulator decay
  double rmsprop_momentum = 0.9;   // heavy-ball momentum
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double stabilizer = 1e-8;
};

// Per-parameter accumulators, shape-matched to the parameters they track.
// RmsProp: acc1 = mean-square accumulator, acc2 = momentum buffer.
// Adam: acc1 = first moment, acc2 = second moment.
struct OptimState {
  OptimConfig config;
  int64_t step_count = 0;
  ParamSet acc1;
  ParamSet acc2;

  static OptimState make(const OptimConfig& config, const ParamSet& params);
};

enum class ClipMode { GlobalNorm, PerParamNorm, Value };

struct ClipConfig {
  double threshold = 1.0;
  ClipMode mode = ClipMode::GlobalNorm;
};

double global_grad_norm(const ParamSet& grads);

// GlobalNorm rescales everything by threshold/norm when the joint L2 norm
// exceeds the threshold; PerParamNorm does the same per tensor; Value
// clamps coordinates to [-threshold, threshold]. Non-finite gradients are
// an error: training should surface divergence, not mask it.
void clip_gradients(ParamSet& grads, const ClipConfig& config);

// One optimizer update; params and grads must be name-aligned.
void step(OptimState& opt, ParamSet& params, const ParamSet& grads);

// QR factor of a seeded Gaussian draw. The factor is unique (positive
// R diagonal); Q^T Q = I on the smaller dimension.
Tensor orthogonal_init(int64_t rows, int64_t cols, uint64_t seed);

Tensor identity_init(int64_t d, double gain = 1.0);

// Stacked-matrix initializers: each rows x cols_per_block gate block is
// drawn independently.
Tensor block_orthogonal_init(int64_t rows, int64_t cols_per_block, int64_t num_blocks,
                             uint64_t seed);
Tensor block_identity_init(int64_t d, int64_t num_blocks, double gain = 1.0);

}  // namespace bnlstm
