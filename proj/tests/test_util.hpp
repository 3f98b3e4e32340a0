#pragma once

#include <cmath>

#include "bnlstm/rng.hpp"
#include "bnlstm/tensor.hpp"

namespace testutil {

inline bnlstm::Tensor randn(std::vector<int64_t> shape, uint64_t seed, double std = 1.0) {
  bnlstm::Rng rng(seed);
  return rng.randn(std::move(shape), std);
}

inline double max_abs_diff(const bnlstm::Tensor& a, const bnlstm::Tensor& b) {
  double worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

inline double frobenius(const bnlstm::Tensor& t) {
  double sq = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) sq += t[i] * t[i];
  return std::sqrt(sq);
}

}  // namespace testutil
