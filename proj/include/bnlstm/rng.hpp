#pragma once

#include <algorithm>
#include <cstdint>
#include <random>

#include "bnlstm/tensor.hpp"

namespace bnlstm {

// Seeded random source shared by initializers, datasets and noise streams.
// All randomness in the library flows through one of these so a run is a
// pure function of its seeds.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double normal(double mean = 0.0, double std = 1.0) {
    std::normal_distribution<double> dist(mean, std);
    return dist(engine_);
  }

  double uniform() {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    return dist(engine_);
  }

  // Inclusive bounds.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    std::uniform_int_distribution<int64_t> dist(lo, hi);
    return dist(engine_);
  }

  Tensor randn(std::vector<int64_t> shape, double std = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = normal(0.0, std);
    return t;
  }

  std::vector<int64_t> permutation(int64_t n) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    for (int64_t i = n - 1; i > 0; --i) {
      std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(uniform_int(0, i))]);
    }
    return p;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace bnlstm
