#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "bnlstm/tensor.hpp"

namespace bnlstm {

// Handle to a value slot on a Tape.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Operations execute eagerly and record a closure that
// accumulates gradients during backward(). The tape is dynamic: it is
// rebuilt for every forward pass, which keeps variable sequence lengths
// trivial. Single-writer; see the concurrency notes in the README.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf slot with no producer; gradients accumulate into it like any other.
  Var leaf(Tensor value);

  Var matmul(Var a, Var b);

  // Binary elementwise ops accept equal shapes or a scalar (numel == 1)
  // broadcast on either side.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);

  Var tanh_(Var x);
  Var sigmoid_(Var x);
  Var sqrt_(Var x);
  Var reciprocal(Var x);

  // Multiply by a compile-time constant (not a tracked value).
  Var scale(Var x, double c);

  // Tile a length-d vector into m identical rows; backward sums over rows.
  Var broadcast_rows(Var v, int64_t m);

  // Columns [start, start+len) of a 2-D value.
  Var slice_cols(Var x, int64_t start, int64_t len);

  // Reductions. batch_mean / batch_var reduce over the batch (row) axis and
  // stay on the tape so gradients flow through the statistics; batch_var is
  // the biased (divide by m) estimator.
  Var sum(Var x);
  Var mean_all(Var x);
  Var batch_mean(Var x);
  Var batch_var(Var x);

  // Mean over the batch of -log softmax(logits)[target]; log-sum-exp
  // stabilized. Backward is (softmax - onehot) / batch.
  Var softmax_cross_entropy(Var logits, std::vector<int32_t> targets);

  // Populates one gradient slot per value slot (zeros where the loss does
  // not depend on the slot) by reverse traversal; contributions from
  // multiple consumers sum.
  void backward(Var loss);

  const Tensor& value(Var v) const { return values_[static_cast<size_t>(v.id)]; }
  Tensor& mutable_value(Var v) { return values_[static_cast<size_t>(v.id)]; }
  const Tensor& grad(Var v) const;
  double scalar_value(Var v) const { return value(v)[0]; }

  size_t size() const { return values_.size(); }
  bool has_grads() const { return !grads_.empty(); }

 private:
  struct Node {
    std::function<void()> back;
  };

  Var push_value(Tensor value);
  void push_node(std::function<void()> back);
  Tensor& grad_ref(Var v) { return grads_[static_cast<size_t>(v.id)]; }

  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::vector<Node> nodes_;
};

}  // namespace bnlstm
