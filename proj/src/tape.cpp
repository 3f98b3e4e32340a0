#include "bnlstm/tape.hpp"

#include <algorithm>
#include <cmath>

#include "bnlstm/kernels.hpp"

namespace bnlstm {

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(op) + " requires a 2-D operand, got shape " + t.shape_string());
  }
}

}  // namespace

Var Tape::push_value(Tensor value) {
  values_.push_back(std::move(value));
  return Var{static_cast<int32_t>(values_.size() - 1)};
}

void Tape::push_node(std::function<void()> back) { nodes_.push_back(Node{std::move(back)}); }

Var Tape::leaf(Tensor value) { return push_value(std::move(value)); }

const Tensor& Tape::grad(Var v) const {
  if (grads_.empty()) throw DomainError("gradients requested before backward()");
  return grads_[static_cast<size_t>(v.id)];
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_2d(ta, "matmul");
  require_2d(tb, "matmul");
  if (ta.cols() != tb.rows()) {
    throw ShapeError("matmul inner dimensions disagree: " + ta.shape_string() + " vs " +
                     tb.shape_string());
  }
  const int64_t m = ta.rows(), k = ta.cols(), n = tb.cols();
  Tensor out({m, n});
  kernels::gemm_nn(m, k, n, ta.raw(), tb.raw(), out.raw());
  Var y = push_value(std::move(out));
  push_node([this, a, b, y, m, k, n] {
    const Tensor& dy = grad_ref(y);
    kernels::gemm_nt_acc(m, n, k, dy.raw(), value(b).raw(), grad_ref(a).raw());
    kernels::gemm_tn_acc(k, m, n, value(a).raw(), dy.raw(), grad_ref(b).raw());
  });
  return y;
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.same_shape(tb)) {
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] + tb[i];
    Var y = push_value(std::move(out));
    push_node([this, a, b, y, n] {
      const Tensor& dy = grad_ref(y);
      Tensor& da = grad_ref(a);
      Tensor& db = grad_ref(b);
      for (int64_t i = 0; i < n; ++i) {
        da[i] += dy[i];
        db[i] += dy[i];
      }
    });
    return y;
  }
  if (tb.numel() == 1) {
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    const double s = tb[0];
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] + s;
    Var y = push_value(std::move(out));
    push_node([this, a, b, y, n] {
      const Tensor& dy = grad_ref(y);
      Tensor& da = grad_ref(a);
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        da[i] += dy[i];
        acc += dy[i];
      }
      grad_ref(b)[0] += acc;
    });
    return y;
  }
  if (ta.numel() == 1) return add(b, a);
  throw ShapeError("add shape mismatch: " + ta.shape_string() + " vs " + tb.shape_string());
}

Var Tape::sub(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.same_shape(tb)) {
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] - tb[i];
    Var y = push_value(std::move(out));
    push_node([this, a, b, y, n] {
      const Tensor& dy = grad_ref(y);
      Tensor& da = grad_ref(a);
      Tensor& db = grad_ref(b);
      for (int64_t i = 0; i < n; ++i) {
        da[i] += dy[i];
        db[i] -= dy[i];
      }
    });
    return y;
  }
  if (tb.numel() == 1) {
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    const double s = tb[0];
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] - s;
    Var y = push_value(std::move(out));
    push_node([this, a, b, y, n] {
      const Tensor& dy = grad_ref(y);
      Tensor& da = grad_ref(a);
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        da[i] += dy[i];
        acc += dy[i];
      }
      grad_ref(b)[0] -= acc;
    });
    return y;
  }
  if (ta.numel() == 1) {
    Tensor out(tb.shape());
    const int64_t n = tb.numel();
    const double s = ta[0];
    for (int64_t i = 0; i < n; ++i) out[i] = s - tb[i];
    Var y = push_value(std::move(out));
    push_node([this, a, b, y, n] {
      const Tensor& dy = grad_ref(y);
      Tensor& db = grad_ref(b);
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        db[i] -= dy[i];
        acc += dy[i];
      }
      grad_ref(a)[0] += acc;
    });
    return y;
  }
  throw ShapeError("sub shape mismatch: " + ta.shape_string() + " vs " + tb.shape_string());
}

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.same_shape(tb)) {
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] * tb[i];
    Var y = push_value(std::move(out));
    push_node([this, a, b, y, n] {
      const Tensor& dy = grad_ref(y);
      const Tensor& va = value(a);
      const Tensor& vb = value(b);
      Tensor& da = grad_ref(a);
      Tensor& db = grad_ref(b);
      for (int64_t i = 0; i < n; ++i) {
        da[i] += dy[i] * vb[i];
        db[i] += dy[i] * va[i];
      }
    });
    return y;
  }
  if (tb.numel() == 1) {
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    const double s = tb[0];
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] * s;
    Var y = push_value(std::move(out));
    push_node([this, a, b, y, n] {
      const Tensor& dy = grad_ref(y);
      const Tensor& va = value(a);
      const double s = value(b)[0];
      Tensor& da = grad_ref(a);
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        da[i] += dy[i] * s;
        acc += dy[i] * va[i];
      }
      grad_ref(b)[0] += acc;
    });
    return y;
  }
  if (ta.numel() == 1) return mul(b, a);
  throw ShapeError("mul shape mismatch: " + ta.shape_string() + " vs " + tb.shape_string());
}

Var Tape::tanh_(Var x) {
  const Tensor& tx = value(x);
  Tensor out(tx.shape());
  kernels::map_tanh(tx.numel(), tx.raw(), out.raw());
  Var y = push_value(std::move(out));
  push_node([this, x, y] {
    const Tensor& dy = grad_ref(y);
    const Tensor& vy = value(y);
    Tensor& dx = grad_ref(x);
    const int64_t n = vy.numel();
    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (1.0 - vy[i] * vy[i]);
  });
  return y;
}

Var Tape::sigmoid_(Var x) {
  const Tensor& tx = value(x);
  Tensor out(tx.shape());
  kernels::map_sigmoid(tx.numel(), tx.raw(), out.raw());
  Var y = push_value(std::move(out));
  push_node([this, x, y] {
    const Tensor& dy = grad_ref(y);
    const Tensor& vy = value(y);
    Tensor& dx = grad_ref(x);
    const int64_t n = vy.numel();
    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * vy[i] * (1.0 - vy[i]);
  });
  return y;
}

Var Tape::sqrt_(Var x) {
  const Tensor& tx = value(x);
  const int64_t n = tx.numel();
  Tensor out(tx.shape());
  for (int64_t i = 0; i < n; ++i) {
    if (tx[i] < 0.0) throw DomainError("sqrt of negative value");
    out[i] = std::sqrt(tx[i]);
  }
  Var y = push_value(std::move(out));
  push_node([this, x, y, n] {
    const Tensor& dy = grad_ref(y);
    const Tensor& vy = value(y);
    Tensor& dx = grad_ref(x);
    for (int64_t i = 0; i < n; ++i) {
      if (dy[i] != 0.0) dx[i] += dy[i] * 0.5 / vy[i];
    }
  });
  return y;
}

Var Tape::reciprocal(Var x) {
  const Tensor& tx = value(x);
  const int64_t n = tx.numel();
  Tensor out(tx.shape());
  for (int64_t i = 0; i < n; ++i) {
    if (tx[i] == 0.0) throw DomainError("reciprocal of zero");
    out[i] = 1.0 / tx[i];
  }
  Var y = push_value(std::move(out));
  push_node([this, x, y, n] {
    const Tensor& dy = grad_ref(y);
    const Tensor& vy = value(y);
    Tensor& dx = grad_ref(x);
    for (int64_t i = 0; i < n; ++i) dx[i] -= dy[i] * vy[i] * vy[i];
  });
  return y;
}

Var Tape::scale(Var x, double c) {
  const Tensor& tx = value(x);
  const int64_t n = tx.numel();
  Tensor out(tx.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = tx[i] * c;
  Var y = push_value(std::move(out));
  push_node([this, x, y, n, c] {
    const Tensor& dy = grad_ref(y);
    Tensor& dx = grad_ref(x);
    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * c;
  });
  return y;
}

Var Tape::broadcast_rows(Var v, int64_t m) {
  const Tensor& tv = value(v);
  if (tv.ndim() != 1) {
    throw ShapeError("broadcast_rows expects a 1-D vector, got " + tv.shape_string());
  }
  if (m < 1) throw ShapeError("broadcast_rows requires m >= 1");
  const int64_t d = tv.numel();
  Tensor out({m, d});
  for (int64_t i = 0; i < m; ++i) {
    std::copy(tv.raw(), tv.raw() + d, out.raw() + i * d);
  }
  Var y = push_value(std::move(out));
  push_node([this, v, y, m, d] {
    const Tensor& dy = grad_ref(y);
    Tensor& dv = grad_ref(v);
    for (int64_t i = 0; i < m; ++i) {
      const double* row = dy.raw() + i * d;
      for (int64_t j = 0; j < d; ++j) dv[j] += row[j];
    }
  });
  return y;
}

Var Tape::slice_cols(Var x, int64_t start, int64_t len) {
  const Tensor& tx = value(x);
  require_2d(tx, "slice_cols");
  if (start < 0 || len < 1 || start + len > tx.cols()) {
    throw ShapeError("slice_cols [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of range for shape " + tx.shape_string());
  }
  const int64_t m = tx.rows(), n = tx.cols();
  Tensor out({m, len});
  for (int64_t i = 0; i < m; ++i) {
    std::copy(tx.raw() + i * n + start, tx.raw() + i * n + start + len, out.raw() + i * len);
  }
  Var y = push_value(std::move(out));
  push_node([this, x, y, m, n, start, len] {
    const Tensor& dy = grad_ref(y);
    Tensor& dx = grad_ref(x);
    for (int64_t i = 0; i < m; ++i) {
      const double* src = dy.raw() + i * len;
      double* dst = dx.raw() + i * n + start;
      for (int64_t j = 0; j < len; ++j) dst[j] += src[j];
    }
  });
  return y;
}

Var Tape::sum(Var x) {
  const Tensor& tx = value(x);
  const int64_t n = tx.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += tx[i];
  Var y = push_value(Tensor::scalar(acc));
  push_node([this, x, y, n] {
    const double dy = grad_ref(y)[0];
    Tensor& dx = grad_ref(x);
    for (int64_t i = 0; i < n; ++i) dx[i] += dy;
  });
  return y;
}

Var Tape::mean_all(Var x) {
  const Tensor& tx = value(x);
  const int64_t n = tx.numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += tx[i];
  Var y = push_value(Tensor::scalar(acc / static_cast<double>(n)));
  push_node([this, x, y, n] {
    const double dy = grad_ref(y)[0] / static_cast<double>(n);
    Tensor& dx = grad_ref(x);
    for (int64_t i = 0; i < n; ++i) dx[i] += dy;
  });
  return y;
}

Var Tape::batch_mean(Var x) {
  const Tensor& tx = value(x);
  require_2d(tx, "batch_mean");
  const int64_t m = tx.rows(), d = tx.cols();
  if (m < 1) throw ShapeError("batch_mean requires batch >= 1");
  Tensor out({d});
  kernels::column_mean(m, d, tx.raw(), out.raw());
  Var y = push_value(std::move(out));
  push_node([this, x, y, m, d] {
    const Tensor& dy = grad_ref(y);
    Tensor& dx = grad_ref(x);
    const double inv = 1.0 / static_cast<double>(m);
    for (int64_t i = 0; i < m; ++i) {
      double* row = dx.raw() + i * d;
      for (int64_t j = 0; j < d; ++j) row[j] += dy[j] * inv;
    }
  });
  return y;
}

Var Tape::batch_var(Var x) {
  const Tensor& tx = value(x);
  require_2d(tx, "batch_var");
  const int64_t m = tx.rows(), d = tx.cols();
  if (m < 1) throw ShapeError("batch_var requires batch >= 1");
  Tensor mean({d});
  kernels::column_mean(m, d, tx.raw(), mean.raw());
  Tensor out({d});
  kernels::column_var(m, d, tx.raw(), mean.raw(), out.raw());
  Var y = push_value(std::move(out));
  // d var_j / d x_ij = 2 (x_ij - mean_j) / m; the mean's own dependence cancels.
  push_node([this, x, y, m, d, mean = std::move(mean)] {
    const Tensor& dy = grad_ref(y);
    const Tensor& vx = value(x);
    Tensor& dx = grad_ref(x);
    const double inv = 2.0 / static_cast<double>(m);
    for (int64_t i = 0; i < m; ++i) {
      const double* xrow = vx.raw() + i * d;
      double* drow = dx.raw() + i * d;
      for (int64_t j = 0; j < d; ++j) drow[j] += dy[j] * inv * (xrow[j] - mean[j]);
    }
  });
  return y;
}

Var Tape::softmax_cross_entropy(Var logits, std::vector<int32_t> targets) {
  const Tensor& tl = value(logits);
  require_2d(tl, "softmax_cross_entropy");
  const int64_t m = tl.rows(), k = tl.cols();
  if (static_cast<int64_t>(targets.size()) != m) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for batch " + std::to_string(m));
  }
  for (int32_t t : targets) {
    if (t < 0 || t >= k) throw DomainError("target class out of range");
  }
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double* row = tl.raw() + i * k;
    double hi = row[0];
    for (int64_t j = 1; j < k; ++j) hi = std::max(hi, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - hi);
    total += hi + std::log(z) - row[targets[static_cast<size_t>(i)]];
  }
  Var y = push_value(Tensor::scalar(total / static_cast<double>(m)));
  push_node([this, logits, y, m, k, targets = std::move(targets)] {
    const double dy = grad_ref(y)[0] / static_cast<double>(m);
    const Tensor& vl = value(logits);
    Tensor& dl = grad_ref(logits);
    for (int64_t i = 0; i < m; ++i) {
      const double* row = vl.raw() + i * k;
      double* drow = dl.raw() + i * k;
      double hi = row[0];
      for (int64_t j = 1; j < k; ++j) hi = std::max(hi, row[j]);
      double z = 0.0;
      for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - hi);
      for (int64_t j = 0; j < k; ++j) {
        const double p = std::exp(row[j] - hi) / z;
        drow[j] += dy * (p - (j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0));
      }
    }
  });
  return y;
}

void Tape::backward(Var loss) {
  if (!loss.valid() || static_cast<size_t>(loss.id) >= values_.size()) {
    throw DomainError("backward: invalid loss slot");
  }
  if (value(loss).numel() != 1) {
    throw DomainError("backward requires a scalar loss, got shape " + value(loss).shape_string());
  }
  grads_.clear();
  grads_.reserve(values_.size());
  for (const Tensor& v : values_) grads_.emplace_back(v.shape());
  grads_[static_cast<size_t>(loss.id)][0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
}

}  // namespace bnlstm
