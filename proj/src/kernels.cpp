#include "bnlstm/kernels.hpp"

#include <atomic>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bnlstm::kernels {

namespace {

std::atomic<bool> g_parallel{true};

// Work below these sizes is cheaper than the fork/join overhead.
constexpr int64_t kGemmParallelFlops = 64 * 1024;
constexpr int64_t kMapParallelSize = 32 * 1024;

}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel(bool enabled) { g_parallel.store(enabled, std::memory_order_relaxed); }

// Row-blocked ikj product: the inner loop walks contiguous rows of B and C,
// and every C element accumulates in increasing-k order on exactly one
// thread, so the parallel and serial paths agree bitwise.
void gemm_nn_serial(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_nn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  if (!parallel_enabled() || m * k * n < kGemmParallelFlops || m < 2) {
    gemm_nn_serial(m, k, n, a, b, c);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C += A @ B^T with B stored [n x k]; inner loop is a dot over contiguous rows.
void gemm_nt_acc_serial(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

void gemm_nt_acc(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  if (!parallel_enabled() || m * k * n < kGemmParallelFlops || m < 2) {
    gemm_nt_acc_serial(m, k, n, a, b, c);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m x n] += A^T @ B with A stored [k x m]; parallel over output rows.
void gemm_tn_acc_serial(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double api = a[p * m + i];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

void gemm_tn_acc(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  if (!parallel_enabled() || m * k * n < kGemmParallelFlops || m < 2) {
    gemm_tn_acc_serial(m, k, n, a, b, c);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double api = a[p * m + i];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

void gemm_naive(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

void column_mean_serial(int64_t m, int64_t d, const double* x, double* mean) {
  for (int64_t j = 0; j < d; ++j) mean[j] = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double* row = x + i * d;
    for (int64_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(m);
  for (int64_t j = 0; j < d; ++j) mean[j] *= inv;
}

void column_mean(int64_t m, int64_t d, const double* x, double* mean) {
  if (!parallel_enabled() || m * d < kMapParallelSize || d < 2) {
    column_mean_serial(m, d, x, mean);
    return;
  }
  const double inv = 1.0 / static_cast<double>(m);
#pragma omp parallel for schedule(static)
  for (int64_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (int64_t i = 0; i < m; ++i) acc += x[i * d + j];
    mean[j] = acc * inv;
  }
}

void column_var_serial(int64_t m, int64_t d, const double* x, const double* mean, double* var) {
  for (int64_t j = 0; j < d; ++j) var[j] = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double* row = x + i * d;
    for (int64_t j = 0; j < d; ++j) {
      const double dev = row[j] - mean[j];
      var[j] += dev * dev;
    }
  }
  const double inv = 1.0 / static_cast<double>(m);
  for (int64_t j = 0; j < d; ++j) var[j] *= inv;
}

void column_var(int64_t m, int64_t d, const double* x, const double* mean, double* var) {
  if (!parallel_enabled() || m * d < kMapParallelSize || d < 2) {
    column_var_serial(m, d, x, mean, var);
    return;
  }
  const double inv = 1.0 / static_cast<double>(m);
#pragma omp parallel for schedule(static)
  for (int64_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      const double dev = x[i * d + j] - mean[j];
      acc += dev * dev;
    }
    var[j] = acc * inv;
  }
}

void map_tanh_serial(int64_t n, const double* x, double* y) {
  for (int64_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

void map_tanh(int64_t n, const double* x, double* y) {
  if (!parallel_enabled() || n < kMapParallelSize) {
    map_tanh_serial(n, x, y);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

void map_sigmoid_serial(int64_t n, const double* x, double* y) {
  for (int64_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
}

void map_sigmoid(int64_t n, const double* x, double* y) {
  if (!parallel_enabled() || n < kMapParallelSize) {
    map_sigmoid_serial(n, x, y);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
}

}  // namespace bnlstm::kernels
