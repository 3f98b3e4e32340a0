#pragma once

#include <cstdint>

namespace bnlstm::kernels {

// Global switch between the OpenMP kernels and the serial reference path.
// Both paths produce bitwise-identical results (each output element is
// computed by exactly one thread with a fixed accumulation order); the
// switch exists for testing and for the kernel benchmark.
bool parallel_enabled();
void set_parallel(bool enabled);

// C[m x n] = A[m x k] @ B[k x n], row-major.
void gemm_nn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);
// C[m x n] += A[m x k] @ B[n x k]^T
void gemm_nt_acc(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);
// C[m x n] += A[k x m]^T @ B[k x n]
void gemm_tn_acc(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);

// Serial reference implementations (identical loop structure, no OpenMP).
void gemm_nn_serial(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);
void gemm_nt_acc_serial(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);
void gemm_tn_acc_serial(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);

// Naive triple-loop product, kept as an independent oracle for tests.
void gemm_naive(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);

// Per-column mean and biased variance over the rows of X[m x d].
void column_mean(int64_t m, int64_t d, const double* x, double* mean);
void column_var(int64_t m, int64_t d, const double* x, const double* mean, double* var);
void column_mean_serial(int64_t m, int64_t d, const double* x, double* mean);
void column_var_serial(int64_t m, int64_t d, const double* x, const double* mean, double* var);

// y[i] = f(x[i]); parallel above a size threshold.
void map_tanh(int64_t n, const double* x, double* y);
void map_sigmoid(int64_t n, const double* x, double* y);
void map_tanh_serial(int64_t n, const double* x, double* y);
void map_sigmoid_serial(int64_t n, const double* x, double* y);

}  // namespace bnlstm::kernels
