#pragma once

// Dense row-major kernels backing the tensor ops. Every kernel exists twice:
// the OpenMP version used in production and a serial twin under
// kernels::serial. Both share the per-row inner routines, so for a given
// build they produce bit-identical results regardless of thread count
// (each output element is accumulated in a fixed order by exactly one
// thread). The serial twins are what the kernel tests compare against and
// what the benchmark baseline measures.

#include <cstddef>

namespace ut::kernels {

// c[m x n] (+)= a[m x p] * b[p x n]
void matmul_nn(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate);

// c[m x n] (+)= a[m x p] * b[n x p]^T
void matmul_nt(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate);

// c[m x n] (+)= a[p x m]^T * b[p x n]
void matmul_tn(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate);

// Row-wise softmax with -inf entries treated as masked-out. Returns the
// index of the first row whose entries are all -inf, or -1 if every row is
// well-formed. y may alias x.
int softmax_rows(const double* x, double* y, int m, int n);

// dx[m x n] += softmax backward: dx_row = y_row * (g_row - <g_row, y_row>)
void softmax_rows_backward(const double* y, const double* g, double* dx,
                           int m, int n);

// Per-row normalization with population variance over the n features:
// y = (x - mean) / sqrt(var + eps) * gain + bias.
// mean[m] and inv_std[m] are written for the backward pass.
void layer_norm(const double* x, const double* gain, const double* bias,
                double eps, double* y, double* mean, double* inv_std, int m,
                int n);

// Accumulates dx, dgain, dbias from upstream g using saved mean/inv_std.
void layer_norm_backward(const double* x, const double* gain,
                         const double* mean, const double* inv_std,
                         const double* g, double* dx, double* dgain,
                         double* dbias, int m, int n);

namespace serial {

void matmul_nn(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate);
void matmul_nt(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate);
void matmul_tn(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate);
int softmax_rows(const double* x, double* y, int m, int n);
void softmax_rows_backward(const double* y, const double* g, double* dx,
                           int m, int n);
void layer_norm(const double* x, const double* gain, const double* bias,
                double eps, double* y, double* mean, double* inv_std, int m,
                int n);
void layer_norm_backward(const double* x, const double* gain,
                         const double* mean, const double* inv_std,
                         const double* g, double* dx, double* dgain,
                         double* dbias, int m, int n);

}  // namespace serial

}  // namespace ut::kernels
