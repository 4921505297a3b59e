#include "ut/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ut::kernels {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// c_row (+)= a_row[1 x p] * b[p x n]; k-major so the j loop vectorizes.
inline void nn_row(const double* a_row, const double* b, double* c_row, int p,
                   int n, bool accumulate) {
  if (!accumulate) std::fill(c_row, c_row + n, 0.0);
  for (int k = 0; k < p; ++k) {
    const double aik = a_row[k];
    const double* b_row = b + static_cast<std::size_t>(k) * n;
    for (int j = 0; j < n; ++j) c_row[j] += aik * b_row[j];
  }
}

// Eight accumulator lanes hide FMA latency and map onto one vector
// register; the split order is fixed, so results are reproducible run to
// run.
inline double dot8(const double* __restrict x, const double* __restrict y,
                   int p) {
  double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int k = 0;
  for (; k + 8 <= p; k += 8)
    for (int l = 0; l < 8; ++l) s[l] += x[k + l] * y[k + l];
  double tail = 0.0;
  for (; k < p; ++k) tail += x[k] * y[k];
  return (((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]))) +
         tail;
}

inline void nt_row(const double* a_row, const double* b, double* c_row, int p,
                   int n, bool accumulate) {
  for (int j = 0; j < n; ++j) {
    const double v = dot8(a_row, b + static_cast<std::size_t>(j) * p, p);
    c_row[j] = accumulate ? c_row[j] + v : v;
  }
}

// c_row = row i of a^T * b, i.e. c[i][j] = sum_k a[k][i] * b[k][j].
inline void tn_row(const double* a, const double* b, double* c_row, int i,
                   int p, int m, int n, bool accumulate) {
  if (!accumulate) std::fill(c_row, c_row + n, 0.0);
  for (int k = 0; k < p; ++k) {
    const double aki = a[static_cast<std::size_t>(k) * m + i];
    const double* b_row = b + static_cast<std::size_t>(k) * n;
    for (int j = 0; j < n; ++j) c_row[j] += aki * b_row[j];
  }
}

// Returns false if the row is entirely -inf.
inline bool softmax_row(const double* x, double* y, int n) {
  double mx = kNegInf;
  for (int j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  if (mx == kNegInf) return false;
  double sum = 0.0;
  for (int j = 0; j < n; ++j) {
    const double e = (x[j] == kNegInf) ? 0.0 : std::exp(x[j] - mx);
    y[j] = e;
    sum += e;
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < n; ++j) y[j] *= inv;
  return true;
}

inline void softmax_bwd_row(const double* y, const double* g, double* dx,
                            int n) {
  const double dot = dot8(g, y, n);
  for (int j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
}

inline void layer_norm_row(const double* x, const double* gain,
                           const double* bias, double eps, double* y,
                           double* mean, double* inv_std, int n) {
  double mu = 0.0;
  for (int j = 0; j < n; ++j) mu += x[j];
  mu /= n;
  double var = 0.0;
  for (int j = 0; j < n; ++j) {
    const double c = x[j] - mu;
    var += c * c;
  }
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (int j = 0; j < n; ++j) y[j] = (x[j] - mu) * inv * gain[j] + bias[j];
  *mean = mu;
  *inv_std = inv;
}

inline void layer_norm_bwd_row(const double* x, const double* gain,
                               double mean, double inv_std, const double* g,
                               double* dx, int n) {
  // dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
  double s1 = 0.0, s2 = 0.0;
  for (int j = 0; j < n; ++j) {
    const double xhat = (x[j] - mean) * inv_std;
    const double dxhat = g[j] * gain[j];
    s1 += dxhat;
    s2 += dxhat * xhat;
  }
  s1 /= n;
  s2 /= n;
  for (int j = 0; j < n; ++j) {
    const double xhat = (x[j] - mean) * inv_std;
    dx[j] += inv_std * (g[j] * gain[j] - s1 - xhat * s2);
  }
}

}  // namespace

void matmul_nn(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    nn_row(a + static_cast<std::size_t>(i) * p, b,
           c + static_cast<std::size_t>(i) * n, p, n, accumulate);
}

void matmul_nt(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    nt_row(a + static_cast<std::size_t>(i) * p, b,
           c + static_cast<std::size_t>(i) * n, p, n, accumulate);
}

void matmul_tn(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    tn_row(a, b, c + static_cast<std::size_t>(i) * n, i, p, m, n, accumulate);
}

int softmax_rows(const double* x, double* y, int m, int n) {
  int bad = -1;
#pragma omp parallel for schedule(static) if (m > 64)
  for (int i = 0; i < m; ++i) {
    if (!softmax_row(x + static_cast<std::size_t>(i) * n,
                     y + static_cast<std::size_t>(i) * n, n)) {
#pragma omp critical
      if (bad < 0 || i < bad) bad = i;
    }
  }
  return bad;
}

void softmax_rows_backward(const double* y, const double* g, double* dx,
                           int m, int n) {
#pragma omp parallel for schedule(static) if (m > 64)
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * n;
    softmax_bwd_row(y + off, g + off, dx + off, n);
  }
}

void layer_norm(const double* x, const double* gain, const double* bias,
                double eps, double* y, double* mean, double* inv_std, int m,
                int n) {
#pragma omp parallel for schedule(static) if (m > 64)
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * n;
    layer_norm_row(x + off, gain, bias, eps, y + off, mean + i, inv_std + i,
                   n);
  }
}

void layer_norm_backward(const double* x, const double* gain,
                         const double* mean, const double* inv_std,
                         const double* g, double* dx, double* dgain,
                         double* dbias, int m, int n) {
#pragma omp parallel for schedule(static) if (m > 64)
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * n;
    layer_norm_bwd_row(x + off, gain, mean[i], inv_std[i], g + off, dx + off,
                       n);
  }
  // gain/bias reductions stay serial so the accumulation order is fixed
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double xhat = (x[off + j] - mean[i]) * inv_std[i];
      dgain[j] += g[off + j] * xhat;
      dbias[j] += g[off + j];
    }
  }
}

namespace serial {

void matmul_nn(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate) {
  for (int i = 0; i < m; ++i)
    nn_row(a + static_cast<std::size_t>(i) * p, b,
           c + static_cast<std::size_t>(i) * n, p, n, accumulate);
}

void matmul_nt(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate) {
  for (int i = 0; i < m; ++i)
    nt_row(a + static_cast<std::size_t>(i) * p, b,
           c + static_cast<std::size_t>(i) * n, p, n, accumulate);
}

void matmul_tn(const double* a, const double* b, double* c, int m, int p,
               int n, bool accumulate) {
  for (int i = 0; i < m; ++i)
    tn_row(a, b, c + static_cast<std::size_t>(i) * n, i, p, m, n, accumulate);
}

int softmax_rows(const double* x, double* y, int m, int n) {
  for (int i = 0; i < m; ++i) {
    if (!softmax_row(x + static_cast<std::size_t>(i) * n,
                     y + static_cast<std::size_t>(i) * n, n))
      return i;
  }
  return -1;
}

void softmax_rows_backward(const double* y, const double* g, double* dx,
                           int m, int n) {
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * n;
    softmax_bwd_row(y + off, g + off, dx + off, n);
  }
}

void layer_norm(const double* x, const double* gain, const double* bias,
                double eps, double* y, double* mean, double* inv_std, int m,
                int n) {
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * n;
    layer_norm_row(x + off, gain, bias, eps, y + off, mean + i, inv_std + i,
                   n);
  }
}

void layer_norm_backward(const double* x, const double* gain,
                         const double* mean, const double* inv_std,
                         const double* g, double* dx, double* dgain,
                         double* dbias, int m, int n) {
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * n;
    layer_norm_bwd_row(x + off, gain, mean[i], inv_std[i], g + off, dx + off,
                       n);
    for (int j = 0; j < n; ++j) {
      const double xhat = (x[off + j] - mean[i]) * inv_std[i];
      dgain[j] += g[off + j] * xhat;
      dbias[j] += g[off + j];
    }
  }
}

}  // namespace serial

}  // namespace ut::kernels
