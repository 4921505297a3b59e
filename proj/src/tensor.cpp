#include "ut/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "ut/kernels.hpp"

namespace ut {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

thread_local bool g_grad_enabled = true;

std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw config_error("tensor extent must be positive, got " +
                                   shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw config_error(std::string(op) + ": shape mismatch " +
                       shape_str(a.shape) + " vs " + shape_str(b.shape));
}

void check_matrix(const Tensor& t, const char* op) {
  if (t.shape.size() != 2)
    throw config_error(std::string(op) + ": expected a matrix, got shape " +
                       shape_str(t.shape));
}

}  // namespace

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw config_error("uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next_u64());  // full range
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return lo + static_cast<std::int64_t>(v % span);
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

double Tensor::item() const {
  if (size() != 1)
    throw config_error("item(): tensor has shape " + shape_str(shape));
  return data[0];
}

void Tensor::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

TensorPtr tensor(std::vector<int> shape, std::vector<double> data,
                 bool requires_grad) {
  if (numel(shape) != data.size())
    throw config_error("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

TensorPtr zeros(std::vector<int> shape, bool requires_grad) {
  const std::size_t n = numel(shape);
  return tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

TensorPtr full(std::vector<int> shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return tensor(std::move(shape), std::vector<double>(n, value),
                requires_grad);
}

TensorPtr scalar(double value) { return tensor({1, 1}, {value}); }

TensorPtr uniform_param(std::vector<int> shape, double scale, Rng& rng) {
  const std::size_t n = numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = rng.uniform(-scale, scale);
  return tensor(std::move(shape), std::move(v), /*requires_grad=*/true);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

TensorPtr make_op(std::vector<int> shape, std::vector<double> data,
                  std::vector<TensorPtr> parents,
                  std::function<void(const Tensor&)> backprop) {
  auto out = tensor(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool record = false;
  for (const auto& p : parents)
    if (p && p->in_graph()) {
      record = true;
      break;
    }
  if (!record) return out;
  out->node = std::make_unique<Node>();
  out->node->parents = std::move(parents);
  out->node->backprop = std::move(backprop);
  return out;
}

// ---- elementwise ----

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(*a, *b, "add");
  std::vector<double> y(a->size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->data[i] + b->data[i];
  return make_op(a->shape, std::move(y), {a, b}, [a, b](const Tensor& out) {
    if (a->in_graph()) {
      a->ensure_grad();
      for (std::size_t i = 0; i < out.size(); ++i) a->grad[i] += out.grad[i];
    }
    if (b->in_graph()) {
      b->ensure_grad();
      for (std::size_t i = 0; i < out.size(); ++i) b->grad[i] += out.grad[i];
    }
  });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(*a, *b, "sub");
  std::vector<double> y(a->size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->data[i] - b->data[i];
  return make_op(a->shape, std::move(y), {a, b}, [a, b](const Tensor& out) {
    if (a->in_graph()) {
      a->ensure_grad();
      for (std::size_t i = 0; i < out.size(); ++i) a->grad[i] += out.grad[i];
    }
    if (b->in_graph()) {
      b->ensure_grad();
      for (std::size_t i = 0; i < out.size(); ++i) b->grad[i] -= out.grad[i];
    }
  });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(*a, *b, "mul");
  std::vector<double> y(a->size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->data[i] * b->data[i];
  return make_op(a->shape, std::move(y), {a, b}, [a, b](const Tensor& out) {
    if (a->in_graph()) {
      a->ensure_grad();
      for (std::size_t i = 0; i < out.size(); ++i)
        a->grad[i] += out.grad[i] * b->data[i];
    }
    if (b->in_graph()) {
      b->ensure_grad();
      for (std::size_t i = 0; i < out.size(); ++i)
        b->grad[i] += out.grad[i] * a->data[i];
    }
  });
}

TensorPtr affine(const TensorPtr& x, double alpha, double beta) {
  std::vector<double> y(x->size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = alpha * x->data[i] + beta;
  return make_op(x->shape, std::move(y), {x}, [x, alpha](const Tensor& out) {
    if (!x->in_graph()) return;
    x->ensure_grad();
    for (std::size_t i = 0; i < out.size(); ++i)
      x->grad[i] += alpha * out.grad[i];
  });
}

TensorPtr relu(const TensorPtr& x) {
  std::vector<double> y(x->size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::max(0.0, x->data[i]);
  return make_op(x->shape, std::move(y), {x}, [x](const Tensor& out) {
    if (!x->in_graph()) return;
    x->ensure_grad();
    // subgradient at 0 is 0
    for (std::size_t i = 0; i < out.size(); ++i)
      if (x->data[i] > 0.0) x->grad[i] += out.grad[i];
  });
}

TensorPtr sigmoid(const TensorPtr& x) {
  std::vector<double> y(x->size());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = 1.0 / (1.0 + std::exp(-x->data[i]));
  return make_op(x->shape, std::move(y), {x}, [x](const Tensor& out) {
    if (!x->in_graph()) return;
    x->ensure_grad();
    for (std::size_t i = 0; i < out.size(); ++i)
      x->grad[i] += out.grad[i] * out.data[i] * (1.0 - out.data[i]);
  });
}

TensorPtr dropout(const TensorPtr& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw config_error("dropout: rate must be in [0,1), got " +
                       std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x->size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
  std::vector<double> y(x->size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x->data[i] * mask[i];
  return make_op(x->shape, std::move(y), {x},
                 [x, mask = std::move(mask)](const Tensor& out) {
                   if (!x->in_graph()) return;
                   x->ensure_grad();
                   for (std::size_t i = 0; i < out.size(); ++i)
                     x->grad[i] += out.grad[i] * mask[i];
                 });
}

// ---- matrix ----

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  check_matrix(*a, "matmul");
  check_matrix(*b, "matmul");
  if (a->cols() != b->rows())
    throw config_error("matmul: inner extents disagree, " +
                       shape_str(a->shape) + " * " + shape_str(b->shape));
  const int m = a->rows(), p = a->cols(), n = b->cols();
  std::vector<double> y(static_cast<std::size_t>(m) * n);
  kernels::matmul_nn(a->data.data(), b->data.data(), y.data(), m, p, n,
                     false);
  return make_op({m, n}, std::move(y), {a, b},
                 [a, b, m, p, n](const Tensor& out) {
                   if (a->in_graph()) {
                     a->ensure_grad();
                     kernels::matmul_nt(out.grad.data(), b->data.data(),
                                       a->grad.data(), m, n, p, true);
                   }
                   if (b->in_graph()) {
                     b->ensure_grad();
                     kernels::matmul_tn(a->data.data(), out.grad.data(),
                                       b->grad.data(), p, m, n, true);
                   }
                 });
}

TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
  check_matrix(*a, "matmul_nt");
  check_matrix(*b, "matmul_nt");
  if (a->cols() != b->cols())
    throw config_error("matmul_nt: inner extents disagree, " +
                       shape_str(a->shape) + " * " + shape_str(b->shape) +
                       "^T");
  const int m = a->rows(), p = a->cols(), n = b->rows();
  std::vector<double> y(static_cast<std::size_t>(m) * n);
  kernels::matmul_nt(a->data.data(), b->data.data(), y.data(), m, p, n,
                     false);
  return make_op({m, n}, std::move(y), {a, b},
                 [a, b, m, p, n](const Tensor& out) {
                   // y = a b^T: da += g b ; db += g^T a
                   if (a->in_graph()) {
                     a->ensure_grad();
                     kernels::matmul_nn(out.grad.data(), b->data.data(),
                                       a->grad.data(), m, n, p, true);
                   }
                   if (b->in_graph()) {
                     b->ensure_grad();
                     kernels::matmul_tn(out.grad.data(), a->data.data(),
                                       b->grad.data(), n, m, p, true);
                   }
                 });
}

TensorPtr add_rowvec(const TensorPtr& x, const TensorPtr& v) {
  check_matrix(*x, "add_rowvec");
  const int m = x->rows(), n = x->cols();
  if (static_cast<int>(v->size()) != n)
    throw config_error("add_rowvec: vector " + shape_str(v->shape) +
                       " does not match row width of " + shape_str(x->shape));
  std::vector<double> y(x->size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * n + j;
      y[k] = x->data[k] + v->data[j];
    }
  return make_op(x->shape, std::move(y), {x, v},
                 [x, v, m, n](const Tensor& out) {
                   if (x->in_graph()) {
                     x->ensure_grad();
                     for (std::size_t i = 0; i < out.size(); ++i)
                       x->grad[i] += out.grad[i];
                   }
                   if (v->in_graph()) {
                     v->ensure_grad();
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < n; ++j)
                         v->grad[j] +=
                             out.grad[static_cast<std::size_t>(i) * n + j];
                   }
                 });
}

TensorPtr mul_colvec(const TensorPtr& x, const TensorPtr& v) {
  check_matrix(*x, "mul_colvec");
  const int m = x->rows(), n = x->cols();
  if (static_cast<int>(v->size()) != m)
    throw config_error("mul_colvec: vector " + shape_str(v->shape) +
                       " does not match row count of " + shape_str(x->shape));
  std::vector<double> y(x->size());
  for (int i = 0; i < m; ++i) {
    const double s = v->data[i];
    for (int j = 0; j < n; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * n + j;
      y[k] = x->data[k] * s;
    }
  }
  return make_op(x->shape, std::move(y), {x, v},
                 [x, v, m, n](const Tensor& out) {
                   if (x->in_graph()) {
                     x->ensure_grad();
                     for (int i = 0; i < m; ++i) {
                       const double s = v->data[i];
                       for (int j = 0; j < n; ++j) {
                         const std::size_t k =
                             static_cast<std::size_t>(i) * n + j;
                         x->grad[k] += out.grad[k] * s;
                       }
                     }
                   }
                   if (v->in_graph()) {
                     v->ensure_grad();
                     for (int i = 0; i < m; ++i) {
                       double s = 0.0;
                       for (int j = 0; j < n; ++j) {
                         const std::size_t k =
                             static_cast<std::size_t>(i) * n + j;
                         s += out.grad[k] * x->data[k];
                       }
                       v->grad[i] += s;
                     }
                   }
                 });
}

TensorPtr softmax_rows(const TensorPtr& x) {
  check_matrix(*x, "softmax_rows");
  const int m = x->rows(), n = x->cols();
  std::vector<double> y(x->size());
  const int bad = kernels::softmax_rows(x->data.data(), y.data(), m, n);
  if (bad >= 0)
    throw config_error("softmax_rows: row " + std::to_string(bad) +
                       " is entirely -inf");
  return make_op(x->shape, std::move(y), {x}, [x, m, n](const Tensor& out) {
    if (!x->in_graph()) return;
    x->ensure_grad();
    kernels::softmax_rows_backward(out.data.data(), out.grad.data(),
                                   x->grad.data(), m, n);
  });
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain,
                     const TensorPtr& bias, double eps) {
  check_matrix(*x, "layer_norm");
  const int m = x->rows(), n = x->cols();
  if (static_cast<int>(gain->size()) != n ||
      static_cast<int>(bias->size()) != n)
    throw config_error("layer_norm: gain/bias must have " +
                       std::to_string(n) + " entries");
  std::vector<double> y(x->size());
  auto mean = std::make_shared<std::vector<double>>(m);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  kernels::layer_norm(x->data.data(), gain->data.data(), bias->data.data(),
                      eps, y.data(), mean->data(), inv_std->data(), m, n);
  return make_op(x->shape, std::move(y), {x, gain, bias},
                 [x, gain, bias, mean, inv_std, m, n](const Tensor& out) {
                   x->ensure_grad();
                   gain->ensure_grad();
                   bias->ensure_grad();
                   kernels::layer_norm_backward(
                       x->data.data(), gain->data.data(), mean->data(),
                       inv_std->data(), out.grad.data(), x->grad.data(),
                       gain->grad.data(), bias->grad.data(), m, n);
                 });
}

// ---- structure ----

TensorPtr block(const TensorPtr& x, int r0, int c0, int h, int w) {
  check_matrix(*x, "block");
  const int m = x->rows(), n = x->cols();
  if (r0 < 0 || c0 < 0 || h < 1 || w < 1 || r0 + h > m || c0 + w > n)
    throw config_error("block: [" + std::to_string(r0) + "," +
                       std::to_string(c0) + "]+" + std::to_string(h) + "x" +
                       std::to_string(w) + " outside " + shape_str(x->shape));
  std::vector<double> y(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      y[static_cast<std::size_t>(i) * w + j] =
          x->data[static_cast<std::size_t>(r0 + i) * n + (c0 + j)];
  return make_op({h, w}, std::move(y), {x},
                 [x, r0, c0, h, w, n](const Tensor& out) {
                   if (!x->in_graph()) return;
                   x->ensure_grad();
                   for (int i = 0; i < h; ++i)
                     for (int j = 0; j < w; ++j)
                       x->grad[static_cast<std::size_t>(r0 + i) * n +
                               (c0 + j)] +=
                           out.grad[static_cast<std::size_t>(i) * w + j];
                 });
}

TensorPtr concat_rows(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw config_error("concat_rows: no inputs");
  const int n = xs[0]->cols();
  int m = 0;
  for (const auto& x : xs) {
    check_matrix(*x, "concat_rows");
    if (x->cols() != n)
      throw config_error("concat_rows: column mismatch " +
                         shape_str(xs[0]->shape) + " vs " +
                         shape_str(x->shape));
    m += x->rows();
  }
  std::vector<double> y;
  y.reserve(static_cast<std::size_t>(m) * n);
  for (const auto& x : xs) y.insert(y.end(), x->data.begin(), x->data.end());
  std::vector<TensorPtr> parents(xs.begin(), xs.end());
  return make_op({m, n}, std::move(y), std::move(parents),
                 [xs, n](const Tensor& out) {
                   std::size_t off = 0;
                   for (const auto& x : xs) {
                     const std::size_t cnt = x->size();
                     if (x->in_graph()) {
                       x->ensure_grad();
                       for (std::size_t i = 0; i < cnt; ++i)
                         x->grad[i] += out.grad[off + i];
                     }
                     off += cnt;
                   }
                   (void)n;
                 });
}

TensorPtr concat_cols(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw config_error("concat_cols: no inputs");
  const int m = xs[0]->rows();
  int n = 0;
  for (const auto& x : xs) {
    check_matrix(*x, "concat_cols");
    if (x->rows() != m)
      throw config_error("concat_cols: row mismatch " +
                         shape_str(xs[0]->shape) + " vs " +
                         shape_str(x->shape));
    n += x->cols();
  }
  std::vector<double> y(static_cast<std::size_t>(m) * n);
  int c0 = 0;
  for (const auto& x : xs) {
    const int w = x->cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        y[static_cast<std::size_t>(i) * n + c0 + j] =
            x->data[static_cast<std::size_t>(i) * w + j];
    c0 += w;
  }
  std::vector<TensorPtr> parents(xs.begin(), xs.end());
  return make_op({m, n}, std::move(y), std::move(parents),
                 [xs, m, n](const Tensor& out) {
                   int c0 = 0;
                   for (const auto& x : xs) {
                     const int w = x->cols();
                     if (x->in_graph()) {
                       x->ensure_grad();
                       for (int i = 0; i < m; ++i)
                         for (int j = 0; j < w; ++j)
                           x->grad[static_cast<std::size_t>(i) * w + j] +=
                               out.grad[static_cast<std::size_t>(i) * n + c0 +
                                        j];
                     }
                     c0 += w;
                   }
                 });
}

TensorPtr gather_rows(const TensorPtr& table, const std::vector<int>& ids) {
  check_matrix(*table, "gather_rows");
  const int v = table->rows(), d = table->cols();
  for (int id : ids)
    if (id < 0 || id >= v)
      throw config_error("gather_rows: id " + std::to_string(id) +
                         " outside vocabulary of size " + std::to_string(v));
  const int m = static_cast<int>(ids.size());
  std::vector<double> y(static_cast<std::size_t>(m) * d);
  for (int i = 0; i < m; ++i)
    std::copy_n(table->data.begin() + static_cast<std::size_t>(ids[i]) * d, d,
                y.begin() + static_cast<std::size_t>(i) * d);
  return make_op({m, d}, std::move(y), {table},
                 [table, ids, d](const Tensor& out) {
                   if (!table->in_graph()) return;
                   table->ensure_grad();
                   for (std::size_t i = 0; i < ids.size(); ++i) {
                     double* dst =
                         table->grad.data() +
                         static_cast<std::size_t>(ids[i]) * d;
                     const double* src = out.grad.data() + i * d;
                     for (int j = 0; j < d; ++j) dst[j] += src[j];
                   }
                 });
}

TensorPtr depthwise_conv1d(const TensorPtr& x, const TensorPtr& kernel,
                           const std::vector<Segment>& segments, bool causal) {
  check_matrix(*x, "depthwise_conv1d");
  check_matrix(*kernel, "depthwise_conv1d");
  const int m = x->rows(), d = x->cols(), kw = kernel->cols();
  if (kernel->rows() != d)
    throw config_error("depthwise_conv1d: kernel " + shape_str(kernel->shape) +
                       " does not match feature count " + std::to_string(d));
  if (kw % 2 == 0)
    throw config_error("depthwise_conv1d: kernel width must be odd, got " +
                       std::to_string(kw));
  for (const auto& s : segments)
    if (s.begin < 0 || s.len < 1 || s.begin + s.len > m)
      throw config_error("depthwise_conv1d: segment outside " +
                         shape_str(x->shape));
  // Centered taps use offsets -h..h; causal taps use -(kw-1)..0.
  const int half = kw / 2;
  const int lo = causal ? -(kw - 1) : -half;
  std::vector<double> y(x->size(), 0.0);
  for (const auto& s : segments) {
    for (int r = 0; r < s.len; ++r) {
      double* out_row =
          y.data() + static_cast<std::size_t>(s.begin + r) * d;
      for (int t = 0; t < kw; ++t) {
        const int src = r + lo + t;
        if (src < 0 || src >= s.len) continue;
        const double* in_row =
            x->data.data() + static_cast<std::size_t>(s.begin + src) * d;
        const double* k_col = kernel->data.data();
        for (int c = 0; c < d; ++c)
          out_row[c] += in_row[c] * k_col[static_cast<std::size_t>(c) * kw + t];
      }
    }
  }
  return make_op(x->shape, std::move(y), {x, kernel},
                 [x, kernel, segments, d, kw, lo](const Tensor& out) {
                   const bool gx = x->in_graph(), gk = kernel->in_graph();
                   if (gx) x->ensure_grad();
                   if (gk) kernel->ensure_grad();
                   for (const auto& s : segments) {
                     for (int r = 0; r < s.len; ++r) {
                       const double* g =
                           out.grad.data() +
                           static_cast<std::size_t>(s.begin + r) * d;
                       for (int t = 0; t < kw; ++t) {
                         const int src = r + lo + t;
                         if (src < 0 || src >= s.len) continue;
                         const std::size_t src_off =
                             static_cast<std::size_t>(s.begin + src) * d;
                         for (int c = 0; c < d; ++c) {
                           const std::size_t kidx =
                               static_cast<std::size_t>(c) * kw + t;
                           if (gx)
                             x->grad[src_off + c] +=
                                 g[c] * kernel->data[kidx];
                           if (gk)
                             kernel->grad[kidx] +=
                                 g[c] * x->data[src_off + c];
                         }
                       }
                     }
                   }
                 });
}

// ---- reductions / losses ----

TensorPtr sum_all(const TensorPtr& x) {
  double s = 0.0;
  for (double v : x->data) s += v;
  return make_op({1, 1}, {s}, {x}, [x](const Tensor& out) {
    if (!x->in_graph()) return;
    x->ensure_grad();
    const double g = out.grad[0];
    for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += g;
  });
}

TensorPtr nll_from_probs(const TensorPtr& probs, const std::vector<int>& targets,
                         const std::vector<double>& weights,
                         double label_smoothing) {
  check_matrix(*probs, "nll_from_probs");
  const int m = probs->rows(), v = probs->cols();
  if (static_cast<int>(targets.size()) != m ||
      static_cast<int>(weights.size()) != m)
    throw config_error("nll_from_probs: expected " + std::to_string(m) +
                       " targets/weights");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0)
    throw config_error("nll_from_probs: every position is masked out");
  const double ls = label_smoothing;
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    if (weights[i] == 0.0) continue;
    const int t = targets[i];
    if (t < 0 || t >= v)
      throw config_error("nll_from_probs: target " + std::to_string(t) +
                         " outside vocabulary of size " + std::to_string(v));
    const double* row = probs->data.data() + static_cast<std::size_t>(i) * v;
    double li = -(1.0 - ls) * std::log(row[t]);
    if (ls > 0.0) {
      double acc = 0.0;
      for (int j = 0; j < v; ++j) acc += std::log(row[j]);
      li -= ls / v * acc;
    }
    loss += weights[i] * li;
  }
  loss /= wsum;
  return make_op(
      {1, 1}, {loss}, {probs},
      [probs, targets, weights, wsum, ls, m, v](const Tensor& out) {
        if (!probs->in_graph()) return;
        probs->ensure_grad();
        const double g = out.grad[0] / wsum;
        for (int i = 0; i < m; ++i) {
          if (weights[i] == 0.0) continue;
          const std::size_t off = static_cast<std::size_t>(i) * v;
          probs->grad[off + targets[i]] -=
              g * weights[i] * (1.0 - ls) / probs->data[off + targets[i]];
          if (ls > 0.0)
            for (int j = 0; j < v; ++j)
              probs->grad[off + j] -=
                  g * weights[i] * ls / v / probs->data[off + j];
        }
      });
}

void backward(const TensorPtr& loss) {
  if (!loss) throw config_error("backward: null tensor");
  if (loss->size() != 1)
    throw config_error("backward: loss must be a scalar, got shape " +
                       shape_str(loss->shape));
  // Iterative post-order DFS; the reversed finish order is topological.
  std::vector<Tensor*> order;
  std::unordered_set<Tensor*> visited;
  struct Frame {
    Tensor* t;
    std::size_t next_child;
  };
  std::vector<Frame> stack;
  if (loss->node) {
    stack.push_back({loss.get(), 0});
    visited.insert(loss.get());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    Tensor* t = f.t;
    const auto& parents = t->node->parents;
    bool descended = false;
    while (f.next_child < parents.size()) {
      Tensor* p = parents[f.next_child++].get();
      if (p && p->node && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
        descended = true;
        break;
      }
    }
    if (!descended) {
      order.push_back(t);
      stack.pop_back();
    }
  }
  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor* t = *it;
    t->ensure_grad();
    t->node->backprop(*t);
  }
}

}  // namespace ut
