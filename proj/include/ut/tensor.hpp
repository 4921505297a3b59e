#pragma once

// Dense double-precision tensors with reverse-mode differentiation. Ops
// record a backward closure on a DAG of shared_ptr nodes; backward() walks
// the graph in reverse topological order. All math is f64; graphs are
// rebuilt per step and freed when the root goes out of scope.

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ut {

// Raised for contract violations the caller can fix (shapes, config values).
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// SplitMix64. Fully specified so streams can be reproduced anywhere:
//   state += 0x9E3779B97F4A7C15
//   z = state; z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
//   z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31; return z
// uniform() takes the top 53 bits, giving a double in [0, 1).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive. Rejection sampling, no modulo
  // bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

 private:
  std::uint64_t state_;
};

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Node {
  std::vector<TensorPtr> parents;
  // Reads out.grad and accumulates into parents' grads.
  std::function<void(const Tensor& out)> backprop;
};

struct Tensor {
  std::vector<int> shape;     // row-major
  std::vector<double> data;
  std::vector<double> grad;   // allocated lazily; same length as data
  bool requires_grad = false; // leaf marker
  std::unique_ptr<Node> node; // present on op outputs inside a graph

  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  std::size_t size() const { return data.size(); }
  double item() const;
  bool in_graph() const { return requires_grad || node != nullptr; }
  void ensure_grad();
  void zero_grad();
};

std::string shape_str(const std::vector<int>& shape);

TensorPtr tensor(std::vector<int> shape, std::vector<double> data,
                 bool requires_grad = false);
TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
TensorPtr full(std::vector<int> shape, double value,
               bool requires_grad = false);
TensorPtr scalar(double value);
// Leaf parameter with entries drawn from U(-scale, scale).
TensorPtr uniform_param(std::vector<int> shape, double scale, Rng& rng);

// Disables graph recording for its lifetime (current thread).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// Builds an op output: records a node iff recording is enabled and some
// parent is part of a graph. Custom ops (attention, ACT) use this too.
TensorPtr
make_op(std::vector<int> shape, std::vector<double> data,
        std::vector<TensorPtr> parents,
        std::function<void(const Tensor&)> backprop);

// ---- elementwise ----
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
// alpha * x + beta, elementwise
TensorPtr affine(const TensorPtr& x, double alpha, double beta);
TensorPtr relu(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
// Inverted dropout: training mode zeroes entries with probability `rate` and
// scales survivors by 1/(1-rate); inference returns x unchanged.
TensorPtr dropout(const TensorPtr& x, double rate, Rng& rng, bool training);

// ---- matrix ----
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
// a[m x p] * b[n x p]^T
TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);
// x[m x n] + v[n] broadcast over rows
TensorPtr add_rowvec(const TensorPtr& x, const TensorPtr& v);
// x[m x n] * v[m] (or [m x 1]) broadcast over columns
TensorPtr mul_colvec(const TensorPtr& x, const TensorPtr& v);
TensorPtr softmax_rows(const TensorPtr& x);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain,
                     const TensorPtr& bias, double eps = 1e-6);

// ---- structure ----
TensorPtr block(const TensorPtr& x, int r0, int c0, int h, int w);
TensorPtr concat_rows(const std::vector<TensorPtr>& xs);
TensorPtr concat_cols(const std::vector<TensorPtr>& xs);
TensorPtr gather_rows(const TensorPtr& table, const std::vector<int>& ids);

// Depth-wise 1-D convolution along the row (position) axis, one kernel of
// odd width per feature column, zero padding so segments keep their length.
// Each (begin,len) segment is convolved independently; rows outside every
// segment produce zeros. `causal` left-pads instead (output row r sees rows
// r-K+1..r), for decoder use.
struct Segment {
  int begin = 0;
  int len = 0;
};
TensorPtr depthwise_conv1d(const TensorPtr& x, const TensorPtr& kernel,
                           const std::vector<Segment>& segments,
                           bool causal = false);

// ---- reductions / losses ----
TensorPtr sum_all(const TensorPtr& x);
// Weighted mean of -log probs[i, targets[i]] over rows with weight > 0.
// label_smoothing spreads that mass as (1-ls) on the target plus ls uniform.
TensorPtr nll_from_probs(const TensorPtr& probs, const std::vector<int>& targets,
                         const std::vector<double>& weights,
                         double label_smoothing = 0.0);

// Reverse-mode sweep from a scalar; accumulates into .grad of every tensor
// reached (repeated calls keep accumulating).
void backward(const TensorPtr& loss);

}  // namespace ut
