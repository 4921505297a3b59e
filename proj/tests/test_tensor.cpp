#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "ut/tensor.hpp"

using namespace ut;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

TensorPtr random_tensor(std::vector<int> shape, Rng& rng,
                        bool requires_grad = true) {
  std::size_t n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& e : v) e = rng.uniform(-1.5, 1.5);
  return tensor(std::move(shape), std::move(v), requires_grad);
}

// Central finite differences of `f` against the backward-pass gradient of
// every leaf, with a guarded relative error.
double max_fd_rel_err(const std::vector<TensorPtr>& leaves,
                      const std::function<TensorPtr()>& f, double h = 1e-5) {
  for (const auto& leaf : leaves) {
    leaf->ensure_grad();
    leaf->zero_grad();
  }
  auto loss = f();
  backward(loss);
  double worst = 0.0;
  for (const auto& leaf : leaves) {
    leaf->ensure_grad();
    for (std::size_t i = 0; i < leaf->size(); ++i) {
      const double orig = leaf->data[i];
      leaf->data[i] = orig + h;
      double up;
      {
        NoGradGuard g;
        up = f()->item();
      }
      leaf->data[i] = orig - h;
      double down;
      {
        NoGradGuard g;
        down = f()->item();
      }
      leaf->data[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = leaf->grad[i];
      const double rel =
          std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("rng streams are reproducible and documented") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  // first outputs of SplitMix64 with seed 0, from the reference algorithm
  Rng z(0);
  CHECK(z.next_u64() == 0xE220A8397B1DCDAFULL);
  CHECK(z.next_u64() == 0x6E789E6AA1B965F4ULL);
  CHECK(z.next_u64() == 0x06C45D188009454FULL);
  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.uniform_int(2, 5);
    CHECK(v >= 2);
    CHECK(v <= 5);
  }
}

TEST_CASE("matmul: identity, closed form, triple-loop oracle") {
  auto i2 = tensor({2, 2}, {1, 0, 0, 1});
  auto m = tensor({2, 2}, {1, 2, 3, 4});
  auto prod = matmul(i2, m);
  CHECK(prod->data == std::vector<double>{1, 2, 3, 4});

  auto row = tensor({1, 2}, {1, 2});
  auto col = tensor({2, 1}, {3, 4});
  CHECK(matmul(row, col)->item() == doctest::Approx(11.0));

  Rng rng(11);
  auto a = random_tensor({3, 4}, rng, false);
  auto b = random_tensor({4, 2}, rng, false);
  auto got = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a->data[i * 4 + k] * b->data[k * 2 + j];
      CHECK(std::abs(got->data[i * 2 + j] - s) < 1e-12);
    }

  CHECK_THROWS_WITH_AS(matmul(a, tensor({3, 2}, {0, 0, 0, 0, 0, 0})),
                       doctest::Contains("[3x4]"), config_error);
}

TEST_CASE("softmax_rows: symmetry, closed form, high-precision oracle") {
  auto u = softmax_rows(tensor({1, 3}, {0, 0, 0}));
  for (double v : u->data) CHECK(v == doctest::Approx(1.0 / 3));

  auto t = softmax_rows(tensor({1, 2}, {0.0, std::log(2.0)}));
  CHECK(t->data[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(t->data[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));

  Rng rng(12);
  std::vector<double> x(5);
  for (auto& e : x) e = rng.uniform(-3.0, 3.0);
  auto got = softmax_rows(tensor({1, 5}, x));
  long double mx = x[0];
  for (double e : x) mx = std::max<long double>(mx, e);
  long double sum = 0.0L;
  std::vector<long double> ex(5);
  for (int i = 0; i < 5; ++i) {
    ex[i] = expl(static_cast<long double>(x[i]) - mx);
    sum += ex[i];
  }
  for (int i = 0; i < 5; ++i)
    CHECK(std::abs(got->data[i] - static_cast<double>(ex[i] / sum)) < 1e-12);

  // rows sum to one, and shifting a row leaves it unchanged
  auto a = random_tensor({4, 6}, rng, false);
  auto sa = softmax_rows(a);
  for (int i = 0; i < 4; ++i) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += sa->data[i * 6 + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  auto shifted = a->data;
  for (int j = 0; j < 6; ++j) shifted[j] += 3.7;
  auto sb = softmax_rows(tensor({4, 6}, shifted));
  for (int j = 0; j < 6; ++j)
    CHECK(sb->data[j] == doctest::Approx(sa->data[j]).epsilon(1e-12));

  CHECK_THROWS_AS(softmax_rows(tensor({1, 2}, {kNegInf, kNegInf})),
                  config_error);
}

TEST_CASE("layer_norm: hand values and the direct formula") {
  auto gain = tensor({2}, {1, 1});
  auto bias = tensor({2}, {0, 0});
  auto y = layer_norm(tensor({1, 2}, {1, 3}), gain, bias, 0.0);
  CHECK(y->data[0] == doctest::Approx(-1.0));
  CHECK(y->data[1] == doctest::Approx(1.0));

  auto c = layer_norm(tensor({1, 2}, {5, 5}), gain, tensor({2}, {0.25, -1.0}),
                      1e-6);
  CHECK(c->data[0] == doctest::Approx(0.25));
  CHECK(c->data[1] == doctest::Approx(-1.0));

  Rng rng(13);
  const int d = 7;
  auto x = random_tensor({1, d}, rng, false);
  auto g7 = random_tensor({d}, rng, false);
  auto b7 = random_tensor({d}, rng, false);
  auto got = layer_norm(x, g7, b7, 1e-6);
  double mean = 0.0;
  for (double v : x->data) mean += v;
  mean /= d;
  double var = 0.0;
  for (double v : x->data) var += (v - mean) * (v - mean);
  var /= d;
  for (int j = 0; j < d; ++j) {
    const double want =
        (x->data[j] - mean) / std::sqrt(var + 1e-6) * g7->data[j] +
        b7->data[j];
    CHECK(std::abs(got->data[j] - want) < 1e-10);
  }
}

TEST_CASE("relu: values and the indicator gradient") {
  auto y = relu(tensor({1, 3}, {-1, 0, 2}));
  CHECK(y->data == std::vector<double>{0, 0, 2});
  auto z = relu(tensor({1, 3}, {-5, -0.1, -7}));
  CHECK(z->data == std::vector<double>{0, 0, 0});

  auto x = tensor({1, 2}, {-1, 2}, true);
  backward(sum_all(relu(x)));
  CHECK(x->grad == std::vector<double>{0, 1});
}

TEST_CASE("dropout: identity modes and survivor fraction") {
  Rng rng(21);
  auto x = random_tensor({10, 10}, rng, false);
  CHECK(dropout(x, 0.0, rng, true).get() == x.get());
  CHECK(dropout(x, 0.5, rng, false).get() == x.get());
  CHECK_THROWS_AS(dropout(x, 1.0, rng, true), config_error);

  auto big = full({400, 250}, 1.0);  // 1e5 elements
  auto dropped = dropout(big, 0.5, rng, true);
  long survivors = 0;
  for (double v : dropped->data)
    if (v != 0.0) {
      ++survivors;
      CHECK(v == doctest::Approx(2.0));
    }
  const double fraction = static_cast<double>(survivors) / 1e5;
  CHECK(fraction > 0.49);
  CHECK(fraction < 0.51);
}

TEST_CASE("backward: analytic gradients, accumulation, disconnected leaves") {
  auto x = tensor({1, 2}, {1, 2}, true);
  backward(sum_all(mul(x, x)));
  CHECK(x->grad == std::vector<double>{2, 4});
  // repeated calls accumulate
  backward(sum_all(mul(x, x)));
  CHECK(x->grad == std::vector<double>{4, 8});

  Rng rng(31);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({3, 2}, rng);
  CHECK(max_fd_rel_err({a, b}, [&] { return sum_all(matmul(a, b)); }) < 1e-6);

  auto lonely = tensor({1, 1}, {5.0}, true);
  backward(sum_all(mul(a, a)));
  CHECK(lonely->grad == std::vector<double>{0.0});

  CHECK_THROWS_AS(backward(matmul(a, b)), config_error);
}

TEST_CASE("finite differences cover every differentiable op") {
  Rng rng(41);
  SUBCASE("elementwise and broadcasts") {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto v = random_tensor({4}, rng);
    auto c = random_tensor({3}, rng);
    CHECK(max_fd_rel_err({a, b}, [&] {
            return sum_all(mul(add(a, b), sub(a, b)));
          }) < 1e-5);
    CHECK(max_fd_rel_err({a}, [&] {
            return sum_all(affine(sigmoid(a), 2.0, -0.5));
          }) < 1e-5);
    CHECK(max_fd_rel_err({a, v}, [&] {
            return sum_all(add_rowvec(a, v));
          }) < 1e-5);
    CHECK(max_fd_rel_err({a, c}, [&] {
            return sum_all(mul_colvec(a, c));
          }) < 1e-5);
  }
  SUBCASE("matrix ops") {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto bt = random_tensor({2, 4}, rng);
    CHECK(max_fd_rel_err({a, b}, [&] {
            return sum_all(sigmoid(matmul(a, b)));
          }) < 1e-5);
    CHECK(max_fd_rel_err({a, bt}, [&] {
            return sum_all(sigmoid(matmul_nt(a, bt)));
          }) < 1e-5);
  }
  SUBCASE("softmax and layer norm") {
    auto a = random_tensor({3, 5}, rng);
    auto w = random_tensor({3, 5}, rng);
    auto g = random_tensor({5}, rng);
    auto b = random_tensor({5}, rng);
    CHECK(max_fd_rel_err({a, w}, [&] {
            return sum_all(mul(softmax_rows(a), w));
          }) < 1e-5);
    CHECK(max_fd_rel_err({a, g, b}, [&] {
            return sum_all(mul(layer_norm(a, g, b, 1e-6), w));
          }) < 1e-5);
  }
  SUBCASE("structure ops") {
    auto a = random_tensor({4, 6}, rng);
    auto b = random_tensor({2, 6}, rng);
    auto k = random_tensor({6, 3}, rng);
    CHECK(max_fd_rel_err({a}, [&] {
            return sum_all(sigmoid(block(a, 1, 2, 2, 3)));
          }) < 1e-5);
    CHECK(max_fd_rel_err({a, b}, [&] {
            return sum_all(sigmoid(concat_rows({a, b})));
          }) < 1e-5);
    CHECK(max_fd_rel_err({a, b}, [&] {
            return sum_all(sigmoid(concat_cols({block(a, 0, 0, 2, 6), b})));
          }) < 1e-5);
    CHECK(max_fd_rel_err({a}, [&] {
            return sum_all(sigmoid(gather_rows(a, {0, 2, 2, 3})));
          }) < 1e-5);
    const std::vector<Segment> segs{{0, 4}};
    CHECK(max_fd_rel_err({a, k}, [&] {
            return sum_all(sigmoid(depthwise_conv1d(a, k, segs)));
          }) < 1e-5);
    CHECK(max_fd_rel_err({a, k}, [&] {
            return sum_all(sigmoid(depthwise_conv1d(a, k, segs, true)));
          }) < 1e-5);
  }
  SUBCASE("nll loss") {
    auto a = random_tensor({3, 5}, rng);
    const std::vector<int> targets{1, 4, 0};
    const std::vector<double> weights{1, 0, 1};
    CHECK(max_fd_rel_err({a}, [&] {
            return nll_from_probs(softmax_rows(a), targets, weights);
          }) < 1e-5);
    CHECK(max_fd_rel_err({a}, [&] {
            return nll_from_probs(softmax_rows(a), targets, weights, 0.1);
          }) < 1e-5);
  }
}

TEST_CASE("determinism: same seed, bit-identical forward and backward") {
  const auto run = [] {
    Rng rng(77);
    auto a = random_tensor({4, 4}, rng);
    auto b = random_tensor({4, 4}, rng);
    auto h = dropout(relu(matmul(a, b)), 0.3, rng, true);
    auto loss = sum_all(mul(h, h));
    backward(loss);
    return std::tuple{loss->item(), a->grad, b->grad};
  };
  const auto [l1, ga1, gb1] = run();
  const auto [l2, ga2, gb2] = run();
  CHECK(l1 == l2);
  CHECK(ga1 == ga2);
  CHECK(gb1 == gb2);
}

TEST_CASE("gather_rows rejects out-of-vocabulary ids") {
  auto table = tensor({3, 2}, {0, 1, 2, 3, 4, 5});
  CHECK_THROWS_WITH_AS(gather_rows(table, {0, 3}),
                       doctest::Contains("vocabulary"), config_error);
}
