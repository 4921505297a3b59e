// Serial vs OpenMP kernel comparison at the shapes the model actually runs
// (projection/transition matmuls over a packed batch, attention logits,
// row-wise softmax and layer norm), plus one full training step.
//
//   ./ut_bench                       # everything
//   ./ut_bench --benchmark_filter=matmul

#include <benchmark/benchmark.h>

#include <vector>

#include "ut/kernels.hpp"
#include "ut/tasks.hpp"
#include "ut/tensor.hpp"
#include "ut/training.hpp"

namespace {

std::vector<double> random_vec(std::size_t n, ut::Rng& rng) {
  std::vector<double> v(n);
  for (auto& e : v) e = rng.uniform(-1.0, 1.0);
  return v;
}

// 416 rows = batch 32 of length-13 sequences packed together.
constexpr int kRows = 416;
constexpr int kWidth = 128;
constexpr int kHidden = 512;

void bm_matmul_serial(benchmark::State& state) {
  ut::Rng rng(1);
  const auto a = random_vec(static_cast<std::size_t>(kRows) * kWidth, rng);
  const auto b = random_vec(static_cast<std::size_t>(kWidth) * kHidden, rng);
  std::vector<double> c(static_cast<std::size_t>(kRows) * kHidden);
  for (auto _ : state) {
    ut::kernels::serial::matmul_nn(a.data(), b.data(), c.data(), kRows,
                                   kWidth, kHidden, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * kRows * kWidth * kHidden);
}
BENCHMARK(bm_matmul_serial);

void bm_matmul_omp(benchmark::State& state) {
  ut::Rng rng(1);
  const auto a = random_vec(static_cast<std::size_t>(kRows) * kWidth, rng);
  const auto b = random_vec(static_cast<std::size_t>(kWidth) * kHidden, rng);
  std::vector<double> c(static_cast<std::size_t>(kRows) * kHidden);
  for (auto _ : state) {
    ut::kernels::matmul_nn(a.data(), b.data(), c.data(), kRows, kWidth,
                           kHidden, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * kRows * kWidth * kHidden);
}
BENCHMARK(bm_matmul_omp);

void bm_matmul_nt_serial(benchmark::State& state) {
  ut::Rng rng(2);
  const auto a = random_vec(static_cast<std::size_t>(kRows) * kHidden, rng);
  const auto b = random_vec(static_cast<std::size_t>(kWidth) * kHidden, rng);
  std::vector<double> c(static_cast<std::size_t>(kRows) * kWidth);
  for (auto _ : state) {
    ut::kernels::serial::matmul_nt(a.data(), b.data(), c.data(), kRows,
                                   kHidden, kWidth, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * kRows * kWidth * kHidden);
}
BENCHMARK(bm_matmul_nt_serial);

void bm_matmul_nt_omp(benchmark::State& state) {
  ut::Rng rng(2);
  const auto a = random_vec(static_cast<std::size_t>(kRows) * kHidden, rng);
  const auto b = random_vec(static_cast<std::size_t>(kWidth) * kHidden, rng);
  std::vector<double> c(static_cast<std::size_t>(kRows) * kWidth);
  for (auto _ : state) {
    ut::kernels::matmul_nt(a.data(), b.data(), c.data(), kRows, kHidden,
                           kWidth, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * kRows * kWidth * kHidden);
}
BENCHMARK(bm_matmul_nt_omp);

void bm_layer_norm_serial(benchmark::State& state) {
  ut::Rng rng(3);
  const auto x = random_vec(static_cast<std::size_t>(kRows) * kWidth, rng);
  const auto g = random_vec(kWidth, rng);
  const auto b = random_vec(kWidth, rng);
  std::vector<double> y(x.size()), mean(kRows), inv(kRows);
  for (auto _ : state) {
    ut::kernels::serial::layer_norm(x.data(), g.data(), b.data(), 1e-6,
                                    y.data(), mean.data(), inv.data(), kRows,
                                    kWidth);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(bm_layer_norm_serial);

void bm_layer_norm_omp(benchmark::State& state) {
  ut::Rng rng(3);
  const auto x = random_vec(static_cast<std::size_t>(kRows) * kWidth, rng);
  const auto g = random_vec(kWidth, rng);
  const auto b = random_vec(kWidth, rng);
  std::vector<double> y(x.size()), mean(kRows), inv(kRows);
  for (auto _ : state) {
    ut::kernels::layer_norm(x.data(), g.data(), b.data(), 1e-6, y.data(),
                            mean.data(), inv.data(), kRows, kWidth);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(bm_layer_norm_omp);

void bm_softmax_serial(benchmark::State& state) {
  ut::Rng rng(4);
  const auto x = random_vec(static_cast<std::size_t>(kRows) * kRows, rng);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    ut::kernels::serial::softmax_rows(x.data(), y.data(), kRows, kRows);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(bm_softmax_serial);

void bm_softmax_omp(benchmark::State& state) {
  ut::Rng rng(4);
  const auto x = random_vec(static_cast<std::size_t>(kRows) * kRows, rng);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    ut::kernels::softmax_rows(x.data(), y.data(), kRows, kRows);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(bm_softmax_omp);

// One full optimization step of the desk-scale model (forward, backward,
// Adam) -- the number that actually decides training wall time.
void bm_train_step(benchmark::State& state) {
  ut::ModelConfig cfg;
  cfg.d = 128;
  cfg.heads = 4;
  cfg.t_max = 6;
  cfg.ff_hidden = 256;
  cfg.max_src_len = 16;
  cfg.max_tgt_len = 17;
  ut::Rng rng(5);
  ut::Parameters params = ut::Parameters::init(cfg, rng);
  ut::SampleStream stream({ut::TaskKind::kCopy, "bench", 1, 12, 12, 5});
  std::vector<ut::TaskSample> samples;
  int src_len = 0, tgt_len = 0;
  for (int i = 0; i < 32; ++i) {
    samples.push_back(stream.at(i));
    src_len = std::max(src_len, static_cast<int>(samples.back().src.size()));
    tgt_len = std::max(tgt_len, static_cast<int>(samples.back().tgt.size()));
  }
  ut::Batch batch = ut::make_batch(samples, src_len, tgt_len);
  ut::StepContext ctx;
  ctx.cfg = &cfg;
  ut::OptimState opt;
  for (auto _ : state) {
    ut::LossResult lr = ut::teacher_forced_loss(batch, params, ctx);
    ut::backward(lr.loss);
    ut::adam_step(params, opt, 1e-4);
    benchmark::DoNotOptimize(lr.nll);
  }
}
BENCHMARK(bm_train_step)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
