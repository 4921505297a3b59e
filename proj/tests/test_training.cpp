#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ut/checkpoint.hpp"
#include "ut/tasks.hpp"
#include "ut/training.hpp"

using namespace ut;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("ut_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig smoke_config(const fs::path& out) {
  RunConfig cfg;
  cfg.model.d = 32;
  cfg.model.heads = 4;
  cfg.model.t_max = 2;
  cfg.model.ff_hidden = 64;
  cfg.model.vocab_size = vocab::kSize;
  cfg.model.max_src_len = 16;
  cfg.model.max_tgt_len = 17;
  cfg.task.name = "copy";
  cfg.task.train_min = 1;
  cfg.task.train_max = 6;
  cfg.task.eval_len = 9;
  cfg.optim.batch_size = 16;
  cfg.optim.steps = 200;
  cfg.optim.warmup = 100;
  cfg.optim.eval_every = 200;
  cfg.optim.eval_samples = 24;
  cfg.optim.log_every = 50;
  cfg.seed = 5;
  cfg.out_dir = out.string();
  return cfg;
}

}  // namespace

TEST_CASE("cross_entropy: uniform, one-hot, direct-sum oracle") {
  const int v = 14;
  auto uniform = full({3, v}, 1.0 / v);
  auto loss = cross_entropy(uniform, {5, 2, 9}, {1, 1, 1});
  CHECK(loss->item() == doctest::Approx(std::log(static_cast<double>(v))));

  std::vector<double> onehot(2 * v, 1e-300);
  onehot[0 * v + 4] = 1.0;
  onehot[1 * v + 7] = 1.0;
  auto zero = cross_entropy(tensor({2, v}, onehot), {4, 7}, {1, 1});
  CHECK(zero->item() == doctest::Approx(0.0));

  Rng rng(3);
  std::vector<double> logits(2 * v);
  for (auto& e : logits) e = rng.uniform(-2, 2);
  auto dist = softmax_rows(tensor({2, v}, logits));
  const std::vector<int> targets{3, 11};
  const std::vector<double> mask{1, 1};
  auto got = cross_entropy(dist, targets, mask);
  double want = 0.0;
  for (int i = 0; i < 2; ++i) want += -std::log(dist->data[i * v + targets[i]]);
  want /= 2.0;
  CHECK(got->item() == doctest::Approx(want).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(cross_entropy(dist, targets, {0, 0}),
                       doctest::Contains("masked"), config_error);
}

TEST_CASE("lr_schedule: ramp, knee, decay") {
  const int d = 64, warmup = 400;
  // both branches meet at the warmup knee
  CHECK(lr_schedule(warmup, d, warmup) ==
        doctest::Approx(std::pow(d, -0.5) * std::pow(warmup, -0.5)));
  // linear ramp far below warmup
  CHECK(lr_schedule(1, d, warmup) ==
        doctest::Approx(std::pow(d, -0.5) * std::pow(warmup, -1.5)));
  CHECK(lr_schedule(2, d, warmup) ==
        doctest::Approx(2.0 * lr_schedule(1, d, warmup)));
  // monotone decreasing afterwards
  double prev = lr_schedule(warmup, d, warmup);
  for (std::int64_t s = warmup + 1; s < warmup + 50; ++s) {
    const double now = lr_schedule(s, d, warmup);
    CHECK(now < prev);
    prev = now;
  }
  CHECK(lr_schedule(100, d, warmup, 2.0) ==
        doctest::Approx(2.0 * lr_schedule(100, d, warmup)));
}

TEST_CASE("adam_step: hand-evaluated updates") {
  ModelConfig mc;
  mc.d = 2;
  mc.heads = 1;
  mc.t_max = 1;
  mc.ff_hidden = 2;
  Rng rng(7);
  Parameters params = Parameters::init(mc, rng);
  OptimState opt;

  auto named = params.named();
  TensorPtr w = named[1].second;  // enc.0.self.wq
  const std::string wname = named[1].first;
  const double before = w->data[0];
  const double g = 0.37;
  const double lr = 1e-3, beta1 = 0.9, beta2 = 0.98, eps = 1e-9;
  for (auto& [n, t] : named) t->zero_grad();
  w->grad[0] = g;
  adam_step(params, opt, lr, beta1, beta2, eps);

  // oracle: bias-corrected first step moves by ~lr
  const double mhat = g;  // m/(1-beta1)
  const double vhat = g * g;
  const double want1 = lr * mhat / (std::sqrt(vhat) + eps);
  CHECK(before - w->data[0] == doctest::Approx(want1).epsilon(1e-12));
  CHECK(std::abs(before - w->data[0]) == doctest::Approx(lr).epsilon(1e-6));
  CHECK(w->grad[0] == 0.0);

  // zero grad with fresh moments leaves every parameter untouched
  {
    Rng rng0(7);
    Parameters p0 = Parameters::init(mc, rng0);
    OptimState opt0;
    const auto before0 = p0.named()[1].second->data;
    adam_step(p0, opt0, lr, beta1, beta2, eps);
    CHECK(p0.named()[1].second->data == before0);
  }

  // same gradient again: with bias correction the step size is unchanged
  // (hand evaluation: mhat and vhat are both exactly restored)
  OptimState opt2;
  Rng rng2(7);
  Parameters p2 = Parameters::init(mc, rng2);
  auto named2 = p2.named();
  TensorPtr w2 = named2[1].second;
  const double b0 = w2->data[0];
  w2->grad[0] = g;
  adam_step(p2, opt2, lr, beta1, beta2, eps);
  const double d1 = b0 - w2->data[0];
  const double b1 = w2->data[0];
  w2->grad[0] = g;
  adam_step(p2, opt2, lr, beta1, beta2, eps);
  const double d2 = b1 - w2->data[0];
  const double m2 = beta1 * (1 - beta1) * g + (1 - beta1) * g;
  const double v2 = beta2 * (1 - beta2) * g * g + (1 - beta2) * g * g;
  const double want2 = lr * (m2 / (1 - beta1 * beta1)) /
                       (std::sqrt(v2 / (1 - beta2 * beta2)) + eps);
  CHECK(d2 == doctest::Approx(want2).epsilon(1e-12));
  CHECK(d2 == doctest::Approx(d1).epsilon(1e-9));
  // the second moment damps the step once gradients change scale
  w2->grad[0] = g / 8;
  adam_step(p2, opt2, lr, beta1, beta2, eps);
  const double d3 = std::abs(w2->data[0] - (b1 - d2));
  CHECK(d3 < std::abs(d2));

  // non-finite gradients abort and name the parameter
  w->grad[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(adam_step(params, opt, lr),
                       doctest::Contains(wname.c_str()), std::runtime_error);
}

TEST_CASE("accuracy: exact counting") {
  // perfect
  auto [c1, s1] = accuracy({3, 4, 5}, {3, 4, 5}, {1, 1, 1}, 1, 3);
  CHECK(c1 == doctest::Approx(1.0));
  CHECK(s1 == doctest::Approx(1.0));
  // one wrong char in one of two length-5 sequences
  std::vector<int> gold(10, 7), pred(10, 7);
  pred[2] = 8;
  auto [c2, s2] = accuracy(pred, gold, std::vector<double>(10, 1.0), 2, 5);
  CHECK(c2 == doctest::Approx(0.9));
  CHECK(s2 == doctest::Approx(0.5));
  // all wrong
  auto [c3, s3] = accuracy({1, 1}, {2, 2}, {1, 1}, 1, 2);
  CHECK(c3 == doctest::Approx(0.0));
  CHECK(s3 == doctest::Approx(0.0));
  // masked cells are ignored
  auto [c4, s4] = accuracy({3, 9}, {3, 4}, {1, 0}, 1, 2);
  CHECK(c4 == doctest::Approx(1.0));
  CHECK(s4 == doctest::Approx(1.0));
}

TEST_CASE("teacher-forced loss starts near the uniform baseline") {
  RunConfig cfg = smoke_config(temp_dir("loss0"));
  Rng rng(cfg.seed);
  Parameters params = Parameters::init(cfg.model, rng);
  SampleStream stream({cfg.task.kind(), "train", 1, 6, 0, cfg.seed});
  std::vector<TaskSample> samples;
  for (int i = 0; i < 8; ++i) samples.push_back(stream.at(i));
  int src_len = 0, tgt_len = 0;
  for (const auto& s : samples) {
    src_len = std::max(src_len, static_cast<int>(s.src.size()));
    tgt_len = std::max(tgt_len, static_cast<int>(s.tgt.size()));
  }
  Batch b = make_batch(samples, src_len, tgt_len);
  StepContext ctx;
  ctx.cfg = &cfg.model;
  LossResult lr = teacher_forced_loss(b, params, ctx);
  CHECK(lr.nll > 1.0);
  CHECK(lr.nll < 2.0 * std::log(14.0));
}

TEST_CASE("train: smoke run learns, logs deterministically, steps=0 freezes") {
  const fs::path out1 = temp_dir("train1");
  RunConfig cfg = smoke_config(out1);
  TrainResult r1 = train(cfg);
  CHECK(r1.final_loss < std::log(14.0));  // strictly below uniform
  CHECK(fs::exists(out1 / "log.jsonl"));
  CHECK(fs::exists(out1 / "final.json"));
  CHECK(fs::exists(out1 / "final.bin"));
  CHECK(fs::exists(out1 / "config.json"));
  CHECK(r1.eval_in.seq_acc <= r1.eval_in.char_acc + 1e-12);

  // identical seed and config reproduce the log byte for byte
  const fs::path out2 = temp_dir("train2");
  RunConfig cfg2 = smoke_config(out2);
  TrainResult r2 = train(cfg2);
  CHECK(r1.final_loss == r2.final_loss);
  CHECK(slurp((out1 / "log.jsonl").string()) ==
        slurp((out2 / "log.jsonl").string()));

  // steps=0 writes the initialization
  const fs::path out0 = temp_dir("train0");
  RunConfig cfg0 = smoke_config(out0);
  cfg0.optim.steps = 0;
  TrainResult r0 = train(cfg0);
  LoadedCheckpoint ck = load_checkpoint((out0 / "final.json").string());
  Rng rng(cfg0.seed);
  Parameters fresh = Parameters::init(cfg0.model, rng);
  const auto a = ck.params.named();
  const auto b = fresh.named();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].second->size(); ++k)
      CHECK(a[i].second->data[k] ==
            static_cast<double>(static_cast<float>(b[i].second->data[k])));
}

TEST_CASE("evaluate: seq_acc never exceeds char_acc") {
  RunConfig cfg = smoke_config(temp_dir("eval"));
  cfg.optim.steps = 30;
  cfg.optim.eval_every = 0;
  TrainResult r = train(cfg);
  SampleStream in_stream({cfg.task.kind(), "eval_in", 1, 6, 0, cfg.seed});
  EvalReport rep = evaluate(r.params, in_stream, 32, 12);
  CHECK(rep.seq_acc <= rep.char_acc + 1e-12);
  CHECK(rep.samples == 32);
  int per_len_total = 0;
  for (const auto& ls : rep.per_length) per_len_total += ls.count;
  CHECK(per_len_total == 32);
}

TEST_CASE("grad_check covers the three spec configurations") {
  ModelConfig fc;
  fc.d = 8;
  fc.heads = 2;
  fc.t_max = 2;
  fc.max_src_len = 4;
  fc.max_tgt_len = 5;
  CHECK(grad_check(fc, 40).max_rel_err < 1e-4);

  ModelConfig conv = fc;
  conv.transition = TransitionKind::kSeparableConv;
  CHECK(grad_check(conv, 40).max_rel_err < 1e-4);

  ModelConfig act = fc;
  act.t_max = 3;
  act.act_enabled = true;
  CHECK(grad_check(act, 40).max_rel_err < 1e-4);
}
