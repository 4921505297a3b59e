#include "ut/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"
#include "ut/act.hpp"
#include "ut/checkpoint.hpp"

namespace ut {

using nlohmann::json;
namespace fs = std::filesystem;

TensorPtr cross_entropy(const TensorPtr& dist, const std::vector<int>& targets,
                        const std::vector<double>& mask,
                        double label_smoothing) {
  return nll_from_probs(dist, targets, mask, label_smoothing);
}

double lr_schedule(std::int64_t step, int d, int warmup, double base) {
  if (warmup < 1) throw config_error("lr_schedule: warmup must be >= 1");
  if (step < 1) throw config_error("lr_schedule: step must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return base / std::sqrt(static_cast<double>(d)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

void adam_step(Parameters& params, OptimState& opt, double lr, double beta1,
               double beta2, double eps) {
  opt.step += 1;
  const double at = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(beta1, at);
  const double bc2 = 1.0 - std::pow(beta2, at);
  for (auto& [name, t] : params.named()) {
    t->ensure_grad();
    auto& mom = opt.moments[name];
    if (mom.m.empty()) {
      mom.m.assign(t->size(), 0.0);
      mom.v.assign(t->size(), 0.0);
    }
    double* g = t->grad.data();
    double* m = mom.m.data();
    double* v = mom.v.data();
    double* x = t->data.data();
    const std::size_t n = t->size();
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(g[i]))
        throw std::runtime_error("adam_step: non-finite gradient in '" + name +
                                 "' at entry " + std::to_string(i));
#pragma omp parallel for schedule(static) if (n > 16384)
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      g[i] = 0.0;
    }
  }
}

std::pair<double, double> accuracy(const std::vector<int>& pred,
                                   const std::vector<int>& gold,
                                   const std::vector<double>& mask, int rows,
                                   int len) {
  const std::size_t total = static_cast<std::size_t>(rows) * len;
  if (pred.size() != total || gold.size() != total || mask.size() != total)
    throw config_error("accuracy: shapes are not aligned");
  long match = 0, cells = 0, seq_ok = 0;
  for (int r = 0; r < rows; ++r) {
    bool all = true;
    for (int c = 0; c < len; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * len + c;
      if (mask[i] <= 0.0) continue;
      ++cells;
      if (pred[i] == gold[i])
        ++match;
      else
        all = false;
    }
    if (all) ++seq_ok;
  }
  if (cells == 0) return {0.0, 0.0};
  return {static_cast<double>(match) / cells,
          static_cast<double>(seq_ok) / rows};
}

namespace {

PackedSeq src_of(const Batch& b) {
  PackedSeq s;
  s.batch = b.batch;
  s.len = b.src_len;
  s.tokens = b.src;
  s.real_len = b.src_real_len;
  s.offsets = b.offsets;
  return s;
}

PackedSeq tgt_of(const Batch& b) {
  PackedSeq s;
  s.batch = b.batch;
  s.len = b.tgt_len;
  s.tokens = b.tgt_in;
  s.real_len = b.tgt_real_len;
  s.offsets = b.offsets;
  return s;
}

// tau * mean over real positions of (n_updates + remainders); the counts
// are constants, so only the remainders carry gradient.
TensorPtr ponder_cost(const StackResult& stack,
                      const std::vector<double>& real_mask, double tau) {
  double n_real = 0.0, updates = 0.0;
  for (std::size_t i = 0; i < real_mask.size(); ++i) {
    if (real_mask[i] <= 0.0) continue;
    n_real += 1.0;
    updates += stack.ponder[i];
  }
  auto mask = tensor({static_cast<int>(real_mask.size()), 1},
                     std::vector<double>(real_mask));
  auto rem_sum = sum_all(mul(stack.remainders_graph, mask));
  return affine(rem_sum, tau / n_real, tau * updates / n_real);
}

}  // namespace

LossResult teacher_forced_loss(const Batch& batch, const Parameters& params,
                               const StepContext& ctx,
                               double label_smoothing) {
  LossResult r;
  const PackedSeq src = src_of(batch);
  const PackedSeq tgt = tgt_of(batch);
  r.enc = run_encoder(src, params, ctx);
  r.dec = run_decoder(tgt, r.enc, src, params, ctx);
  auto dist = output_distribution(r.dec.h, params.output_proj);
  auto nll = cross_entropy(dist, batch.tgt_out, batch.tgt_mask,
                           label_smoothing);
  r.nll = nll->item();
  r.loss = nll;
  const double tau = params.cfg.act_ponder_tau;
  if (params.cfg.act_enabled && tau > 0.0) {
    r.loss = add(r.loss, ponder_cost(r.enc, src.real_mask(), tau));
    r.loss = add(r.loss, ponder_cost(r.dec, tgt.real_mask(), tau));
  }
  return r;
}

EvalReport evaluate(const Parameters& params, const SampleStream& stream,
                    int n, int max_decode_len) {
  NoGradGuard no_grad;
  StepContext ctx;
  ctx.cfg = &params.cfg;

  EvalReport report;
  report.split = stream.spec().split;
  report.samples = n;

  std::vector<TaskSample> samples;
  samples.reserve(n);
  int tgt_len = 0;
  for (int i = 0; i < n; ++i) {
    samples.push_back(stream.at(i));
    samples.back().offset = 0;  // evaluation uses unshifted positions
    tgt_len = std::max(tgt_len, static_cast<int>(samples.back().tgt.size()));
  }

  std::vector<int> pred_mat(static_cast<std::size_t>(n) * tgt_len, vocab::kPad);
  std::vector<int> gold_mat(static_cast<std::size_t>(n) * tgt_len, vocab::kPad);
  std::vector<double> mask(static_cast<std::size_t>(n) * tgt_len, 0.0);

  double loss_weighted = 0.0, loss_weight = 0.0;
  double ponder_sum = 0.0, ponder_sq = 0.0;
  long ponder_n = 0;

  const int chunk = 64;
  for (int lo = 0; lo < n; lo += chunk) {
    const int hi = std::min(n, lo + chunk);
    std::vector<TaskSample> part(samples.begin() + lo, samples.begin() + hi);
    std::vector<std::vector<int>> srcs;
    int src_len = 0, part_tgt_len = 0;
    for (const auto& s : part) {
      srcs.push_back(s.src);
      src_len = std::max(src_len, static_cast<int>(s.src.size()));
      part_tgt_len = std::max(part_tgt_len, static_cast<int>(s.tgt.size()));
    }
    // teacher-forced loss on the references
    Batch b = make_batch(part, src_len, part_tgt_len);
    LossResult lr = teacher_forced_loss(b, params, ctx, 0.0);
    double wsum = 0.0;
    for (double w : b.tgt_mask) wsum += w;
    loss_weighted += lr.nll * wsum;
    loss_weight += wsum;
    if (params.cfg.act_enabled) {
      report.has_ponder = true;
      const auto rm = src_of(b).real_mask();
      for (std::size_t i = 0; i < rm.size(); ++i) {
        if (rm[i] <= 0.0) continue;
        ponder_sum += lr.enc.ponder[i];
        ponder_sq += lr.enc.ponder[i] * lr.enc.ponder[i];
        ++ponder_n;
      }
    }
    // greedy decoding, no reference in sight
    auto decoded = generate_greedy_batch(srcs, params, max_decode_len);
    for (int s = 0; s < hi - lo; ++s) {
      const auto& gold = part[s].tgt;  // ends with EOS
      std::vector<int> pred = decoded[s].tokens;
      if (decoded[s].terminated) pred.push_back(vocab::kEos);
      for (std::size_t c = 0; c < gold.size(); ++c) {
        const std::size_t cell =
            static_cast<std::size_t>(lo + s) * tgt_len + c;
        gold_mat[cell] = gold[c];
        mask[cell] = 1.0;
        if (c < pred.size()) pred_mat[cell] = pred[c];
      }
    }
  }

  auto [char_acc, seq_acc] = accuracy(pred_mat, gold_mat, mask, n, tgt_len);
  report.char_acc = char_acc;
  report.seq_acc = seq_acc;
  report.loss = loss_weight > 0.0 ? loss_weighted / loss_weight : 0.0;
  if (report.has_ponder && ponder_n > 0) {
    report.ponder_mean = ponder_sum / ponder_n;
    report.ponder_std = std::sqrt(
        std::max(0.0, ponder_sq / ponder_n - report.ponder_mean * report.ponder_mean));
  }

  // per-source-length breakdown
  std::map<int, std::array<long, 4>> by_len;  // len -> {match, cells, seq_ok, rows}
  for (int s = 0; s < n; ++s) {
    auto& acc = by_len[static_cast<int>(samples[s].src.size())];
    bool all = true;
    for (int c = 0; c < tgt_len; ++c) {
      const std::size_t cell = static_cast<std::size_t>(s) * tgt_len + c;
      if (mask[cell] <= 0.0) continue;
      ++acc[1];
      if (pred_mat[cell] == gold_mat[cell])
        ++acc[0];
      else
        all = false;
    }
    if (all) ++acc[2];
    ++acc[3];
  }
  for (const auto& [len, acc] : by_len) {
    LengthStats ls;
    ls.len = len;
    ls.count = static_cast<int>(acc[3]);
    ls.char_acc = acc[1] ? static_cast<double>(acc[0]) / acc[1] : 0.0;
    ls.seq_acc = acc[3] ? static_cast<double>(acc[2]) / acc[3] : 0.0;
    report.per_length.push_back(ls);
  }
  return report;
}

namespace {

json eval_record(std::int64_t step, double lr, const EvalReport& r) {
  json j;
  j["step"] = step;
  j["split"] = r.split;
  j["loss"] = r.loss;
  j["lr"] = lr;
  j["char_acc"] = r.char_acc;
  j["seq_acc"] = r.seq_acc;
  if (r.has_ponder) {
    j["ponder_mean"] = r.ponder_mean;
    j["ponder_std"] = r.ponder_std;
  }
  return j;
}

}  // namespace

TrainResult train(const RunConfig& cfg,
                  const std::function<void(const std::string&)>& progress) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  save_run_config(cfg, (fs::path(cfg.out_dir) / "config.json").string());

  const TaskKind task = cfg.task.kind();
  StreamSpec train_spec{task, "train", cfg.task.train_min, cfg.task.train_max,
                        cfg.task.effective_max_offset(), cfg.seed};
  StreamSpec in_spec{task, "eval_in", cfg.task.train_min, cfg.task.train_max,
                     0, cfg.seed};
  const int eval_hi =
      cfg.task.eval_len_max > 0 ? cfg.task.eval_len_max : cfg.task.eval_len;
  StreamSpec extra_spec{task, "eval_extra", cfg.task.eval_len, eval_hi, 0,
                        cfg.seed};
  SampleStream train_stream(train_spec), in_stream(in_spec),
      extra_stream(extra_spec);

  Rng init_rng(cfg.seed);
  Parameters params = Parameters::init(cfg.model, init_rng);
  Rng dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  OptimState opt;

  const fs::path out(cfg.out_dir);
  const std::string log_path = (out / "log.jsonl").string();
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw std::runtime_error("cannot write log: " + log_path);

  // generation cap: longest possible target plus slack for the EOS
  const int max_decode = eval_hi + 4;

  TrainResult result;
  result.log_path = log_path;
  double best_seq_acc = -1.0;
  std::size_t data_index = 0;

  StepContext ctx;
  ctx.cfg = &cfg.model;
  ctx.dropout_rng = &dropout_rng;
  ctx.training = true;

  const auto run_evals = [&](std::int64_t step, double lr_now) {
    EvalReport in_rep =
        evaluate(params, in_stream, cfg.optim.eval_samples, max_decode);
    EvalReport ex_rep =
        evaluate(params, extra_stream, cfg.optim.eval_samples, max_decode);
    log << eval_record(step, lr_now, in_rep).dump() << "\n";
    log << eval_record(step, lr_now, ex_rep).dump() << "\n";
    log.flush();
    result.eval_in = in_rep;
    result.eval_extra = ex_rep;
    if (ex_rep.seq_acc > best_seq_acc) {
      best_seq_acc = ex_rep.seq_acc;
      result.best_checkpoint = (out / "best").string();
      save_checkpoint(params, cfg, step, result.best_checkpoint);
    }
    if (progress)
      progress("step " + std::to_string(step) + " eval_in seq_acc " +
               std::to_string(in_rep.seq_acc) + " eval_extra char_acc " +
               std::to_string(ex_rep.char_acc));
  };

  for (int step = 1; step <= cfg.optim.steps; ++step) {
    std::vector<TaskSample> samples;
    samples.reserve(cfg.optim.batch_size);
    int src_len = 0, tgt_len = 0;
    for (int b = 0; b < cfg.optim.batch_size; ++b) {
      samples.push_back(train_stream.at(data_index++));
      src_len = std::max(src_len, static_cast<int>(samples.back().src.size()));
      tgt_len = std::max(tgt_len, static_cast<int>(samples.back().tgt.size()));
    }
    Batch batch = make_batch(samples, src_len, tgt_len);
    LossResult lr_res =
        teacher_forced_loss(batch, params, ctx, cfg.optim.label_smoothing);
    const double loss_value = lr_res.loss->item();
    if (!std::isfinite(loss_value)) {
      save_checkpoint(params, cfg, step - 1, (out / "final").string());
      throw std::runtime_error(
          "training diverged at step " + std::to_string(step) +
          " (non-finite loss); last good checkpoint written to " +
          (out / "final").string());
    }
    backward(lr_res.loss);
    const double lr_now =
        lr_schedule(opt.step + 1, cfg.model.d, cfg.optim.warmup,
                    cfg.optim.base_lr);
    adam_step(params, opt, lr_now, cfg.optim.beta1, cfg.optim.beta2,
              cfg.optim.eps);
    result.final_loss = loss_value;

    if (step % cfg.optim.log_every == 0 || step == cfg.optim.steps) {
      json j;
      j["step"] = step;
      j["split"] = "train";
      j["loss"] = loss_value;
      j["lr"] = lr_now;
      if (cfg.model.act_enabled) {
        PonderStats st = ponder_stats(lr_res.enc.ponder,
                                      src_of(batch).real_mask());
        j["ponder_mean"] = st.mean;
        j["ponder_std"] = st.stddev;
      }
      log << j.dump() << "\n";
      log.flush();
      if (progress)
        progress("step " + std::to_string(step) + " loss " +
                 std::to_string(loss_value));
    }
    if (cfg.optim.eval_every > 0 &&
        (step % cfg.optim.eval_every == 0 || step == cfg.optim.steps))
      run_evals(step, lr_now);
  }

  result.final_checkpoint = (out / "final").string();
  save_checkpoint(params, cfg, cfg.optim.steps, result.final_checkpoint);
  if (result.best_checkpoint.empty()) {
    // no eval ran (steps==0 or eval disabled); best == final
    result.best_checkpoint = (out / "best").string();
    save_checkpoint(params, cfg, cfg.optim.steps, result.best_checkpoint);
  }
  result.params = std::move(params);
  return result;
}

GradCheckReport grad_check(const ModelConfig& cfg, int min_entries,
                           double fd_step, std::uint64_t seed) {
  cfg.validate();
  Rng init_rng(seed);
  Parameters params = Parameters::init(cfg, init_rng);

  // tiny deterministic batch: two short copy-style samples
  std::vector<TaskSample> samples(2);
  samples[0].src = {3, 4};
  samples[0].tgt = {3, 4, vocab::kEos};
  samples[0].offset = 1;
  samples[1].src = {5, 6, 7};
  samples[1].tgt = {5, 6, 7, vocab::kEos};
  samples[1].offset = 0;
  Batch batch = make_batch(samples, 3, 4);

  StepContext ctx;
  ctx.cfg = &cfg;
  ctx.training = false;  // dropout off

  const auto loss_value = [&]() {
    NoGradGuard no_grad;
    return teacher_forced_loss(batch, params, ctx, 0.0).loss->item();
  };

  LossResult lr = teacher_forced_loss(batch, params, ctx, 0.0);
  backward(lr.loss);

  const auto named = params.named();
  const int per_tensor = std::max(
      1, static_cast<int>((min_entries + named.size() - 1) / named.size()));

  GradCheckReport report;
  Rng pick(seed ^ 0xABCDEF12345ULL);
  for (const auto& [name, t] : named) {
    t->ensure_grad();
    GradCheckEntry entry;
    entry.param = name;
    const int n_check =
        std::min<int>(per_tensor, static_cast<int>(t->size()));
    for (int c = 0; c < n_check; ++c) {
      const std::size_t idx = static_cast<std::size_t>(
          pick.uniform_int(0, static_cast<std::int64_t>(t->size()) - 1));
      const double orig = t->data[idx];
      t->data[idx] = orig + fd_step;
      const double up = loss_value();
      t->data[idx] = orig - fd_step;
      const double down = loss_value();
      t->data[idx] = orig;
      const double fd = (up - down) / (2.0 * fd_step);
      const double an = t->grad[idx];
      const double rel =
          std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      ++report.entries_checked;
    }
    if (entry.max_rel_err > report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst_param = name;
    }
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ut
