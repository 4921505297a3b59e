#pragma once

// Loss, Adam with inverse-sqrt warmup, accuracy metrics, greedy evaluation
// and the training loop. Everything is deterministic given (seed, config).

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ut/config.hpp"
#include "ut/model.hpp"
#include "ut/tasks.hpp"

namespace ut {

// Mean over positions with mask > 0 of -log dist[i, target_i].
TensorPtr cross_entropy(const TensorPtr& dist, const std::vector<int>& targets,
                        const std::vector<double>& mask,
                        double label_smoothing = 0.0);

struct OptimState {
  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments> moments;
  std::int64_t step = 0;  // completed updates
};

// base * d^-0.5 * min(step^-0.5, step * warmup^-1.5)
double lr_schedule(std::int64_t step, int d, int warmup, double base = 1.0);

// One adaptive-moment update over every named parameter; bias-corrected,
// grads are zeroed afterwards. Throws on non-finite gradients, naming the
// parameter.
void adam_step(Parameters& params, OptimState& opt, double lr,
               double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9);

// char accuracy = matching unmasked cells; seq accuracy = rows whose
// unmasked cells all match. pred/gold are row-major [rows x len].
std::pair<double, double> accuracy(const std::vector<int>& pred,
                                   const std::vector<int>& gold,
                                   const std::vector<double>& mask, int rows,
                                   int len);

struct LossResult {
  TensorPtr loss;
  double nll = 0.0;       // cross-entropy part
  StackResult enc, dec;
};

// Teacher-forced loss of one batch (plus the ponder cost when enabled).
LossResult teacher_forced_loss(const Batch& batch, const Parameters& params,
                               const StepContext& ctx,
                               double label_smoothing = 0.0);

struct LengthStats {
  int len = 0;
  int count = 0;
  double char_acc = 0.0, seq_acc = 0.0;
};

struct EvalReport {
  std::string split;
  int samples = 0;
  double char_acc = 0.0;
  double seq_acc = 0.0;
  double loss = 0.0;
  bool has_ponder = false;
  double ponder_mean = 0.0, ponder_std = 0.0;
  std::vector<LengthStats> per_length;
};

// Greedy-decodes `n` samples from the stream ("no use of target sequences
// at test time") and scores them against the references.
EvalReport evaluate(const Parameters& params, const SampleStream& stream,
                    int n, int max_decode_len);

struct TrainResult {
  Parameters params;
  double final_loss = 0.0;
  EvalReport eval_in, eval_extra;
  std::string log_path, final_checkpoint, best_checkpoint;
};

// Full run: optimizes, periodically evaluates on held-out in-distribution
// and extrapolation streams, logs JSONL records (no timestamps) and writes
// final + best checkpoints under cfg.out_dir.
TrainResult train(const RunConfig& cfg,
                  const std::function<void(const std::string&)>& progress = {});

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int entries_checked = 0;
  std::vector<GradCheckEntry> per_param;
};

// Central finite differences (h = fd_step) against the recorded backward
// pass on a tiny deterministic batch; samples at least `min_entries`
// parameter entries spread over every tensor.
GradCheckReport grad_check(const ModelConfig& cfg, int min_entries = 200,
                           double fd_step = 1e-5, std::uint64_t seed = 99);

}  // namespace ut
