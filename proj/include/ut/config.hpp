#pragma once

// Run configuration: a single JSON document whose saved form materializes
// every default, so a run is reproducible from its config file alone.

#include <cstdint>
#include <string>

#include "ut/model.hpp"
#include "ut/tasks.hpp"

namespace ut {

struct TaskConfig {
  std::string name = "copy";
  int train_min = 1;
  int train_max = 8;
  int eval_len = 16;    // extrapolation length (fixed)
  int eval_len_max = 0; // optional range end; 0 means evaluate at eval_len only
  int max_offset = -1;  // -1 -> eval_len - train_max

  TaskKind kind() const { return task_from_string(name); }
  int effective_max_offset() const {
    return max_offset >= 0 ? max_offset : eval_len - train_max;
  }
};

struct OptimConfig {
  int batch_size = 64;
  int steps = 1000;
  int warmup = 400;
  double base_lr = 1.0;  // multiplier on the d^-1/2 inverse-sqrt schedule
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double label_smoothing = 0.0;
  int eval_every = 200;
  int eval_samples = 128;
  int log_every = 50;
};

struct RunConfig {
  ModelConfig model;
  TaskConfig task;
  OptimConfig optim;
  std::uint64_t seed = 1;
  std::string out_dir = "runs/out";

  // Throws config_error listing every problem at once.
  void validate() const;
};

// Strict parse: unknown keys are errors, missing required keys are reported
// by name (required: model.d, model.heads, model.t_max, task.name,
// optim.steps, seed). Everything else falls back to defaults.
RunConfig parse_run_config(const std::string& json_text);
// Serializes with every field present.
std::string dump_run_config(const RunConfig& cfg);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

}  // namespace ut
