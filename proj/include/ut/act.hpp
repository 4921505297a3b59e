#pragma once

// Per-position dynamic halting. Positions accumulate a halting probability
// each step; once it would cross the threshold the position halts and its
// remaining mass becomes that step's interpolation weight. The carried
// state keeps being transformed for every position until the whole batch
// stops; only the accumulated output freezes.

#include <functional>
#include <string>
#include <vector>

#include "ut/tensor.hpp"

namespace ut {

struct HaltingState {
  TensorPtr halting_probability;  // [m x 1], in [0, 1]
  TensorPtr remainders;           // [m x 1], > 0 only after halting
  std::vector<double> n_updates;  // integral counts, <= max_steps
  TensorPtr previous_state;       // [m x d] accumulated output
  int step = 0;
  double threshold = 0.99;
  int max_steps = 0;
};

// pre_halted positions (padding) start with halting_probability 1 and never
// consume updates.
HaltingState make_halting_state(int m, int d, double threshold, int max_steps,
                                const std::vector<bool>& pre_halted = {});

// True iff some position has halting_probability < threshold and
// n_updates < max_steps.
bool should_continue(const HaltingState& hs);

// sigmoid(state w + b) per row -> [m x 1].
TensorPtr halting_unit(const TensorPtr& state, const TensorPtr& w,
                       const TensorPtr& b);

// One update of the halting algebra. transformed_state is the transition
// output for step hs.step+1; p the per-position halting probabilities.
// Mask vectors are treated as constants; gradients flow through p, the
// remainders and the state interpolation.
void act_step(HaltingState& hs, const TensorPtr& transformed_state,
              const TensorPtr& p);

struct ActResult {
  TensorPtr state;                 // accumulated output
  std::vector<double> n_updates;   // per position
  std::vector<double> remainders;  // per position (values)
  TensorPtr remainders_graph;      // same, differentiable
  int steps = 0;                   // loop iterations executed
};

// Drives the halting loop: p = halting_unit(state), transformed =
// step_fn(state, t), then the act_step algebra; the transformed state is
// carried into the next iteration while the accumulated new_state is
// returned.
ActResult run_act(const TensorPtr& h0,
                  const std::function<TensorPtr(const TensorPtr&, int)>& step_fn,
                  const TensorPtr& halt_w, const TensorPtr& halt_b,
                  double threshold, int max_steps,
                  const std::vector<bool>& pre_halted = {});

struct PonderStats {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::vector<std::pair<int, int>> histogram;  // (updates, count), sorted
  std::string formatted;                       // "3.8 ± 2.2"
};

// Statistics over non-masked positions; mask entries <= 0 are skipped.
// An all-masked input is an error.
PonderStats ponder_stats(const std::vector<double>& ponder,
                         const std::vector<double>& mask);

}  // namespace ut
