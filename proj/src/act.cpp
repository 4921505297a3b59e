#include "ut/act.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace ut {

HaltingState make_halting_state(int m, int d, double threshold, int max_steps,
                                const std::vector<bool>& pre_halted) {
  if (max_steps < 1)
    throw config_error("halting: max_steps must be >= 1, got " +
                       std::to_string(max_steps));
  if (threshold <= 0.0 || threshold >= 1.0)
    throw config_error("halting: threshold must be in (0,1), got " +
                       std::to_string(threshold));
  HaltingState hs;
  std::vector<double> hp(m, 0.0);
  if (!pre_halted.empty()) {
    if (static_cast<int>(pre_halted.size()) != m)
      throw config_error("halting: pre_halted size mismatch");
    for (int i = 0; i < m; ++i)
      if (pre_halted[i]) hp[i] = 1.0;
  }
  hs.halting_probability = tensor({m, 1}, std::move(hp));
  hs.remainders = zeros({m, 1});
  hs.n_updates.assign(m, 0.0);
  hs.previous_state = zeros({m, d});
  hs.step = 0;
  hs.threshold = threshold;
  hs.max_steps = max_steps;
  return hs;
}

bool should_continue(const HaltingState& hs) {
  const auto& hp = hs.halting_probability->data;
  for (std::size_t i = 0; i < hp.size(); ++i)
    if (hp[i] < hs.threshold && hs.n_updates[i] < hs.max_steps) return true;
  return false;
}

TensorPtr halting_unit(const TensorPtr& state, const TensorPtr& w,
                       const TensorPtr& b) {
  return sigmoid(add_rowvec(matmul(state, w), b));
}

void act_step(HaltingState& hs, const TensorPtr& transformed_state,
              const TensorPtr& p) {
  const int m = hs.halting_probability->rows();
  if (p->rows() != m || transformed_state->rows() != m)
    throw config_error("act_step: row count mismatch");

  // Masks are plain numbers derived from current values; the graph only
  // sees them as constants.
  std::vector<double> still_running(m), new_halted(m);
  for (int i = 0; i < m; ++i)
    still_running[i] = hs.halting_probability->data[i] < 1.0 ? 1.0 : 0.0;
  for (int i = 0; i < m; ++i) {
    const double probe =
        hs.halting_probability->data[i] + p->data[i] * still_running[i];
    new_halted[i] = (probe > hs.threshold ? 1.0 : 0.0) * still_running[i];
    still_running[i] = (probe <= hs.threshold ? 1.0 : 0.0) * still_running[i];
  }
  auto sr = tensor({m, 1}, still_running);
  auto nh = tensor({m, 1}, new_halted);

  // halting_probability += p * still_running
  hs.halting_probability = add(hs.halting_probability, mul(p, sr));
  // remainders += new_halted * (1 - halting_probability)
  hs.remainders =
      add(hs.remainders, mul(nh, affine(hs.halting_probability, -1.0, 1.0)));
  // halting_probability += new_halted * remainders
  hs.halting_probability =
      add(hs.halting_probability, mul(nh, hs.remainders));
  for (int i = 0; i < m; ++i)
    hs.n_updates[i] += still_running[i] + new_halted[i];
  // update_weights = p * still_running + new_halted * remainders
  auto update_weights = add(mul(p, sr), mul(nh, hs.remainders));
  // new_state = transformed * w + previous * (1 - w)
  hs.previous_state =
      add(mul_colvec(transformed_state, update_weights),
          mul_colvec(hs.previous_state, affine(update_weights, -1.0, 1.0)));
  hs.step += 1;
}

ActResult run_act(const TensorPtr& h0,
                  const std::function<TensorPtr(const TensorPtr&, int)>& step_fn,
                  const TensorPtr& halt_w, const TensorPtr& halt_b,
                  double threshold, int max_steps,
                  const std::vector<bool>& pre_halted) {
  const int m = h0->rows(), d = h0->cols();
  HaltingState hs = make_halting_state(m, d, threshold, max_steps, pre_halted);
  TensorPtr state = h0;
  while (should_continue(hs)) {
    auto p = halting_unit(state, halt_w, halt_b);
    auto transformed = step_fn(state, hs.step + 1);
    act_step(hs, transformed, p);
    state = transformed;
  }
  ActResult r;
  r.state = hs.previous_state;
  r.n_updates = hs.n_updates;
  r.remainders = hs.remainders->data;
  r.remainders_graph = hs.remainders;
  r.steps = hs.step;
  return r;
}

PonderStats ponder_stats(const std::vector<double>& ponder,
                         const std::vector<double>& mask) {
  if (ponder.size() != mask.size())
    throw config_error("ponder_stats: mask size mismatch");
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < ponder.size(); ++i) {
    if (mask[i] <= 0.0) continue;
    sum += ponder[i];
    ++n;
  }
  if (n == 0) throw config_error("ponder_stats: every position is masked");
  PonderStats st;
  st.mean = sum / n;
  double var = 0.0;
  std::vector<std::pair<int, int>> hist;
  for (std::size_t i = 0; i < ponder.size(); ++i) {
    if (mask[i] <= 0.0) continue;
    const double c = ponder[i] - st.mean;
    var += c * c;
    const int k = static_cast<int>(std::lround(ponder[i]));
    bool found = false;
    for (auto& [upd, cnt] : hist)
      if (upd == k) {
        ++cnt;
        found = true;
        break;
      }
    if (!found) hist.emplace_back(k, 1);
  }
  st.stddev = std::sqrt(var / n);
  std::sort(hist.begin(), hist.end());
  st.histogram = std::move(hist);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f ± %.1f", st.mean, st.stddev);
  st.formatted = buf;
  return st;
}

}  // namespace ut
