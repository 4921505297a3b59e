// Command-line harness: data generation, training, evaluation, inspection,
// tied-vs-untied comparison and gradient checking.
//
// Exit codes: 0 success, 1 validation/config error, 2 runtime failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ut/act.hpp"
#include "ut/checkpoint.hpp"
#include "ut/config.hpp"
#include "ut/model.hpp"
#include "ut/tasks.hpp"
#include "ut/training.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json report_json(const ut::EvalReport& r) {
  json j;
  j["split"] = r.split;
  j["samples"] = r.samples;
  j["char_acc"] = r.char_acc;
  j["seq_acc"] = r.seq_acc;
  j["loss"] = r.loss;
  if (r.has_ponder) {
    j["ponder_mean"] = r.ponder_mean;
    j["ponder_std"] = r.ponder_std;
  }
  json lens = json::array();
  for (const auto& ls : r.per_length)
    lens.push_back({{"len", ls.len},
                    {"count", ls.count},
                    {"char_acc", ls.char_acc},
                    {"seq_acc", ls.seq_acc}});
  j["per_length"] = lens;
  return j;
}

json trace_json(const ut::AttnTrace& trace) {
  json steps = json::array();
  for (const auto& rec : trace.records) {
    json heads = json::array();
    for (const auto& h : rec.heads) {
      json rows = json::array();
      for (int i = 0; i < rec.nq; ++i) {
        json row = json::array();
        for (int j = 0; j < rec.nk; ++j)
          row.push_back(h[static_cast<std::size_t>(i) * rec.nk + j]);
        rows.push_back(std::move(row));
      }
      heads.push_back(std::move(rows));
    }
    steps.push_back({{"t", rec.step},
                     {"site", rec.site},
                     {"nq", rec.nq},
                     {"nk", rec.nk},
                     {"heads", std::move(heads)}});
  }
  return steps;
}

json act_json(const std::vector<double>& ponder,
              const std::vector<double>& remainders) {
  json j;
  j["n_updates"] = ponder;
  j["remainders"] = remainders;
  ut::PonderStats st =
      ut::ponder_stats(ponder, std::vector<double>(ponder.size(), 1.0));
  j["ponder_mean"] = st.mean;
  j["ponder_std"] = st.stddev;
  j["ponder_formatted"] = st.formatted;
  json hist = json::array();
  for (const auto& [updates, count] : st.histogram)
    hist.push_back({{"updates", updates}, {"count", count}});
  j["histogram"] = hist;
  return j;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_gen_data(const std::string& task, int n, std::uint64_t seed,
                 const std::string& out_path, int min_len, int max_len,
                 int max_offset) {
  ut::StreamSpec spec{ut::task_from_string(task), "gen", min_len, max_len,
                      max_offset, seed};
  ut::SampleStream stream(spec);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  ut::write_tsv(out, stream, static_cast<std::size_t>(n));
  std::cerr << "wrote " << n << " " << task << " samples to " << out_path
            << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_override,
              std::int64_t seed_override) {
  ut::RunConfig cfg = ut::load_run_config(config_path);
  if (!out_override.empty()) cfg.out_dir = out_override;
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  ut::TrainResult res = ut::train(
      cfg, [](const std::string& msg) { std::cerr << msg << "\n"; });
  json j;
  j["final_loss"] = res.final_loss;
  j["log"] = res.log_path;
  j["final_checkpoint"] = res.final_checkpoint + ".json";
  j["best_checkpoint"] = res.best_checkpoint + ".json";
  j["eval_in"] = report_json(res.eval_in);
  j["eval_extra"] = report_json(res.eval_extra);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& split,
             int n, int eval_len) {
  ut::LoadedCheckpoint ck = ut::load_checkpoint(checkpoint_path);
  const ut::RunConfig& cfg = ck.config;
  ut::StreamSpec spec;
  spec.task = cfg.task.kind();
  spec.seed = cfg.seed;
  spec.split = split;
  if (split == "eval_in") {
    spec.min_len = cfg.task.train_min;
    spec.max_len = cfg.task.train_max;
  } else if (split == "eval_extra") {
    spec.min_len = eval_len > 0 ? eval_len : cfg.task.eval_len;
    spec.max_len = eval_len > 0
                       ? eval_len
                       : (cfg.task.eval_len_max > 0 ? cfg.task.eval_len_max
                                                    : cfg.task.eval_len);
  } else {
    throw ut::config_error("unknown split '" + split +
                           "' (expected eval_in or eval_extra)");
  }
  spec.max_offset = 0;
  ut::SampleStream stream(spec);
  const int samples = n > 0 ? n : cfg.optim.eval_samples;
  const int max_decode = spec.max_len + 4;
  ut::EvalReport rep = ut::evaluate(ck.params, stream, samples, max_decode);
  std::cout << report_json(rep).dump(2) << "\n";
  return 0;
}

int cmd_inspect(const std::string& checkpoint_path, const std::string& input) {
  ut::LoadedCheckpoint ck = ut::load_checkpoint(checkpoint_path);
  const std::vector<int> ids = ut::vocab::encode(input);
  ut::AttnTrace enc_trace, dec_trace;
  std::vector<double> enc_ponder, enc_rem, dec_ponder, dec_rem;
  ut::GreedyResult out = ut::generate_greedy(
      ids, ck.params, ck.config.model.max_tgt_len, &enc_trace, &dec_trace,
      &enc_ponder, &enc_rem, &dec_ponder, &dec_rem);
  json j;
  j["input"] = input;
  j["input_ids"] = ids;
  j["output"] = ut::vocab::decode(out.tokens);
  j["output_ids"] = out.tokens;
  j["terminated"] = out.terminated;
  j["encoder"] = {{"steps", trace_json(enc_trace)}};
  j["decoder"] = {{"steps", trace_json(dec_trace)}};
  if (ck.config.model.act_enabled) {
    json act;
    act["encoder"] = act_json(enc_ponder, enc_rem);
    act["decoder"] = act_json(dec_ponder, dec_rem);
    j["act"] = act;
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_compare(const std::string& config_path, int n_seeds) {
  ut::RunConfig base = ut::load_run_config(config_path);
  json runs = json::array();
  std::map<std::string, std::map<std::string, std::vector<double>>> metrics;
  for (const bool tied : {true, false}) {
    const std::string variant = tied ? "tied" : "untied";
    for (int s = 0; s < n_seeds; ++s) {
      ut::RunConfig cfg = base;
      cfg.model.tie_weights = tied;
      cfg.seed = base.seed + static_cast<std::uint64_t>(s);
      cfg.out_dir = (fs::path(base.out_dir) /
                     (variant + "_seed" + std::to_string(cfg.seed)))
                        .string();
      std::cerr << "training " << variant << " seed " << cfg.seed << "\n";
      ut::TrainResult res = ut::train(cfg);
      json row;
      row["variant"] = variant;
      row["seed"] = cfg.seed;
      row["in_dist"] = {{"char_acc", res.eval_in.char_acc},
                        {"seq_acc", res.eval_in.seq_acc}};
      row["extrapolation"] = {{"char_acc", res.eval_extra.char_acc},
                              {"seq_acc", res.eval_extra.seq_acc}};
      runs.push_back(std::move(row));
      metrics[variant]["in_char"].push_back(res.eval_in.char_acc);
      metrics[variant]["in_seq"].push_back(res.eval_in.seq_acc);
      metrics[variant]["ex_char"].push_back(res.eval_extra.char_acc);
      metrics[variant]["ex_seq"].push_back(res.eval_extra.seq_acc);
    }
  }
  json j;
  j["runs"] = runs;
  for (const auto& [variant, m] : metrics) {
    j["medians"][variant] = {
        {"in_dist",
         {{"char_acc", median(m.at("in_char"))},
          {"seq_acc", median(m.at("in_seq"))}}},
        {"extrapolation",
         {{"char_acc", median(m.at("ex_char"))},
          {"seq_acc", median(m.at("ex_seq"))}}}};
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_grad_check(const std::string& config_path, double tol) {
  std::vector<std::pair<std::string, ut::ModelConfig>> configs;
  if (!config_path.empty()) {
    ut::RunConfig cfg = ut::load_run_config(config_path);
    configs.emplace_back("config", cfg.model);
  } else {
    ut::ModelConfig fc;
    fc.d = 8;
    fc.heads = 2;
    fc.t_max = 2;
    fc.max_src_len = 4;
    fc.max_tgt_len = 5;
    configs.emplace_back("fully_connected", fc);
    ut::ModelConfig conv = fc;
    conv.transition = ut::TransitionKind::kSeparableConv;
    configs.emplace_back("separable_conv", conv);
    ut::ModelConfig act = fc;
    act.t_max = 3;
    act.act_enabled = true;
    act.act_threshold = 0.99;
    configs.emplace_back("act", act);
  }
  json j = json::array();
  bool ok = true;
  for (const auto& [name, cfg] : configs) {
    ut::GradCheckReport rep = ut::grad_check(cfg);
    ok = ok && rep.max_rel_err < tol;
    j.push_back({{"config", name},
                 {"max_rel_err", rep.max_rel_err},
                 {"worst_param", rep.worst_param},
                 {"entries_checked", rep.entries_checked},
                 {"pass", rep.max_rel_err < tol}});
    std::cerr << name << ": max rel err " << rep.max_rel_err << " ("
              << (rep.max_rel_err < tol ? "pass" : "FAIL") << ")\n";
  }
  std::cout << j.dump(2) << "\n";
  if (!ok) throw std::runtime_error("gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"universal transformer harness"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "write task samples as TSV");
  std::string gen_task = "copy", gen_out = "data.tsv";
  int gen_n = 100, gen_min = 1, gen_max = 8, gen_offset = 0;
  std::uint64_t gen_seed = 1;
  gen->add_option("--task", gen_task, "copy|reverse|addition|double");
  gen->add_option("-n,--num", gen_n, "samples to write");
  gen->add_option("--seed", gen_seed, "stream seed");
  gen->add_option("--out", gen_out, "output path")->required();
  gen->add_option("--min-len", gen_min, "minimum length");
  gen->add_option("--max-len", gen_max, "maximum length");
  gen->add_option("--max-offset", gen_offset, "position offset bound");

  auto* tr = app.add_subcommand("train", "train from a config file");
  std::string tr_config, tr_out;
  std::int64_t tr_seed = -1;
  tr->add_option("--config", tr_config, "run config JSON")->required();
  tr->add_option("--out", tr_out, "override out_dir");
  tr->add_option("--seed", tr_seed, "override seed");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_split = "eval_extra";
  int ev_n = 0, ev_len = 0;
  ev->add_option("--checkpoint", ev_ckpt, "manifest .json path")->required();
  ev->add_option("--split", ev_split, "eval_in|eval_extra");
  ev->add_option("-n,--num", ev_n, "samples (default: config eval_samples)");
  ev->add_option("--len", ev_len, "override extrapolation length");

  auto* ins = app.add_subcommand("inspect", "attention/ponder bundle");
  std::string ins_ckpt, ins_input;
  ins->add_option("--checkpoint", ins_ckpt, "manifest .json path")->required();
  ins->add_option("--input", ins_input, "input string, e.g. 1234 or 12+34")
      ->required();

  auto* cmp = app.add_subcommand("compare", "tied vs untied, multiple seeds");
  std::string cmp_config;
  int cmp_seeds = 3;
  cmp->add_option("--config", cmp_config, "run config JSON")->required();
  cmp->add_option("--seeds", cmp_seeds, "seeds per variant");

  auto* gc = app.add_subcommand("grad-check", "finite-difference check");
  std::string gc_config;
  double gc_tol = 1e-4;
  gc->add_option("--config", gc_config, "optional run config JSON");
  gc->add_option("--tol", gc_tol, "max relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // bad flags are validation errors
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_task, gen_n, gen_seed, gen_out, gen_min,
                          gen_max, gen_offset);
    if (tr->parsed()) return cmd_train(tr_config, tr_out, tr_seed);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_split, ev_n, ev_len);
    if (ins->parsed()) return cmd_inspect(ins_ckpt, ins_input);
    if (cmp->parsed()) return cmd_compare(cmp_config, cmp_seeds);
    if (gc->parsed()) return cmd_grad_check(gc_config, gc_tol);
  } catch (const ut::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
