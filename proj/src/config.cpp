#include "ut/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace ut {

using nlohmann::json;

void RunConfig::validate() const {
  std::vector<std::string> problems;
  try {
    model.validate();
  } catch (const config_error& e) {
    problems.push_back(e.what());
  }
  try {
    task.kind();
  } catch (const config_error& e) {
    problems.push_back(e.what());
  }
  if (task.train_min < 1 || task.train_max < task.train_min)
    problems.push_back("task: bad train length range");
  if (task.eval_len <= task.train_max)
    problems.push_back(
        "task: eval_len must exceed train_max (extrapolation split)");
  if (task.eval_len_max != 0 && task.eval_len_max < task.eval_len)
    problems.push_back("task: eval_len_max must be 0 or >= eval_len");
  if (optim.batch_size < 1) problems.push_back("optim: batch_size must be >= 1");
  if (optim.steps < 0) problems.push_back("optim: steps must be >= 0");
  if (optim.warmup < 1) problems.push_back("optim: warmup must be >= 1");
  if (optim.base_lr <= 0.0) problems.push_back("optim: base_lr must be > 0");
  if (optim.label_smoothing < 0.0 || optim.label_smoothing >= 1.0)
    problems.push_back("optim: label_smoothing must be in [0,1)");
  if (optim.eval_samples < 1)
    problems.push_back("optim: eval_samples must be >= 1");
  if (optim.eval_every < 0) problems.push_back("optim: eval_every must be >= 0");
  if (optim.log_every < 1) problems.push_back("optim: log_every must be >= 1");
  if (out_dir.empty()) problems.push_back("out_dir must not be empty");
  if (!problems.empty()) {
    std::string msg = "invalid run config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw config_error(msg);
  }
}

namespace {

// Tracks which keys were consumed so unknown keys can be reported.
class Section {
 public:
  Section(const json& j, std::string name, std::vector<std::string>& errors)
      : j_(j), name_(std::move(name)), errors_(errors) {}

  template <typename T>
  void optional(const char* key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    read(key, out);
  }

  template <typename T>
  void required(const char* key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) {
      errors_.push_back("missing required field: " + qualify(key));
      return;
    }
    read(key, out);
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const auto& k : seen_)
        if (k == it.key()) {
          known = true;
          break;
        }
      if (!known) errors_.push_back("unknown field: " + qualify(it.key()));
    }
  }

 private:
  std::string qualify(const std::string& key) const {
    return name_.empty() ? key : name_ + "." + key;
  }

  template <typename T>
  void read(const char* key, T& out) {
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      errors_.push_back("field has the wrong type: " + qualify(key));
    }
  }

  const json& j_;
  std::string name_;
  std::vector<std::string>& errors_;
  std::vector<std::string> seen_;
};

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw config_error(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  std::vector<std::string> errors;

  Section top(root, "", errors);
  json jmodel = json::object(), jtask = json::object(),
       joptim = json::object();
  top.required("model", jmodel);
  top.required("task", jtask);
  top.optional("optim", joptim);
  top.required("seed", cfg.seed);
  top.optional("out_dir", cfg.out_dir);
  top.finish();

  Section model(jmodel, "model", errors);
  std::string transition = to_string(cfg.model.transition);
  model.required("d", cfg.model.d);
  model.required("heads", cfg.model.heads);
  model.required("t_max", cfg.model.t_max);
  model.optional("vocab_size", cfg.model.vocab_size);
  model.optional("transition", transition);
  model.optional("ff_hidden", cfg.model.ff_hidden);
  model.optional("conv_kernel", cfg.model.conv_kernel);
  model.optional("dropout_rate", cfg.model.dropout_rate);
  model.optional("act_enabled", cfg.model.act_enabled);
  model.optional("act_threshold", cfg.model.act_threshold);
  model.optional("act_max_steps", cfg.model.act_max_steps);
  model.optional("act_ponder_tau", cfg.model.act_ponder_tau);
  model.optional("tie_weights", cfg.model.tie_weights);
  model.optional("max_src_len", cfg.model.max_src_len);
  model.optional("max_tgt_len", cfg.model.max_tgt_len);
  model.optional("layer_norm_eps", cfg.model.layer_norm_eps);
  model.finish();
  try {
    cfg.model.transition = transition_from_string(transition);
  } catch (const config_error& e) {
    errors.push_back(e.what());
  }

  Section task(jtask, "task", errors);
  task.required("name", cfg.task.name);
  task.optional("train_min", cfg.task.train_min);
  task.optional("train_max", cfg.task.train_max);
  task.optional("eval_len", cfg.task.eval_len);
  task.optional("eval_len_max", cfg.task.eval_len_max);
  task.optional("max_offset", cfg.task.max_offset);
  task.finish();

  Section optim(joptim, "optim", errors);
  optim.optional("batch_size", cfg.optim.batch_size);
  optim.required("steps", cfg.optim.steps);
  optim.optional("warmup", cfg.optim.warmup);
  optim.optional("base_lr", cfg.optim.base_lr);
  optim.optional("beta1", cfg.optim.beta1);
  optim.optional("beta2", cfg.optim.beta2);
  optim.optional("eps", cfg.optim.eps);
  optim.optional("label_smoothing", cfg.optim.label_smoothing);
  optim.optional("eval_every", cfg.optim.eval_every);
  optim.optional("eval_samples", cfg.optim.eval_samples);
  optim.optional("log_every", cfg.optim.log_every);
  optim.finish();

  if (!errors.empty()) {
    std::string msg = "bad run config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw config_error(msg);
  }
  return cfg;
}

std::string dump_run_config(const RunConfig& cfg) {
  json j;
  j["model"] = {{"d", cfg.model.d},
                {"heads", cfg.model.heads},
                {"t_max", cfg.model.t_max},
                {"vocab_size", cfg.model.vocab_size},
                {"transition", to_string(cfg.model.transition)},
                {"ff_hidden", cfg.model.ff_hidden},
                {"conv_kernel", cfg.model.conv_kernel},
                {"dropout_rate", cfg.model.dropout_rate},
                {"act_enabled", cfg.model.act_enabled},
                {"act_threshold", cfg.model.act_threshold},
                {"act_max_steps", cfg.model.act_max_steps},
                {"act_ponder_tau", cfg.model.act_ponder_tau},
                {"tie_weights", cfg.model.tie_weights},
                {"max_src_len", cfg.model.max_src_len},
                {"max_tgt_len", cfg.model.max_tgt_len},
                {"layer_norm_eps", cfg.model.layer_norm_eps}};
  j["task"] = {{"name", cfg.task.name},
               {"train_min", cfg.task.train_min},
               {"train_max", cfg.task.train_max},
               {"eval_len", cfg.task.eval_len},
               {"eval_len_max", cfg.task.eval_len_max},
               {"max_offset", cfg.task.max_offset}};
  j["optim"] = {{"batch_size", cfg.optim.batch_size},
                {"steps", cfg.optim.steps},
                {"warmup", cfg.optim.warmup},
                {"base_lr", cfg.optim.base_lr},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps},
                {"label_smoothing", cfg.optim.label_smoothing},
                {"eval_every", cfg.optim.eval_every},
                {"eval_samples", cfg.optim.eval_samples},
                {"log_every", cfg.optim.log_every}};
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write config file: " + path);
  out << dump_run_config(cfg);
}

}  // namespace ut
