// End-to-end checks of the `ut` binary: data files, training artifacts,
// eval consistency with the training log, inspect bundles, exit codes.

#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"
#include "ut/tasks.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string g_binary;

int run(const std::string& args, const std::string& stdout_path = "") {
  std::string cmd = g_binary + " " + args;
  if (!stdout_path.empty()) cmd += " > " + stdout_path;
  cmd += " 2> /dev/null";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("ut_cli_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  for (char c : s) v = v * 10 + static_cast<std::uint64_t>(c - '0');
  return v;
}

void write_train_config(const fs::path& path, const fs::path& out_dir,
                        int steps) {
  json j;
  j["model"] = {{"d", 32},  {"heads", 4},       {"t_max", 2},
                {"ff_hidden", 64}, {"max_src_len", 16}, {"max_tgt_len", 17}};
  j["task"] = {{"name", "copy"}, {"train_min", 1}, {"train_max", 6},
               {"eval_len", 9}};
  j["optim"] = {{"steps", steps},     {"batch_size", 16}, {"warmup", 100},
                {"eval_every", steps}, {"eval_samples", 16},
                {"log_every", 50}};
  j["seed"] = 9;
  j["out_dir"] = out_dir.string();
  std::ofstream out(path);
  out << j.dump(2);
}

}  // namespace

TEST_CASE("gen-data: deterministic files whose sums verify") {
  const fs::path dir = temp_dir("gen");
  const std::string f1 = (dir / "a.tsv").string();
  const std::string f2 = (dir / "b.tsv").string();
  CHECK(run("gen-data --task copy -n 3 --seed 4 --out " + f1) == 0);
  std::ifstream in(f1);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    const auto tab = line.find('\t');
    REQUIRE(tab != std::string::npos);
    CHECK(line.substr(0, tab) == line.substr(tab + 1));
  }
  CHECK(lines == 3);

  CHECK(run("gen-data --task copy -n 3 --seed 4 --out " + f2) == 0);
  CHECK(slurp(f1) == slurp(f2));

  // addition lines verify under an independent numeric oracle
  const std::string fa = (dir / "add.tsv").string();
  CHECK(run("gen-data --task addition -n 200 --seed 7 --max-len 9 --out " +
            fa) == 0);
  std::ifstream ain(fa);
  int checked = 0;
  while (std::getline(ain, line)) {
    const auto tab = line.find('\t');
    const auto plus = line.find('+');
    REQUIRE(tab != std::string::npos);
    REQUIRE(plus != std::string::npos);
    const std::string a = line.substr(0, plus);
    const std::string b = line.substr(plus + 1, tab - plus - 1);
    const std::string sum = line.substr(tab + 1);
    CHECK(to_u64(a) + to_u64(b) == to_u64(sum));
    ++checked;
  }
  CHECK(checked == 200);
}

TEST_CASE("train + eval: log numbers are reproduced by cmd_eval") {
  const fs::path dir = temp_dir("train");
  const fs::path cfg_path = dir / "config.json";
  const fs::path out_dir = dir / "run";
  write_train_config(cfg_path, out_dir, 120);

  CHECK(run("train --config " + cfg_path.string(),
            (dir / "train_out.json").string()) == 0);
  const json train_out = json::parse(slurp(dir / "train_out.json"));
  CHECK(fs::exists(out_dir / "final.json"));
  CHECK(fs::exists(out_dir / "best.json"));
  CHECK(fs::exists(out_dir / "log.jsonl"));

  // the final log eval records match a fresh `ut eval` of the checkpoint
  const std::string ckpt = (out_dir / "final.json").string();
  CHECK(run("eval --checkpoint " + ckpt + " --split eval_in",
            (dir / "eval_in.json").string()) == 0);
  const json eval_in = json::parse(slurp(dir / "eval_in.json"));
  CHECK(eval_in.at("char_acc").get<double>() ==
        train_out.at("eval_in").at("char_acc").get<double>());
  CHECK(eval_in.at("seq_acc").get<double>() ==
        train_out.at("eval_in").at("seq_acc").get<double>());
  CHECK(eval_in.at("seq_acc").get<double>() <=
        eval_in.at("char_acc").get<double>() + 1e-12);

  CHECK(run("eval --checkpoint " + ckpt + " --split eval_extra",
            (dir / "eval_ex.json").string()) == 0);
  const json eval_ex = json::parse(slurp(dir / "eval_ex.json"));
  CHECK(eval_ex.at("seq_acc").get<double>() <=
        eval_ex.at("char_acc").get<double>() + 1e-12);
  for (const auto& ls : eval_ex.at("per_length"))
    CHECK(ls.at("seq_acc").get<double>() <=
          ls.at("char_acc").get<double>() + 1e-12);

  // inspect: every attention row sums to one; T_max entries with ACT off
  CHECK(run("inspect --checkpoint " + ckpt + " --input 3141",
            (dir / "inspect.json").string()) == 0);
  const json bundle = json::parse(slurp(dir / "inspect.json"));
  CHECK(bundle.at("encoder").at("steps").size() == 2);  // t_max
  for (const auto& step : bundle.at("encoder").at("steps"))
    for (const auto& head : step.at("heads"))
      for (const auto& row : head) {
        double sum = 0.0;
        for (const auto& v : row) sum += v.get<double>();
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
      }
  // decoder self-attention masks the future: last step, first row
  const auto& dec_steps = bundle.at("decoder").at("steps");
  REQUIRE(dec_steps.size() > 0);
  for (const auto& step : dec_steps) {
    if (step.at("site") != "decoder_self") continue;
    const auto& head0 = step.at("heads")[0];
    const int nk = step.at("nk").get<int>();
    for (int j = 1; j < nk; ++j)
      CHECK(head0[0][j].get<double>() == 0.0);
  }
}

TEST_CASE("exit codes: 1 for config errors, 2 for runtime failures") {
  const fs::path dir = temp_dir("exit");
  const fs::path bad = dir / "bad.json";
  std::ofstream(bad) << R"({"model": {"d": 8}, "task": {}, "seed": 1})";
  CHECK(run("train --config " + bad.string()) == 1);
  CHECK(run("eval --checkpoint " + (dir / "missing.json").string()) == 1);

  const fs::path invalid = dir / "invalid.json";
  std::ofstream(invalid) << "{not json";
  CHECK(run("train --config " + invalid.string()) == 1);
}

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <ut-binary>\n");
    return 1;
  }
  g_binary = argv[1];
  doctest::Context context;
  return context.run();
}
