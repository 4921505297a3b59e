#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ut/checkpoint.hpp"
#include "ut/config.hpp"
#include "ut/tasks.hpp"
#include "ut/training.hpp"

using namespace ut;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("ut_ckpt_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.model.d = 8;
  cfg.model.heads = 2;
  cfg.model.t_max = 2;
  cfg.model.ff_hidden = 16;
  cfg.task.name = "copy";
  cfg.task.train_max = 4;
  cfg.task.eval_len = 6;
  cfg.optim.steps = 3;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("run config round-trips losslessly and validates fields") {
  RunConfig cfg = tiny_config();
  cfg.model.transition = TransitionKind::kSeparableConv;
  cfg.model.act_enabled = true;
  cfg.optim.label_smoothing = 0.05;
  const std::string text = dump_run_config(cfg);
  RunConfig back = parse_run_config(text);
  CHECK(dump_run_config(back) == text);
  CHECK(back.model.transition == TransitionKind::kSeparableConv);
  CHECK(back.model.act_enabled);
  CHECK(back.optim.label_smoothing == cfg.optim.label_smoothing);

  // missing required fields are named, all at once
  try {
    parse_run_config(R"({"model": {"d": 8}, "task": {}})");
    FAIL("expected config_error");
  } catch (const config_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("model.heads") != std::string::npos);
    CHECK(msg.find("model.t_max") != std::string::npos);
    CHECK(msg.find("task.name") != std::string::npos);
    CHECK(msg.find("seed") != std::string::npos);
  }

  // unknown fields are rejected
  CHECK_THROWS_WITH_AS(
      parse_run_config(
          R"({"model": {"d":8,"heads":2,"t_max":1,"bogus":3},
              "task": {"name":"copy"}, "optim": {"steps":1}, "seed":1})"),
      doctest::Contains("model.bogus"), config_error);
}

TEST_CASE("checkpoint: round trip is idempotent and validated") {
  const fs::path dir = temp_dir("roundtrip");
  RunConfig cfg = tiny_config();
  Rng rng(cfg.seed);
  Parameters params = Parameters::init(cfg.model, rng);

  const std::string p1 = (dir / "ck1").string();
  save_checkpoint(params, cfg, 42, p1);
  LoadedCheckpoint ck = load_checkpoint(p1 + ".json");
  CHECK(ck.step == 42);
  CHECK(ck.config.seed == cfg.seed);

  const std::string p2 = (dir / "ck2").string();
  save_checkpoint(ck.params, ck.config, 42, p2);
  CHECK(slurp(dir / "ck1.bin") == slurp(dir / "ck2.bin"));
  // manifests differ only in the blob filename; normalize it
  std::string m1 = slurp(dir / "ck1.json"), m2 = slurp(dir / "ck2.json");
  const auto pos1 = m1.find("ck1.bin");
  const auto pos2 = m2.find("ck2.bin");
  REQUIRE(pos1 != std::string::npos);
  m1.replace(pos1, 7, "ck.bin");
  m2.replace(pos2, 7, "ck.bin");
  CHECK(m1 == m2);

  // forward outputs drift less than 1e-5 after the f32 round trip
  StepContext ctx;
  ctx.cfg = &cfg.model;
  const std::vector<int> tokens{3, 9, 4, 7};
  auto before = encode_fixed(tokens, 0, params, ctx).h;
  StepContext ctx2;
  ctx2.cfg = &ck.config.model;
  auto after = encode_fixed(tokens, 0, ck.params, ctx2).h;
  double worst = 0.0;
  for (std::size_t i = 0; i < before->size(); ++i)
    worst = std::max(worst,
                     std::abs(before->data[i] - after->data[i]) /
                         std::max(1.0, std::abs(before->data[i])));
  CHECK(worst < 1e-5);
}

TEST_CASE("checkpoint: corruption is rejected with specific errors") {
  const fs::path dir = temp_dir("corrupt");
  RunConfig cfg = tiny_config();
  Rng rng(3);
  Parameters params = Parameters::init(cfg.model, rng);
  const std::string prefix = (dir / "ck").string();
  save_checkpoint(params, cfg, 7, prefix);

  SUBCASE("offset that no longer tiles the blob") {
    std::string manifest = slurp(dir / "ck.json");
    const auto pos = manifest.find("\"offset\": 0");
    REQUIRE(pos != std::string::npos);
    // second occurrence: the first parameter after the embedding
    const auto pos2 = manifest.find("\"offset\"", pos + 1);
    REQUIRE(pos2 != std::string::npos);
    const auto colon = manifest.find(':', pos2);
    auto end = manifest.find_first_of(",\n", colon);
    manifest.replace(colon + 1, end - colon - 1, " 12");
    spit(dir / "ck.json", manifest);
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "ck.json").string()),
                         doctest::Contains("tile"), config_error);
  }

  SUBCASE("truncated blob") {
    std::string blob = slurp(dir / "ck.bin");
    blob.resize(blob.size() - 8);
    spit(dir / "ck.bin", blob);
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "ck.json").string()),
                         doctest::Contains("bytes"), config_error);
  }

  SUBCASE("unknown parameter name") {
    std::string manifest = slurp(dir / "ck.json");
    const auto pos = manifest.find("enc.0.self.wq");
    REQUIRE(pos != std::string::npos);
    manifest.replace(pos, 13, "enc.0.self.xx");
    spit(dir / "ck.json", manifest);
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "ck.json").string()),
                         doctest::Contains("enc.0.self.xx"), config_error);
  }
}
