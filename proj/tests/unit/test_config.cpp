#include <gtest/gtest.h>

#include "geqbev/config.hpp"

#include <fstream>

#include <unistd.h>

using namespace geqbev;
namespace fs = std::filesystem;

namespace {

fs::path write_config(const std::string& name, const std::string& text) {
  const fs::path dir = fs::temp_directory_path() / ("geqbev_cfg_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  std::ofstream(dir / name) << text;
  return dir / name;
}

std::string error_of(const fs::path& p, const std::vector<std::string>& overrides = {}) {
  try {
    load_run_config(p, overrides);
  } catch (const InvalidConfig& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyFileGivesDefaults) {
  const RunConfig c = load_run_config(write_config("empty.yaml", ""));
  EXPECT_EQ(c.data.grid_size, 32u);
  EXPECT_EQ(c.train.epochs, 20u);
  EXPECT_EQ(c.train.batch_size, 8u);
  EXPECT_EQ(c.model.depth, 3u);
  EXPECT_EQ(c.effective_rotations(), (std::vector<int>{0, 1, 2, 3}));
}

TEST(Config, ParsesEverySection) {
  const RunConfig c = load_run_config(write_config("full.yaml", R"(
data:
  grid_size: 24
  n_train: 100
  n_test: 10
  seed: 3
  test_rotation_policy: none
  object_length: [6, 9]
  object_width: [3, 4]
  noise_std: 0.0
model:
  arch: plain
  group: c4
  depth: 2
  channels: 3
  pool: average
  seed: 11
train:
  epochs: 2
  learning_rate: 0.01
  seed: 5
eval:
  rotations: [0, 2]
ablate:
  depths: [2, 3, 4]
  pools: [max, beveq]
  seeds: [1, 2]
  jobs: 2
output:
  root: out
)"));
  EXPECT_EQ(c.data.grid_size, 24u);
  EXPECT_EQ(c.data.test_rotation_policy, TestRotationPolicy::none);
  EXPECT_EQ(c.data.length_max, 9.0);
  EXPECT_EQ(c.model.arch, Arch::plain);
  EXPECT_EQ(c.model.pool.method, PoolMethod::average);
  EXPECT_EQ(c.model_seed, 11u);
  EXPECT_EQ(c.train.learning_rate, 0.01);
  EXPECT_EQ(c.effective_rotations(), (std::vector<int>{0, 2}));
  EXPECT_EQ(c.ablate.depths, (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(c.ablate.jobs, 2u);
  EXPECT_EQ(c.output_root, "out");
}

TEST(Config, UnknownKeyReportsLineAndColumn) {
  const std::string e = error_of(write_config("unknown.yaml", "model:\n  depth: 3\n  dpeth: 4\n"));
  EXPECT_NE(e.find("unknown.yaml:3:3"), std::string::npos) << e;
  EXPECT_NE(e.find("model.dpeth"), std::string::npos) << e;
  EXPECT_NE(e.find("unknown key"), std::string::npos) << e;
}

TEST(Config, UnknownSectionRejected) {
  const std::string e = error_of(write_config("section.yaml", "trainer:\n  epochs: 3\n"));
  EXPECT_NE(e.find("section.yaml:1:1"), std::string::npos) << e;
}

TEST(Config, TypeErrorsNameTheKey) {
  std::string e = error_of(write_config("type.yaml", "train:\n  epochs: many\n"));
  EXPECT_NE(e.find("type.yaml:2:11"), std::string::npos) << e;
  EXPECT_NE(e.find("train.epochs"), std::string::npos) << e;
  e = error_of(write_config("neg.yaml", "data:\n  n_train: -5\n"));
  EXPECT_NE(e.find("non-negative"), std::string::npos) << e;
  e = error_of(write_config("pool.yaml", "model:\n  pool: median\n"));
  EXPECT_NE(e.find("model.pool"), std::string::npos) << e;
  EXPECT_NE(e.find("median"), std::string::npos) << e;
  e = error_of(write_config("rot.yaml", "eval:\n  rotations: [0, 5]\n"));
  EXPECT_NE(e.find("rot.yaml:2:18"), std::string::npos) << e;
}

TEST(Config, SemanticErrors) {
  EXPECT_NE(error_of(write_config("depth.yaml", "model:\n  depth: 0\n")).find("model.depth"), std::string::npos);
  EXPECT_NE(error_of(write_config("grid.yaml", "data:\n  grid_size: 8\n")).find("grid_size"), std::string::npos);
  EXPECT_NE(error_of(write_config("ad.yaml", "ablate:\n  depths: [2, 0]\n")).find("ablate.depths"), std::string::npos);
  EXPECT_NE(error_of(write_config("syntax.yaml", "model: [1,\n")), "");
  EXPECT_NE(error_of("/nonexistent/geqbev.yaml").find("not found"), std::string::npos);
}

TEST(Config, OverridesApplyInOrder) {
  const fs::path p = write_config("base.yaml", "train:\n  epochs: 3\n");
  const RunConfig c = load_run_config(p, {"train.epochs=7", "model.pool=max", "ablate.depths=[2,3]", "train.epochs=9"});
  EXPECT_EQ(c.train.epochs, 9u);
  EXPECT_EQ(c.model.pool.method, PoolMethod::max);
  EXPECT_EQ(c.ablate.depths, (std::vector<std::size_t>{2, 3}));
  EXPECT_NE(error_of(p, {"train.epoch=3"}).find("--set"), std::string::npos);
  EXPECT_NE(error_of(p, {"epochs=3"}).find("section.key"), std::string::npos);
  EXPECT_NE(error_of(p, {"train.epochs"}).find("section.key=value"), std::string::npos);
}

TEST(Config, JsonRoundTripIsExact) {
  RunConfig c = load_run_config(write_config("rt.yaml", R"(
data:
  noise_std: 0.1
  train_theta_max: 1.2345678901234567
model:
  arch: plain
  pool: beveq
train:
  learning_rate: 0.0003
ablate:
  archs: [geq, plain]
)"));
  const nlohmann::json j = to_json(c);
  const RunConfig back = run_config_from_json(j, "manifest");
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.data.train_theta_max, c.data.train_theta_max);
  EXPECT_EQ(back.train.learning_rate, c.train.learning_rate);
  const RunConfig changed = run_config_from_json(j, "manifest", {"train.epochs=1"});
  EXPECT_EQ(changed.train.epochs, 1u);
}
