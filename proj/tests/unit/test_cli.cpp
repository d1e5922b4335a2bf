#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("geqbev_cli_" + std::to_string(::getpid())) / info->name();
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  /// Runs the CLI inside the test directory, capturing stdout and stderr.
  Result run(const std::string& args) const {
    const fs::path log = dir_ / "cli.log";
    const std::string cmd = "cd '" + dir_.string() + "' && '" GEQBEV_CLI_PATH "' " + args + " > '" +
                            log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  std::string read(const fs::path& p) const {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

const char* kTinyConfig = R"(data:
  grid_size: 16
  n_train: 8
  n_test: 4
  object_length: [5, 8]
  object_width: [2, 4]
model:
  depth: 1
  channels: 2
  pool: max
train:
  epochs: 1
  batch_size: 4
ablate:
  depths: [2, 3, 4]
  seeds: [1, 2]
  jobs: 2
output:
  root: runs
)";

}  // namespace

TEST_F(Cli, VerifyPassesAndReportsJson) {
  const Result r = run("verify --trials 5 --json report.json");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("all properties hold"), std::string::npos);
  const auto j = nlohmann::json::parse(read(dir_ / "report.json"));
  EXPECT_TRUE(j.at("passed").get<bool>());
}

TEST_F(Cli, VerifyInjectedBugFailsWithReproduction) {
  const Result r = run("verify --trials 5 --inject-bug --only equivariance.lift");
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("violated: equivariance.lift"), std::string::npos) << r.out;
  const auto at = r.out.find("--replay-seed ");
  ASSERT_NE(at, std::string::npos) << r.out;
  const std::string seed = r.out.substr(at + 14, r.out.find_first_of(" \n", at + 14) - at - 14);
  const Result again = run("verify --only equivariance.lift --inject-bug --replay-seed " + seed);
  EXPECT_EQ(again.code, 1) << again.out;
}

TEST_F(Cli, VerifyZeroTrialsWarns) {
  const Result r = run("verify --trials 0");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("vacuous"), std::string::npos) << r.out;
}

TEST_F(Cli, MalformedConfigCreatesNoRunDirectory) {
  write("bad.yaml", "output:\n  root: runs\nmodel:\n  depht: 3\n");
  Result r = run("train -c bad.yaml");
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("bad.yaml:4:3"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(dir_ / "runs"));

  write("typo.yaml", "output:\n  root: runs\ntrain:\n  epochs: [1]\n");
  r = run("ablate -c typo.yaml");
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_FALSE(fs::exists(dir_ / "runs"));

  r = run("eval -s output.root=runs");
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("eval.checkpoint"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(dir_ / "runs"));

  r = run("train --no-such-flag");
  EXPECT_EQ(r.code, 2) << r.out;
}

TEST_F(Cli, TrainTwiceFromManifestGivesIdenticalCheckpoints) {
  write("tiny.yaml", kTinyConfig);
  Result r = run("train -c tiny.yaml --run-dir first");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto manifest = nlohmann::json::parse(read(dir_ / "first" / "manifest.json"));
  EXPECT_EQ(manifest.at("command"), "train");
  EXPECT_EQ(manifest.at("status"), "ok");
  EXPECT_EQ(manifest.at("config").at("train").at("epochs"), 1);
  EXPECT_TRUE(manifest.contains("started_at") && manifest.contains("finished_at"));

  r = run("train -m first/manifest.json --run-dir second");
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string a = read(dir_ / "first" / "model.ckpt"), b = read(dir_ / "second" / "model.ckpt");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_EQ(read(dir_ / "first" / "loss_curve.csv"), read(dir_ / "second" / "loss_curve.csv"));

  r = run("eval -m first/manifest.json");
  EXPECT_EQ(r.code, 2) << r.out;  // a train manifest cannot drive eval

  r = run("eval -c tiny.yaml -s eval.checkpoint=first/model.ckpt --run-dir ev");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto report = nlohmann::json::parse(read(dir_ / "ev" / "eval.json"));
  EXPECT_EQ(report.at("per_rotation_errors").size(), 4u);
  EXPECT_LE(report.at("prediction_equivariance_max").get<double>(), 1e-6);
}

TEST_F(Cli, GenDataThenTrainFromExportedDataset) {
  write("tiny.yaml", kTinyConfig);
  Result r = run("gen-data -c tiny.yaml --run-dir data");
  ASSERT_EQ(r.code, 0) << r.out;
  ASSERT_TRUE(fs::exists(dir_ / "data" / "dataset" / "manifest.json"));
  r = run("train -c tiny.yaml -s data.path=data/dataset --run-dir a");
  ASSERT_EQ(r.code, 0) << r.out;
  r = run("train -c tiny.yaml --run-dir b");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(read(dir_ / "a" / "model.ckpt"), read(dir_ / "b" / "model.ckpt"));
  r = run("train -c tiny.yaml -s data.path=missing");
  EXPECT_EQ(r.code, 2) << r.out;
}

TEST_F(Cli, AblateDepthsWritesOneRowPerArmInTimestampedDirectory) {
  write("tiny.yaml", kTinyConfig);
  const Result r = run("ablate -c tiny.yaml");
  ASSERT_EQ(r.code, 0) << r.out;
  std::vector<fs::path> runs;
  for (const auto& e : fs::directory_iterator(dir_ / "runs")) runs.push_back(e.path());
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].filename().string().rfind("ablate-", 0), 0u);
  const std::string csv = read(runs[0] / "results.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 2);
  EXPECT_TRUE(fs::exists(runs[0] / "summary.json"));
  EXPECT_TRUE(fs::exists(runs[0] / "table.md"));
  EXPECT_TRUE(fs::exists(runs[0] / "checkpoints" / "geq_n3_beveq_s2.ckpt"));
  EXPECT_FALSE(fs::exists(runs[0] / ".workers"));
  EXPECT_NE(r.out.find("depth trend"), std::string::npos) << r.out;
}
