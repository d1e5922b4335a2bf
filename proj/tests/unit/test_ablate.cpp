#include <gtest/gtest.h>

#include "geqbev/ablate.hpp"

#include <sstream>

#include <unistd.h>

using namespace geqbev;
namespace fs = std::filesystem;

namespace {

AblationPlan tiny_plan() {
  AblationPlan p;
  p.data.grid_size = 16;
  p.data.length_min = 5;
  p.data.length_max = 8;
  p.data.width_min = 2;
  p.data.width_max = 4;
  p.data.n_train = 6;
  p.data.n_test = 4;
  p.model.channels = 2;
  p.train.epochs = 1;
  p.train.batch_size = 3;
  p.depths = {1, 2};
  p.pools = {PoolMethod::max};
  p.seeds = {1, 2};
  return p;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

/// CSV without the two timing columns, which are the only non-reproducible ones.
std::string strip_timing(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    for (int i = 0; i < 2; ++i) line = line.substr(0, line.rfind(','));
    out += line + "\n";
  }
  return out;
}

void expect_same(const ArmResult& a, const ArmResult& b) {
  EXPECT_EQ(a.ok, b.ok);
  EXPECT_EQ(a.mean_error, b.mean_error);
  EXPECT_EQ(a.per_rotation_errors, b.per_rotation_errors);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.equivariance_error, b.equivariance_error);
}

}  // namespace

TEST(Ablate, ExpandsArmsInStableOrder) {
  AblationPlan p = tiny_plan();
  p.archs = {Arch::geq, Arch::plain};
  const auto arms = expand_arms(p);
  ASSERT_EQ(arms.size(), 8u);
  EXPECT_EQ(arms.front().id(), "geq_n1_max_s1");
  EXPECT_EQ(arms[1].id(), "geq_n1_max_s2");
  EXPECT_EQ(arms.back().id(), "plain_n2_max_s2");
}

TEST(Ablate, DuplicateArmsGiveIdenticalResults) {
  AblationPlan p = tiny_plan();
  p.depths = {1};
  p.seeds = {3, 3};
  const Dataset d = generate_dataset(p.data);
  const auto results = ablate(p, d);
  ASSERT_EQ(results.size(), 2u);
  ASSERT_TRUE(results[0].ok) << results[0].error;
  expect_same(results[0], results[1]);
}

TEST(Ablate, FailingArmDoesNotAbortOthers) {
  AblationPlan p = tiny_plan();
  p.depths = {0, 1};
  p.seeds = {1};
  const Dataset d = generate_dataset(p.data);
  const auto results = ablate(p, d);
  ASSERT_EQ(results.size(), 2u);
  EXPECT_FALSE(results[0].ok);
  EXPECT_NE(results[0].error.find("depth"), std::string::npos);
  EXPECT_TRUE(results[1].ok) << results[1].error;

  const std::string csv = results_csv(results, p.effective_rotations());
  EXPECT_NE(csv.find(",failed,"), std::string::npos);
  const auto rows = aggregate(results);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].failed, 1u);
  EXPECT_EQ(rows[1].runs, 1u);
}

TEST(Ablate, CsvHasOneRowPerArmAndRotationColumns) {
  AblationPlan p = tiny_plan();
  p.depths = {1, 2, 3};
  p.seeds = {1};
  p.train.epochs = 1;
  const Dataset d = generate_dataset(p.data);
  const auto results = ablate(p, d);
  const std::string csv = results_csv(results, p.effective_rotations());
  EXPECT_EQ(count_lines(csv), 1u + 3u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "arch,depth,pool,seed,status,mean_err,err_k0,err_k1,err_k2,err_k3,pred_equiv_max,"
            "pred_equiv_median,params,train_time,wall_time");
  const std::string table = format_table(aggregate(results));
  EXPECT_EQ(count_lines(table), 2u + 3u);
  const auto trends = depth_trends(aggregate(results));
  ASSERT_EQ(trends.size(), 1u);
  const auto summary = summary_json(results);
  EXPECT_EQ(summary.at("arms").size(), 3u);
  EXPECT_EQ(summary.at("depth_trends").size(), 1u);
}

TEST(Ablate, ForkedWorkersMatchSerialRun) {
  AblationPlan p = tiny_plan();
  const Dataset d = generate_dataset(p.data);
  const auto serial = ablate(p, d);
  p.jobs = 3;
  const fs::path scratch = fs::temp_directory_path() / ("geqbev_ablate_" + std::to_string(::getpid()));
  const auto forked = ablate(p, d, scratch);
  ASSERT_EQ(serial.size(), forked.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(serial[i].arm.id(), forked[i].arm.id());
    expect_same(serial[i], forked[i]);
  }
  EXPECT_EQ(strip_timing(results_csv(serial, p.effective_rotations())),
            strip_timing(results_csv(forked, p.effective_rotations())));
  EXPECT_FALSE(fs::exists(scratch));
}

TEST(Ablate, ArmResultJsonRoundTrip) {
  ArmResult r;
  r.arm = {Arch::plain, 4, PoolMethod::beveq, 17};
  r.ok = true;
  r.mean_error = 0.1234567890123456789;
  r.per_rotation_errors = {{0, 0.1}, {3, 1.0 / 3.0}};
  r.equivariance_error = std::nan("");
  r.loss_curve = {0.5, 0.25};
  r.params = 99;
  const ArmResult back = arm_result_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(back.arm.id(), r.arm.id());
  EXPECT_EQ(back.mean_error, r.mean_error);
  EXPECT_EQ(back.per_rotation_errors, r.per_rotation_errors);
  EXPECT_TRUE(std::isnan(back.equivariance_error));
  EXPECT_EQ(back.loss_curve, r.loss_curve);
}

TEST(Ablate, CheckpointsWrittenPerArm) {
  AblationPlan p = tiny_plan();
  p.depths = {1};
  p.seeds = {5};
  const fs::path dir = fs::temp_directory_path() / ("geqbev_ckpt_" + std::to_string(::getpid()));
  p.checkpoint_dir = dir;
  const Dataset d = generate_dataset(p.data);
  const auto results = ablate(p, d);
  ASSERT_TRUE(results[0].ok);
  const fs::path ckpt = dir / "geq_n1_max_s5.ckpt";
  ASSERT_TRUE(fs::exists(ckpt));
  Model m = load_checkpoint(ckpt);
  const EvalReport again = evaluate(m, d.test, p.effective_rotations());
  EXPECT_EQ(again.mean_angular_error, results[0].mean_error);
  fs::remove_all(dir);
}
