#include <gtest/gtest.h>

#include "geqbev/verify.hpp"

using namespace geqbev;

TEST(Verify, DefaultSuitePasses) {
  verify::Options opts;
  opts.trials = 20;
  const verify::Report r = verify::run(opts);
  for (const auto& p : r.properties) EXPECT_TRUE(p.passed) << p.name << ": " << p.max_error << " " << p.message;
  EXPECT_TRUE(r.passed());
  EXPECT_FALSE(r.vacuous());
  for (const char* law : {"equivariance.lift", "equivariance.gconv", "equivariance.gbn", "invariance.pool.max",
                          "invariance.pool.average", "oracle.conv2d", "oracle.gconv", "gradient.gconv",
                          "degeneration.c1"}) {
    EXPECT_NE(r.find(law), nullptr) << law;
  }
}

TEST(Verify, InjectedBugBreaksLiftingEquivariance) {
  verify::Options opts;
  opts.trials = 10;
  opts.inject_bug = true;
  opts.only = {"equivariance.lift", "invariance.pool"};
  const verify::Report r = verify::run(opts);
  const auto* lift = r.find("equivariance.lift");
  ASSERT_NE(lift, nullptr);
  EXPECT_FALSE(lift->passed);
  ASSERT_TRUE(lift->failing_seed.has_value());
  EXPECT_TRUE(r.find("invariance.pool.max")->passed);
  EXPECT_FALSE(r.passed());

  // the reported seed reproduces the failure on its own
  verify::Options replay = opts;
  replay.only = {"equivariance.lift"};
  replay.replay_seed = lift->failing_seed;
  const verify::Report again = verify::run(replay);
  EXPECT_EQ(again.find("equivariance.lift")->trials, 1u);
  EXPECT_FALSE(again.passed());
}

TEST(Verify, ZeroTrialsIsVacuous) {
  verify::Options opts;
  opts.trials = 0;
  const verify::Report r = verify::run(opts);
  EXPECT_TRUE(r.passed());
  EXPECT_TRUE(r.vacuous());
}

TEST(Verify, TrivialGroupSuitePasses) {
  verify::Options opts;
  opts.group = GroupSpec::c1();
  opts.trials = 5;
  EXPECT_TRUE(verify::run(opts).passed());
}

TEST(Verify, ReportSerializes) {
  verify::Options opts;
  opts.trials = 2;
  opts.only = {"oracle."};
  const auto j = verify::to_json(verify::run(opts));
  EXPECT_TRUE(j.at("passed").get<bool>());
  EXPECT_GE(j.at("properties").size(), 3u);
}
