#include <gtest/gtest.h>

#include "geqbev/synth_bev.hpp"

#include <numbers>
#include <set>

#include <unistd.h>

using namespace geqbev;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

double occupancy(const BevSample& s) {
  double total = 0.0;
  const std::size_t S = s.grid_size();
  for (std::size_t i = 0; i < S * S; ++i) total += s.grid.data()[S * S + i];
  return total;
}

DatasetConfig small_config() {
  DatasetConfig c;
  c.n_train = 12;
  c.n_test = 5;
  c.seed = 21;
  return c;
}

}  // namespace

TEST(Rasterize, AxisAlignedBlock) {
  // 6 long along columns, 3 wide along rows, centered on the grid
  const BevSample s = rasterize(32, {0.0, 16.0, 15.5, 6.0, 3.0, 0.5}, 0.0, nullptr);
  std::set<std::size_t> rows, cols;
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c)
      if (s.grid.at({1, r, c}) == 1.0) {
        rows.insert(r);
        cols.insert(c);
      }
  EXPECT_EQ(rows, (std::set<std::size_t>{15, 16, 17}));
  EXPECT_EQ(cols, (std::set<std::size_t>{13, 14, 15, 16, 17, 18}));
  EXPECT_EQ(occupancy(s), 18.0);
}

TEST(Rasterize, NoiselessIntensityIsPiecewiseConstant) {
  Rng rng(1);
  DatasetConfig cfg;
  cfg.noise_std = 0.0;
  const BevSample s = render_sample(rng, cfg, 0.0, kTwoPi);
  std::set<double> levels;
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c)
      if (s.grid.at({1, r, c}) == 1.0) levels.insert(s.grid.at({0, r, c}));
  EXPECT_GE(levels.size(), 1u);
  EXPECT_LE(levels.size(), 2u);  // body and brighter front
}

TEST(RenderSample, SameSeedIsBitIdentical) {
  DatasetConfig cfg;
  Rng a(5), b(5);
  EXPECT_TRUE(render_sample(a, cfg, 0, kHalfPi) == render_sample(b, cfg, 0, kHalfPi));
}

TEST(RenderSample, FootprintStaysInsideGrid) {
  DatasetConfig cfg;
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const BevSample s = render_sample(rng, cfg, 0, kTwoPi);
    EXPECT_GE(s.theta(), 0.0);
    EXPECT_LT(s.theta(), kTwoPi);
    // every cell the object covers is inside, so the area is close to L*W
    EXPECT_NEAR(occupancy(s), s.length * s.width, 0.35 * s.length * s.width);
  }
}

TEST(RenderSample, PlacementFailureWhenObjectCannotFit) {
  DatasetConfig cfg;
  cfg.grid_size = 16;
  cfg.length_min = cfg.length_max = 40.0;
  Rng rng(7);
  EXPECT_THROW(render_sample(rng, cfg, 0, kHalfPi), PlacementFailure);
}

TEST(RotateSample, IdentityAndLabelArithmetic) {
  const BevSample s = rasterize(32, {0.3, 12.0, 20.0, 8.0, 4.0, 0.5}, 0.0, nullptr);
  EXPECT_TRUE(rotate_sample(s, 0) == s);
  const BevSample q = rotate_sample(s, 1);
  EXPECT_DOUBLE_EQ(q.theta(), 0.3 + kPi / 2);
  EXPECT_TRUE(rotate_sample(q, 3) == s);
  EXPECT_TRUE(rotate_sample(s, -1) == rotate_sample(s, 3));
}

TEST(RotateSample, GridFollowsPlaneActionAndKeepsMass) {
  Rng rng(8);
  DatasetConfig cfg;
  for (int i = 0; i < 10; ++i) {
    const BevSample s = render_sample(rng, cfg, 0, kTwoPi);
    for (int k = 0; k < 4; ++k) {
      const BevSample q = rotate_sample(s, k);
      const Tensor expected = act_on_plane(GroupElement(GroupSpec::c4(), k), s.grid);
      EXPECT_TRUE(std::equal(q.grid.data().begin(), q.grid.data().end(), expected.data().begin()));
      EXPECT_EQ(occupancy(q), occupancy(s));
    }
  }
}

TEST(RotateSample, RotatedRenderingMatchesRotatedLabels) {
  // rasterizing at the rotated pose gives the rotated grid (noise free, exact
  // quarter-turn symmetry of the cell lattice about the grid center)
  const ObjectSpec obj{0.7, 11.0, 19.0, 9.0, 4.0, 0.5};
  const BevSample s = rasterize(32, obj, 0.0, nullptr);
  const BevSample q = rotate_sample(s, 1);
  const auto [row, col] = q.center();
  const BevSample direct = rasterize(32, {q.theta(), row, col, obj.length, obj.width, 0.5}, 0.0, nullptr);
  double mismatch = 0.0;
  for (std::size_t i = 0; i < direct.grid.numel(); ++i) mismatch += std::abs(direct.grid.data()[i] - q.grid.data()[i]);
  EXPECT_LE(mismatch, 1e-9);
}

TEST(AngularError, Examples) {
  EXPECT_DOUBLE_EQ(angular_error(0.0, kPi / 2), kPi / 2);
  EXPECT_NEAR(angular_error(350.0 * kPi / 180, 10.0 * kPi / 180), 20.0 * kPi / 180, 1e-12);
  EXPECT_EQ(angular_error(1.234, 1.234), 0.0);
  EXPECT_NEAR(angular_error(0.0, kPi), kPi, 1e-15);
  EXPECT_NEAR(angular_error(-0.1, 4 * kPi + 0.1), 0.2, 1e-12);
}

TEST(Dataset, DeterministicAndPolicyRanges) {
  const DatasetConfig cfg = small_config();
  const Dataset a = generate_dataset(cfg), b = generate_dataset(cfg);
  ASSERT_EQ(a.train.size(), 12u);
  ASSERT_EQ(a.test.size(), 5u);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_TRUE(a.train[i] == b.train[i]);
    EXPECT_LT(a.train[i].theta(), kHalfPi);
  }
  EXPECT_EQ(evaluation_rotations(TestRotationPolicy::c4_multiples), (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(evaluation_rotations(TestRotationPolicy::none), (std::vector<int>{0}));
  DatasetConfig bad = cfg;
  bad.grid_size = 8;
  EXPECT_THROW(generate_dataset(bad), InvalidConfig);
}

TEST(Dataset, ExportImportRoundTrip) {
  const Dataset d = generate_dataset(small_config());
  const fs::path dir = fs::temp_directory_path() / ("geqbev_ds_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  export_dataset(d, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "train" / "000000.bin"));
  const Dataset back = import_dataset(dir);
  ASSERT_EQ(back.train.size(), d.train.size());
  ASSERT_EQ(back.test.size(), d.test.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) EXPECT_TRUE(back.train[i] == d.train[i]);
  for (std::size_t i = 0; i < d.test.size(); ++i) EXPECT_TRUE(back.test[i] == d.test[i]);
  EXPECT_EQ(back.config.seed, d.config.seed);
  fs::remove_all(dir);
  EXPECT_THROW(import_dataset(dir), FormatError);
}
