#include <gtest/gtest.h>

#include "geqbev/model.hpp"

#include <filesystem>
#include <fstream>

#include <unistd.h>

using namespace geqbev;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("geqbev_model_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

Shape squeeze(const Shape& s) {
  Shape out;
  for (std::size_t e : s)
    if (e != 1) out.push_back(e);
  return out;
}

}  // namespace

TEST(BuildModel, GeqDepthThreeLayout) {
  ModelConfig cfg;
  cfg.depth = 3;
  const Model m = build_model(cfg, GroupSpec::c4(), 1);
  const std::vector<std::string> expected = {"lift", "bn", "relu", "gconv", "bn",   "relu",
                                             "gconv", "bn", "relu", "gconv", "pool", "head"};
  EXPECT_EQ(m.stack.kinds(), expected);
}

TEST(BuildModel, InvalidConfigsRejected) {
  ModelConfig cfg;
  cfg.depth = 0;
  EXPECT_THROW(build_model(cfg, GroupSpec::c4(), 1), InvalidConfig);
  cfg = {};
  cfg.kernel_size = 4;
  EXPECT_THROW(build_model(cfg, GroupSpec::c4(), 1), InvalidConfig);
  cfg = {};
  cfg.channels = 1;
  EXPECT_THROW(build_model(cfg, GroupSpec::c4(), 1), InvalidConfig);
}

TEST(BuildModel, TrivialGroupMatchesPlainShapes) {
  ModelConfig geq;
  geq.pool = {PoolMethod::max};
  ModelConfig plain = geq;
  plain.arch = Arch::plain;
  plain.match_params = false;
  const Model a = build_model(geq, GroupSpec::c1(), 1);
  const Model b = build_model(plain, GroupSpec::c1(), 1);
  const auto pa = a.stack.parameters(), pb = b.stack.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(squeeze(pa[i].tensor.shape()), squeeze(pb[i].tensor.shape())) << pa[i].name;
  }
  EXPECT_EQ(a.stack.parameter_count(), b.stack.parameter_count());
}

TEST(BuildModel, PlainBaselineParameterCountWithinFivePercent) {
  for (std::size_t depth : {1u, 2u, 3u, 4u, 5u}) {
    for (PoolMethod pool : {PoolMethod::max, PoolMethod::average, PoolMethod::beveq}) {
      for (std::size_t C : {2u, 4u, 6u}) {
        ModelConfig cfg;
        cfg.depth = depth;
        cfg.pool = {pool};
        cfg.channels = C;
        const Model g = build_model(cfg, GroupSpec::c4(), 1);
        cfg.arch = Arch::plain;
        const Model p = build_model(cfg, GroupSpec::c4(), 1);
        const double a = static_cast<double>(g.stack.parameter_count());
        const double b = static_cast<double>(p.stack.parameter_count());
        EXPECT_LE(std::abs(a - b) / a, 0.05) << "depth " << depth << " C " << C;
      }
    }
  }
}

TEST(BuildModel, ForwardShapesAndSeedDeterminism) {
  Rng rng(2);
  const Tensor x = Tensor::uniform({3, 2, 16, 16}, 0, 1, rng);
  for (Arch arch : {Arch::geq, Arch::plain}) {
    ModelConfig cfg;
    cfg.arch = arch;
    Model a = build_model(cfg, GroupSpec::c4(), 5);
    Model b = build_model(cfg, GroupSpec::c4(), 5);
    const Tensor ya = a.forward(x, false), yb = b.forward(x, false);
    EXPECT_EQ(ya.shape(), (Shape{3, 2}));
    EXPECT_TRUE(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(3);
  const Tensor x = Tensor::uniform({2, 2, 16, 16}, 0, 1, rng);
  for (Arch arch : {Arch::geq, Arch::plain}) {
    ModelConfig cfg;
    cfg.arch = arch;
    Model m = build_model(cfg, GroupSpec::c4(), 9);
    m.forward(x, true);  // moves the running statistics off their defaults
    const fs::path path = scratch(std::string(to_string(arch)) + ".ckpt");
    save_checkpoint(path, m);
    Model back = load_checkpoint(path);
    const auto s0 = state_tensors(m), s1 = state_tensors(back);
    ASSERT_EQ(s0.size(), s1.size());
    for (std::size_t i = 0; i < s0.size(); ++i) {
      EXPECT_EQ(s0[i].name, s1[i].name);
      EXPECT_TRUE(std::equal(s0[i].tensor.data().begin(), s0[i].tensor.data().end(),
                             s1[i].tensor.data().begin()));
    }
    const Tensor y0 = m.forward(x, false), y1 = back.forward(x, false);
    EXPECT_TRUE(std::equal(y0.data().begin(), y0.data().end(), y1.data().begin()));
  }
}

TEST(Checkpoint, CorruptFilesRejected) {
  const fs::path bad = scratch("bad.ckpt");
  std::ofstream(bad) << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(bad), FormatError);
  EXPECT_THROW(load_checkpoint(scratch("missing.ckpt")), FormatError);

  Model m = build_model({}, GroupSpec::c4(), 1);
  const fs::path good = scratch("trunc.ckpt");
  save_checkpoint(good, m);
  const auto size = fs::file_size(good);
  fs::resize_file(good, size - 10);
  EXPECT_THROW(load_checkpoint(good), FormatError);
}
