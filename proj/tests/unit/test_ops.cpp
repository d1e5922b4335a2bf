#include <gtest/gtest.h>

#include "geqbev/ops.hpp"
#include "geqbev/reference.hpp"

using namespace geqbev;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Conv2d, OnesKernelSumsNineOnes) {
  const Tensor y = conv2d(Tensor::ones({1, 1, 3, 3}), Tensor::ones({1, 1, 3, 3}), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST(Conv2d, ZeroKernelAnnihilates) {
  Rng rng(4);
  const Tensor y = conv2d(Tensor::uniform({2, 3, 6, 6}, -1, 1, rng), Tensor::zeros({4, 3, 3, 3}), 1, 1);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(5);
  const Tensor x = Tensor::uniform({2, 3, 8, 8}, -1, 1, rng);
  const Tensor k = Tensor::uniform({5, 3, 3, 3}, -1, 1, rng);
  const Tensor y = conv2d(x, k, 1, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 5, 8, 8}));
  EXPECT_LE(reference::relative_error(y, reference::conv2d(x, k, 1, 1)), 1e-12);
}

TEST(Conv2d, StridedAndRectangularMatchOracle) {
  Rng rng(6);
  for (std::size_t stride : {1u, 2u, 3u}) {
    for (std::size_t pad : {0u, 1u, 2u}) {
      const Tensor x = Tensor::uniform({1, 2, 7, 9}, -1, 1, rng);
      const Tensor k = Tensor::uniform({3, 2, 3, 5}, -1, 1, rng);
      EXPECT_LE(reference::relative_error(conv2d(x, k, stride, pad), reference::conv2d(x, k, stride, pad)),
                1e-12)
          << "stride " << stride << " pad " << pad;
    }
  }
}

TEST(Conv2d, Errors) {
  Rng rng(1);
  const Tensor x = Tensor::uniform({1, 2, 5, 5}, -1, 1, rng);
  EXPECT_THROW(conv2d(x, Tensor::ones({1, 3, 3, 3})), ShapeMismatch);
  EXPECT_THROW(conv2d(x, Tensor::ones({1, 2, 2, 2})), InvalidHyperparameter);
  EXPECT_THROW(conv2d(x, Tensor::ones({1, 2, 3, 3}), 0), InvalidHyperparameter);
  EXPECT_THROW(conv2d(Tensor::ones({2, 5, 5}), Tensor::ones({1, 2, 3, 3})), ShapeMismatch);
}

TEST(Conv2d, GradientsMatchFiniteDifferencesWithPaddingAndStride) {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = Tensor::uniform({2, 2, 6, 6}, -1, 1, rng);
    Tensor k = Tensor::uniform({3, 2, 3, 3}, -1, 1, rng);
    const std::size_t stride = 1 + trial % 2;
    EXPECT_LE(reference::gradient_check([&] { return conv2d(x, k, stride, 1); }, {x, k}, rng), 1e-6);
  }
}

TEST(Elementwise, Relu) {
  EXPECT_EQ(values(relu(Tensor({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
}

TEST(Elementwise, ShapeMismatch) {
  EXPECT_THROW(add(Tensor::ones({2}), Tensor::ones({3})), ShapeMismatch);
  EXPECT_THROW(mul(Tensor::ones({2, 1}), Tensor::ones({1, 2})), ShapeMismatch);
  EXPECT_THROW(reshape(Tensor::ones({2, 3}), {4}), ShapeMismatch);
  EXPECT_THROW(permute(Tensor::ones({2, 3}), {0, 0}), ShapeMismatch);
}

TEST(Layout, ConcatShapeArithmetic) {
  const Tensor c = concat({Tensor::ones({1, 2, 2, 2}), Tensor::zeros({1, 3, 2, 2})}, 1);
  EXPECT_EQ(c.shape(), (Shape{1, 5, 2, 2}));
  EXPECT_EQ(c.at({0, 1, 1, 1}), 1.0);
  EXPECT_EQ(c.at({0, 2, 0, 0}), 0.0);
  EXPECT_THROW(concat({Tensor::ones({1, 2}), Tensor::ones({2, 2})}, 1), ShapeMismatch);
}

TEST(Layout, PermuteMatchesIndexMapping) {
  Rng rng(9);
  const Tensor a = Tensor::uniform({2, 3, 4}, -1, 1, rng);
  const Tensor p = permute(a, {2, 0, 1});
  ASSERT_EQ(p.shape(), (Shape{4, 2, 3}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(p.at({k, i, j}), a.at({i, j, k}));
}

TEST(Reduce, MaxOverAxisMatchesLoop) {
  Rng rng(10);
  const Tensor a = Tensor::uniform({1, 1, 4, 2, 2}, -1, 1, rng);
  const Tensor m = max(a, 2);
  ASSERT_EQ(m.shape(), (Shape{1, 1, 2, 2}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double best = -1e300;
      for (std::size_t r = 0; r < 4; ++r) best = std::max(best, a.at({0, 0, r, i, j}));
      EXPECT_EQ(m.at({0, 0, i, j}), best);
    }
}

TEST(Reduce, SumAndMeanOverAxis) {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(sum(a, 0)), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(values(mean(a, 1)), (std::vector<double>{2, 5}));
  EXPECT_EQ(sum(a).item(), 21.0);
  EXPECT_THROW(sum(a, 2), ShapeMismatch);
}

TEST(Reduce, SoftmaxRowsSumToOne) {
  Rng rng(12);
  const Tensor s = softmax(Tensor::uniform({3, 5}, -4, 4, rng), 1);
  for (std::size_t i = 0; i < 3; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 5; ++j) total += s.at({i, j});
    EXPECT_NEAR(total, 1.0, 1e-14);
  }
}

TEST(Gradients, EveryOpMatchesFiniteDifferences) {
  Rng rng(13);
  Tensor a = Tensor::uniform({2, 3, 4}, 0.2, 1.0, rng);
  Tensor b = Tensor::uniform({2, 3, 4}, 0.2, 1.0, rng);
  Tensor m = Tensor::uniform({2, 4, 3}, -1, 1, rng);
  const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
      {"add", [&] { return add(a, b); }},
      {"sub", [&] { return sub(a, b); }},
      {"mul", [&] { return mul(a, b); }},
      {"scale", [&] { return scale(a, -1.5); }},
      {"relu", [&] { return relu(sub(a, b)); }},
      {"permute", [&] { return permute(a, {1, 2, 0}); }},
      {"concat", [&] { return concat({a, b}, 2); }},
      {"expand", [&] { return expand(reshape(a, {2, 3, 4, 1}), {2, 3, 4, 5}); }},
      {"rot90", [&] { return rot90(reshape(a, {2, 1, 3, 4}), 1); }},
      {"roll", [&] { return roll(a, 2, 3); }},
      {"sum", [&] { return sum(a, 1); }},
      {"mean", [&] { return mean(a, 2); }},
      {"max", [&] { return max(a, 2); }},
      {"softmax", [&] { return softmax(a, 1); }},
      {"bmm", [&] { return bmm(a, m); }},
  };
  for (const auto& [name, f] : cases) {
    EXPECT_LE(reference::gradient_check(f, {a, b, m}, rng), 1e-6) << name;
  }
}

TEST(Rot90, FourQuarterTurnsAreIdentity) {
  Rng rng(14);
  const Tensor x = Tensor::uniform({7, 7}, -1, 1, rng);
  Tensor y = x;
  for (int i = 0; i < 4; ++i) y = rot90(y, 1);
  EXPECT_EQ(values(y), values(x));
}

TEST(Matmul, SmallProduct) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {5, 6});
  EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{17, 39}));
  EXPECT_THROW(matmul(a, Tensor::ones({3, 1})), ShapeMismatch);
}
