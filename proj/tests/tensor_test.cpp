#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "hydra/errors.hpp"
#include "hydra/gradcheck.hpp"
#include "hydra/ops.hpp"
#include "hydra/random.hpp"

using namespace hydra;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_tensor(Engine& eng, Shape dims, float lo = -1, float hi = 1) {
  std::vector<float> v(shape_numel(dims));
  for (auto& x : v) x = static_cast<float>(uniform(eng, lo, hi));
  return Tensor(std::move(dims), std::move(v));
}

// Independent scalar reference for half-pixel bilinear sampling along one axis.
double reference_sample(const std::vector<double>& row, std::size_t out_len, std::size_t o) {
  const double in_len = static_cast<double>(row.size());
  double x = (o + 0.5) * in_len / static_cast<double>(out_len) - 0.5;
  x = std::max(x, 0.0);
  const auto lo = std::min(static_cast<std::size_t>(x), row.size() - 1);
  const auto hi = std::min(lo + 1, row.size() - 1);
  const double t = x - static_cast<double>(lo);
  return row[lo] + t * (row[hi] - row[lo]);
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_NO_THROW(Tensor({2, 2}, {1, 2, 3, 4}));
}

TEST(Conv2d, IdentityKernelReproducesInput) {
  Engine eng = make_engine(1, "conv-id");
  auto x = random_tensor(eng, {2, 3, 4, 5});
  std::vector<float> w(9, 0.f);
  for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.f;
  auto y = conv2d(x, Tensor({3, 3, 1, 1}, w), Tensor::zeros({3}), 1, 0);
  EXPECT_EQ(values(y), values(x));
}

TEST(Conv2d, ZeroKernelGivesBias) {
  Engine eng = make_engine(2, "conv-zero");
  auto x = random_tensor(eng, {1, 2, 5, 5});
  auto y = conv2d(x, Tensor::zeros({2, 2, 3, 3}), Tensor({2}, {0.5f, -2.f}), 1, 1);
  ASSERT_EQ(y.dims(), (Shape{1, 2, 5, 5}));
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_EQ(y.at(i), 0.5f);
    EXPECT_EQ(y.at(25 + i), -2.f);
  }
}

TEST(Conv2d, HandEvaluatedScalarKernel) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = conv2d(x, Tensor({1, 1, 1, 1}, {2}), Tensor({1}, {1}), 1, 0);
  EXPECT_EQ(values(y), (std::vector<float>{3, 5, 7, 9}));
}

TEST(Conv2d, OutputSizeFormulaAndChannelMismatch) {
  auto y = conv2d(Tensor::zeros({1, 2, 7, 6}), Tensor::zeros({4, 2, 3, 3}), Tensor::zeros({4}), 2, 1);
  EXPECT_EQ(y.dims(), (Shape{1, 4, 4, 3}));
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 1, 1}), Tensor::zeros({1}), 1, 0),
               ShapeError);
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
  Tensor x({2, 2, 1, 2}, {3, 3, 7, 7, 3, 3, 7, 7});
  auto y = batchnorm(x, Tensor::full({2}, 1), Tensor::zeros({2}), static_cast<BatchNormStats<float>*>(nullptr),
                     BnMode::kTrain);
  for (float v : y.data()) EXPECT_EQ(v, 0.f);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  Engine eng = make_engine(3, "bn");
  auto x = random_tensor(eng, {3, 2, 2, 2});
  auto y = batchnorm(x, Tensor::zeros({2}), Tensor({2}, {0.25f, -1.5f}),
                     static_cast<BatchNormStats<float>*>(nullptr), BnMode::kTrain);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t q = 0; q < 4; ++q) {
      EXPECT_EQ(y.at(n * 8 + q), 0.25f);
      EXPECT_EQ(y.at(n * 8 + 4 + q), -1.5f);
    }
  }
}

TEST(BatchNorm, TwoValueChannelMapsToPlusMinusOne) {
  Tensor64 x({1, 1, 1, 2}, {1, 3});
  auto y = batchnorm(x, Tensor64::full({1}, 1), Tensor64::zeros({1}),
                     static_cast<BatchNormStats<double>*>(nullptr), BnMode::kTrain, 1e-12);
  EXPECT_NEAR(y.at(0), -1.0, 1e-9);
  EXPECT_NEAR(y.at(1), 1.0, 1e-9);
}

TEST(BatchNorm, RunningStatsUseMomentumAndEvalUsesThem) {
  Tensor x({1, 1, 1, 2}, {1, 3});
  BatchNormStats<float> stats{Tensor::zeros({1}), Tensor::full({1}, 1)};
  batchnorm(x, Tensor::full({1}, 1), Tensor::zeros({1}), &stats, BnMode::kTrain);
  EXPECT_FLOAT_EQ(stats.mean.at(0), 0.2f);       // 0.9 * 0 + 0.1 * 2
  EXPECT_FLOAT_EQ(stats.var.at(0), 1.0f);        // 0.9 * 1 + 0.1 * 1
  auto y = batchnorm(x, Tensor::full({1}, 1), Tensor::zeros({1}), &stats, BnMode::kEval);
  EXPECT_NEAR(y.at(0), (1 - 0.2) / std::sqrt(1 + 1e-5), 1e-6);
  EXPECT_FLOAT_EQ(stats.mean.at(0), 0.2f);
}

TEST(BatchNorm, RejectsNonPositiveEpsilon) {
  Tensor x({1, 1, 1, 2}, {1, 3});
  EXPECT_THROW(batchnorm(x, Tensor::full({1}, 1), Tensor::zeros({1}),
                         static_cast<BatchNormStats<float>*>(nullptr), BnMode::kTrain, 0.0),
               ParameterError);
}

TEST(Relu, ValuesAndSubgradient) {
  Tensor x({3}, {-2, 0, 3}, true);
  auto y = relu(x);
  EXPECT_EQ(values(y), (std::vector<float>{0, 0, 3}));
  sum(y).backward();
  EXPECT_EQ(std::vector<float>(x.grad().begin(), x.grad().end()), (std::vector<float>{0, 0, 1}));
}

TEST(MulBroadcast, IdentityAnnihilatorAndHandCase) {
  Engine eng = make_engine(4, "mb");
  auto f = random_tensor(eng, {2, 3, 2, 2});
  EXPECT_EQ(values(mul_broadcast(Tensor::full({2, 1, 2, 2}, 1), f)), values(f));
  auto zeroed = mul_broadcast(Tensor::zeros({2, 1, 2, 2}), f);
  for (float v : zeroed.data()) EXPECT_EQ(v, 0.f);
  auto y = mul_broadcast(Tensor({1, 1, 2, 2}, {2, 0, 1, 1}), Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(values(y), (std::vector<float>{2, 0, 3, 4}));
  EXPECT_THROW(mul_broadcast(Tensor::zeros({1, 1, 2, 3}), Tensor::zeros({1, 2, 2, 2})), ShapeError);
}

TEST(ConcatChannels, OrderAndInverseSlices) {
  Engine eng = make_engine(5, "cat");
  auto a = random_tensor(eng, {2, 1, 3, 2});
  auto b = random_tensor(eng, {2, 2, 3, 2});
  EXPECT_EQ(values(concat_channels(std::vector<Tensor>{a})), values(a));
  auto ab = concat_channels(std::vector<Tensor>{a, b});
  EXPECT_EQ(ab.dims(), (Shape{2, 3, 3, 2}));
  EXPECT_EQ(values(slice_channels(ab, 0, 1)), values(a));
  EXPECT_EQ(values(slice_channels(ab, 1, 2)), values(b));
  EXPECT_EQ(ab.at(0), a.at(0));
  EXPECT_EQ(ab.at(6), b.at(0));
  EXPECT_THROW(concat_channels(std::vector<Tensor>{a, Tensor::zeros({2, 1, 3, 3})}), ShapeError);
}

TEST(BatchToChannels, RegroupsExpandedBatch) {
  // groups = 2, n = 2, c = 1: rows g0n0, g0n1, g1n0, g1n1
  Tensor x({4, 1}, {1, 2, 3, 4});
  auto y = batch_to_channels(x, 2);
  EXPECT_EQ(y.dims(), (Shape{2, 2}));
  EXPECT_EQ(values(y), (std::vector<float>{1, 3, 2, 4}));
}

TEST(GlobalAvgPool, MeanAndGradient) {
  Tensor x({1, 1, 2, 2}, {1, 3, 5, 7}, true);
  auto y = global_avg_pool(x);
  EXPECT_EQ(y.item(), 4.f);
  sum(mul(y, Tensor({1, 1}, {8}))).backward();
  for (float g : x.grad()) EXPECT_EQ(g, 2.f);
  EXPECT_EQ(global_avg_pool(Tensor::full({1, 2, 3, 3}, 2.5f)).at(1), 2.5f);
}

TEST(FullyConnected, DotProductIdentityAndBias) {
  auto y = fully_connected(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {1, 1}), Tensor({1}, {0}));
  EXPECT_EQ(y.item(), 3.f);
  auto id = fully_connected(Tensor({1, 2}, {4, -1}), Tensor({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2}));
  EXPECT_EQ(values(id), (std::vector<float>{4, -1}));
  auto b = fully_connected(Tensor::zeros({2, 3}), Tensor::full({3, 2}, 7), Tensor({2}, {1, 2}));
  EXPECT_EQ(values(b), (std::vector<float>{1, 2, 1, 2}));
  EXPECT_THROW(fully_connected(Tensor::zeros({1, 2}), Tensor::zeros({3, 1}), Tensor::zeros({1})), ShapeError);
}

TEST(MaxPool, IdentityMaxAndTieRule) {
  Engine eng = make_engine(6, "mp");
  auto x = random_tensor(eng, {1, 2, 3, 3});
  EXPECT_EQ(values(max_pool(x, 1, 1)), values(x));
  EXPECT_EQ(max_pool(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2).item(), 4.f);

  Tensor tie({1, 1, 2, 2}, {5, 5, 0, 0}, true);
  sum(max_pool(tie, 2, 2)).backward();
  EXPECT_EQ(std::vector<float>(tie.grad().begin(), tie.grad().end()), (std::vector<float>{1, 0, 0, 0}));
  EXPECT_THROW(max_pool(Tensor::zeros({1, 1, 2, 2}), 3, 1), ShapeError);
}

TEST(BilinearResize, IdentityConstantAndScalarOracle) {
  Engine eng = make_engine(7, "rs");
  auto x = random_tensor(eng, {1, 2, 3, 4});
  EXPECT_EQ(values(bilinear_resize(x, 3, 4)), values(x));
  auto flat = bilinear_resize(Tensor::full({1, 1, 2, 3}, 1.25f), 5, 7);
  for (float v : flat.data()) EXPECT_FLOAT_EQ(v, 1.25f);

  auto y = bilinear_resize(Tensor({1, 1, 1, 2}, {0, 2}), 1, 4);
  const std::vector<double> row{0, 2};
  for (std::size_t o = 0; o < 4; ++o) EXPECT_DOUBLE_EQ(y.at(o), reference_sample(row, 4, o));
  EXPECT_EQ(values(y), (std::vector<float>{0, 0.5f, 1.5f, 2}));
}

TEST(BilinearResize, SeparableAgainstScalarOracle) {
  Engine eng = make_engine(8, "rs2");
  auto x = random_tensor(eng, {1, 1, 3, 5});
  auto y = bilinear_resize(x, 7, 2);
  // Interpolate rows first, then columns, with the scalar reference.
  std::vector<std::vector<double>> rows(3);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> src(5);
    for (std::size_t c = 0; c < 5; ++c) src[c] = x.at(r * 5 + c);
    for (std::size_t o = 0; o < 2; ++o) rows[r].push_back(reference_sample(src, 2, o));
  }
  for (std::size_t oc = 0; oc < 2; ++oc) {
    std::vector<double> col{rows[0][oc], rows[1][oc], rows[2][oc]};
    for (std::size_t orow = 0; orow < 7; ++orow) {
      EXPECT_NEAR(y.at(orow * 2 + oc), reference_sample(col, 7, orow), 1e-6);
    }
  }
}

TEST(Backward, SumAndSquare) {
  Tensor64 x({3}, {1, -2, 0.5}, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  Tensor64 z({3}, {1, -2, 0.5}, true);
  sum(mul(z, z)).backward();
  EXPECT_EQ(std::vector<double>(z.grad().begin(), z.grad().end()), (std::vector<double>{2, -4, 1}));
  EXPECT_THROW(Tensor({2}, {1, 2}, true).backward(), UsageError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor64 x({2}, {1.5, -0.5}, true);
  auto y = relu(x);
  auto loss = sum(mul(y, y));
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(GradCheck, LinearOpIsExact) {
  Tensor64 w({3, 2}, {0.3, -0.1, 0.7, 0.2, -0.4, 0.9}, true);
  Tensor64 x({2, 3}, {1, 2, -1, 0.5, 0, 3}, true);
  Tensor64 b({2}, {0.1, -0.2}, true);
  Graph64 g = [](const std::vector<Tensor64>& in) { return sum(fully_connected(in[0], in[1], in[2])); };
  EXPECT_LE(grad_check(g, {x, w, b}, 1e-3), 1e-9);
}

TEST(GradCheck, CompositeConvBnReluGap) {
  auto reports = run_gradcheck_suite({"composite", "conv2d"}, 5, 11);
  for (const auto& r : reports) EXPECT_LT(r.max_relative_error, 1e-4) << r.op;
}

TEST(GradCheck, UnknownOpRejected) {
  EXPECT_THROW(run_gradcheck_suite({"nope"}, 1, 0), UsageError);
}

TEST(Determinism, ForwardIsBitIdentical) {
  Engine a = make_engine(9, "det");
  auto x = random_tensor(a, {2, 3, 6, 5});
  auto w = random_tensor(a, {4, 3, 3, 3});
  auto b = random_tensor(a, {4});
  auto run = [&] {
    return values(global_avg_pool(relu(batchnorm(conv2d(x, w, b, 1, 1), Tensor::full({4}, 1), Tensor::zeros({4}),
                                                 static_cast<BatchNormStats<float>*>(nullptr), BnMode::kTrain))));
  };
  EXPECT_EQ(run(), run());
}

TEST(Finiteness, ForwardOpsStayFinite) {
  Engine eng = make_engine(10, "fin");
  for (int rep = 0; rep < 20; ++rep) {
    auto x = random_tensor(eng, {2, 2, 5, 4}, -100, 100);
    auto y = bilinear_resize(max_pool(relu(batchnorm(x, Tensor::full({2}, 1), Tensor::zeros({2}),
                                                     static_cast<BatchNormStats<float>*>(nullptr),
                                                     BnMode::kTrain)),
                                      2, 2),
                             3, 3);
    for (float v : y.data()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(GradCheck, EveryPrimitiveTwentyInstances) {
  auto reports = run_gradcheck_suite(gradcheck_op_names(), 20, 2024);
  for (const auto& r : reports) {
    EXPECT_EQ(r.instances, 20u);
    EXPECT_LT(r.max_relative_error, 1e-4) << r.op;
  }
}
