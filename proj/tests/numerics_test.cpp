#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "sarseg/numerics/gradcheck.hpp"

namespace sarseg::num {
namespace {

using TD = Tensor<double>;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

TEST(RequiredOpSet, ContainsTheContractOps) {
  const auto ops = required_op_set();
  auto has = [&](const std::string& n) {
    return std::any_of(ops.begin(), ops.end(), [&](const auto& op) { return op.name == n; });
  };
  EXPECT_TRUE(has("conv2d"));
  EXPECT_TRUE(has("adaptive average pool"));
  for (const char* n : {"matmul", "transposed upsample 2x", "bilinear upsample", "nearest upsample",
                        "layer normalization", "group normalization", "gelu", "softmax", "sigmoid",
                        "log", "add", "mul", "sub", "window partition", "window reverse", "reshape",
                        "permute", "concat", "masked sum", "masked mean"})
    EXPECT_TRUE(has(n)) << n;
  EXPECT_EQ(ops.size(), 22u);
  for (const auto& op : ops) EXPECT_FALSE(op.gradient_rule.empty()) << op.name;
}

TEST(GradCheck, AddIsExact) {
  auto r = grad_check("add", {{2, 3}, {2, 3}}, 0);
  EXPECT_TRUE(r.passed);
  EXPECT_LE(r.max_rel_error, 1e-6);
  EXPECT_DOUBLE_EQ(r.step, 1e-4);
}

TEST(GradCheck, Softmax) {
  auto r = grad_check("softmax", {{4, 5}}, 1);
  EXPECT_TRUE(r.passed);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(GradCheck, Conv3x3) {
  auto r = grad_check("conv2d", {{1, 2, 8, 8}, {4, 2, 3, 3}}, 2);
  EXPECT_TRUE(r.passed);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(GradCheck, EveryOpFiveSeeds) {
  for (const auto& op : required_op_set()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto r = grad_check(op, {}, seed);
      EXPECT_TRUE(r.passed) << op.name << " seed " << seed << " err " << r.max_rel_error;
    }
  }
}

TEST(GradCheck, UnknownOpIsContractViolation) {
  EXPECT_THROW(grad_check("fft", {}, 0), ContractError);
}

TEST(GradCheck, StridedPaddedConvWithBias) {
  GradFn fn = [](const std::vector<TD>& in) { return conv2d(in[0], in[1], in[2], {2, 1}); };
  std::vector<Shape> shapes{{2, 3, 7, 6}, {4, 3, 3, 3}, {4}};
  std::vector<std::vector<double>> values;
  for (std::size_t i = 0; i < shapes.size(); ++i)
    values.push_back(random_values(static_cast<std::size_t>(numel(shapes[i])), 10 + i));
  EXPECT_TRUE(check_gradient("conv2d/s2", fn, values, shapes, 3, 1e-6).passed);
}

TEST(GradCheck, BroadcastAttentionMaskAdd) {
  GradFn fn = [](const std::vector<TD>& in) { return add(in[0], in[1]); };
  std::vector<Shape> shapes{{2, 3, 2, 4, 4}, {1, 3, 1, 4, 4}};
  std::vector<std::vector<double>> values{random_values(192, 1), random_values(48, 2)};
  EXPECT_TRUE(check_gradient("add/broadcast", fn, values, shapes, 4, 1e-6).passed);
}

TEST(GradCheck, TransposedMatmulAndResize) {
  GradFn fn = [](const std::vector<TD>& in) { return matmul(in[0], in[1], true); };
  EXPECT_TRUE(check_gradient("matmul^T", fn, {random_values(24, 1), random_values(40, 2)},
                             {{2, 3, 4}, {2, 5, 4}}, 5, 1e-6)
                  .passed);
  GradFn shared = [](const std::vector<TD>& in) { return matmul(in[0], in[1]); };
  EXPECT_TRUE(check_gradient("matmul/shared", shared, {random_values(24, 3), random_values(8, 4)},
                             {{2, 3, 4}, {4, 2}}, 6, 1e-6)
                  .passed);
  GradFn down = [](const std::vector<TD>& in) { return resize_bilinear(in[0], 2, 3); };
  EXPECT_TRUE(check_gradient("resize/down", down, {random_values(42, 5)}, {{1, 1, 6, 7}}, 7, 1e-6)
                  .passed);
}

TEST(BilinearUpsample, ConstantStaysConstant) {
  auto x = TD::full({1, 2, 3, 5}, 3.0);
  auto y = bilinear_upsample(x, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 6, 10}));
  for (double v : y.data()) EXPECT_EQ(v, 3.0);
}

TEST(BilinearUpsample, SingleSampleBroadcast) {
  auto y = bilinear_upsample(TD::from({1, 1, 1, 1}, {1.5}), 4);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  for (double v : y.data()) EXPECT_EQ(v, 1.5);
}

TEST(BilinearUpsample, RampMatchesHalfPixelOracle) {
  // value(y, x) = 2y + x is linear, so bilinear interpolation reproduces it at
  // the clamped half-pixel source coordinates {0, 0.25, 0.75, 1}.
  auto y = bilinear_upsample(TD::from({1, 1, 2, 2}, {0, 1, 2, 3}), 2);
  const double coord[4] = {0.0, 0.25, 0.75, 1.0};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y.data()[r * 4 + c], 2 * coord[r] + coord[c]);
}

TEST(BilinearUpsample, NonPositiveScaleRejected) {
  EXPECT_THROW(bilinear_upsample(TD::zeros({1, 1, 2, 2}), 0), ArgumentError);
  EXPECT_THROW(bilinear_upsample(TD::zeros({1, 1, 2, 2}), -2), ArgumentError);
}

TEST(Softmax, RowsAreDistributions) {
  auto y = softmax(TD::from({6, 7}, random_values(42, 9)));
  for (int r = 0; r < 6; ++r) {
    double s = 0;
    for (int c = 0; c < 7; ++c) {
      EXPECT_GE(y.data()[r * 7 + c], 0.0);
      s += y.data()[r * 7 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(WindowOps, PartitionThenReverseIsIdentity) {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t ws = 1 + rng() % 4;
    const std::int64_t h = ws * (1 + rng() % 3), w = ws * (1 + rng() % 3);
    const std::int64_t n = 1 + rng() % 2, c = 1 + rng() % 3;
    const std::int64_t shift = rng() % ws;
    auto x = TD::from({n, h, w, c}, random_values(static_cast<std::size_t>(n * h * w * c), trial));
    auto back = window_reverse(window_partition(x, ws, shift), ws, shift, h, w);
    EXPECT_EQ(back.shape(), x.shape());
    EXPECT_EQ(back.values(), x.values());
  }
}

TEST(WindowOps, IndivisibleMapIsConfigError) {
  EXPECT_THROW(window_partition(TD::zeros({1, 6, 6, 1}), 4), ConfigError);
}

TEST(Reductions, AllOnesMaskEqualsMeanExactly) {
  auto x = TD::from({5, 7}, random_values(35, 4));
  std::vector<std::uint8_t> ones(35, 1);
  EXPECT_EQ(masked_mean(x, ones).item(), mean(x).item());
  EXPECT_EQ(masked_sum(x, ones).item(), sum(x).item());
  std::vector<std::uint8_t> none(35, 0);
  EXPECT_THROW(masked_mean(x, none), EmptyInputError);
}

TEST(Conv2d, MatchesDirectConvolution) {
  auto xv = random_values(2 * 3 * 6 * 5, 1), wv = random_values(4 * 3 * 3 * 3, 2),
       bv = random_values(4, 3);
  auto y = conv2d(TD::from({2, 3, 6, 5}, xv), TD::from({4, 3, 3, 3}, wv), TD::from({4}, bv), {2, 1});
  ASSERT_EQ(y.shape(), (Shape{2, 4, 3, 3}));
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int oy = 0; oy < 3; ++oy)
        for (int ox = 0; ox < 3; ++ox) {
          double acc = bv[o];
          for (int c = 0; c < 3; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 5) continue;
                acc += xv[((n * 3 + c) * 6 + iy) * 5 + ix] * wv[((o * 3 + c) * 3 + ky) * 3 + kx];
              }
          EXPECT_NEAR(y.data()[((n * 4 + o) * 3 + oy) * 3 + ox], acc, 1e-12);
        }
}

TEST(AdaptivePool, BinsMatchTorchConvention) {
  // 5 -> 3 bins: [0,2), [1,4), [3,5)
  auto y = adaptive_avg_pool2d(TD::from({1, 1, 1, 5}, {1, 2, 3, 4, 5}), 1, 3);
  EXPECT_DOUBLE_EQ(y.data()[0], 1.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 3.0);
  EXPECT_DOUBLE_EQ(y.data()[2], 4.5);
  auto up = adaptive_avg_pool2d(TD::from({1, 1, 2, 2}, {1, 2, 3, 4}), 6, 6);
  EXPECT_EQ(up.shape(), (Shape{1, 1, 6, 6}));
  EXPECT_DOUBLE_EQ(up.data()[0], 1.0);
  EXPECT_DOUBLE_EQ(up.data()[35], 4.0);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  auto x = TD::from({3}, {1, 2, 3}, true);
  auto y = sum(mul(x, x) + x);  // d/dx = 2x + 1
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3);
  EXPECT_DOUBLE_EQ(x.grad()[1], 5);
  EXPECT_DOUBLE_EQ(x.grad()[2], 7);
}

TEST(Autograd, NoGradBuildsNoGraph) {
  auto x = TD::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(x * x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Trace, RecordsScopedOps) {
  TraceRecorder rec;
  {
    TraceScope s("head");
    bilinear_upsample(TD::zeros({1, 1, 2, 2}), 4);
  }
  ASSERT_EQ(rec.events().size(), 1u);
  EXPECT_EQ(rec.events()[0].scope, "head");
  EXPECT_EQ(rec.events()[0].op, "bilinear_upsample");
  EXPECT_EQ(rec.events()[0].detail, "x4");
}

}  // namespace
}  // namespace sarseg::num
