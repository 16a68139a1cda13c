#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sarseg/losses.hpp"
#include "sarseg/numerics/gradcheck.hpp"

namespace sarseg::loss {
namespace {

using TD = num::Tensor<double>;

data::ClassStats freq_stats(std::vector<std::uint64_t> counts) { return data::stats_from_counts(std::move(counts)); }

TD one_pixel(double z0, double z1) { return TD::from({1, 2, 1, 1}, {z0, z1}, true); }

// Independent scalar oracle for one pixel of the focal term.
double focal_oracle(double pt, double alpha, double scale, double gamma, double eps) {
  return -scale * alpha * std::pow(1 - pt, gamma) * std::log(pt + eps);
}

TEST(ClassWeights, HandEvaluations) {
  auto u = class_weights(freq_stats({5, 5, 5, 5}));
  for (double a : u.alpha) EXPECT_DOUBLE_EQ(a, 0.25);
  auto two = class_weights(freq_stats({9, 1}));
  EXPECT_NEAR(two.raw[0], 0.1, 1e-15);
  EXPECT_NEAR(two.alpha[0], 0.1, 1e-12);
  EXPECT_NEAR(two.alpha[1], 0.9, 1e-12);
  auto three = class_weights(freq_stats({5, 3, 2}));
  EXPECT_NEAR(three.alpha[0], 0.25, 1e-12);
  EXPECT_NEAR(three.alpha[1], 0.35, 1e-12);
  EXPECT_NEAR(three.alpha[2], 0.40, 1e-12);
  EXPECT_THROW(class_weights(freq_stats({7})), DegenerateInputError);
}

TEST(ClassWeights, SumAndReverseOrdering) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::uint64_t> c(2 + rng() % 8);
    for (auto& x : c) x = 1 + rng() % 1000;
    auto s = freq_stats(c);
    auto w = class_weights(s);
    double sum = 0, raw = 0;
    for (double a : w.alpha) sum += a;
    for (double r : w.raw) raw += r;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_NEAR(raw, static_cast<double>(c.size()) - 1.0, 1e-12);
    for (std::size_t i = 0; i < c.size(); ++i)
      for (std::size_t j = 0; j < c.size(); ++j)
        if (s.freq[i] < s.freq[j]) EXPECT_GT(w.alpha[i], w.alpha[j]);
  }
}

TEST(FocalLoss, ScalarOracle) {
  const std::vector<std::uint8_t> y{1};
  const auto mask = ValidMask::from_labels(y);
  auto w = class_weights(freq_stats({1, 1}));
  const double v = focal_loss(one_pixel(0, 0), y, mask, w, {}).item();
  EXPECT_NEAR(v, focal_oracle(0.5, 0.5, 2.25, 1.1, 1e-8), 1e-12);
  EXPECT_NEAR(v, 0.3638, 5e-5);
  LossParams doubled;
  doubled.alpha_scale = 4.5;
  EXPECT_DOUBLE_EQ(focal_loss(one_pixel(0, 0), y, mask, w, doubled).item(), 2 * v);
  EXPECT_NEAR(focal_loss(one_pixel(-40, 40), y, mask, w, {}).item(), 0.0, 1e-12);
}

TEST(FocalLoss, DisabledScaleUsesUniformAlpha) {
  const std::vector<std::uint8_t> y{0};
  auto w = class_weights(freq_stats({9, 1}));
  LossParams off;
  off.alpha_scale_enabled = false;
  const double v = focal_loss(one_pixel(0.3, -0.2), y, ValidMask::from_labels(y), w, off).item();
  const double pt = 1.0 / (1.0 + std::exp(-0.5));
  EXPECT_NEAR(v, focal_oracle(pt, 0.5, 1.0, 1.1, 1e-8), 1e-12);
}

TEST(FocalLoss, StrictlyDecreasingInConfidence) {
  const std::vector<std::uint8_t> y{0};
  const auto mask = ValidMask::from_labels(y);
  auto w = class_weights(freq_stats({1, 1}));
  double prev = INFINITY;
  for (double z = -6; z <= 6; z += 0.25) {
    const double v = focal_loss(one_pixel(z, 0), y, mask, w, {}).item();
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(DiceLoss, ScalarOracleAndPerfect) {
  const std::vector<std::uint8_t> y{1};
  const auto mask = ValidMask::from_labels(y);
  const double eps = 1e-6;
  const double v = dice_loss(one_pixel(0, std::log(7.0 / 3.0)), y, mask, {}).item();
  EXPECT_NEAR(v, 1 - 0.5 * (eps / (0.3 + eps) + (1.4 + eps) / (1.7 + eps)), 1e-9);
  EXPECT_NEAR(v, 0.5882, 5e-5);
  // Saturated softmax gives exact one-hot probabilities.
  const std::vector<std::uint8_t> y2{0, 1};
  auto perfect = TD::from({1, 2, 1, 2}, {800, -800, -800, 800});
  EXPECT_NEAR(dice_loss(perfect, y2, ValidMask::from_labels(y2), {}).item(), 0.0, 1e-12);
}

TEST(TotalLoss, LinearCombination) {
  const std::vector<std::uint8_t> y{1};
  const auto mask = ValidMask::from_labels(y);
  auto w = class_weights(freq_stats({1, 1}));
  const double focal_ex = focal_oracle(0.5, 0.5, 2.25, 1.1, 1e-8);
  const double dice_ex = 1 - 0.5 * (1e-6 / (0.3 + 1e-6) + (1.4 + 1e-6) / (1.7 + 1e-6));
  EXPECT_NEAR(0.57 * focal_ex + 0.32 * dice_ex, 0.3956, 5e-5);
  auto t = total_loss(one_pixel(0, 0), y, mask, w, {});
  EXPECT_NEAR(t.focal, focal_ex, 1e-12);
  LossParams only_dice;
  only_dice.lambda_focal = 0;
  only_dice.lambda_dice = 1;
  auto z = one_pixel(0.1, 0.4);
  EXPECT_DOUBLE_EQ(total_loss(z, y, mask, w, only_dice).total.item(), dice_loss(z, y, mask, only_dice).item());
}

struct RandomCase {
  std::vector<double> logits;
  std::vector<std::uint8_t> labels;
};

RandomCase random_case(std::size_t n_pix, int k, std::uint64_t seed, bool binary = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1.5);
  RandomCase c;
  for (std::size_t i = 0; i < n_pix * (binary ? 1 : k); ++i) c.logits.push_back(n(rng));
  for (std::size_t i = 0; i < n_pix; ++i)
    c.labels.push_back(rng() % 7 == 0 ? data::kIgnoreLabel : static_cast<std::uint8_t>(rng() % (binary ? 2 : k)));
  c.labels[0] = 0;
  return c;
}

TEST(LossGradients, FiniteDifferencesFiveSeeds) {
  auto w = class_weights(freq_stats({50, 30, 20}));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = random_case(2 * 16, 3, seed);
    const auto mask = ValidMask::from_labels(c.labels);
    num::GradFn focal = [&](const std::vector<TD>& in) { return focal_loss(in[0], c.labels, mask, w, {}); };
    num::GradFn dice = [&](const std::vector<TD>& in) { return dice_loss(in[0], c.labels, mask, {}); };
    num::GradFn total = [&](const std::vector<TD>& in) { return total_loss(in[0], c.labels, mask, w, {}).total; };
    for (auto* fn : {&focal, &dice, &total}) {
      auto r = num::check_gradient("loss", *fn, {c.logits}, {{2, 3, 4, 4}}, seed, 1e-4);
      EXPECT_TRUE(r.passed) << "seed " << seed << " err " << r.max_rel_error;
    }
    auto b = random_case(2 * 16, 2, seed + 100, true);
    const auto bmask = ValidMask::from_labels(b.labels);
    num::GradFn water = [&](const std::vector<TD>& in) { return water_loss(in[0], b.labels, bmask); };
    auto r = num::check_gradient("water", water, {b.logits}, {{2, 1, 4, 4}}, seed, 1e-4);
    EXPECT_TRUE(r.passed) << "water seed " << seed << " err " << r.max_rel_error;
  }
}

TEST(LossMasking, IgnoredPixelsHaveNoEffect) {
  auto w = class_weights(freq_stats({50, 30, 20}));
  auto c = random_case(2 * 16, 3, 9);
  const auto mask = ValidMask::from_labels(c.labels);
  auto perturbed = c.logits;
  for (std::size_t px = 0; px < c.labels.size(); ++px)
    if (!mask.mask[px]) {
      const std::size_t n = px / 16, i = px % 16;
      for (std::size_t k = 0; k < 3; ++k) perturbed[(n * 3 + k) * 16 + i] += 37.0;
    }
  ASSERT_NE(perturbed, c.logits);
  auto a = TD::from({2, 3, 4, 4}, c.logits), b = TD::from({2, 3, 4, 4}, perturbed);
  EXPECT_EQ(focal_loss(a, c.labels, mask, w, {}).item(), focal_loss(b, c.labels, mask, w, {}).item());
  EXPECT_EQ(dice_loss(a, c.labels, mask, {}).item(), dice_loss(b, c.labels, mask, {}).item());
}

TEST(LossBounds, ComponentsNonNegativeDiceAtMostOne) {
  auto w = class_weights(freq_stats({50, 30, 20}));
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto c = random_case(2 * 16, 3, s);
    const auto mask = ValidMask::from_labels(c.labels);
    auto t = total_loss(TD::from({2, 3, 4, 4}, c.logits), c.labels, mask, w, {});
    EXPECT_GE(t.focal, 0.0);
    EXPECT_GE(t.dice, 0.0);
    EXPECT_LE(t.dice, 1.0);
  }
}

TEST(LossErrors, EmptyMaskAndNonFinite) {
  auto w = class_weights(freq_stats({1, 1}));
  const std::vector<std::uint8_t> ign{data::kIgnoreLabel};
  EXPECT_THROW(focal_loss(one_pixel(0, 0), ign, ValidMask::from_labels(ign), w, {}), EmptyInputError);
  EXPECT_THROW(dice_loss(one_pixel(0, 0), ign, ValidMask::from_labels(ign), {}), EmptyInputError);
  const std::vector<std::uint8_t> y{0};
  EXPECT_THROW(focal_loss(one_pixel(NAN, 0), y, ValidMask::from_labels(y), w, {}), NumericError);
  EXPECT_THROW(water_loss(TD::from({1, 1, 1, 1}, {0.0}), ign, ValidMask::from_labels(ign)), EmptyInputError);
}

TEST(WaterLoss, BalancedZeroLogits) {
  std::vector<std::uint8_t> y(64);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % 2;
  const double v = water_loss(TD::zeros({1, 1, 8, 8}), y, ValidMask::from_labels(y)).item();
  EXPECT_NEAR(v, std::log(2.0) + 0.5, 1e-6);
  EXPECT_NEAR(v, 1.1931, 5e-5);
}

TEST(WaterLoss, PerfectPredictionsVanish) {
  std::vector<std::uint8_t> y{0, 1, 1, 0};
  auto z = TD::from({1, 1, 2, 2}, {-60, 60, 60, -60});
  EXPECT_NEAR(water_loss(z, y, ValidMask::from_labels(y)).item(), 0.0, 1e-9);
  std::vector<std::uint8_t> dry(4, 0);
  EXPECT_NEAR(water_loss(TD::full({1, 1, 2, 2}, -60.0), dry, ValidMask::from_labels(dry)).item(), 0.0, 1e-9);
}

TEST(WaterLoss, SwapLabelsNegateLogitsSymmetry) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto c = random_case(32, 2, s, true);
    auto swapped = c.labels;
    for (auto& l : swapped)
      if (l != data::kIgnoreLabel) l = 1 - l;
    auto neg = c.logits;
    for (auto& z : neg) z = -z;
    const double a = water_loss(TD::from({2, 1, 4, 4}, c.logits), c.labels, ValidMask::from_labels(c.labels)).item();
    const double b = water_loss(TD::from({2, 1, 4, 4}, neg), swapped, ValidMask::from_labels(swapped)).item();
    EXPECT_NEAR(a, b, 1e-12);
  }
}

}  // namespace
}  // namespace sarseg::loss
