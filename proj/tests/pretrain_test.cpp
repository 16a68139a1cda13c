#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include "sarseg/datagen.hpp"
#include "sarseg/numerics/gradcheck.hpp"
#include "sarseg/pretrain.hpp"

namespace {

using namespace sarseg;
using pretrain::MixMask;
using num::Tensor;

Tensor<double> random_images(std::int64_t n, std::int64_t s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(static_cast<std::size_t>(n * s * s));
  for (auto& x : v) x = d(rng);
  return Tensor<double>::from({n, 1, s, s}, std::move(v));
}

// Tiles of long-tailed synthetic scenes, normalized with their own stats.
std::pair<std::vector<data::PatchPair>, data::NormStats> unlabeled_tiles(int count, int size, std::uint64_t seed) {
  std::vector<data::PatchPair> tiles;
  for (std::uint64_t s = seed; static_cast<int>(tiles.size()) < count; ++s) {
    const auto r = data::generate_scene(data::long_tail_scene(4 * size, s));
    for (int ty = 0; ty < 4; ++ty)
      for (int tx = 0; tx < 4 && static_cast<int>(tiles.size()) < count; ++tx) {
        data::PatchPair p;
        p.size = size;
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) p.image.push_back(r.amplitude[(ty * size + y) * r.width + tx * size + x]);
        tiles.push_back(std::move(p));
      }
  }
  const auto norm = data::compute_norm_stats(tiles);
  for (auto& t : tiles) t = data::normalize(t, norm);
  return {tiles, norm};
}

TEST(Mix, AllOnesMaskReturnsFirstImage) {
  auto x1 = random_images(2, 8, 1), x2 = random_images(2, 8, 2);
  MixMask m{2, 2, 2, 4, std::vector<std::uint8_t>(8, 1)};
  EXPECT_EQ(pretrain::apply_mix(x1, x2, m).values(), x1.values());
}

TEST(Mix, ComplementaryMixesSumToBothImages) {
  auto x1 = random_images(3, 16, 3), x2 = random_images(3, 16, 4);
  auto mixed = pretrain::make_mix(x1, x2, 0.5, 11);
  auto other = pretrain::apply_mix(x1, x2, mixed.mask.complement());
  for (std::size_t i = 0; i < x1.values().size(); ++i)
    EXPECT_DOUBLE_EQ(mixed.image.values()[i] + other.values()[i], x1.values()[i] + x2.values()[i]);
}

TEST(Mix, ExactCellCountPerSample) {
  auto x1 = random_images(4, 32, 5), x2 = random_images(4, 32, 6);  // 8x8 = 64 cells
  for (double ratio : {0.5, 0.25, 0.3}) {
    auto m = pretrain::make_mix(x1, x2, ratio, 7).mask;
    for (std::int64_t b = 0; b < 4; ++b) {
      int ones = 0;
      for (std::int64_t i = 0; i < 64; ++i) ones += m.cells[static_cast<std::size_t>(b * 64 + i)];
      EXPECT_EQ(ones, std::lround(ratio * 64)) << "ratio " << ratio;
    }
  }
}

TEST(Mix, DeterministicAndSeedSensitive) {
  auto x1 = random_images(2, 32, 5), x2 = random_images(2, 32, 6);
  EXPECT_EQ(pretrain::make_mix(x1, x2, 0.5, 9).mask.cells, pretrain::make_mix(x1, x2, 0.5, 9).mask.cells);
  EXPECT_NE(pretrain::make_mix(x1, x2, 0.5, 9).mask.cells, pretrain::make_mix(x1, x2, 0.5, 10).mask.cells);
}

TEST(Mix, Errors) {
  auto a = random_images(2, 16, 1), b = random_images(1, 16, 2);
  EXPECT_THROW(pretrain::make_mix(a, b, 0.5, 0), ArgumentError);
  EXPECT_THROW(pretrain::make_mix(a, a, 0.0, 0), ArgumentError);
  EXPECT_THROW(pretrain::make_mix(a, a, 1.0, 0), ArgumentError);
}

TEST(PowerWeights, ConstantImageGivesUnitWeights) {
  std::vector<double> a(50, 3.7);
  for (double w : pretrain::power_weights(a)) EXPECT_DOUBLE_EQ(w, 1.0);
}

TEST(PowerWeights, SingleBrightPixel) {
  // Ratios: bright n, zeros 0. Generous bounds keep the bright ratio
  // unclamped; zeros sit at w_min before the mean-1 rescale.
  const int n = 10;
  std::vector<double> a(n, 0.0);
  a[3] = 2.0;
  const pretrain::PowerBounds b{0.1, 100.0};
  const auto w = pretrain::power_weights(a, b);
  const double mean_clamped = (n + (n - 1) * 0.1) / n;
  EXPECT_NEAR(w[3], n / mean_clamped, 1e-12);
  EXPECT_NEAR(w[0], 0.1 / mean_clamped, 1e-12);
  EXPECT_EQ(std::max_element(w.begin(), w.end()) - w.begin(), 3);
}

TEST(PowerWeights, ScaleInvariantMeanOneAndClamped) {
  std::mt19937_64 rng(4);
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<double> a(400);
  for (auto& x : a) x = std::sqrt(g(rng));
  const auto w = pretrain::power_weights(a);
  std::vector<double> scaled(a);
  for (auto& x : scaled) x *= 17.5;
  const auto ws = pretrain::power_weights(scaled);
  double mean = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_NEAR(w[i], ws[i], 1e-12);
    mean += w[i];
  }
  EXPECT_NEAR(mean / w.size(), 1.0, 1e-6);
  // Before the rescale values lie in [0.1, 10]; the rescale factor is the
  // clamped mean, so bounds hold up to that factor.
  double clamped_mean = 0, mp = 0;
  for (double x : a) mp += x * x;
  mp /= a.size();
  for (double x : a) clamped_mean += std::clamp(x * x / mp, 0.1, 10.0);
  clamped_mean /= a.size();
  for (double v : w) {
    EXPECT_GE(v * clamped_mean, 0.1 - 1e-12);
    EXPECT_LE(v * clamped_mean, 10.0 + 1e-12);
  }
}

TEST(PowerWeights, AllZeroImageIsDegenerate) {
  std::vector<double> a(9, 0.0);
  EXPECT_THROW(pretrain::power_weights(a), DegenerateInputError);
}

TEST(ReconstructionLoss, HandCase) {
  // 1x1 x 4x8 images, two 4x4 cells: cell 0 from x1, cell 1 from x2. Errors of
  // 1 (image 1, hidden cell 1) and 2 (image 2, hidden cell 0) on one pixel each.
  const MixMask m{1, 1, 2, 4, {1, 0}};
  auto x1 = Tensor<double>::zeros({1, 1, 4, 8}), x2 = Tensor<double>::zeros({1, 1, 4, 8});
  std::vector<double> r1(32, 0.0), r2(32, 0.0);
  r1[4] = 1.0;  // row 0, col 4: cell 1
  r2[0] = 2.0;  // row 0, col 0: cell 0
  auto rec1 = Tensor<double>::from({1, 1, 4, 8}, r1), rec2 = Tensor<double>::from({1, 1, 4, 8}, r2);
  std::vector<double> w(32, 1.0);
  // Each hidden region holds 16 pixels; one carries the error.
  const double loss = pretrain::reconstruction_loss(rec1, rec2, x1, x2, m, w, w).item();
  EXPECT_NEAR(loss, (1.0 + 4.0) / 16.0, 1e-15);

  // Single-pixel cells reproduce the scalar hand case exactly.
  const MixMask unit{1, 1, 2, 1, {1, 0}};
  auto y = Tensor<double>::zeros({1, 1, 1, 2});
  auto a = Tensor<double>::from({1, 1, 1, 2}, {0.0, 1.0}), b = Tensor<double>::from({1, 1, 1, 2}, {2.0, 0.0});
  std::vector<double> w2(2, 1.0);
  EXPECT_DOUBLE_EQ(pretrain::reconstruction_loss(a, b, y, y, unit, w2, w2).item(), 5.0);
}

TEST(ReconstructionLoss, PerfectReconstructionIsZeroAndUnitWeightsArePlainMse) {
  auto x1 = random_images(2, 8, 1), x2 = random_images(2, 8, 2);
  auto m = pretrain::make_mix(x1, x2, 0.5, 3).mask;
  std::vector<double> ones(128, 1.0);
  EXPECT_EQ(pretrain::reconstruction_loss(x1, x2, x1, x2, m, ones, ones).item(), 0.0);

  auto r1 = random_images(2, 8, 7), r2 = random_images(2, 8, 8);
  const auto px = m.pixels();
  double s1 = 0, s2 = 0;
  int c1 = 0, c2 = 0;
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double e1 = r1.values()[i] - x1.values()[i], e2 = r2.values()[i] - x2.values()[i];
    if (px[i] == 0) s1 += e1 * e1, ++c1;
    else s2 += e2 * e2, ++c2;
  }
  EXPECT_NEAR(pretrain::reconstruction_loss(r1, r2, x1, x2, m, ones, ones).item(), s1 / c1 + s2 / c2, 1e-12);
}

TEST(ReconstructionLoss, EmptyHiddenRegionThrows) {
  auto x = random_images(1, 8, 1);
  MixMask all{1, 2, 2, 4, {1, 1, 1, 1}};
  std::vector<double> w(64, 1.0);
  EXPECT_THROW(pretrain::reconstruction_loss(x, x, x, x, all, w, w), EmptyInputError);
}

TEST(ReconstructionLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x1 = random_images(2, 4, seed), x2 = random_images(2, 4, seed + 100);
    auto m = pretrain::make_mix(x1, x2, 0.5, seed, 2).mask;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.2, 3.0);
    std::vector<double> w1(32), w2(32);
    for (auto& w : w1) w = u(rng);
    for (auto& w : w2) w = u(rng);
    auto fn = [&](const std::vector<Tensor<double>>& in) {
      return pretrain::reconstruction_loss(in[0], in[1], x1, x2, m, w1, w2);
    };
    const num::Shape shape{2, 1, 4, 4};
    const auto res = num::check_gradient("reconstruction_loss", fn,
                                         {random_images(2, 4, seed + 300).values(),
                                          random_images(2, 4, seed + 200).values()},
                                         {shape, shape}, seed, 1e-4);
    EXPECT_TRUE(res.passed) << "seed " << seed << " max rel err " << res.max_rel_error;
  }
}

TEST(Pretrainer, OddBatchRejected) {
  auto [tiles, norm] = unlabeled_tiles(3, 64, 1);
  pretrain::PretrainConfig cfg;
  pretrain::Pretrainer<float> pt(model::EncoderConfig::desk(64), cfg, norm, 0);
  std::vector<std::size_t> idx{0, 1, 2};
  EXPECT_THROW(pt.step(pretrain::UnlabeledBatch::gather(tiles, idx)), ArgumentError);
}

TEST(Pretrainer, DeterministicStepsAndFiniteLoss) {
  auto [tiles, norm] = unlabeled_tiles(4, 64, 2);
  pretrain::PretrainConfig cfg;
  cfg.warmup_steps = 0;
  std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto batch = pretrain::UnlabeledBatch::gather(tiles, idx);
  auto run = [&] {
    pretrain::Pretrainer<float> pt(model::EncoderConfig::desk(64), cfg, norm, 5);
    std::vector<double> losses{pt.step(batch), pt.step(batch)};
    std::vector<float> w;
    for (const auto& p : pt.model().params())
      w.insert(w.end(), p.value.values().begin(), p.value.values().end());
    return std::pair{losses, w};
  };
  const auto a = run(), b = run();
  EXPECT_TRUE(std::isfinite(a.first[0]));
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Pretrainer, EncoderCheckpointLoadsIntoFinetuneModel) {
  auto [tiles, norm] = unlabeled_tiles(2, 64, 3);
  pretrain::PretrainConfig cfg;
  pretrain::Pretrainer<float> pt(model::EncoderConfig::desk(64), cfg, norm, 1);
  std::vector<std::size_t> idx{0, 1};
  pt.step(pretrain::UnlabeledBatch::gather(tiles, idx));
  const auto dir = io::fs::temp_directory_path() / "sarseg_pretrain_ckpt";
  io::fs::remove_all(dir);
  pt.save(dir);
  const auto meta = model::read_checkpoint_meta(dir);
  EXPECT_EQ(meta.kind, "encoder");
  EXPECT_TRUE(meta.pretrained);
  model::Segmenter<float> seg(model::ModelConfig::desk(9, model::AblationFlags::all()), 9);
  std::size_t encoder_tensors = 0;
  for (const auto& p : seg.params()) encoder_tensors += p.name.rfind("encoder.", 0) == 0;
  EXPECT_EQ(model::load_encoder(dir, seg), encoder_tensors);
  const auto& src = pt.model().param("encoder.stages.3.norm.weight").value.values();
  EXPECT_EQ(seg.param("encoder.stages.3.norm.weight").value.values(), src);
  io::fs::remove_all(dir);
}

TEST(Pretrainer, TwoHundredStepsHalveTheLoss) {
  auto [tiles, norm] = unlabeled_tiles(16, 64, 10);
  pretrain::PretrainConfig cfg;
  cfg.steps = 200;
  const auto t0 = std::chrono::steady_clock::now();
  pretrain::Pretrainer<float> pt(model::EncoderConfig::desk(64), cfg, norm, 0);
  const auto losses = pretrain::run_pretraining(pt, tiles, cfg, 0);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  double tail = 0;
  for (std::size_t i = losses.size() - 10; i < losses.size(); ++i) tail += losses[i];
  tail /= 10;
  RecordProperty("first_loss", std::to_string(losses.front()));
  RecordProperty("final_loss", std::to_string(tail));
  std::cout << "pretrain: first " << losses.front() << " last10 " << tail << " (" << secs << " s)\n";
  EXPECT_LE(tail, 0.5 * losses.front());
}

}  // namespace
