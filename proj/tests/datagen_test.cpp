#include <gtest/gtest.h>

#include <cmath>
#include <queue>

#include "sarseg/datagen.hpp"

namespace sarseg::data {
namespace {

SceneSpec two_class(int size, double p0, double p1, int looks, std::uint64_t seed) {
  SceneSpec s;
  s.height = s.width = size;
  s.num_classes = 2;
  s.class_mean_power = {p0, p1};
  s.class_target_freq = {0.5, 0.5};
  s.speckle_looks = looks;
  s.seed = seed;
  return s;
}

// Connected components (8-neighbourhood) of `cls`, as pixel lists.
std::vector<std::vector<int>> components(const Raster& r, int cls) {
  std::vector<int> seen(r.size(), 0);
  std::vector<std::vector<int>> out;
  for (int start = 0; start < static_cast<int>(r.size()); ++start) {
    if (seen[start] || r.labels[start] != cls) continue;
    std::vector<int> comp;
    std::queue<int> q;
    q.push(start);
    seen[start] = 1;
    while (!q.empty()) {
      const int p = q.front();
      q.pop();
      comp.push_back(p);
      const int y = p / r.width, x = p % r.width;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= r.height || xx < 0 || xx >= r.width) continue;
          const int nb = yy * r.width + xx;
          if (!seen[nb] && r.labels[nb] == cls) {
            seen[nb] = 1;
            q.push(nb);
          }
        }
    }
    out.push_back(std::move(comp));
  }
  return out;
}

TEST(GenerateScene, ManyLooksConcentratesAmplitude) {
  auto r = generate_scene(two_class(128, 1.0, 1.0, 4096, 5));
  double se = 0;
  for (float a : r.amplitude) se += (a - 1.0) * (a - 1.0);
  EXPECT_LT(std::sqrt(se / r.size()), 0.05);
}

TEST(GenerateScene, DeterministicGivenSeed) {
  auto spec = long_tail_scene(128, 42);
  EXPECT_EQ(generate_scene(spec), generate_scene(spec));
  spec.seed = 43;
  EXPECT_NE(generate_scene(long_tail_scene(128, 42)).labels, generate_scene(spec).labels);
}

TEST(GenerateScene, ThinStructuresAreSeparateAndNarrow) {
  SceneSpec s;
  s.height = s.width = 256;
  s.num_classes = 3;
  s.class_mean_power = {0.01, 0.2, 1.0};
  s.class_target_freq = {0.0, 0.6, 0.4};
  s.thin_structure_count = 3;
  s.thin_structure_class = 0;
  s.seed = 11;
  auto r = generate_scene(s);
  auto comps = components(r, 0);
  EXPECT_GE(comps.size(), 3u);
  std::vector<std::uint8_t> m(r.size(), 0);
  for (const auto& c : comps)
    for (int p : c) m[p] = 1;
  for (int y = 0; y + 4 <= r.height; ++y)
    for (int x = 0; x + 4 <= r.width; ++x) {
      bool full = true;
      for (int dy = 0; dy < 4 && full; ++dy)
        for (int dx = 0; dx < 4 && full; ++dx) full = m[(y + dy) * r.width + x + dx];
      ASSERT_FALSE(full) << "4x4 block of thin class at " << y << "," << x;
    }
}

TEST(GenerateScene, RealizedHistogramTracksTargets) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto spec = long_tail_scene(512, seed);
    auto r = generate_scene(spec);
    std::vector<double> counts(spec.num_classes, 0);
    for (auto l : r.labels) counts[l] += 1;
    for (int k = 0; k < spec.num_classes; ++k) {
      const double f = counts[k] / r.size();
      EXPECT_LE(std::abs(f - spec.class_target_freq[k]), 0.2 * spec.class_target_freq[k])
          << "class " << k << " seed " << seed;
    }
  }
}

TEST(GenerateScene, SingleLookIntensityMoments) {
  auto r = generate_scene(two_class(512, 0.25, 2.0, 1, 9));
  const double power[2] = {0.25, 2.0};
  for (int k = 0; k < 2; ++k) {
    double m1 = 0, m2 = 0, n = 0;
    for (std::size_t i = 0; i < r.size(); ++i)
      if (r.labels[i] == k) {
        m1 += r.amplitude[i];
        m2 += double(r.amplitude[i]) * r.amplitude[i];
        n += 1;
      }
    m1 /= n;
    m2 /= n;
    EXPECT_NEAR(m2, power[k], 0.1 * power[k]);
    // Rayleigh amplitude: E[a] = sqrt(pi P) / 2
    EXPECT_NEAR(m1, std::sqrt(M_PI * power[k]) / 2, 0.1 * std::sqrt(power[k]));
  }
}

TEST(GenerateScene, RejectsBadSpecs) {
  auto s = two_class(64, 1, 1, 1, 0);
  s.num_classes = 1;
  s.class_mean_power = {1};
  s.class_target_freq = {1};
  EXPECT_THROW(generate_scene(s), ArgumentError);
  auto z = two_class(64, 1, 1, 1, 0);
  z.height = 0;
  EXPECT_THROW(generate_scene(z), ArgumentError);
  auto f = two_class(64, 1, 1, 1, 0);
  f.class_target_freq = {0.5, 0.6};
  EXPECT_THROW(generate_scene(f), ArgumentError);
}

TEST(WaterMask, AllWaterNoWaterCheckerboard) {
  Raster r;
  r.height = 4;
  r.width = 4;
  r.amplitude.assign(16, 1.0f);
  r.labels.assign(16, 0);
  EXPECT_EQ(derive_water_mask(r, 0).labels, std::vector<std::uint8_t>(16, 1));
  r.labels.assign(16, 1);
  EXPECT_EQ(derive_water_mask(r, 0).labels, std::vector<std::uint8_t>(16, 0));
  for (int i = 0; i < 16; ++i) r.labels[i] = ((i / 4 + i % 4) % 2) ? 1 : 0;
  auto m = derive_water_mask(r, 0);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(m.labels[i], r.labels[i] == 0 ? 1 : 0);
  r.labels[3] = kIgnoreLabel;
  auto m2 = derive_water_mask(r, 0);
  EXPECT_EQ(m2.labels[3], kIgnoreLabel);
  EXPECT_EQ(derive_water_mask(m2, 1), m2);
}

}  // namespace
}  // namespace sarseg::data
