#pragma once

// Synthetic single-channel SAR-like scenes with known labels: Voronoi land
// cover with long-tailed class areas, thin random-walk structures, and
// L-look multiplicative gamma speckle on intensity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sarseg/error.hpp"

namespace sarseg::data {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct Raster {
  int height = 0;
  int width = 0;
  std::vector<float> amplitude;
  std::vector<std::uint8_t> labels;
  std::string tag;

  std::size_t size() const { return static_cast<std::size_t>(height) * width; }

  void validate(int num_classes) const {
    if (height <= 0 || width <= 0) throw ArgumentError("raster: zero area");
    if (amplitude.size() != size() || labels.size() != size())
      throw ShapeError("raster: payload does not match " + std::to_string(height) + "x" +
                       std::to_string(width));
    for (float a : amplitude)
      if (!std::isfinite(a) || a < 0) throw DataError("raster: amplitude must be finite and >= 0");
    for (auto l : labels)
      if (l != kIgnoreLabel && l >= num_classes)
        throw DataError("raster: label " + std::to_string(l) + " outside [0, " +
                        std::to_string(num_classes) + ")");
  }

  friend bool operator==(const Raster&, const Raster&) = default;
};

struct SceneSpec {
  int height = 512;
  int width = 512;
  int num_classes = 2;
  std::vector<double> class_mean_power;
  std::vector<double> class_target_freq;
  int speckle_looks = 4;
  int thin_structure_count = 0;
  int thin_structure_class = 0;
  std::uint64_t seed = 0;
  std::string tag = "scene";

  void validate() const {
    if (height <= 0 || width <= 0) throw ArgumentError("scene: zero area");
    if (num_classes < 2) throw ArgumentError("scene: need at least 2 classes");
    if (num_classes > 254) throw ArgumentError("scene: at most 254 classes");
    if (static_cast<int>(class_mean_power.size()) != num_classes ||
        static_cast<int>(class_target_freq.size()) != num_classes)
      throw ArgumentError("scene: per-class vectors must have num_classes entries");
    for (double p : class_mean_power)
      if (!(p > 0)) throw ArgumentError("scene: class_mean_power entries must be > 0");
    double total = 0;
    for (double f : class_target_freq) {
      if (!(f >= 0)) throw ArgumentError("scene: class_target_freq entries must be >= 0");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("scene: class_target_freq must sum to 1");
    if (speckle_looks < 1) throw ArgumentError("scene: speckle_looks must be >= 1");
    if (thin_structure_count < 0) throw ArgumentError("scene: negative thin_structure_count");
    if (thin_structure_class < 0 || thin_structure_class >= num_classes)
      throw ArgumentError("scene: thin_structure_class out of range");
  }
};

// Fourteen source land-cover classes (see configs/remap_14_to_9.json for how
// they merge into nine). Forest (ids 5-9) totals ~45%, cropland+paddy ~25%,
// solar panel and greenhouse ~1% each. Power levels are spaced ~3 dB apart
// between merged target classes.
inline SceneSpec long_tail_scene(int size, std::uint64_t seed, std::string tag = "sep") {
  SceneSpec s;
  s.height = s.width = size;
  s.num_classes = 14;
  s.class_target_freq = {0.08, 0.07, 0.13, 0.12, 0.06, 0.12, 0.10,
                         0.09, 0.08, 0.06, 0.05, 0.01, 0.02, 0.01};
  const double db[14] = {-24, 3, -13.5, -12.5, -10, -7.5, -7.2, -7, -6.8, -6.5, -16, 0, -19, -3};
  for (double d : db) s.class_mean_power.push_back(std::pow(10.0, d / 10.0));
  s.speckle_looks = 4;
  s.thin_structure_count = std::max(1, size / 96);
  s.thin_structure_class = 0;
  s.seed = seed;
  s.tag = std::move(tag);
  return s;
}

namespace detail {

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

// Nearest-site Voronoi map over a jittered grid of sites.
struct Voronoi {
  std::vector<int> owner;  // per pixel site id
  std::vector<std::int64_t> area;
  int sites = 0;
};

inline Voronoi jittered_voronoi(int h, int w, int target_sites, std::mt19937_64& rng) {
  const double aspect = static_cast<double>(h) / w;
  const int gy = std::max(1, static_cast<int>(std::lround(std::sqrt(target_sites * aspect))));
  const int gx = std::max(1, (target_sites + gy - 1) / gy);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> sy(static_cast<std::size_t>(gy) * gx), sx(sy.size());
  for (int i = 0; i < gy; ++i)
    for (int j = 0; j < gx; ++j) {
      sy[i * gx + j] = (i + u(rng)) * h / gy;
      sx[i * gx + j] = (j + u(rng)) * w / gx;
    }
  Voronoi v;
  v.sites = gy * gx;
  v.owner.resize(static_cast<std::size_t>(h) * w);
  v.area.assign(v.sites, 0);
  for (int y = 0; y < h; ++y) {
    const int cy = std::min(gy - 1, static_cast<int>((y + 0.5) * gy / h));
    for (int x = 0; x < w; ++x) {
      const int cx = std::min(gx - 1, static_cast<int>((x + 0.5) * gx / w));
      double best = 1e300;
      int arg = 0;
      for (int i = std::max(0, cy - 2); i <= std::min(gy - 1, cy + 2); ++i)
        for (int j = std::max(0, cx - 2); j <= std::min(gx - 1, cx + 2); ++j) {
          const int s = i * gx + j;
          const double dy = y + 0.5 - sy[s], dx = x + 0.5 - sx[s];
          const double d = dy * dy + dx * dx;
          if (d < best) {
            best = d;
            arg = s;
          }
        }
      v.owner[static_cast<std::size_t>(y) * w + x] = arg;
      ++v.area[arg];
    }
  }
  return v;
}

// Greedy area-matching assignment of cells to classes, rarest class first;
// the most frequent class takes whatever remains.
inline std::vector<int> assign_cells(const Voronoi& v, const std::vector<double>& freq,
                                     std::mt19937_64& rng) {
  const auto total = static_cast<double>(std::accumulate(v.area.begin(), v.area.end(), std::int64_t{0}));
  std::vector<int> order;
  for (int k = 0; k < static_cast<int>(freq.size()); ++k)
    if (freq[k] > 0) order.push_back(k);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return freq[a] < freq[b]; });
  std::vector<int> pool(v.sites);
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<int> cls(v.sites, order.back());
  std::vector<bool> taken(v.sites, false);
  for (std::size_t oi = 0; oi + 1 < order.size(); ++oi) {
    const int k = order[oi];
    const double target = freq[k] * total;
    double acc = 0;
    for (int s : pool) {
      if (taken[s]) continue;
      const double a = static_cast<double>(v.area[s]);
      if (std::abs(acc + a - target) < std::abs(acc - target)) {
        taken[s] = true;
        cls[s] = k;
        acc += a;
      }
      if (acc >= target) break;
    }
  }
  return cls;
}

// One smooth random-walk polyline stamped with a square brush of side
// `width`. Returns the covered pixel indices.
inline std::vector<std::size_t> random_walk_polyline(int h, int w, int width,
                                                     std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> turn(0.0, 0.08);
  double y = u(rng) * h, x = u(rng) * w;
  double theta = u(rng) * 2 * 3.14159265358979323846;
  const int steps = static_cast<int>((0.3 + 0.3 * u(rng)) * std::max(h, w));
  std::vector<std::size_t> pix;
  for (int t = 0; t < steps; ++t) {
    const int py = static_cast<int>(std::floor(y)), px = static_cast<int>(std::floor(x));
    if (py < 0 || py >= h || px < 0 || px >= w) break;
    for (int dy = 0; dy < width; ++dy)
      for (int dx = 0; dx < width; ++dx) {
        const int yy = py + dy, xx = px + dx;
        if (yy < h && xx < w) pix.push_back(static_cast<std::size_t>(yy) * w + xx);
      }
    theta += turn(rng);
    y += std::sin(theta);
    x += std::cos(theta);
  }
  std::sort(pix.begin(), pix.end());
  pix.erase(std::unique(pix.begin(), pix.end()), pix.end());
  return pix;
}

// True if the pixel set contains a fully covered 4x4 block.
inline bool has_block4(const std::vector<std::size_t>& pix, int h, int w) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(h) * w, 0);
  for (auto p : pix) m[p] = 1;
  for (auto p : pix) {
    const int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
    if (y + 4 > h || x + 4 > w) continue;
    bool full = true;
    for (int dy = 0; dy < 4 && full; ++dy)
      for (int dx = 0; dx < 4 && full; ++dx) full = m[static_cast<std::size_t>(y + dy) * w + x + dx];
    if (full) return true;
  }
  return false;
}

}  // namespace detail

inline Raster generate_scene(const SceneSpec& spec) {
  spec.validate();
  const int h = spec.height, w = spec.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;

  double min_f = 1.0;
  for (double f : spec.class_target_freq)
    if (f > 0) min_f = std::min(min_f, f);
  const int wanted = static_cast<int>(std::ceil(12.0 / min_f));
  const int cap = std::max(1, static_cast<int>(n / 64));
  auto layout_rng = detail::stream(spec.seed, 1);
  const auto vor = detail::jittered_voronoi(h, w, std::clamp(wanted, 1, cap), layout_rng);
  const auto cell_class = detail::assign_cells(vor, spec.class_target_freq, layout_rng);

  Raster r;
  r.height = h;
  r.width = w;
  r.tag = spec.tag;
  r.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.labels[i] = static_cast<std::uint8_t>(cell_class[vor.owner[i]]);

  // Thin structures never touch each other, so each one is its own
  // connected component of the thin class (unless it meets a cell of the
  // same class).
  auto thin_rng = detail::stream(spec.seed, 2);
  std::vector<std::uint8_t> thin(n, 0);
  std::uniform_int_distribution<int> width_dist(1, 3);
  for (int s = 0; s < spec.thin_structure_count; ++s) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const int width = width_dist(thin_rng);
      auto pix = detail::random_walk_polyline(h, w, width, thin_rng);
      if (pix.size() < 12) continue;
      bool clash = false;
      for (auto p : pix) {
        const int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
        for (int dy = -1; dy <= 1 && !clash; ++dy)
          for (int dx = -1; dx <= 1 && !clash; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < h && xx >= 0 && xx < w && thin[static_cast<std::size_t>(yy) * w + xx])
              clash = true;
          }
        if (clash) break;
      }
      if (clash || detail::has_block4(pix, h, w)) continue;
      for (auto p : pix) {
        thin[p] = 1;
        r.labels[p] = static_cast<std::uint8_t>(spec.thin_structure_class);
      }
      break;
    }
  }

  auto speckle_rng = detail::stream(spec.seed, 3);
  const double looks = spec.speckle_looks;
  std::gamma_distribution<double> gamma(looks, 1.0 / looks);
  r.amplitude.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    r.amplitude[i] = static_cast<float>(std::sqrt(spec.class_mean_power[r.labels[i]] * gamma(speckle_rng)));
  return r;
}

// Binary water / non-water labels; ignore pixels stay ignored.
inline Raster derive_water_mask(const Raster& r, int water_class) {
  Raster out = r;
  for (auto& l : out.labels)
    if (l != kIgnoreLabel) l = (l == water_class) ? 1 : 0;
  return out;
}

inline std::vector<std::uint8_t> water_labels(std::span<const std::uint8_t> labels, int water_class) {
  std::vector<std::uint8_t> out(labels.begin(), labels.end());
  for (auto& l : out)
    if (l != kIgnoreLabel) l = (l == water_class) ? 1 : 0;
  return out;
}

}  // namespace sarseg::data
