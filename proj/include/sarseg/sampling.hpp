#pragma once

// Dataset construction: class statistics, inverse-frequency anchor sampling,
// non-overlapping patch extraction, class remapping, tag-based splits and
// normalization statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sarseg/datagen.hpp"

namespace sarseg::data {

struct ClassStats {
  std::vector<std::uint64_t> counts;
  std::vector<double> freq;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
  int num_classes() const { return static_cast<int>(counts.size()); }
};

inline ClassStats stats_from_counts(std::vector<std::uint64_t> counts) {
  ClassStats s;
  s.counts = std::move(counts);
  const auto total = s.total();
  if (total == 0) throw EmptyInputError("class stats: every pixel is ignored");
  s.freq.resize(s.counts.size());
  for (std::size_t k = 0; k < s.counts.size(); ++k)
    s.freq[k] = static_cast<double>(s.counts[k]) / static_cast<double>(total);
  return s;
}

// Items expose a `labels` byte vector (Raster, PatchPair).
template <class Range>
ClassStats compute_class_stats(const Range& items, int num_classes) {
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (const auto& item : items)
    for (auto l : item.labels) {
      if (l == kIgnoreLabel) continue;
      if (l >= num_classes)
        throw DataError("class stats: label " + std::to_string(l) + " >= " + std::to_string(num_classes));
      ++counts[l];
    }
  return stats_from_counts(std::move(counts));
}

// ---------------------------------------------------------------------------
// Anchors

struct Anchor {
  int raster = 0;
  int row = 0;
  int col = 0;
  friend auto operator<=>(const Anchor&, const Anchor&) = default;
};

struct AnchorSet {
  std::vector<Anchor> anchors;
};

// Draws `count` pixels with replacement, pixel weight 1/f(class) normalized
// over every non-ignore pixel of every raster.
template <class Range>
std::vector<Anchor> draw_anchor_pixels(const Range& rasters, const ClassStats& stats,
                                       std::size_t count, std::uint64_t seed) {
  if (count < 1) throw ArgumentError("anchors: count must be >= 1");
  std::vector<double> cumulative;
  std::vector<std::pair<int, int>> owner;  // (raster, pixel) per cumulative slot
  double acc = 0;
  int rid = 0;
  for (const auto& r : rasters) {
    for (std::size_t i = 0; i < r.labels.size(); ++i) {
      const auto l = r.labels[i];
      if (l == kIgnoreLabel) continue;
      if (l >= stats.num_classes() || stats.freq[l] <= 0)
        throw InternalError("anchors: pixel of class " + std::to_string(l) +
                            " has zero frequency in the supplied stats");
      acc += 1.0 / stats.freq[l];
      cumulative.push_back(acc);
      owner.emplace_back(rid, static_cast<int>(i));
    }
    ++rid;
  }
  if (cumulative.empty()) throw EmptyInputError("anchors: no labelled pixels");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, acc);
  std::vector<Anchor> draws;
  draws.reserve(count);
  std::vector<int> widths;
  for (const auto& r : rasters) widths.push_back(r.width);
  for (std::size_t d = 0; d < count; ++d) {
    const double x = u(rng);
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), x);
    if (it == cumulative.end()) --it;
    const auto [ri, pix] = owner[static_cast<std::size_t>(it - cumulative.begin())];
    draws.push_back({ri, pix / widths[ri], pix % widths[ri]});
  }
  return draws;
}

// Sampling with replacement followed by de-duplication.
template <class Range>
AnchorSet sample_anchors(const Range& rasters, const ClassStats& stats, std::size_t count,
                         std::uint64_t seed) {
  auto draws = draw_anchor_pixels(rasters, stats, count, seed);
  std::sort(draws.begin(), draws.end());
  draws.erase(std::unique(draws.begin(), draws.end()), draws.end());
  return {std::move(draws)};
}

// ---------------------------------------------------------------------------
// Patches

struct PatchOrigin {
  int raster = 0;
  int row = 0;
  int col = 0;
  friend bool operator==(const PatchOrigin&, const PatchOrigin&) = default;
};

struct PatchPair {
  int size = 0;
  std::vector<float> image;
  std::vector<std::uint8_t> labels;
  PatchOrigin origin;
  std::string tag;
  friend bool operator==(const PatchPair&, const PatchPair&) = default;
};

// Non-overlapping size x size tiling (ragged margins dropped); keeps the
// tiles holding at least one anchor of raster `raster_id`, in row-major
// tile order.
inline std::vector<PatchPair> extract_patches(const Raster& raster, int raster_id,
                                              const AnchorSet& anchors, int size = 256) {
  if (size < 1) throw ArgumentError("extract_patches: patch size must be positive");
  if (raster.height < size || raster.width < size)
    throw ArgumentError("extract_patches: raster smaller than one patch");
  const int rows = raster.height / size, cols = raster.width / size;
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(rows) * cols, 0);
  for (const auto& a : anchors.anchors) {
    if (a.raster != raster_id) continue;
    const int ty = a.row / size, tx = a.col / size;
    if (ty < rows && tx < cols) keep[static_cast<std::size_t>(ty) * cols + tx] = 1;
  }
  std::vector<PatchPair> out;
  for (int ty = 0; ty < rows; ++ty)
    for (int tx = 0; tx < cols; ++tx) {
      if (!keep[static_cast<std::size_t>(ty) * cols + tx]) continue;
      PatchPair p;
      p.size = size;
      p.origin = {raster_id, ty * size, tx * size};
      p.tag = raster.tag;
      p.image.resize(static_cast<std::size_t>(size) * size);
      p.labels.resize(p.image.size());
      for (int y = 0; y < size; ++y) {
        const std::size_t src = static_cast<std::size_t>(ty * size + y) * raster.width + tx * size;
        std::copy_n(raster.amplitude.begin() + src, size, p.image.begin() + y * size);
        std::copy_n(raster.labels.begin() + src, size, p.labels.begin() + y * size);
      }
      out.push_back(std::move(p));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Remapping

struct RemapTable {
  std::vector<int> mapping;  // source id -> target id, -1 if unmapped
  int num_target = 0;

  void validate() const {
    if (num_target < 1) throw ConfigError("remap: target class count must be >= 1");
    for (std::size_t s = 0; s < mapping.size(); ++s)
      if (mapping[s] >= num_target)
        throw ConfigError("remap: source " + std::to_string(s) + " maps outside [0, " +
                          std::to_string(num_target) + ")");
  }

  static RemapTable identity(int k) {
    RemapTable t;
    t.num_target = k;
    for (int i = 0; i < k; ++i) t.mapping.push_back(i);
    return t;
  }

  // Placeholder ids: 0 water, 1 built-up, 2 paddy, 3 cropland, 4 grassland,
  // 5-9 forest types, 10 bare, 11 solar panel, 12 wetland, 13 greenhouse.
  static RemapTable default_14_to_9() {
    return {{0, 1, 2, 2, 3, 4, 4, 4, 4, 4, 5, 6, 7, 8}, 9};
  }

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (std::size_t s = 0; s < mapping.size(); ++s)
      if (mapping[s] >= 0) m[std::to_string(s)] = mapping[s];
    return {{"num_source_classes", mapping.size()}, {"num_target_classes", num_target}, {"mapping", m}};
  }

  static RemapTable from_json(const nlohmann::json& j) {
    try {
      RemapTable t;
      t.num_target = j.at("num_target_classes").get<int>();
      const int ns = j.at("num_source_classes").get<int>();
      t.mapping.assign(static_cast<std::size_t>(ns), -1);
      for (const auto& [k, v] : j.at("mapping").items()) {
        const int s = std::stoi(k);
        if (s < 0 || s >= ns) throw ConfigError("remap: source id " + k + " out of range");
        t.mapping[s] = v.get<int>();
      }
      t.validate();
      return t;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("remap: ") + e.what());
    } catch (const std::invalid_argument&) {
      throw ConfigError("remap: non-numeric source id");
    }
  }

  friend bool operator==(const RemapTable&, const RemapTable&) = default;
};

inline std::vector<std::string> lulc9_class_names() {
  return {"Water", "Built-up", "Cropland", "Grassland", "Forest", "Bare", "Solar Panel", "Wetland", "Greenhouse"};
}

inline PatchPair remap_labels(const PatchPair& patch, const RemapTable& table) {
  PatchPair out = patch;
  for (auto& l : out.labels) {
    if (l == kIgnoreLabel) continue;
    if (l >= table.mapping.size() || table.mapping[l] < 0)
      throw DataError("remap: unmapped class id " + std::to_string(l));
    l = static_cast<std::uint8_t>(table.mapping[l]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

enum class Split { Pretrain, Train, Val, Test };

inline Split parse_split(const std::string& s) {
  if (s == "pretrain") return Split::Pretrain;
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "'");
}

inline std::string split_name(Split s) {
  switch (s) {
    case Split::Pretrain: return "pretrain";
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

using SplitSpec = std::map<std::string, Split>;

struct Splits {
  std::vector<PatchPair> pretrain, train, val, test;

  std::vector<PatchPair>& operator[](Split s) {
    switch (s) {
      case Split::Pretrain: return pretrain;
      case Split::Train: return train;
      case Split::Val: return val;
      case Split::Test: return test;
    }
    throw InternalError("bad split");
  }
};

inline Splits split_by_tag(const std::vector<PatchPair>& patches, const SplitSpec& spec) {
  for (const auto& p : patches)
    if (!spec.contains(p.tag)) throw ConfigError("split: tag '" + p.tag + "' has no split assigned");
  Splits out;
  for (const auto& p : patches) out[spec.at(p.tag)].push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

struct NormStats {
  double mean = 0;
  double std = 1;
};

// One global scalar mean and population standard deviation.
inline NormStats compute_norm_stats(const std::vector<PatchPair>& train) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& p : train) {
    for (float v : p.image) sum += v;
    n += p.image.size();
  }
  if (n == 0) throw EmptyInputError("norm stats: no training pixels");
  const double mean = sum / static_cast<double>(n);
  double ss = 0;
  for (const auto& p : train)
    for (float v : p.image) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (!(sd > 0)) throw DataError("norm stats: zero standard deviation");
  return {mean, sd};
}

inline std::vector<float> normalize(std::span<const float> image, const NormStats& s) {
  std::vector<float> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i)
    out[i] = static_cast<float>((image[i] - s.mean) / s.std);
  return out;
}

inline PatchPair normalize(const PatchPair& p, const NormStats& s) {
  PatchPair out = p;
  out.image = normalize(p.image, s);
  return out;
}

}  // namespace sarseg::data
