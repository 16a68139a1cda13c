#pragma once

// Synthetic scene sets on disk and the scene -> patch dataset pipeline:
// class stats, inverse-frequency anchors, anchored tiles, remap, tag split,
// training-split normalization stats.
//
// Scene directory:
//   scenes.json        format "sarseg-scenes", version, count, num_classes,
//                      per scene {tag, height, width}
//   NNNNNN.img/.lbl    same header and payload layout as dataset patches

#include <string>
#include <vector>

#include "sarseg/datagen.hpp"
#include "sarseg/dataset.hpp"

namespace sarseg::engine {

using data::Raster;

struct SynthConfig {
  int scenes = 10;
  int size = 256;
  // Cycled over scenes. The default yields 4 pretrain, 4 train, 1 val and
  // 1 test scene under default_split_spec().
  std::vector<std::string> tags{"aug", "aug", "aug", "aug", "sep", "sep", "sep", "sep", "oct", "nov"};
  std::uint64_t seed = 0;

  void validate() const {
    if (scenes < 1) throw ConfigError("synth: scenes must be >= 1");
    if (size < 32) throw ConfigError("synth: scene size must be >= 32");
    if (tags.empty()) throw ConfigError("synth: need at least one tag");
  }
};

inline data::SplitSpec default_split_spec() {
  return {{"aug", data::Split::Pretrain}, {"sep", data::Split::Train}, {"oct", data::Split::Val},
          {"nov", data::Split::Test}};
}

inline std::vector<Raster> synthesize_scenes(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Raster> out;
  for (int i = 0; i < cfg.scenes; ++i) {
    const auto tag = cfg.tags[static_cast<std::size_t>(i) % cfg.tags.size()];
    out.push_back(data::generate_scene(data::long_tail_scene(cfg.size, cfg.seed * 1000003ull + i, tag)));
  }
  return out;
}

inline constexpr int kSceneSourceClasses = 14;

inline void write_scenes(const io::fs::path& dir, const std::vector<Raster>& scenes, int num_classes) {
  io::ensure_dir(dir);
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& r = scenes[i];
    r.validate(num_classes);
    auto img = data::detail::patch_header(r.height, r.width);
    io::put_f32(img, r.amplitude);
    io::write_file(dir / (data::detail::patch_stem(i) + ".img"), img);
    auto lbl = data::detail::patch_header(r.height, r.width);
    lbl.insert(lbl.end(), r.labels.begin(), r.labels.end());
    io::write_file(dir / (data::detail::patch_stem(i) + ".lbl"), lbl);
    list.push_back({{"tag", r.tag}, {"height", r.height}, {"width", r.width}});
  }
  io::write_json(dir / "scenes.json", {{"format", "sarseg-scenes"},
                                       {"version", data::kDatasetVersion},
                                       {"count", scenes.size()},
                                       {"num_classes", num_classes},
                                       {"scenes", list}});
}

struct SceneSet {
  int num_classes = 0;
  std::vector<Raster> scenes;
};

inline SceneSet read_scenes(const io::fs::path& dir) {
  const auto mpath = dir / "scenes.json";
  if (!io::fs::exists(mpath)) throw ManifestError("no scenes.json in " + dir.string());
  const auto m = io::read_json<ManifestError>(mpath);
  if (data::detail::field<std::uint32_t>(m, "version") != data::kDatasetVersion)
    throw VersionError("scene set version " + m.at("version").dump());
  SceneSet set;
  set.num_classes = data::detail::field<int>(m, "num_classes");
  const auto list = data::detail::field<nlohmann::json>(m, "scenes");
  if (!list.is_array() || list.size() != data::detail::field<std::size_t>(m, "count"))
    throw ManifestError("scene list length differs from count");
  for (std::size_t i = 0; i < list.size(); ++i) {
    Raster r;
    r.tag = data::detail::field<std::string>(list[i], "tag");
    r.height = data::detail::field<int>(list[i], "height");
    r.width = data::detail::field<int>(list[i], "width");
    const auto stem = data::detail::patch_stem(i);
    const auto ip = dir / (stem + ".img"), lp = dir / (stem + ".lbl");
    if (!io::fs::exists(ip) || !io::fs::exists(lp)) throw IntegrityError("missing scene files for " + stem);
    // Scenes may be rectangular; check the header by hand.
    const auto ib = io::read_file(ip), lb = io::read_file(lp);
    for (const auto* bytes : {&ib, &lb}) {
      io::Reader<FormatError> rd(*bytes, stem);
      const auto magic = rd.take(4);
      if (!std::equal(magic.begin(), magic.end(), data::kPatchMagic)) throw FormatError(stem + ": bad magic bytes");
      if (rd.u32() != data::kDatasetVersion) throw VersionError(stem + ": unsupported version");
      if (rd.u32() != static_cast<std::uint32_t>(r.height) || rd.u32() != static_cast<std::uint32_t>(r.width))
        throw ShapeError(stem + ": header size differs from scenes.json");
    }
    io::Reader<FormatError> ri(ib, stem + ".img");
    ri.take(16);
    r.amplitude = ri.f32(r.size());
    if (ri.remaining()) throw ShapeError(stem + ".img: trailing bytes");
    io::Reader<FormatError> rl(lb, stem + ".lbl");
    rl.take(16);
    const auto payload = rl.take(r.size());
    if (rl.remaining()) throw ShapeError(stem + ".lbl: trailing bytes");
    r.labels.assign(payload.begin(), payload.end());
    r.validate(set.num_classes);
    set.scenes.push_back(std::move(r));
  }
  return set;
}

struct BuildConfig {
  int patch_size = 64;
  std::size_t anchors = 20000;
  std::uint64_t seed = 0;
  data::RemapTable remap = data::RemapTable::default_14_to_9();
  data::SplitSpec splits = default_split_spec();
  std::vector<std::string> class_names = data::lulc9_class_names();

  void validate(int source_classes) const {
    if (patch_size < 1) throw ConfigError("build: patch size must be >= 1");
    if (anchors < 1) throw ConfigError("build: anchor count must be >= 1");
    remap.validate();
    if (static_cast<int>(remap.mapping.size()) < source_classes)
      throw ConfigError("build: remap table covers " + std::to_string(remap.mapping.size()) + " source classes, scenes use " +
                        std::to_string(source_classes));
    if (static_cast<int>(class_names.size()) != remap.num_target)
      throw ConfigError("build: " + std::to_string(class_names.size()) + " class names for " +
                        std::to_string(remap.num_target) + " target classes");
  }
};

inline data::Dataset build_dataset(const SceneSet& set, const BuildConfig& cfg) {
  cfg.validate(set.num_classes);
  if (set.scenes.empty()) throw EmptyInputError("build: no scenes");
  for (const auto& r : set.scenes)
    if (!cfg.splits.contains(r.tag)) throw ConfigError("build: scene tag '" + r.tag + "' has no split assignment");
  const auto stats = data::compute_class_stats(set.scenes, set.num_classes);
  const auto anchors = data::sample_anchors(set.scenes, stats, cfg.anchors, cfg.seed);

  data::Dataset ds;
  ds.patch_size = cfg.patch_size;
  ds.num_classes = cfg.remap.num_target;
  ds.class_names = cfg.class_names;
  ds.splits = cfg.splits;
  ds.remap = cfg.remap;
  for (std::size_t i = 0; i < set.scenes.size(); ++i)
    for (auto& p : data::extract_patches(set.scenes[i], static_cast<int>(i), anchors, cfg.patch_size))
      ds.patches.push_back(data::remap_labels(p, cfg.remap));
  const auto train = ds.split().train;
  if (!train.empty()) ds.norm = data::compute_norm_stats(train);
  return ds;
}

}  // namespace sarseg::engine
