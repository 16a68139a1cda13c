#pragma once

// On-disk dataset directory:
//   manifest.json        version, patch size, count, classes, tags, origins,
//                        norm stats, split assignment
//   patches/NNNNNN.img   "SSEG" u32 version u32 H u32 W, H*W float32 LE
//   patches/NNNNNN.lbl   same header, H*W uint8
//   remap.json           source -> target class table (optional)

#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sarseg/io/binary.hpp"
#include "sarseg/sampling.hpp"

namespace sarseg::data {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr char kPatchMagic[4] = {'S', 'S', 'E', 'G'};

struct Dataset {
  int patch_size = 0;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<PatchPair> patches;
  std::optional<NormStats> norm;
  SplitSpec splits;
  std::optional<RemapTable> remap;

  Splits split() const { return split_by_tag(patches, splits); }
};

namespace detail {

inline std::string patch_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

inline std::vector<std::uint8_t> patch_header(int h, int w) {
  std::vector<std::uint8_t> out(kPatchMagic, kPatchMagic + 4);
  io::put_u32(out, kDatasetVersion);
  io::put_u32(out, static_cast<std::uint32_t>(h));
  io::put_u32(out, static_cast<std::uint32_t>(w));
  return out;
}

// Validates the header and returns a reader positioned at the payload.
inline io::Reader<FormatError> open_patch(std::span<const std::uint8_t> bytes, const std::string& name,
                                          int size, std::size_t elem_bytes) {
  io::Reader<FormatError> r(bytes, name);
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), kPatchMagic)) throw FormatError(name + ": bad magic bytes");
  const auto version = r.u32();
  if (version != kDatasetVersion)
    throw VersionError(name + ": version " + std::to_string(version) + ", expected " +
                       std::to_string(kDatasetVersion));
  const auto h = r.u32(), w = r.u32();
  if (h != static_cast<std::uint32_t>(size) || w != static_cast<std::uint32_t>(size))
    throw ShapeError(name + ": " + std::to_string(h) + "x" + std::to_string(w) + " but manifest patch size is " +
                     std::to_string(size));
  if (r.remaining() != static_cast<std::size_t>(size) * size * elem_bytes)
    throw ShapeError(name + ": payload holds " + std::to_string(r.remaining()) + " bytes, expected " +
                     std::to_string(static_cast<std::size_t>(size) * size * elem_bytes));
  return r;
}

template <class T>
T field(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("manifest field '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline void write_dataset(const io::fs::path& dir, const Dataset& ds) {
  if (ds.patch_size < 1) throw ArgumentError("write_dataset: patch size must be positive");
  const auto n = static_cast<std::size_t>(ds.patch_size) * ds.patch_size;
  for (const auto& p : ds.patches)
    if (p.size != ds.patch_size || p.image.size() != n || p.labels.size() != n)
      throw ShapeError("write_dataset: patch does not match patch size " + std::to_string(ds.patch_size));

  io::ensure_dir(dir / "patches");
  nlohmann::json tags = nlohmann::json::array(), origins = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.patches.size(); ++i) {
    const auto& p = ds.patches[i];
    auto img = detail::patch_header(p.size, p.size);
    io::put_f32(img, p.image);
    io::write_file(dir / "patches" / (detail::patch_stem(i) + ".img"), img);
    auto lbl = detail::patch_header(p.size, p.size);
    lbl.insert(lbl.end(), p.labels.begin(), p.labels.end());
    io::write_file(dir / "patches" / (detail::patch_stem(i) + ".lbl"), lbl);
    tags.push_back(p.tag);
    origins.push_back({p.origin.raster, p.origin.row, p.origin.col});
  }
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& [tag, s] : ds.splits) splits[tag] = split_name(s);
  nlohmann::json m{{"format", "sarseg-dataset"},
                   {"version", kDatasetVersion},
                   {"patch_size", ds.patch_size},
                   {"count", ds.patches.size()},
                   {"num_classes", ds.num_classes},
                   {"classes", ds.class_names},
                   {"tags", tags},
                   {"origins", origins},
                   {"splits", splits}};
  m["norm_stats"] = ds.norm ? nlohmann::json{{"mean", ds.norm->mean}, {"std", ds.norm->std}} : nlohmann::json();
  io::write_json(dir / "manifest.json", m);
  if (ds.remap) io::write_json(dir / "remap.json", ds.remap->to_json());
}

inline void write_dataset(const io::fs::path& dir, const std::vector<PatchPair>& patches,
                          const std::optional<NormStats>& stats, int num_classes) {
  Dataset ds;
  ds.patch_size = patches.empty() ? 1 : patches.front().size;
  ds.num_classes = num_classes;
  ds.patches = patches;
  ds.norm = stats;
  write_dataset(dir, ds);
}

inline Dataset read_dataset(const io::fs::path& dir) {
  const auto mpath = dir / "manifest.json";
  if (!io::fs::exists(mpath)) throw ManifestError("no manifest.json in " + dir.string());
  const auto m = io::read_json<ManifestError>(mpath);
  if (!m.is_object()) throw ManifestError("manifest is not a JSON object");
  const auto version = detail::field<std::uint32_t>(m, "version");
  if (version != kDatasetVersion)
    throw VersionError("dataset version " + std::to_string(version) + ", expected " +
                       std::to_string(kDatasetVersion));

  Dataset ds;
  ds.patch_size = detail::field<int>(m, "patch_size");
  ds.num_classes = detail::field<int>(m, "num_classes");
  ds.class_names = detail::field<std::vector<std::string>>(m, "classes");
  const auto count = detail::field<std::size_t>(m, "count");
  const auto tags = detail::field<std::vector<std::string>>(m, "tags");
  const auto origins = detail::field<std::vector<std::array<int, 3>>>(m, "origins");
  if (ds.patch_size < 1) throw ManifestError("patch_size must be positive");
  if (ds.num_classes < 1 || ds.num_classes > 255) throw ManifestError("num_classes must lie in [1, 255]");
  if (tags.size() != count || origins.size() != count)
    throw ManifestError("tags/origins length differs from count");
  for (const auto& [tag, s] : detail::field<std::map<std::string, std::string>>(m, "splits")) {
    try {
      ds.splits[tag] = parse_split(s);
    } catch (const ConfigError& e) {
      throw ManifestError(e.what());
    }
  }
  if (m.contains("norm_stats") && !m["norm_stats"].is_null()) {
    const auto& ns = m["norm_stats"];
    ds.norm = NormStats{detail::field<double>(ns, "mean"), detail::field<double>(ns, "std")};
  }

  std::size_t n_img = 0, n_lbl = 0;
  if (io::fs::is_directory(dir / "patches"))
    for (const auto& e : io::fs::directory_iterator(dir / "patches")) {
      if (e.path().extension() == ".img") ++n_img;
      if (e.path().extension() == ".lbl") ++n_lbl;
    }
  if (n_img != count || n_lbl != count)
    throw IntegrityError("manifest count " + std::to_string(count) + " but found " + std::to_string(n_img) +
                         " image and " + std::to_string(n_lbl) + " label files");

  const int s = ds.patch_size;
  const auto px = static_cast<std::size_t>(s) * s;
  ds.patches.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto stem = detail::patch_stem(i);
    const auto ip = dir / "patches" / (stem + ".img"), lp = dir / "patches" / (stem + ".lbl");
    if (!io::fs::exists(ip) || !io::fs::exists(lp)) throw IntegrityError("missing patch files for " + stem);
    PatchPair p;
    p.size = s;
    const auto ib = io::read_file(ip);
    p.image = detail::open_patch(ib, stem + ".img", s, 4).f32(px);
    const auto lb = io::read_file(lp);
    const auto payload = detail::open_patch(lb, stem + ".lbl", s, 1).take(px);
    p.labels.assign(payload.begin(), payload.end());
    for (auto l : p.labels)
      if (l != kIgnoreLabel && l >= ds.num_classes)
        throw DataError(stem + ".lbl: class id " + std::to_string(l) + " outside [0, " +
                        std::to_string(ds.num_classes) + ")");
    p.tag = tags[i];
    p.origin = {origins[i][0], origins[i][1], origins[i][2]};
    ds.patches.push_back(std::move(p));
  }
  if (io::fs::exists(dir / "remap.json")) ds.remap = RemapTable::from_json(io::read_json<ConfigError>(dir / "remap.json"));
  return ds;
}

}  // namespace sarseg::data
