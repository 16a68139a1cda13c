#pragma once

// Checkpoint directory:
//   manifest.json  version, kind (segmenter | encoder), task, pretrained flag,
//                  model config, step, epoch, norm stats, free-form extras
//   params.bin     "SSCK" u32 version u32 count, then per tensor:
//                  u32 name length, name, u32 ndim, u64 dims..., float32 LE data
//   optim.bin      optimizer moments in the same blob format (training only)

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sarseg/io/binary.hpp"
#include "sarseg/model/segmenter.hpp"
#include "sarseg/sampling.hpp"

namespace sarseg::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kBlobMagic[4] = {'S', 'S', 'C', 'K'};

struct Blob {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

inline void write_blobs(const io::fs::path& path, const std::vector<Blob>& blobs) {
  std::vector<std::uint8_t> out(kBlobMagic, kBlobMagic + 4);
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(blobs.size()));
  for (const auto& b : blobs) {
    io::put_u32(out, static_cast<std::uint32_t>(b.name.size()));
    out.insert(out.end(), b.name.begin(), b.name.end());
    io::put_u32(out, static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) io::put_u64(out, static_cast<std::uint64_t>(d));
    io::put_f32(out, b.data);
  }
  io::write_file(path, out);
}

inline std::vector<Blob> read_blobs(const io::fs::path& path) {
  if (!io::fs::exists(path)) throw IntegrityError("missing " + path.filename().string());
  const auto bytes = io::read_file(path);
  io::Reader<FormatError> r(bytes, path.filename().string());
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), kBlobMagic))
    throw FormatError(path.filename().string() + ": bad magic bytes");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError(path.filename().string() + ": version " + std::to_string(version));
  const auto count = r.u32();
  std::vector<Blob> blobs;
  for (std::uint32_t i = 0; i < count; ++i) {
    Blob b;
    const auto name = r.take(r.u32());
    b.name.assign(name.begin(), name.end());
    const auto nd = r.u32();
    if (nd > 8) throw FormatError(path.filename().string() + ": implausible rank for " + b.name);
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      const auto e = r.u64();
      if (e > (1ull << 32)) throw FormatError(path.filename().string() + ": implausible extent for " + b.name);
      b.shape.push_back(static_cast<std::int64_t>(e));
      n *= e;
    }
    b.data = r.f32(static_cast<std::size_t>(n));
    blobs.push_back(std::move(b));
  }
  if (r.remaining() != 0) throw FormatError(path.filename().string() + ": trailing bytes");
  return blobs;
}

struct CheckpointMeta {
  std::string kind = "segmenter";  // or "encoder"
  std::string task = "lulc";       // lulc | water | pretrain
  bool pretrained = false;
  std::int64_t step = 0;
  int epoch = 0;
  std::optional<data::NormStats> norm;
  nlohmann::json model;  // ModelConfig (segmenter) or EncoderConfig (encoder)
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json meta_to_json(const CheckpointMeta& m) {
  nlohmann::json j{{"format", "sarseg-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"kind", m.kind},
                   {"task", m.task},
                   {"pretrained", m.pretrained},
                   {"step", m.step},
                   {"epoch", m.epoch},
                   {"model", m.model},
                   {"extra", m.extra}};
  j["norm_stats"] = m.norm ? nlohmann::json{{"mean", m.norm->mean}, {"std", m.norm->std}} : nlohmann::json();
  return j;
}

inline CheckpointMeta read_checkpoint_meta(const io::fs::path& dir) {
  const auto path = dir / "manifest.json";
  if (!io::fs::exists(path)) throw ManifestError("no checkpoint manifest in " + dir.string());
  const auto j = io::read_json<ManifestError>(path);
  try {
    if (j.at("version").get<std::uint32_t>() != kCheckpointVersion)
      throw VersionError("checkpoint version " + j.at("version").dump());
    CheckpointMeta m;
    m.kind = j.at("kind").get<std::string>();
    m.task = j.at("task").get<std::string>();
    m.pretrained = j.at("pretrained").get<bool>();
    m.step = j.at("step").get<std::int64_t>();
    m.epoch = j.at("epoch").get<int>();
    m.model = j.at("model");
    m.extra = j.value("extra", nlohmann::json::object());
    if (j.contains("norm_stats") && !j["norm_stats"].is_null())
      m.norm = data::NormStats{j["norm_stats"].at("mean").get<double>(), j["norm_stats"].at("std").get<double>()};
    if (m.kind != "segmenter" && m.kind != "encoder") throw ManifestError("unknown checkpoint kind " + m.kind);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("checkpoint manifest: ") + e.what());
  }
}

template <class T>
Blob to_blob(const Parameter<T>& p) {
  Blob b{p.name, p.value.shape(), {}};
  for (T v : p.value.data()) b.data.push_back(static_cast<float>(v));
  return b;
}

template <class T>
void save_model(const io::fs::path& dir, const Segmenter<T>& model, CheckpointMeta meta) {
  io::ensure_dir(dir);
  meta.kind = "segmenter";
  meta.model = model.config();
  std::vector<Blob> blobs;
  for (const auto& p : model.params()) blobs.push_back(to_blob(p));
  write_blobs(dir / "params.bin", blobs);
  io::write_json(dir / "manifest.json", meta_to_json(meta));
}

// Encoder parameters only; the decoder is rebuilt from scratch downstream.
template <class T>
void save_encoder(const io::fs::path& dir, const Segmenter<T>& model, CheckpointMeta meta) {
  io::ensure_dir(dir);
  meta.kind = "encoder";
  meta.model = model.config().encoder;
  std::vector<Blob> blobs;
  for (const auto& p : model.params())
    if (p.name.rfind("encoder.", 0) == 0) blobs.push_back(to_blob(p));
  write_blobs(dir / "params.bin", blobs);
  io::write_json(dir / "manifest.json", meta_to_json(meta));
}

namespace detail {

template <class T>
std::size_t assign(std::vector<Parameter<T>>& params, const std::vector<Blob>& blobs, const std::string& prefix) {
  std::unordered_map<std::string, const Blob*> by_name;
  for (const auto& b : blobs) by_name[b.name] = &b;
  std::size_t loaded = 0;
  for (auto& p : params) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IntegrityError("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.value.shape())
      throw ShapeError("checkpoint parameter " + p.name + " has shape " + num::shape_str(it->second->shape) +
                       ", model expects " + num::shape_str(p.value.shape()));
    auto dst = p.value.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->data[i]);
    ++loaded;
  }
  return loaded;
}

}  // namespace detail

template <class T>
void load_model(const io::fs::path& dir, Segmenter<T>& model) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.kind != "segmenter") throw ConfigError("checkpoint holds an encoder only, not a full model");
  ModelConfig stored;
  try {
    stored = meta.model.get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("checkpoint model config: ") + e.what());
  }
  if (!(stored == model.config()))
    throw ConfigError("checkpoint config " + nlohmann::json(stored).dump() + " does not match model config " +
                      nlohmann::json(model.config()).dump());
  detail::assign(model.params(), read_blobs(dir / "params.bin"), "");
}

// Loads the encoder half from an encoder-only or full checkpoint; returns
// the number of tensors loaded.
template <class T>
std::size_t load_encoder(const io::fs::path& dir, Segmenter<T>& model) {
  const auto meta = read_checkpoint_meta(dir);
  EncoderConfig stored;
  try {
    stored = meta.kind == "encoder" ? meta.model.get<EncoderConfig>() : meta.model.get<ModelConfig>().encoder;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("checkpoint encoder config: ") + e.what());
  }
  if (!(stored == model.config().encoder))
    throw ConfigError("checkpoint encoder config " + nlohmann::json(stored).dump() + " does not match " +
                      nlohmann::json(model.config().encoder).dump());
  return detail::assign(model.params(), read_blobs(dir / "params.bin"), "encoder.");
}

template <class T>
Segmenter<T> model_from_checkpoint(const io::fs::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.kind != "segmenter") throw ConfigError("checkpoint holds an encoder only, not a full model");
  ModelConfig cfg;
  try {
    cfg = meta.model.get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("checkpoint model config: ") + e.what());
  }
  Segmenter<T> m(cfg, 0);
  load_model(dir, m);
  return m;
}

}  // namespace sarseg::model
