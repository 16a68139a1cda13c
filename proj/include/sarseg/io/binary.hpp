#pragma once

// Little-endian byte helpers and whole-file IO shared by the dataset and
// checkpoint containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sarseg/error.hpp"

namespace sarseg::io {

namespace fs = std::filesystem;

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, std::span<const float> v) {
  const std::size_t at = out.size();
  out.resize(at + v.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    if (!v.empty()) std::memcpy(out.data() + at, v.data(), v.size() * 4);
  } else {
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(v[i]);
      for (int b = 0; b < 4; ++b) out[at + 4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
  }
}

// Bounds-checked sequential reader; overruns raise the supplied error type.
template <class Err>
class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw Err(what_ + ": truncated");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    auto s = take(4);
    return std::uint32_t{s[0]} | std::uint32_t{s[1]} << 8 | std::uint32_t{s[2]} << 16 | std::uint32_t{s[3]} << 24;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | std::uint64_t{u32()} << 32;
  }
  std::vector<float> f32(std::size_t n) {
    if (n > (bytes_.size() - pos_) / 4) throw Err(what_ + ": truncated");
    auto s = take(n * 4);
    std::vector<float> out(n);
    if constexpr (std::endian::native == std::endian::little) {
      if (n) std::memcpy(out.data(), s.data(), n * 4);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t{s[4 * i + b]} << (8 * b);
        out[i] = std::bit_cast<float>(bits);
      }
    }
    return out;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> out(n);
  if (n) in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n));
  if (!in) throw IoError("cannot read " + p.string());
  return out;
}

inline void write_file(const fs::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + p.string());
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot create " + p.string());
  out << text;
  if (!out) throw IoError("cannot write " + p.string());
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

// Missing or unparsable files raise `Err`.
template <class Err>
nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Err("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Err(p.filename().string() + ": " + e.what());
  }
}

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

}  // namespace sarseg::io
