#pragma once

#include <array>
#include <string>

#include <nlohmann/json.hpp>

#include "sarseg/error.hpp"

namespace sarseg::model {

struct EncoderConfig {
  std::array<int, 4> channels{16, 32, 64, 128};
  std::array<int, 4> heads{1, 2, 4, 8};
  std::array<int, 4> blocks{1, 1, 2, 1};
  int window = 8;
  int patch_stride = 4;
  int input_size = 64;
  int in_channels = 1;
  int mlp_ratio = 4;

  static EncoderConfig desk(int input_size = 64) {
    EncoderConfig c;
    c.input_size = input_size;
    return c;
  }
  static EncoderConfig paper(int input_size = 256) {
    EncoderConfig c;
    c.channels = {128, 256, 512, 1024};
    c.heads = {4, 8, 16, 32};
    c.blocks = {2, 2, 18, 2};
    c.input_size = input_size;
    return c;
  }

  int total_blocks() const { return blocks[0] + blocks[1] + blocks[2] + blocks[3]; }
  int grid(int stage) const { return input_size / (patch_stride << stage); }

  // Windows larger than a stage's token grid shrink to the grid; shifting is
  // then meaningless and disabled.
  int effective_window(int stage) const { return std::min(window, grid(stage)); }

  void validate() const {
    if (window < 1 || patch_stride < 1 || in_channels < 1 || mlp_ratio < 1)
      throw ConfigError("encoder: window, patch stride, input channels and mlp ratio must be positive");
    if (input_size < 1 || input_size % (patch_stride * 8) != 0)
      throw ConfigError("encoder: input size " + std::to_string(input_size) + " is not divisible by " +
                        std::to_string(patch_stride * 8));
    for (int s = 0; s < 4; ++s) {
      if (channels[s] < 1 || heads[s] < 1 || blocks[s] < 1)
        throw ConfigError("encoder: channels, heads and blocks must be positive");
      if (channels[s] % heads[s] != 0)
        throw ConfigError("encoder: stage " + std::to_string(s) + " channels not divisible by heads");
      if (s > 0 && channels[s] != 2 * channels[s - 1])
        throw ConfigError("encoder: channels must double between stages");
      if (grid(s) % effective_window(s) != 0)
        throw ConfigError("encoder: stage " + std::to_string(s) + " grid " + std::to_string(grid(s)) +
                          " not divisible by window " + std::to_string(window));
    }
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE(EncoderConfig, channels, heads, blocks, window, patch_stride, input_size,
                                 in_channels, mlp_ratio)
};

struct AblationFlags {
  bool high_res_injection = false;
  bool refine_up = false;
  bool alpha_scale_enabled = false;

  static AblationFlags all() { return {true, true, true}; }
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE(AblationFlags, high_res_injection, refine_up, alpha_scale_enabled)
};

struct ModelConfig {
  EncoderConfig encoder;
  int fpn_width = 64;
  int num_classes = 9;
  int norm_groups = 8;
  std::array<int, 4> ppm_grids{1, 2, 3, 6};
  AblationFlags flags;

  static ModelConfig desk(int num_classes = 9, AblationFlags f = {}, int input_size = 64) {
    ModelConfig c;
    c.encoder = EncoderConfig::desk(input_size);
    c.num_classes = num_classes;
    c.flags = f;
    return c;
  }
  static ModelConfig paper(int num_classes = 9, AblationFlags f = {}, int input_size = 256) {
    ModelConfig c;
    c.encoder = EncoderConfig::paper(input_size);
    c.fpn_width = 256;
    c.num_classes = num_classes;
    c.flags = f;
    return c;
  }

  void validate() const {
    encoder.validate();
    if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
    if (fpn_width < 4 || fpn_width % 4 != 0) throw ConfigError("model: fpn width must be a positive multiple of 4");
    for (int w : {fpn_width, fpn_width / 2, fpn_width / 4})
      if (w % norm_groups != 0)
        throw ConfigError("model: width " + std::to_string(w) + " not divisible by " +
                          std::to_string(norm_groups) + " norm groups");
  }

  // Equality of everything that fixes parameter shapes and forward semantics.
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE(ModelConfig, encoder, fpn_width, num_classes, norm_groups, ppm_grids, flags)
};

}  // namespace sarseg::model
