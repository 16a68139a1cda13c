#pragma once

// Hierarchical shifted-window transformer encoder, pyramid-pooling + FPN
// decoder with optional high-resolution injection and staged refine-up head.

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sarseg/model/config.hpp"
#include "sarseg/model/layers.hpp"

namespace sarseg::model {

// All maps NCHW. post_embed is the stride-4 patch embedding before any
// attention block.
template <class T>
struct FeaturePyramid {
  Tensor<T> post_embed;
  std::array<Tensor<T>, 4> stages;
};

namespace detail {

// Additive mask [1, nW, 1, L, L] blocking attention across the seams that the
// cyclic shift wraps together.
template <class T>
Tensor<T> shift_mask(std::int64_t h, std::int64_t w, std::int64_t ws, std::int64_t shift) {
  auto region = [&](std::int64_t p, std::int64_t size) { return p < size - ws ? 0 : (p < size - shift ? 1 : 2); };
  const std::int64_t nwh = h / ws, nww = w / ws, l = ws * ws;
  std::vector<T> m(static_cast<std::size_t>(nwh * nww * l * l), T(0));
  for (std::int64_t wy = 0; wy < nwh; ++wy)
    for (std::int64_t wx = 0; wx < nww; ++wx) {
      const std::int64_t win = wy * nww + wx;
      std::vector<int> id(static_cast<std::size_t>(l));
      for (std::int64_t i = 0; i < l; ++i)
        id[i] = region(wy * ws + i / ws, h) * 3 + region(wx * ws + i % ws, w);
      for (std::int64_t i = 0; i < l; ++i)
        for (std::int64_t j = 0; j < l; ++j)
          if (id[i] != id[j]) m[(win * l + i) * l + j] = T(-100);
    }
  return Tensor<T>::from({1, nwh * nww, 1, l, l}, std::move(m));
}

}  // namespace detail

template <class T>
struct WindowAttention {
  Linear<T> q, k, v, proj;
  std::int64_t heads = 1;

  WindowAttention() = default;
  WindowAttention(ParamStore<T>& ps, const std::string& name, std::int64_t dim, std::int64_t heads_)
      : q(ps, name + ".q", dim, dim),
        k(ps, name + ".k", dim, dim),
        v(ps, name + ".v", dim, dim),
        proj(ps, name + ".proj", dim, dim),
        heads(heads_) {}

  // windows: [B, L, C]; mask: [1, nW, 1, L, L] or undefined, B = N * nW.
  Tensor<T> operator()(const Tensor<T>& windows, const Tensor<T>& mask) const {
    const std::int64_t b = windows.dim(0), l = windows.dim(1), c = windows.dim(2), d = c / heads;
    auto split = [&](const Tensor<T>& t) { return num::permute(num::reshape(t, {b, l, heads, d}), {0, 2, 1, 3}); };
    auto qh = split(num::scale(q(windows), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)))));
    auto kh = split(k(windows)), vh = split(v(windows));
    auto attn = num::matmul(qh, kh, true);  // [B, heads, L, L]
    if (mask.defined()) {
      const std::int64_t nw = mask.dim(1);
      attn = num::reshape(num::add(num::reshape(attn, {b / nw, nw, heads, l, l}), mask), {b, heads, l, l});
    }
    auto out = num::matmul(num::softmax(attn), vh);
    return proj(num::reshape(num::permute(out, {0, 2, 1, 3}), {b, l, c}));
  }
};

template <class T>
struct SwinBlock {
  LayerNorm<T> norm1, norm2;
  WindowAttention<T> attn;
  Linear<T> fc1, fc2;
  std::int64_t window = 8, shift = 0;

  SwinBlock() = default;
  SwinBlock(ParamStore<T>& ps, const std::string& name, std::int64_t dim, std::int64_t heads, std::int64_t window_,
            std::int64_t shift_, int mlp_ratio)
      : norm1(ps, name + ".norm1", dim),
        norm2(ps, name + ".norm2", dim),
        attn(ps, name + ".attn", dim, heads),
        fc1(ps, name + ".mlp.fc1", dim, dim * mlp_ratio),
        fc2(ps, name + ".mlp.fc2", dim * mlp_ratio, dim),
        window(window_),
        shift(shift_) {}

  // x: [N, H, W, C]
  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::int64_t h = x.dim(1), w = x.dim(2);
    const auto mask = shift > 0 ? detail::shift_mask<T>(h, w, window, shift) : Tensor<T>{};
    auto win = num::window_partition(norm1(x), window, shift);
    auto y = num::add(x, num::window_reverse(attn(win, mask), window, shift, h, w));
    return num::add(y, fc2(num::gelu(fc1(norm2(y)))));
  }
};

// 2x2 neighbourhood -> channels, LN(4C), linear 4C -> 2C.
template <class T>
struct PatchMerging {
  LayerNorm<T> norm;
  Linear<T> reduce;
  PatchMerging() = default;
  PatchMerging(ParamStore<T>& ps, const std::string& name, std::int64_t dim)
      : norm(ps, name + ".norm", 4 * dim), reduce(ps, name + ".reduction", 4 * dim, 2 * dim, false) {}
  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    auto t = num::reshape(x, {n, h / 2, 2, w / 2, 2, c});
    t = num::reshape(num::permute(t, {0, 1, 3, 4, 2, 5}), {n, h / 2, w / 2, 4 * c});
    return reduce(norm(t));
  }
};

template <class T>
struct Encoder {
  EncoderConfig cfg;
  Conv<T> patch_embed;
  LayerNorm<T> embed_norm;
  std::array<std::vector<SwinBlock<T>>, 4> blocks;
  std::array<PatchMerging<T>, 4> merges;  // merges[0] unused
  std::array<LayerNorm<T>, 4> out_norms;

  Encoder() = default;
  // Depths: patch embedding 0, blocks 1..sum(B); a stage's merging and
  // output norm share the depth of that stage's last block.
  Encoder(ParamStore<T>& ps, const EncoderConfig& c) : cfg(c) {
    cfg.validate();
    ps.set_depth(0);
    patch_embed = Conv<T>(ps, "encoder.patch_embed.proj", cfg.in_channels, cfg.channels[0], cfg.patch_stride,
                          cfg.patch_stride, 0, true);
    embed_norm = LayerNorm<T>(ps, "encoder.patch_embed.norm", cfg.channels[0]);
    int depth = 0;
    for (int s = 0; s < 4; ++s) {
      const std::string st = "encoder.stages." + std::to_string(s);
      const int last = depth + cfg.blocks[s];
      if (s > 0) {
        ps.set_depth(last);
        merges[s] = PatchMerging<T>(ps, st + ".downsample", cfg.channels[s - 1]);
      }
      const int ws = cfg.effective_window(s);
      const bool can_shift = cfg.grid(s) > ws;
      for (int b = 0; b < cfg.blocks[s]; ++b) {
        ps.set_depth(++depth);
        blocks[s].emplace_back(ps, st + ".blocks." + std::to_string(b), cfg.channels[s], cfg.heads[s], ws,
                               (can_shift && b % 2 == 1) ? ws / 2 : 0, cfg.mlp_ratio);
      }
      ps.set_depth(last);
      out_norms[s] = LayerNorm<T>(ps, st + ".norm", cfg.channels[s]);
    }
  }

  int max_depth() const { return cfg.total_blocks(); }

  FeaturePyramid<T> operator()(const Tensor<T>& image) const {
    num::TraceScope scope("encoder");
    if (image.ndim() != 4 || image.dim(1) != cfg.in_channels)
      throw ShapeError("encoder: expected N x " + std::to_string(cfg.in_channels) + " x S x S input, got " +
                       num::shape_str(image.shape()));
    if (image.dim(2) != cfg.input_size || image.dim(3) != cfg.input_size)
      throw ConfigError("encoder: input " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                        " does not match configured size " + std::to_string(cfg.input_size));
    FeaturePyramid<T> pyr;
    auto x = embed_norm(num::permute(patch_embed(image), {0, 2, 3, 1}));  // NHWC
    pyr.post_embed = num::permute(x, {0, 3, 1, 2});
    for (int s = 0; s < 4; ++s) {
      if (s > 0) x = merges[s](x);
      for (const auto& blk : blocks[s]) x = blk(x);
      pyr.stages[s] = num::permute(out_norms[s](x), {0, 3, 1, 2});
    }
    return pyr;
  }
};

template <class T>
Tensor<T> resize_to(const Tensor<T>& x, const Tensor<T>& like) {
  if (x.dim(2) == like.dim(2) && x.dim(3) == like.dim(3)) return x;
  return num::resize_bilinear(x, like.dim(2), like.dim(3));
}

template <class T>
struct Decoder {
  ModelConfig cfg;
  std::vector<ConvNormAct<T>> ppm;
  ConvNormAct<T> ppm_bottleneck;
  std::array<ConvNormAct<T>, 3> laterals;
  ConvNormAct<T> inject;  // post-embed projection, high-res injection only
  std::array<ConvNormAct<T>, 3> fpn_convs;
  ConvNormAct<T> fuse;
  ConvNormAct<T> refine1, refine2;  // refine-up only
  Conv<T> classifier;

  Decoder() = default;
  Decoder(ParamStore<T>& ps, const ModelConfig& c) : cfg(c) {
    const auto& ch = cfg.encoder.channels;
    const int w = cfg.fpn_width, g = cfg.norm_groups;
    for (std::size_t i = 0; i < cfg.ppm_grids.size(); ++i)
      ppm.emplace_back(ps, "decoder.ppm." + std::to_string(i), ch[3], w, 1, g);
    ppm_bottleneck = ConvNormAct<T>(ps, "decoder.ppm_bottleneck", ch[3] + 4 * w, w, 3, g);
    const int lat0_in = ch[0] + (cfg.flags.high_res_injection ? w : 0);
    if (cfg.flags.high_res_injection) inject = ConvNormAct<T>(ps, "decoder.inject", ch[0], w, 1, g);
    for (int i = 0; i < 3; ++i) {
      laterals[i] = ConvNormAct<T>(ps, "decoder.lateral." + std::to_string(i), i == 0 ? lat0_in : ch[i], w, 1, g);
      fpn_convs[i] = ConvNormAct<T>(ps, "decoder.fpn." + std::to_string(i), w, w, 3, g);
    }
    fuse = ConvNormAct<T>(ps, "decoder.fuse", 4 * w, w, 3, g);
    if (cfg.flags.refine_up) {
      refine1 = ConvNormAct<T>(ps, "decoder.head.refine.0", w, w / 2, 3, g);
      refine2 = ConvNormAct<T>(ps, "decoder.head.refine.1", w / 2, w / 4, 3, g);
      classifier = Conv<T>(ps, "decoder.head.classifier", w / 4, cfg.num_classes, 1);
    } else {
      classifier = Conv<T>(ps, "decoder.head.classifier", w, cfg.num_classes, 1);
    }
  }

  // Fused stride-4 feature map (before the head).
  Tensor<T> features(const FeaturePyramid<T>& pyr) const {
    const auto& top = pyr.stages[3];
    std::vector<Tensor<T>> pooled{top};
    for (std::size_t i = 0; i < ppm.size(); ++i) {
      const std::int64_t gsz = cfg.ppm_grids[i];
      pooled.push_back(resize_to(ppm[i](num::adaptive_avg_pool2d(top, gsz, gsz)), top));
    }
    std::array<Tensor<T>, 4> lat;
    lat[3] = ppm_bottleneck(num::concat(pooled, 1));
    auto stage0 = pyr.stages[0];
    if (cfg.flags.high_res_injection) stage0 = num::concat(std::vector<Tensor<T>>{stage0, inject(pyr.post_embed)}, 1);
    lat[0] = laterals[0](stage0);
    for (int i = 1; i < 3; ++i) lat[i] = laterals[i](pyr.stages[i]);
    for (int i = 3; i > 0; --i) lat[i - 1] = num::add(lat[i - 1], resize_to(lat[i], lat[i - 1]));
    std::vector<Tensor<T>> outs;
    for (int i = 0; i < 3; ++i) outs.push_back(fpn_convs[i](lat[i]));
    outs.push_back(lat[3]);
    for (int i = 1; i < 4; ++i) outs[i] = resize_to(outs[i], outs[0]);
    return fuse(num::concat(outs, 1));
  }

  Tensor<T> operator()(const FeaturePyramid<T>& pyr) const {
    num::TraceScope scope("decoder");
    auto f = features(pyr);
    num::TraceScope head("head");
    if (cfg.flags.refine_up) {
      f = refine1(num::bilinear_upsample(f, 2));
      f = refine2(num::bilinear_upsample(f, 2));
      return classifier(f);
    }
    return num::bilinear_upsample(classifier(f), 4);
  }
};

struct ParamGroup {
  std::string name;
  int depth = 0;
  bool decay = true;
};

// Encoder + decoder. num_classes == 1 gives the binary water model whose
// probability is sigmoid(logit).
template <class T>
class Segmenter {
 public:
  explicit Segmenter(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg), store_(std::make_unique<ParamStore<T>>(seed)) {
    cfg_.validate();
    encoder_ = Encoder<T>(*store_, cfg_.encoder);
    store_->set_depth(encoder_.max_depth() + 1);
    decoder_ = Decoder<T>(*store_, cfg_);
  }

  const ModelConfig& config() const { return cfg_; }
  FeaturePyramid<T> encode(const Tensor<T>& image) const { return encoder_(image); }
  Tensor<T> decode(const FeaturePyramid<T>& pyr) const { return decoder_(pyr); }
  Tensor<T> forward(const Tensor<T>& image) const { return decode(encode(image)); }

  std::vector<Parameter<T>>& params() { return store_->params(); }
  const std::vector<Parameter<T>>& params() const { return store_->params(); }
  const Encoder<T>& encoder() const { return encoder_; }
  int max_depth() const { return encoder_.max_depth() + 1; }

  std::vector<ParamGroup> parameter_groups() const {
    std::vector<ParamGroup> out;
    for (const auto& p : params()) out.push_back({p.name, p.depth, p.decay});
    return out;
  }

  Parameter<T>& param(const std::string& name) {
    for (auto& p : params())
      if (p.name == name) return p;
    throw ArgumentError("no parameter named " + name);
  }

  void zero_grad() {
    for (auto& p : params()) p.value.zero_grad();
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParamStore<T>> store_;
  Encoder<T> encoder_;
  Decoder<T> decoder_;
};

}  // namespace sarseg::model
