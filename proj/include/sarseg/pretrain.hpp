#pragma once

// Mixed-input self-supervised pretraining. Two images are mixed cell by cell
// before the encoder; a small transformer decoder reconstructs both originals,
// and each reconstruction is scored only where its image was hidden, with
// per-pixel weights proportional to backscatter power.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "sarseg/engine/optim.hpp"
#include "sarseg/model/checkpoint.hpp"

namespace sarseg::pretrain {

using num::Shape;
using num::Tensor;

// Cell grid per sample; 1 means the cell is taken from the first image.
struct MixMask {
  std::int64_t batch = 0, grid_h = 0, grid_w = 0;
  int granularity = 4;
  std::vector<std::uint8_t> cells;  // [batch, grid_h, grid_w]

  std::int64_t cells_per_sample() const { return grid_h * grid_w; }

  std::uint8_t at(std::int64_t b, std::int64_t gy, std::int64_t gx) const {
    return cells[static_cast<std::size_t>((b * grid_h + gy) * grid_w + gx)];
  }

  MixMask complement() const {
    MixMask m = *this;
    for (auto& c : m.cells) c = c ? 0 : 1;
    return m;
  }

  // Per-pixel expansion [batch, H, W] (channels share the mask).
  std::vector<std::uint8_t> pixels() const {
    const std::int64_t h = grid_h * granularity, w = grid_w * granularity;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(batch * h * w));
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          out[static_cast<std::size_t>((b * h + y) * w + x)] = at(b, y / granularity, x / granularity);
    return out;
  }
};

inline MixMask random_mix_mask(std::int64_t batch, std::int64_t grid_h, std::int64_t grid_w, int granularity,
                               double ratio, std::uint64_t seed) {
  if (!(ratio > 0 && ratio < 1)) throw ArgumentError("mix ratio must lie in (0, 1)");
  MixMask m{batch, grid_h, grid_w, granularity, {}};
  const auto per = static_cast<std::size_t>(grid_h * grid_w);
  const auto take = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(per)));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(per);
  for (std::int64_t b = 0; b < batch; ++b) {
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::uint8_t> row(per, 0);
    for (std::size_t i = 0; i < take; ++i) row[idx[i]] = 1;
    m.cells.insert(m.cells.end(), row.begin(), row.end());
  }
  return m;
}

// x_mix = M * x1 + (1 - M) * x2, images [N, C, H, W]. Not differentiated.
template <class T>
Tensor<T> apply_mix(const Tensor<T>& x1, const Tensor<T>& x2, const MixMask& m) {
  if (x1.shape() != x2.shape() || x1.ndim() != 4)
    throw ArgumentError("mix: images must share an N x C x H x W shape, got " + num::shape_str(x1.shape()) +
                        " and " + num::shape_str(x2.shape()));
  const std::int64_t n = x1.dim(0), c = x1.dim(1), h = x1.dim(2), w = x1.dim(3);
  if (m.batch != n || m.grid_h * m.granularity != h || m.grid_w * m.granularity != w)
    throw ArgumentError("mix: mask grid does not cover a " + num::shape_str(x1.shape()) + " batch");
  const auto px = m.pixels();
  std::vector<T> out(x1.values());
  const auto& b2 = x2.values();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < h * w; ++i) {
        const auto o = static_cast<std::size_t>((b * c + ch) * h * w + i);
        if (!px[static_cast<std::size_t>(b * h * w + i)]) out[o] = b2[o];
      }
  return Tensor<T>::from(x1.shape(), std::move(out));
}

template <class T>
struct Mixed {
  Tensor<T> image;
  MixMask mask;
};

template <class T>
Mixed<T> make_mix(const Tensor<T>& x1, const Tensor<T>& x2, double ratio, std::uint64_t seed, int granularity = 4) {
  if (x1.shape() != x2.shape() || x1.ndim() != 4)
    throw ArgumentError("mix: images must share an N x C x H x W shape, got " + num::shape_str(x1.shape()) +
                        " and " + num::shape_str(x2.shape()));
  if (granularity < 1 || x1.dim(2) % granularity || x1.dim(3) % granularity)
    throw ArgumentError("mix: image size not divisible by granularity " + std::to_string(granularity));
  auto mask = random_mix_mask(x1.dim(0), x1.dim(2) / granularity, x1.dim(3) / granularity, granularity, ratio, seed);
  auto image = apply_mix(x1, x2, mask);
  return {std::move(image), std::move(mask)};
}

struct PowerBounds {
  double w_min = 0.1;
  double w_max = 10.0;
};

// clamp(power / mean power, w_min, w_max), then rescaled to mean 1.
inline std::vector<double> power_weights(std::span<const double> amplitude, PowerBounds bounds = {}) {
  if (amplitude.empty()) throw EmptyInputError("power weights: empty image");
  if (!(bounds.w_min >= 0 && bounds.w_min <= 1 && bounds.w_max >= 1))
    throw ArgumentError("power weights: bounds must satisfy 0 <= w_min <= 1 <= w_max");
  double mean_power = 0;
  for (double a : amplitude) mean_power += a * a;
  mean_power /= static_cast<double>(amplitude.size());
  if (!(mean_power > 0)) throw DegenerateInputError("power weights: image has zero power everywhere");
  std::vector<double> w;
  w.reserve(amplitude.size());
  double mean_w = 0;
  for (double a : amplitude) {
    w.push_back(std::clamp(a * a / mean_power, bounds.w_min, bounds.w_max));
    mean_w += w.back();
  }
  mean_w /= static_cast<double>(w.size());
  // A flat vector rescales to exactly 1; skip the rounding of the division.
  if (std::all_of(w.begin(), w.end(), [&](double v) { return v == w.front(); })) mean_w = w.front();
  for (auto& v : w) v /= mean_w;
  return w;
}

// Sum over the two images of the weighted mean squared error on the pixels
// each image did not contribute to the mix. All tensors [N, 1, H, W]; the
// weights are per pixel in the same layout.
template <class T>
Tensor<T> reconstruction_loss(const Tensor<T>& recon1, const Tensor<T>& recon2, const Tensor<T>& x1,
                              const Tensor<T>& x2, const MixMask& m, std::span<const double> w1,
                              std::span<const double> w2) {
  for (const auto* t : {&recon2, &x1, &x2})
    if (t->shape() != recon1.shape())
      throw ShapeError("reconstruction loss: shapes " + num::shape_str(recon1.shape()) + " and " +
                       num::shape_str(t->shape()) + " differ");
  if (recon1.ndim() != 4 || recon1.dim(1) != 1)
    throw ShapeError("reconstruction loss: expected N x 1 x H x W, got " + num::shape_str(recon1.shape()));
  const auto n = static_cast<std::size_t>(recon1.numel());
  if (w1.size() != n || w2.size() != n) throw ShapeError("reconstruction loss: weight size mismatch");
  const auto px = m.pixels();
  if (px.size() != n) throw ShapeError("reconstruction loss: mask does not match image size");

  auto term = [&](const Tensor<T>& recon, const Tensor<T>& target, std::span<const double> w, std::uint8_t hidden) {
    std::vector<std::uint8_t> sel(n);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) count += (sel[i] = px[i] == hidden ? 1 : 0);
    if (count == 0) throw EmptyInputError("reconstruction loss: no hidden pixels for one of the images");
    std::vector<T> wt(w.begin(), w.end());
    auto d = num::sub(recon, target.detach());
    auto weighted = num::mul(num::mul(d, d), Tensor<T>::from(recon.shape(), std::move(wt)));
    return num::scale(num::masked_sum(weighted, std::span<const std::uint8_t>(sel)), static_cast<T>(1.0 / count));
  };
  // Image 1 is hidden where the mask took image 2 (cell value 0), and vice versa.
  return num::add(term(recon1, x1, w1, 0), term(recon2, x2, w2, 1));
}

struct PretrainConfig {
  double mask_ratio = 0.5;
  int granularity = 4;
  int decoder_dim = 64;
  int decoder_heads = 4;
  int decoder_blocks = 2;
  PowerBounds bounds;
  int steps = 200;
  int batch = 8;
  engine::OptimConfig optim = [] {
    engine::OptimConfig c;
    c.base_lr = 1.5e-3;
    c.min_lr = 0;
    c.layer_decay = 1.0;
    c.weight_decay = 0.05;
    return c;
  }();
  int warmup_steps = 10;

  void validate() const {
    if (!(mask_ratio > 0 && mask_ratio < 1)) throw ConfigError("pretrain: mask_ratio must lie in (0, 1)");
    if (granularity < 1) throw ConfigError("pretrain: granularity must be >= 1");
    if (decoder_dim < 1 || decoder_heads < 1 || decoder_dim % decoder_heads)
      throw ConfigError("pretrain: decoder_dim must be a positive multiple of decoder_heads");
    if (decoder_blocks < 1) throw ConfigError("pretrain: decoder_blocks must be >= 1");
    if (steps < 1) throw ConfigError("pretrain: steps must be >= 1");
    if (batch < 2 || batch % 2) throw ConfigError("pretrain: batch must be even and >= 2");
    if (warmup_steps < 0 || warmup_steps > steps) throw ConfigError("pretrain: warmup_steps must lie in [0, steps]");
    optim.validate();
  }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  nlohmann::json optim;
  engine::to_json(optim, c.optim);
  j = {{"mask_ratio", c.mask_ratio},       {"granularity", c.granularity}, {"decoder_dim", c.decoder_dim},
       {"decoder_heads", c.decoder_heads}, {"decoder_blocks", c.decoder_blocks},
       {"w_min", c.bounds.w_min},          {"w_max", c.bounds.w_max},      {"steps", c.steps},
       {"batch", c.batch},                 {"warmup_steps", c.warmup_steps}, {"optim", optim}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  const PretrainConfig d;
  c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
  c.granularity = j.value("granularity", d.granularity);
  c.decoder_dim = j.value("decoder_dim", d.decoder_dim);
  c.decoder_heads = j.value("decoder_heads", d.decoder_heads);
  c.decoder_blocks = j.value("decoder_blocks", d.decoder_blocks);
  c.bounds.w_min = j.value("w_min", d.bounds.w_min);
  c.bounds.w_max = j.value("w_max", d.bounds.w_max);
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.optim = d.optim;
  if (j.contains("optim")) engine::from_json(j.at("optim"), c.optim);
}

// Images only: the pretraining path has no access to labels by construction.
struct UnlabeledBatch {
  std::int64_t size = 0, height = 0, width = 0;
  std::vector<float> pixels;  // normalized, [size, 1, H, W]

  template <class Patches>
  static UnlabeledBatch gather(const Patches& patches, std::span<const std::size_t> idx) {
    UnlabeledBatch b;
    b.size = static_cast<std::int64_t>(idx.size());
    for (auto i : idx) {
      const auto& p = patches[i];
      if (b.height == 0) b.height = b.width = p.size;
      if (p.size != b.height) throw ShapeError("pretrain batch: mixed patch sizes");
      b.pixels.insert(b.pixels.end(), p.image.begin(), p.image.end());
    }
    return b;
  }
};

// Stride-32 tokens from the deepest stage plus the cell mask they cover,
// a few full-attention blocks, then a per-token linear map to pixels for
// each of the two originals.
template <class T>
class ReconstructionHead {
 public:
  ReconstructionHead(const model::EncoderConfig& enc, const PretrainConfig& cfg, std::uint64_t seed)
      : store_(std::make_unique<model::ParamStore<T>>(seed)),
        token_(enc.patch_stride * 8),
        grid_(enc.grid(3)),
        cells_(token_ / cfg.granularity) {
    if (token_ % cfg.granularity)
      throw ConfigError("pretrain: granularity must divide the token size " + std::to_string(token_));
    auto& ps = *store_;
    const std::int64_t d = cfg.decoder_dim, c3 = enc.channels[3];
    embed_ = model::Linear<T>(ps, "recon.embed", c3 + cells_ * cells_, d);
    pos_ = ps.weight("recon.pos", {1, grid_, grid_, d});
    for (int i = 0; i < cfg.decoder_blocks; ++i)
      blocks_.emplace_back(ps, "recon.blocks." + std::to_string(i), d, cfg.decoder_heads, grid_, 0, 4);
    norm_ = model::LayerNorm<T>(ps, "recon.norm", d);
    out1_ = model::Linear<T>(ps, "recon.out1", d, token_ * token_);
    out2_ = model::Linear<T>(ps, "recon.out2", d, token_ * token_);
  }

  // deepest: [N, C3, g, g]; returns reconstructions of both images [N, 1, S, S].
  std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& deepest, const MixMask& m) const {
    const std::int64_t n = deepest.dim(0), g = grid_;
    std::vector<T> feat(static_cast<std::size_t>(n * g * g * cells_ * cells_));
    std::size_t o = 0;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t ty = 0; ty < g; ++ty)
        for (std::int64_t tx = 0; tx < g; ++tx)
          for (std::int64_t cy = 0; cy < cells_; ++cy)
            for (std::int64_t cx = 0; cx < cells_; ++cx) feat[o++] = m.at(b, ty * cells_ + cy, tx * cells_ + cx);
    auto tokens = num::concat<T>({num::permute(deepest, {0, 2, 3, 1}),
                                  Tensor<T>::from({n, g, g, cells_ * cells_}, std::move(feat))},
                                 3);
    auto x = num::add(embed_(tokens), pos_);
    for (const auto& blk : blocks_) x = blk(x);
    x = norm_(x);
    auto unpatchify = [&](const Tensor<T>& y) {
      auto t = num::reshape(y, {n, g, g, token_, token_});
      return num::reshape(num::permute(t, {0, 1, 3, 2, 4}), {n, 1, g * token_, g * token_});
    };
    return {unpatchify(out1_(x)), unpatchify(out2_(x))};
  }

  std::vector<model::Parameter<T>>& params() { return store_->params(); }

 private:
  std::unique_ptr<model::ParamStore<T>> store_;
  std::int64_t token_, grid_, cells_;
  model::Linear<T> embed_, out1_, out2_;
  Tensor<T> pos_;
  std::vector<model::SwinBlock<T>> blocks_;
  model::LayerNorm<T> norm_;
};

// Owns the encoder being pretrained (inside a segmenter shell so the saved
// weights line up with the finetuning model), the reconstruction head and
// the optimizer state.
template <class T>
class Pretrainer {
 public:
  Pretrainer(const model::EncoderConfig& enc, PretrainConfig cfg, data::NormStats norm, std::uint64_t seed)
      : cfg_((cfg.validate(), std::move(cfg))),
        norm_(norm),
        seed_(seed),
        model_(shell_config(enc), seed),
        head_(enc, cfg_, seed ^ 0x9e3779b97f4a7c15ull),
        opt_(cfg_.optim) {
    if (!(norm_.std > 0)) throw ArgumentError("pretrain: norm std must be > 0");
  }

  // One update on a batch of consecutive pairs; returns the loss before the update.
  double step(const UnlabeledBatch& batch) {
    if (batch.size < 2 || batch.size % 2)
      throw ArgumentError("pretrain step: batch size must be even, got " + std::to_string(batch.size));
    const std::int64_t half = batch.size / 2, hw = batch.height * batch.width;
    std::vector<T> a, b;
    std::vector<double> w1, w2;
    for (std::int64_t i = 0; i < batch.size; ++i) {
      const auto first = batch.pixels.begin() + i * hw;
      std::vector<double> amp;
      amp.reserve(static_cast<std::size_t>(hw));
      for (auto it = first; it != first + hw; ++it) amp.push_back(*it * norm_.std + norm_.mean);
      auto w = power_weights(amp, cfg_.bounds);
      auto& img = i % 2 ? b : a;
      auto& wt = i % 2 ? w2 : w1;
      img.insert(img.end(), first, first + hw);
      wt.insert(wt.end(), w.begin(), w.end());
    }
    const Shape shape{half, 1, batch.height, batch.width};
    auto x1 = Tensor<T>::from(shape, std::move(a)), x2 = Tensor<T>::from(shape, std::move(b));
    const std::uint64_t mix_seed = seed_ * 0x100000001b3ull + static_cast<std::uint64_t>(step_);
    auto mixed = make_mix(x1, x2, cfg_.mask_ratio, mix_seed, cfg_.granularity);

    zero_grad();
    auto pyr = model_.encode(mixed.image);
    auto [r1, r2] = head_(pyr.stages[3], mixed.mask);
    auto loss = reconstruction_loss(r1, r2, x1, x2, mixed.mask, w1, w2);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("pretrain: non-finite reconstruction loss");
    loss.backward();

    last_lr_ = lr_now();
    auto fixed = [lr = last_lr_](const model::Parameter<T>&) { return lr; };
    opt_.step(model_.params(), fixed);
    head_opt_.step(head_.params(), fixed);
    ++step_;
    return value;
  }

  double lr_now() const {
    engine::Schedule s{cfg_.warmup_steps, cfg_.steps};
    return engine::lr_at(step_, 0, 0, cfg_.optim, s);
  }
  double last_lr() const { return last_lr_; }
  std::int64_t steps_done() const { return step_; }
  model::Segmenter<T>& model() { return model_; }

  void save(const io::fs::path& dir) const {
    model::CheckpointMeta meta;
    meta.task = "pretrain";
    meta.pretrained = true;
    meta.step = step_;
    meta.norm = norm_;
    meta.extra = {{"pretrain", cfg_}, {"seed", seed_}};
    model::save_encoder(dir, model_, meta);
  }

 private:
  static model::ModelConfig shell_config(const model::EncoderConfig& enc) {
    auto c = model::ModelConfig::desk();
    c.encoder = enc;
    return c;
  }
  void zero_grad() {
    model_.zero_grad();
    for (auto& p : head_.params()) p.value.zero_grad();
  }

  PretrainConfig cfg_;
  data::NormStats norm_;
  std::uint64_t seed_;
  model::Segmenter<T> model_;
  ReconstructionHead<T> head_;
  engine::AdamW<T> opt_, head_opt_{cfg_.optim};
  std::int64_t step_ = 0;
  double last_lr_ = 0;
};

// Cycles through shuffled patches in batches of cfg.batch for cfg.steps
// updates. Each step appends {step, loss, lr} as a JSON line to history.
template <class T, class Patches>
std::vector<double> run_pretraining(Pretrainer<T>& trainer, const Patches& patches, const PretrainConfig& cfg,
                                    std::uint64_t seed, std::ostream* history = nullptr) {
  const std::size_t n = std::size(patches);
  if (n < static_cast<std::size_t>(cfg.batch))
    throw EmptyInputError("pretrain: " + std::to_string(n) + " patches cannot fill a batch of " +
                          std::to_string(cfg.batch));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::size_t cursor = n;
  std::vector<double> losses;
  for (int s = 0; s < cfg.steps; ++s) {
    if (cursor + static_cast<std::size_t>(cfg.batch) > n) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const auto batch = UnlabeledBatch::gather(patches, std::span(order).subspan(cursor, cfg.batch));
    cursor += static_cast<std::size_t>(cfg.batch);
    losses.push_back(trainer.step(batch));
    if (history)
      *history << nlohmann::json{{"step", s + 1}, {"loss", losses.back()}, {"lr", trainer.last_lr()}}.dump() << '\n';
  }
  return losses;
}

}  // namespace sarseg::pretrain
