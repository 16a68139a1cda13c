#pragma once

// Class-balanced segmentation objective (alpha-scaled focal + multi-class
// dice) and the binary water objective (BCE + soft dice). Each loss is a
// single fused autograd node with an analytic gradient w.r.t. the logits.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sarseg/numerics/ops.hpp"
#include "sarseg/sampling.hpp"

namespace sarseg::loss {

using num::Tensor;

struct ClassWeights {
  std::vector<double> raw;    // 1 - f_k
  std::vector<double> alpha;  // raw / sum(raw)
};

inline ClassWeights class_weights(const data::ClassStats& stats) {
  if (stats.total() == 0) throw EmptyInputError("class_weights: no counted pixels");
  ClassWeights w;
  double sum = 0;
  for (double f : stats.freq) {
    w.raw.push_back(1.0 - f);
    sum += 1.0 - f;
  }
  if (!(sum > 0)) throw DegenerateInputError("class_weights: weights sum to zero (single class)");
  for (double r : w.raw) w.alpha.push_back(r / sum);
  return w;
}

inline ClassWeights uniform_weights(int k) {
  return {std::vector<double>(static_cast<std::size_t>(k), 1.0), std::vector<double>(static_cast<std::size_t>(k), 1.0 / k)};
}

struct LossParams {
  double alpha_scale = 2.25;
  double gamma = 1.1;
  double lambda_focal = 0.57;
  double lambda_dice = 0.32;
  double eps_focal = 1e-8;
  double eps_dice = 1e-6;
  std::uint8_t ignore_label = data::kIgnoreLabel;
  // Off: alpha_scale 1 and uniform alpha, so only the reweighting differs.
  bool alpha_scale_enabled = true;

  void validate() const {
    if (!(gamma >= 0)) throw ConfigError("loss: gamma must be >= 0");
    if (!(lambda_focal >= 0) || !(lambda_dice >= 0)) throw ConfigError("loss: lambdas must be >= 0");
    if (!(eps_focal > 0) || !(eps_dice > 0)) throw ConfigError("loss: epsilons must be > 0");
    if (!(alpha_scale > 0)) throw ConfigError("loss: alpha_scale must be > 0");
  }
};

struct ValidMask {
  std::vector<std::uint8_t> mask;
  std::size_t count = 0;

  static ValidMask from_labels(std::span<const std::uint8_t> labels, std::uint8_t ignore = data::kIgnoreLabel) {
    ValidMask m;
    m.mask.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      m.mask[i] = labels[i] != ignore;
      m.count += m.mask[i];
    }
    return m;
  }
};

namespace detail {

struct Layout {
  std::int64_t n, k, hw;
};

template <class T>
Layout check_inputs(const Tensor<T>& logits, std::span<const std::uint8_t> labels, const ValidMask& mask,
                    const char* what) {
  if (logits.ndim() != 4) throw ShapeError(std::string(what) + ": logits must be N x K x H x W");
  const Layout l{logits.dim(0), logits.dim(1), logits.dim(2) * logits.dim(3)};
  if (static_cast<std::int64_t>(labels.size()) != l.n * l.hw || mask.mask.size() != labels.size())
    throw ShapeError(std::string(what) + ": labels/mask do not match logits " + num::shape_str(logits.shape()));
  if (mask.count == 0) throw EmptyInputError(std::string(what) + ": no valid pixels");
  for (T v : logits.values())
    if (!std::isfinite(static_cast<double>(v))) throw NumericError(std::string(what) + ": non-finite logits");
  return l;
}

// Softmax probabilities over K at valid pixels, layout [pixel][k] for the
// flattened (n, hw) pixel index.
template <class T>
std::vector<double> softmax_valid(const std::vector<T>& z, const Layout& l, const ValidMask& mask) {
  std::vector<double> p(static_cast<std::size_t>(l.n * l.hw * l.k), 0.0);
  for (std::int64_t n = 0; n < l.n; ++n)
    for (std::int64_t i = 0; i < l.hw; ++i) {
      const std::int64_t px = n * l.hw + i;
      if (!mask.mask[px]) continue;
      double mx = -INFINITY;
      for (std::int64_t k = 0; k < l.k; ++k) mx = std::max(mx, static_cast<double>(z[(n * l.k + k) * l.hw + i]));
      double s = 0;
      for (std::int64_t k = 0; k < l.k; ++k) {
        const double e = std::exp(static_cast<double>(z[(n * l.k + k) * l.hw + i]) - mx);
        p[px * l.k + k] = e;
        s += e;
      }
      for (std::int64_t k = 0; k < l.k; ++k) p[px * l.k + k] /= s;
    }
  return p;
}

// Given dL/dp at valid pixels, accumulate dL/dz through the softmax.
template <class T>
void softmax_backward(T* gz, double upstream, const std::vector<double>& p, const std::vector<double>& dp,
                      const Layout& l, const ValidMask& mask) {
  for (std::int64_t n = 0; n < l.n; ++n)
    for (std::int64_t i = 0; i < l.hw; ++i) {
      const std::int64_t px = n * l.hw + i;
      if (!mask.mask[px]) continue;
      double dot = 0;
      for (std::int64_t k = 0; k < l.k; ++k) dot += p[px * l.k + k] * dp[px * l.k + k];
      for (std::int64_t k = 0; k < l.k; ++k)
        gz[(n * l.k + k) * l.hw + i] += static_cast<T>(upstream * p[px * l.k + k] * (dp[px * l.k + k] - dot));
    }
}

}  // namespace detail

// mean over valid pixels of -scale * alpha_y * (1 - p_t)^gamma * log(p_t + eps)
template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels, const ValidMask& mask,
                     const ClassWeights& weights, const LossParams& params) {
  params.validate();
  const auto l = detail::check_inputs(logits, labels, mask, "focal_loss");
  if (static_cast<std::int64_t>(weights.alpha.size()) != l.k)
    throw ShapeError("focal_loss: " + std::to_string(weights.alpha.size()) + " class weights for " +
                     std::to_string(l.k) + " classes");
  const double scale = params.alpha_scale_enabled ? params.alpha_scale : 1.0;
  std::vector<double> alpha =
      params.alpha_scale_enabled ? weights.alpha : std::vector<double>(static_cast<std::size_t>(l.k), 1.0 / l.k);
  auto p = detail::softmax_valid(logits.values(), l, mask);
  const double inv = 1.0 / static_cast<double>(mask.count);
  const double g = params.gamma, eps = params.eps_focal;
  double acc = 0;
  std::vector<double> dp(p.size(), 0.0);
  for (std::int64_t px = 0; px < l.n * l.hw; ++px) {
    if (!mask.mask[px]) continue;
    const int y = labels[px];
    if (y >= l.k) throw DataError("focal_loss: label " + std::to_string(y) + " outside [0, K)");
    const double pt = p[px * l.k + y], q = std::max(0.0, 1.0 - pt), lg = std::log(pt + eps);
    const double c = scale * alpha[y];
    acc += -c * std::pow(q, g) * lg;
    const double dq = (q > 0 && g > 0) ? g * std::pow(q, g - 1) * lg : 0.0;
    dp[px * l.k + y] = -c * (-dq + std::pow(q, g) / (pt + eps)) * inv;
  }
  return num::make_result<T>("focal_loss", {}, {static_cast<T>(acc * inv)}, {logits},
                             [p = std::move(p), dp = std::move(dp), l, mask](num::Node<T>& self) {
                               T* gz = num::parent_grad(self, 0);
                               if (gz) detail::softmax_backward(gz, static_cast<double>(self.grad[0]), p, dp, l, mask);
                             });
}

// 1 - (1/K) sum_k (2 sum p g + eps) / (sum p + sum g + eps), sums pooled over
// every valid pixel in the batch.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels, const ValidMask& mask,
                    const LossParams& params) {
  params.validate();
  const auto l = detail::check_inputs(logits, labels, mask, "dice_loss");
  auto p = detail::softmax_valid(logits.values(), l, mask);
  std::vector<double> inter(l.k, 0.0), psum(l.k, 0.0), gsum(l.k, 0.0);
  for (std::int64_t px = 0; px < l.n * l.hw; ++px) {
    if (!mask.mask[px]) continue;
    const int y = labels[px];
    if (y >= l.k) throw DataError("dice_loss: label " + std::to_string(y) + " outside [0, K)");
    for (std::int64_t k = 0; k < l.k; ++k) psum[k] += p[px * l.k + k];
    inter[y] += p[px * l.k + y];
    gsum[y] += 1;
  }
  const double eps = params.eps_dice;
  double ratio_sum = 0;
  std::vector<double> den(l.k), num_(l.k);
  for (std::int64_t k = 0; k < l.k; ++k) {
    num_[k] = 2 * inter[k] + eps;
    den[k] = psum[k] + gsum[k] + eps;
    ratio_sum += num_[k] / den[k];
  }
  const double loss = 1.0 - ratio_sum / static_cast<double>(l.k);
  std::vector<double> dp(p.size(), 0.0);
  for (std::int64_t px = 0; px < l.n * l.hw; ++px) {
    if (!mask.mask[px]) continue;
    for (std::int64_t k = 0; k < l.k; ++k) {
      const double gk = labels[px] == k ? 1.0 : 0.0;
      dp[px * l.k + k] = -(2 * gk / den[k] - num_[k] / (den[k] * den[k])) / static_cast<double>(l.k);
    }
  }
  return num::make_result<T>("dice_loss", {}, {static_cast<T>(loss)}, {logits},
                             [p = std::move(p), dp = std::move(dp), l, mask](num::Node<T>& self) {
                               T* gz = num::parent_grad(self, 0);
                               if (gz) detail::softmax_backward(gz, static_cast<double>(self.grad[0]), p, dp, l, mask);
                             });
}

template <class T>
struct TotalLoss {
  Tensor<T> total;
  double focal = 0;
  double dice = 0;
};

template <class T>
TotalLoss<T> total_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels, const ValidMask& mask,
                        const ClassWeights& weights, const LossParams& params) {
  auto f = focal_loss(logits, labels, mask, weights, params);
  auto d = dice_loss(logits, labels, mask, params);
  const double fv = static_cast<double>(f.item()), dv = static_cast<double>(d.item());
  return {num::add(num::scale(f, static_cast<T>(params.lambda_focal)), num::scale(d, static_cast<T>(params.lambda_dice))),
          fv, dv};
}

struct WaterLossParams {
  double lambda_dice = 1.0;
  double eps_log = 1e-7;
  double eps_dice = 1e-6;
};

// BCE on sigmoid probabilities (logs clamped at eps) plus a soft dice
// averaged over the water and background channels {p, 1 - p}. The two-channel
// form keeps the objective symmetric under swapping labels and negating logits.
template <class T>
Tensor<T> water_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels, const ValidMask& mask,
                     const WaterLossParams& params = {}) {
  const auto l = detail::check_inputs(logits, labels, mask, "water_loss");
  if (l.k != 1) throw ShapeError("water_loss: logits must have one channel");
  const auto& z = logits.values();
  const std::size_t npx = labels.size();
  std::vector<double> p(npx, 0.0), q(npx, 0.0);  // sigmoid(z), sigmoid(-z)
  double bce = 0, inter1 = 0, inter0 = 0, ps = 0, gs = 0;
  const double eps = params.eps_log;
  for (std::size_t i = 0; i < npx; ++i) {
    if (!mask.mask[i]) continue;
    const double y = labels[i];
    if (labels[i] > 1) throw DataError("water_loss: label " + std::to_string(labels[i]) + " is not binary");
    const double zi = static_cast<double>(z[i]);
    p[i] = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
    q[i] = zi >= 0 ? std::exp(-zi) / (1.0 + std::exp(-zi)) : 1.0 / (1.0 + std::exp(zi));
    bce -= y * std::log(std::max(p[i], eps)) + (1 - y) * std::log(std::max(q[i], eps));
    inter1 += p[i] * y;
    inter0 += q[i] * (1 - y);
    ps += p[i];
    gs += y;
  }
  const double n = static_cast<double>(mask.count), de = params.eps_dice;
  const double num1 = 2 * inter1 + de, den1 = ps + gs + de;
  const double num0 = 2 * inter0 + de, den0 = (n - ps) + (n - gs) + de;
  const double dice = 1.0 - 0.5 * (num1 / den1 + num0 / den0);
  const double loss = bce / n + params.lambda_dice * dice;

  std::vector<double> dz(npx, 0.0);
  for (std::size_t i = 0; i < npx; ++i) {
    if (!mask.mask[i]) continue;
    const double y = labels[i];
    double dbce = 0;
    if (p[i] >= eps) dbce -= y * q[i];
    if (q[i] >= eps) dbce += (1 - y) * p[i];
    const double dd1 = -0.5 * (2 * y / den1 - num1 / (den1 * den1));
    const double dd0 = -0.5 * (2 * (1 - y) / den0 - num0 / (den0 * den0));
    dz[i] = dbce / n + params.lambda_dice * (dd1 - dd0) * p[i] * q[i];
  }
  return num::make_result<T>("water_loss", {}, {static_cast<T>(loss)}, {logits},
                             [dz = std::move(dz)](num::Node<T>& self) {
                               T* gz = num::parent_grad(self, 0);
                               if (!gz) return;
                               const double up = static_cast<double>(self.grad[0]);
                               for (std::size_t i = 0; i < dz.size(); ++i) gz[i] += static_cast<T>(up * dz[i]);
                             });
}

}  // namespace sarseg::loss
