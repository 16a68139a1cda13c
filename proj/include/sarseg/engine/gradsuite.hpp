#pragma once

// Finite-difference sweep over every differentiable op and every training
// loss, several seeds each. Backs `sarseg gradcheck` and the acceptance run.

#include <random>
#include <string>
#include <vector>

#include "sarseg/losses.hpp"
#include "sarseg/numerics/gradcheck.hpp"
#include "sarseg/pretrain.hpp"

namespace sarseg::engine {

struct SuiteEntry {
  std::string name;
  double tolerance = 0;
  double worst_error = 0;  // max relative error over seeds
  int seeds = 0;
  bool passed = true;
};

namespace detail {

struct LossCase {
  std::vector<double> logits;
  std::vector<std::uint8_t> labels;
};

// Random logits for 2 images of 4x4 pixels; about one label in seven ignored.
inline LossCase loss_case(int channels, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1.5);
  LossCase c;
  for (int i = 0; i < 32 * channels; ++i) c.logits.push_back(n(rng));
  for (int i = 0; i < 32; ++i)
    c.labels.push_back(rng() % 7 == 0 ? data::kIgnoreLabel : static_cast<std::uint8_t>(rng() % classes));
  c.labels[0] = 0;
  return c;
}

inline void record(SuiteEntry& e, const num::GradCheckReport& r) {
  e.tolerance = r.tolerance;
  e.worst_error = std::max(e.worst_error, r.max_rel_error);
  e.passed = e.passed && r.passed;
  ++e.seeds;
}

}  // namespace detail

inline std::vector<SuiteEntry> gradient_suite(int seeds = 5) {
  using TD = num::Tensor<double>;
  std::vector<SuiteEntry> out;
  for (const auto& op : num::required_op_set()) {
    SuiteEntry e{op.name};
    for (int s = 0; s < seeds; ++s) detail::record(e, num::grad_check(op, {}, static_cast<std::uint64_t>(s)));
    out.push_back(e);
  }

  SuiteEntry focal{"focal loss"}, dice{"dice loss"}, total{"focal + dice loss"}, water{"water loss"},
      recon{"reconstruction loss"};
  const auto weights = loss::class_weights(data::stats_from_counts({50, 30, 20}));
  for (int s = 0; s < seeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    const auto c = detail::loss_case(3, 3, seed);
    const auto mask = loss::ValidMask::from_labels(c.labels);
    loss::LossParams lp;
    lp.alpha_scale_enabled = true;
    num::GradFn f = [&](const std::vector<TD>& in) { return loss::focal_loss(in[0], c.labels, mask, weights, lp); };
    num::GradFn d = [&](const std::vector<TD>& in) { return loss::dice_loss(in[0], c.labels, mask, lp); };
    num::GradFn t = [&](const std::vector<TD>& in) { return loss::total_loss(in[0], c.labels, mask, weights, lp).total; };
    detail::record(focal, num::check_gradient("focal loss", f, {c.logits}, {{2, 3, 4, 4}}, seed, 1e-4));
    detail::record(dice, num::check_gradient("dice loss", d, {c.logits}, {{2, 3, 4, 4}}, seed, 1e-4));
    detail::record(total, num::check_gradient("focal + dice loss", t, {c.logits}, {{2, 3, 4, 4}}, seed, 1e-4));

    const auto b = detail::loss_case(1, 2, seed + 100);
    const auto bmask = loss::ValidMask::from_labels(b.labels);
    num::GradFn w = [&](const std::vector<TD>& in) { return loss::water_loss(in[0], b.labels, bmask); };
    detail::record(water, num::check_gradient("water loss", w, {b.logits}, {{2, 1, 4, 4}}, seed, 1e-4));

    std::mt19937_64 rng(seed + 200);
    std::uniform_real_distribution<double> u(-1, 1), pos(0.2, 3.0);
    std::vector<double> a(32), bb(32), w1(32), w2(32), r1(32), r2(32);
    for (auto* v : {&a, &bb, &r1, &r2})
      for (auto& x : *v) x = u(rng);
    for (auto* v : {&w1, &w2})
      for (auto& x : *v) x = pos(rng);
    const num::Shape shape{2, 1, 4, 4};
    const auto x1 = TD::from(shape, a), x2 = TD::from(shape, bb);
    const auto m = pretrain::make_mix(x1, x2, 0.5, seed, 2).mask;
    num::GradFn r = [&](const std::vector<TD>& in) {
      return pretrain::reconstruction_loss(in[0], in[1], x1, x2, m, w1, w2);
    };
    detail::record(recon, num::check_gradient("reconstruction loss", r, {r1, r2}, {shape, shape}, seed, 1e-4));
  }
  for (auto* e : {&focal, &dice, &total, &water, &recon}) out.push_back(*e);
  return out;
}

}  // namespace sarseg::engine
