#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sarseg/numerics/ops.hpp"

namespace sarseg::num {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0;
  double step = 0;
  double tolerance = 0;
  bool passed = false;
};

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Compares the reverse-mode gradient of sum(r * f(inputs)), r a fixed random
// projection, against central differences on every input element.
// Error metric: |g_ad - g_fd| / max(1, |g_fd|).
inline GradCheckReport check_gradient(const std::string& name, const GradFn& fn,
                                      std::vector<std::vector<double>> values,
                                      const std::vector<Shape>& shapes, std::uint64_t seed,
                                      double tolerance, double step = 1e-4) {
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < values.size(); ++i)
    inputs.push_back(Tensor<double>::from(shapes[i], values[i], true));
  Tensor<double> out = fn(inputs);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal;
  std::vector<double> proj(out.values().size());
  for (auto& r : proj) r = normal(rng);
  out.backward(proj);

  auto objective = [&](const std::vector<std::vector<double>>& vals) {
    NoGradGuard guard;
    std::vector<Tensor<double>> ins;
    for (std::size_t i = 0; i < vals.size(); ++i)
      ins.push_back(Tensor<double>::from(shapes[i], vals[i]));
    const auto y = fn(ins);
    double acc = 0;
    for (std::size_t i = 0; i < proj.size(); ++i) acc += proj[i] * y.values()[i];
    return acc;
  };

  GradCheckReport report{name, 0.0, step, tolerance, false};
  for (std::size_t t = 0; t < values.size(); ++t) {
    const auto g_ad = inputs[t].grad();
    for (std::size_t i = 0; i < values[t].size(); ++i) {
      const double orig = values[t][i];
      values[t][i] = orig + step;
      const double up = objective(values);
      values[t][i] = orig - step;
      const double down = objective(values);
      values[t][i] = orig;
      const double fd = (up - down) / (2 * step);
      const double ad = g_ad.empty() ? 0.0 : g_ad[i];
      report.max_rel_error =
          std::max(report.max_rel_error, std::abs(ad - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

// Describes one differentiable op for the gradient-check suite. `apply`
// builds the op from float64 inputs; `aux_seed` fixes any non-differentiable
// side input (e.g. a boolean mask).
struct OpDescriptor {
  std::string name;
  std::string gradient_rule;
  bool linear = false;
  bool positive_inputs = false;
  std::vector<Shape> default_shapes;
  std::function<Tensor<double>(const std::vector<Tensor<double>>&, std::uint64_t aux_seed)> apply;

  double tolerance() const { return linear ? 1e-6 : 1e-4; }
};

namespace detail {

inline std::vector<std::uint8_t> random_mask(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 7919 + 17);
  std::vector<std::uint8_t> mask(n);
  for (auto& m : mask) m = static_cast<std::uint8_t>(rng() & 1u);
  mask[0] = 1;
  return mask;
}

inline void need(const std::vector<Tensor<double>>& in, std::size_t n, const char* op) {
  if (in.size() < n) throw ContractError(std::string(op) + ": expected " + std::to_string(n) + " inputs");
}

}  // namespace detail

inline std::vector<OpDescriptor> required_op_set() {
  using TD = Tensor<double>;
  using In = std::vector<TD>;
  std::vector<OpDescriptor> ops;
  ops.push_back({"matmul", "dA = dC B^T, dB = A^T dC (per batch)", true, false,
                 {{2, 3, 4}, {2, 4, 5}},
                 [](const In& in, std::uint64_t) { detail::need(in, 2, "matmul"); return matmul(in[0], in[1]); }});
  ops.push_back({"conv2d", "dW = dY col(X)^T, dX = col2im(W^T dY), db = sum dY (stride 1, padding 1)", true, false,
                 {{1, 2, 8, 8}, {4, 2, 3, 3}},
                 [](const In& in, std::uint64_t) {
                   detail::need(in, 2, "conv2d");
                   return conv2d(in[0], in[1], in.size() > 2 ? in[2] : TD{}, {1, 1});
                 }});
  ops.push_back({"transposed upsample 2x", "adjoint of the stride-2 kernel-2 scatter", true, false,
                 {{1, 3, 3, 3}, {3, 2, 2, 2}, {2}},
                 [](const In& in, std::uint64_t) {
                   detail::need(in, 2, "transposed upsample 2x");
                   return transposed_upsample2x(in[0], in[1], in.size() > 2 ? in[2] : TD{});
                 }});
  ops.push_back({"bilinear upsample", "scatter dY with the bilinear tap weights (scale 2)", true, false,
                 {{1, 2, 3, 4}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "bilinear upsample"); return bilinear_upsample(in[0], 2); }});
  ops.push_back({"nearest upsample", "sum dY over each replicated block (scale 2)", true, false,
                 {{1, 2, 3, 3}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "nearest upsample"); return nearest_upsample(in[0], 2); }});
  ops.push_back({"adaptive average pool", "spread dY / bin area over each bin (3x3 grid)", true, false,
                 {{1, 2, 7, 5}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "adaptive average pool"); return adaptive_avg_pool2d(in[0], 3, 3); }});
  ops.push_back({"layer normalization", "rstd (g - mean g - xhat mean(g xhat)), g = dY gamma", false, false,
                 {{3, 6}, {6}, {6}},
                 [](const In& in, std::uint64_t) { detail::need(in, 3, "layer normalization"); return layer_norm(in[0], in[1], in[2]); }});
  ops.push_back({"group normalization", "layer-norm rule per (sample, group) block (2 groups)", false, false,
                 {{2, 4, 3, 3}, {4}, {4}},
                 [](const In& in, std::uint64_t) { detail::need(in, 3, "group normalization"); return group_norm(in[0], 2, in[1], in[2]); }});
  ops.push_back({"gelu", "dY (Phi(x) + x phi(x))", false, false, {{4, 5}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "gelu"); return gelu(in[0]); }});
  ops.push_back({"softmax", "y (dY - <dY, y>) along the last axis", false, false, {{4, 5}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "softmax"); return softmax(in[0]); }});
  ops.push_back({"sigmoid", "dY y (1 - y)", false, false, {{4, 5}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "sigmoid"); return sigmoid(in[0]); }});
  ops.push_back({"log", "dY / x", false, true, {{4, 5}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "log"); return log(in[0]); }});
  ops.push_back({"add", "dA = dC, dB = dC reduced over broadcast axes", true, false, {{2, 3}, {2, 3}},
                 [](const In& in, std::uint64_t) { detail::need(in, 2, "add"); return add(in[0], in[1]); }});
  ops.push_back({"mul", "dA = dC B, dB = dC A reduced over broadcast axes", false, false, {{2, 3}, {3}},
                 [](const In& in, std::uint64_t) { detail::need(in, 2, "mul"); return mul(in[0], in[1]); }});
  ops.push_back({"sub", "dA = dC, dB = -dC reduced over broadcast axes", true, false, {{2, 3}, {2, 1}},
                 [](const In& in, std::uint64_t) { detail::need(in, 2, "sub"); return sub(in[0], in[1]); }});
  ops.push_back({"window partition", "inverse gather (window 2, shift 1)", true, false, {{1, 4, 4, 3}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "window partition"); return window_partition(in[0], 2, 1); }});
  ops.push_back({"window reverse", "inverse gather onto a square map (window 2, shift 1)", true, false, {{4, 4, 3}},
                 [](const In& in, std::uint64_t) {
                   detail::need(in, 1, "window reverse");
                   const auto side = static_cast<std::int64_t>(std::lround(std::sqrt(in[0].dim(0)))) * 2;
                   return window_reverse(in[0], 2, 1, side, side);
                 }});
  ops.push_back({"reshape", "reshape dY back", true, false, {{2, 3, 4}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "reshape"); return reshape(in[0], {4, -1}); }});
  ops.push_back({"permute", "inverse permutation of dY", true, false, {{2, 3, 4}},
                 [](const In& in, std::uint64_t) { detail::need(in, 1, "permute"); return permute(in[0], {2, 0, 1}); }});
  ops.push_back({"concat", "split dY along the concat axis", true, false, {{2, 3}, {2, 2}},
                 [](const In& in, std::uint64_t) { detail::need(in, 2, "concat"); return concat(In{in[0], in[1]}, 1); }});
  ops.push_back({"masked sum", "dY on selected elements, 0 elsewhere", true, false, {{3, 5}},
                 [](const In& in, std::uint64_t seed) {
                   detail::need(in, 1, "masked sum");
                   auto m = detail::random_mask(static_cast<std::size_t>(in[0].numel()), seed);
                   return masked_sum(in[0], m);
                 }});
  ops.push_back({"masked mean", "dY / |mask| on selected elements, 0 elsewhere", true, false, {{3, 5}},
                 [](const In& in, std::uint64_t seed) {
                   detail::need(in, 1, "masked mean");
                   auto m = detail::random_mask(static_cast<std::size_t>(in[0].numel()), seed);
                   return masked_mean(in[0], m);
                 }});
  return ops;
}

inline const OpDescriptor& find_op(const std::string& name) {
  static const auto ops = required_op_set();
  for (const auto& op : ops)
    if (op.name == name) return op;
  throw ContractError("unsupported op descriptor '" + name + "'");
}

// Random inputs in [-1, 1] ([0.5, 2] for ops with positive domain).
inline GradCheckReport grad_check(const OpDescriptor& op, std::vector<Shape> input_shapes,
                                  std::uint64_t seed) {
  if (input_shapes.empty()) input_shapes = op.default_shapes;
  for (const auto& s : input_shapes)
    for (auto d : s)
      if (d < 1 || d > 8) throw ContractError("grad_check: extents must lie in [1, 8]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(op.positive_inputs ? 0.5 : -1.0,
                                              op.positive_inputs ? 2.0 : 1.0);
  std::vector<std::vector<double>> values;
  for (const auto& s : input_shapes) {
    std::vector<double> v(static_cast<std::size_t>(numel(s)));
    for (auto& x : v) x = dist(rng);
    values.push_back(std::move(v));
  }
  GradFn fn = [&](const std::vector<Tensor<double>>& in) { return op.apply(in, seed); };
  return check_gradient(op.name, fn, std::move(values), input_shapes, seed, op.tolerance());
}

inline GradCheckReport grad_check(const std::string& op_name, std::vector<Shape> input_shapes,
                                  std::uint64_t seed) {
  return grad_check(find_op(op_name), std::move(input_shapes), seed);
}

}  // namespace sarseg::num
