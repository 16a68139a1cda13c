#pragma once

// Parameter registry and the small layers the encoder and decoder are built
// from. Every parameter is registered with a layer depth (for layer-wise lr
// decay) and a weight-decay eligibility flag.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sarseg/numerics/ops.hpp"

namespace sarseg::model {

using num::Shape;
using num::Tensor;

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  int depth = 0;
  bool decay = true;
};

template <class T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  // Depth assigned to parameters registered from now on.
  void set_depth(int d) { depth_ = d; }
  int depth() const { return depth_; }

  // Truncated normal (std 0.02, cut at two std), decay-eligible.
  Tensor<T> weight(const std::string& name, Shape shape) {
    std::normal_distribution<double> n(0.0, 0.02);
    std::vector<T> v(static_cast<std::size_t>(num::numel(shape)));
    for (auto& x : v) {
      double d;
      do d = n(rng_);
      while (std::abs(d) > 0.04);
      x = static_cast<T>(d);
    }
    return add(name, Tensor<T>::from(std::move(shape), std::move(v), true), true);
  }
  Tensor<T> bias(const std::string& name, std::int64_t n) {
    return add(name, Tensor<T>::zeros({n}, true), false);
  }
  Tensor<T> gain(const std::string& name, std::int64_t n) {
    return add(name, Tensor<T>::full({n}, T(1), true), false);
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }

 private:
  Tensor<T> add(const std::string& name, Tensor<T> t, bool decay) {
    params_.push_back({name, t, depth_, decay});
    return t;
  }

  std::mt19937_64 rng_;
  int depth_ = 0;
  std::vector<Parameter<T>> params_;
};

template <class T>
struct Linear {
  Tensor<T> w, b;  // w: [in, out]
  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::int64_t in, std::int64_t out, bool with_bias = true)
      : w(ps.weight(name + ".weight", {in, out})) {
    if (with_bias) b = ps.bias(name + ".bias", out);
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = num::matmul(x, w);
    return b.defined() ? num::add(y, b) : y;
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> g, b;
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::int64_t c)
      : g(ps.gain(name + ".weight", c)), b(ps.bias(name + ".bias", c)) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return num::layer_norm(x, g, b); }
};

template <class T>
struct Conv {
  Tensor<T> w, b;
  num::Conv2dOptions opt;
  Conv() = default;
  Conv(ParamStore<T>& ps, const std::string& name, std::int64_t in, std::int64_t out, int k, int stride = 1,
       int pad = 0, bool with_bias = true)
      : w(ps.weight(name + ".weight", {out, in, k, k})), opt{stride, pad} {
    if (with_bias) b = ps.bias(name + ".bias", out);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return num::conv2d(x, w, b, opt); }
};

// conv (no bias) -> group norm -> GELU
template <class T>
struct ConvNormAct {
  Conv<T> conv;
  Tensor<T> g, b;
  int groups = 8;
  ConvNormAct() = default;
  ConvNormAct(ParamStore<T>& ps, const std::string& name, std::int64_t in, std::int64_t out, int k, int groups_ = 8)
      : conv(ps, name + ".conv", in, out, k, 1, k / 2, false),
        g(ps.gain(name + ".norm.weight", out)),
        b(ps.bias(name + ".norm.bias", out)),
        groups(groups_) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return num::gelu(num::group_norm(conv(x), groups, g, b)); }
};

}  // namespace sarseg::model
