#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <map>
#include <vector>

#include <nlohmann/json.hpp>

#include "sarseg/error.hpp"
#include "sarseg/model/checkpoint.hpp"

namespace sarseg::engine {

using model::Parameter;

struct OptimConfig {
  double base_lr = 6e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double layer_decay = 0.7;
  double min_lr = 1e-6;
  int warmup_epochs = 2;
  int total_epochs = 40;
  bool global_batch_scaling = false;
  int global_batch = 8;

  void validate() const {
    if (!(base_lr >= 0)) throw ConfigError("optim: base_lr must be >= 0");
    if (!(layer_decay > 0 && layer_decay <= 1)) throw ConfigError("optim: layer_decay must lie in (0, 1]");
    if (!(min_lr >= 0 && min_lr <= base_lr)) throw ConfigError("optim: min_lr must lie in [0, base_lr]");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("optim: betas must lie in [0, 1)");
    if (!(eps > 0) || weight_decay < 0) throw ConfigError("optim: eps must be > 0 and weight_decay >= 0");
    if (warmup_epochs < 0 || total_epochs < 1 || warmup_epochs > total_epochs)
      throw ConfigError("optim: need 0 <= warmup_epochs <= total_epochs, total_epochs >= 1");
    if (global_batch < 1) throw ConfigError("optim: global_batch must be >= 1");
  }

  double peak_lr() const { return global_batch_scaling ? base_lr * global_batch / 256.0 : base_lr; }

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

inline void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = {{"base_lr", c.base_lr},         {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},             {"beta2", c.beta2},
       {"eps", c.eps},                 {"layer_decay", c.layer_decay},
       {"min_lr", c.min_lr},           {"warmup_epochs", c.warmup_epochs},
       {"total_epochs", c.total_epochs}, {"global_batch_scaling", c.global_batch_scaling},
       {"global_batch", c.global_batch}};
}

// Missing keys keep the values already in c.
inline void from_json(const nlohmann::json& j, OptimConfig& c) {
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.layer_decay = j.value("layer_decay", c.layer_decay);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.total_epochs = j.value("total_epochs", c.total_epochs);
  c.global_batch_scaling = j.value("global_batch_scaling", c.global_batch_scaling);
  c.global_batch = j.value("global_batch", c.global_batch);
}

// Step counts for a schedule measured in optimizer steps.
struct Schedule {
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;

  static Schedule from_epochs(const OptimConfig& c, std::int64_t steps_per_epoch) {
    return {c.warmup_epochs * steps_per_epoch, std::max<std::int64_t>(1, c.total_epochs * steps_per_epoch)};
  }
};

// Linear warmup from 0, then half a cosine down to min_lr, scaled by
// layer_decay^(max_depth - depth). Steps past the end stay at min_lr.
inline double lr_at(std::int64_t step, int depth, int max_depth, const OptimConfig& c, const Schedule& s) {
  const double peak = c.peak_lr();
  const double floor = std::min(c.min_lr, peak);
  double lr;
  if (step < s.warmup_steps) {
    lr = peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  } else {
    const auto span = std::max<std::int64_t>(1, s.total_steps - s.warmup_steps);
    const double t = std::min(1.0, static_cast<double>(step - s.warmup_steps) / static_cast<double>(span));
    lr = floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  return lr * std::pow(c.layer_decay, max_depth - depth);
}

// Decoupled weight decay Adam. Moments live in the parameter precision so a
// saved state resumes exactly.
template <class T>
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg = {}) : cfg_(std::move(cfg)) {}

  const OptimConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

  // lr_of(param) gives the learning rate for that parameter this step.
  // Parameters without a gradient are left alone.
  template <class LrFn>
  void step(std::vector<Parameter<T>>& params, LrFn&& lr_of) {
    for (const auto& p : params) {
      if (!p.value.has_grad()) continue;
      for (T g : p.value.grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericError("non-finite gradient in " + p.name + "; step aborted");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : params) {
      if (!p.value.has_grad()) continue;
      auto& st = state_[p.name];
      const auto n = static_cast<std::size_t>(p.value.numel());
      if (st.m.empty()) st.m.assign(n, T(0)), st.v.assign(n, T(0));
      const double lr = lr_of(p);
      const double wd = p.decay ? cfg_.weight_decay : 0.0;
      auto w = p.value.mutable_data();
      auto g = p.value.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g[i];
        st.m[i] = static_cast<T>(cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi);
        st.v[i] = static_cast<T>(cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi);
        const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
        double x = w[i];
        x *= 1.0 - lr * wd;
        x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        w[i] = static_cast<T>(x);
      }
    }
  }

  void save(const io::fs::path& path) const {
    std::vector<model::Blob> blobs;
    blobs.push_back({"step", {1}, {static_cast<float>(t_)}});
    for (const auto& [name, st] : state_) {
      const Shape shape{static_cast<std::int64_t>(st.m.size())};
      blobs.push_back({"m." + name, shape, std::vector<float>(st.m.begin(), st.m.end())});
      blobs.push_back({"v." + name, shape, std::vector<float>(st.v.begin(), st.v.end())});
    }
    model::write_blobs(path, blobs);
  }

  void load(const io::fs::path& path) {
    state_.clear();
    t_ = 0;
    for (const auto& b : model::read_blobs(path)) {
      if (b.name == "step") {
        if (b.data.size() != 1) throw FormatError("optimizer state: malformed step record");
        t_ = static_cast<std::int64_t>(b.data[0]);
      } else if (b.name.rfind("m.", 0) == 0) {
        state_[b.name.substr(2)].m.assign(b.data.begin(), b.data.end());
      } else if (b.name.rfind("v.", 0) == 0) {
        state_[b.name.substr(2)].v.assign(b.data.begin(), b.data.end());
      } else {
        throw FormatError("optimizer state: unexpected record " + b.name);
      }
    }
    for (const auto& [name, st] : state_)
      if (st.m.size() != st.v.size()) throw IntegrityError("optimizer state: moment sizes differ for " + name);
  }

 private:
  using Shape = num::Shape;
  struct Moments {
    std::vector<T> m, v;
  };
  OptimConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace sarseg::engine
