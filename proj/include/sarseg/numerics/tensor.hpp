#pragma once

// Minimal reverse-mode differentiable N-D array.
//
// A Tensor is a cheap handle onto a shared Node holding row-major values,
// an optional gradient buffer and, for results of differentiable ops, the
// closure that pushes the node's gradient onto its parents. Graphs are
// built eagerly while grad mode is on and released by backward().

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sarseg/error.hpp"

namespace sarseg::num {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

// ---------------------------------------------------------------------------
// Grad mode

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Op trace: a thread-local record of the ops executed inside named scopes,
// used to assert structural properties of a forward pass.

struct TraceEvent {
  std::string scope;
  std::string op;
  std::string detail;
};

namespace detail {
inline std::vector<TraceEvent>*& trace_sink() {
  thread_local std::vector<TraceEvent>* sink = nullptr;
  return sink;
}
inline std::vector<std::string>& trace_scopes() {
  thread_local std::vector<std::string> scopes;
  return scopes;
}
}  // namespace detail

inline void trace(std::string_view op, std::string detail = {}) {
  auto* sink = detail::trace_sink();
  if (!sink) return;
  std::string scope;
  for (const auto& s : detail::trace_scopes()) {
    if (!scope.empty()) scope += '.';
    scope += s;
  }
  sink->push_back({std::move(scope), std::string(op), std::move(detail)});
}

class TraceRecorder {
 public:
  TraceRecorder() : prev_(detail::trace_sink()) { detail::trace_sink() = &events_; }
  ~TraceRecorder() { detail::trace_sink() = prev_; }
  TraceRecorder(const TraceRecorder&) = delete;
  TraceRecorder& operator=(const TraceRecorder&) = delete;
  const std::vector<TraceEvent>& events() const { return events_; }

 private:
  std::vector<TraceEvent> events_;
  std::vector<TraceEvent>* prev_;
};

class TraceScope {
 public:
  explicit TraceScope(std::string name) { detail::trace_scopes().push_back(std::move(name)); }
  ~TraceScope() { detail::trace_scopes().pop_back(); }
  TraceScope(const TraceScope&) = delete;
  TraceScope& operator=(const TraceScope&) = delete;
};

// ---------------------------------------------------------------------------

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T{});
    return grad.data();
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (num::numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    const auto count = static_cast<std::size_t>(num::numel(shape));
    return from(std::move(shape), std::vector<T>(count, v), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{0}, requires_grad);
  }
  static Tensor scalar(T v) { return from({}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::int64_t dim(int i) const {
    const int n = static_cast<int>(ndim());
    return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + n : i));
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  std::string_view op() const { return node_->op; }

  T item() const {
    if (node_->value.size() != 1)
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  Tensor detach() const { return from(shape(), node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  // Reverse pass from a scalar output.
  void backward() const {
    if (node_->value.size() != 1)
      throw ShapeError("backward() without seed requires a scalar, got " + shape_str(shape()));
    const T one{1};
    backward(std::span<const T>(&one, 1));
  }

  // Reverse pass seeded with d(objective)/d(this). The graph is released
  // afterwards; leaf gradients accumulate across calls until zero_grad().
  void backward(std::span<const T> seed) const {
    if (seed.size() != node_->value.size())
      throw ShapeError("backward seed size mismatch");
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    {
      std::unordered_set<Node<T>*> seen;
      std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
      seen.insert(node_.get());
      while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
          Node<T>* p = n->parents[next++].get();
          if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
          order.push_back(n);
          stack.pop_back();
        }
      }
    }
    T* g = node_->grad_data();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    for (Node<T>* n : order) {
      if (!n->backward) continue;
      n->backward = nullptr;
      n->parents.clear();
      if (n != node_.get()) std::vector<T>().swap(n->grad);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds the output node of a differentiable op. The backward closure
// receives the output node; parents are reachable via node.parents in the
// order given here.
template <class T, class Backward>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T>&& value,
                      std::initializer_list<Tensor<T>> inputs, Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      n->requires_grad = true;
      for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
      n->backward = std::forward<Backward>(backward);
    }
  }
  return Tensor<T>(std::move(n));
}

template <class T, class Backward>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T>&& value,
                      const std::vector<Tensor<T>>& inputs, Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
      n->backward = std::forward<Backward>(backward);
    }
  }
  return Tensor<T>(std::move(n));
}

// Parent gradient buffer, or nullptr if the parent does not need one.
template <class T>
T* parent_grad(Node<T>& self, std::size_t i) {
  if (i >= self.parents.size()) return nullptr;
  Node<T>* p = self.parents[i].get();
  if (!p || !p->requires_grad) return nullptr;
  return p->grad_data();
}

template <class T>
const std::vector<T>& parent_value(Node<T>& self, std::size_t i) {
  return self.parents[i]->value;
}

}  // namespace sarseg::num
