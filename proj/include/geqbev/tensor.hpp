#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "geqbev/errors.hpp"
#include "geqbev/random.hpp"

namespace geqbev {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

class Tensor;

namespace autograd {

/// One recorded operation. `backward` receives dL/d(output) and accumulates
/// into the gradients of `inputs`.
struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  std::function<void(std::span<const double>)> backward;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace autograd

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<autograd::Node> grad_fn;
};

/// Dense row-major float64 array. Copies share storage (handle semantics);
/// use clone() or detach() for an independent copy.
class Tensor {
 public:
  Tensor() : Tensor(Shape{1}, 0.0) {}

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeMismatch("tensor extents must be >= 1, got " + to_string(shape));
    }
    if (shape.empty()) shape = {1};
    if (numel_of(shape) != data.size()) {
      throw ShapeMismatch("shape " + to_string(shape) + " needs " +
                          std::to_string(numel_of(shape)) + " values, got " +
                          std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, double fill)
      : Tensor(shape, std::vector<double>(numel_of(shape), fill)) {}

  static Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0); }
  static Tensor ones(const Shape& shape) { return Tensor(shape, 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng) {
    std::vector<double> v(numel_of(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(shape, std::move(v));
  }

  static Tensor normal(const Shape& shape, double stddev, Rng& rng) {
    std::vector<double> v(numel_of(shape));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return Tensor(shape, std::move(v));
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// In-place access; reserved for parameter updates and initialization.
  std::span<double> mutable_data() { return impl_->data; }

  double item() const {
    if (numel() != 1) throw ShapeMismatch("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  double at(std::initializer_list<std::size_t> index) const {
    return impl_->data[offset(index)];
  }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeMismatch("index rank mismatch");
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= impl_->shape[axis]) throw ShapeMismatch("index out of range");
      off = off * impl_->shape[axis] + i;
      ++axis;
    }
    return off;
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  const std::shared_ptr<autograd::Node>& grad_fn() const { return impl_->grad_fn; }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  Tensor detach() const { return Tensor(shape(), impl_->data); }
  Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  TensorImpl& impl() const { return *impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace autograd {

inline void accumulate(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto& grad = t.impl().grad;
  if (grad.empty()) grad.assign(g.begin(), g.end());
  else
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

/// Same, but takes over the buffer when no gradient is stored yet.
inline void accumulate(const Tensor& t, std::vector<double>&& g) {
  if (!t.requires_grad()) return;
  auto& grad = t.impl().grad;
  if (grad.empty()) grad = std::move(g);
  else
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

/// Wraps freshly computed values as an op output and records the backward
/// closure when any input is tracked and grad mode is on.
inline Tensor record(Shape shape, std::vector<double> data, std::string op,
                     std::vector<Tensor> inputs,
                     std::function<void(std::span<const double>)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl().grad_fn = std::move(node);
  out.impl().requires_grad = true;
  return out;
}

}  // namespace autograd

/// Topologically ordered view of the graph reachable from one output.
/// Every input precedes its consumer; each tensor appears once.
class ComputeGraph {
 public:
  static ComputeGraph trace(const Tensor& output) {
    ComputeGraph g;
    std::unordered_set<const TensorImpl*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Tensor, std::size_t>> stack;
    stack.emplace_back(output, 0);
    seen.insert(&output.impl());
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      const auto& fn = t.grad_fn();
      if (fn && next < fn->inputs.size()) {
        const Tensor child = fn->inputs[next++];
        if (child.requires_grad() && seen.insert(&child.impl()).second) {
          stack.emplace_back(child, 0);
        }
        continue;
      }
      g.order_.push_back(t);
      stack.pop_back();
    }
    return g;
  }

  const std::vector<Tensor>& nodes() const { return order_; }

  /// Runs reverse-mode accumulation seeded with d(output)/d(output) = 1.
  /// Returns the number of op nodes visited.
  std::size_t backward() {
    if (order_.empty()) return 0;
    Tensor& out = order_.back();
    std::vector<double> seed(out.numel(), 1.0);
    autograd::accumulate(out, seed);
    std::size_t visited = 0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      const auto& fn = it->grad_fn();
      if (!fn) continue;
      auto& grad = it->impl().grad;
      if (!grad.empty()) fn->backward(grad);
      ++visited;
      // intermediate gradients are not retained
      std::vector<double>().swap(grad);
    }
    return visited;
  }

 private:
  std::vector<Tensor> order_;
};

inline std::size_t backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw NonScalarLoss("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return 0;
  return ComputeGraph::trace(loss).backward();
}

}  // namespace geqbev
