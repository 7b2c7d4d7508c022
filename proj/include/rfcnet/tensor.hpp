// Dense rank-4 tensor with reverse-mode autodiff over a per-forward tape.
//
// A Tensor is a shared handle to a node holding the value buffer, an optional
// gradient buffer and, for op results, the parent links plus a backward
// closure. backward() on a scalar walks the recorded graph once and then
// releases it; leaf gradients accumulate until zero_grad().
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "rfcnet/core.hpp"

namespace rfc {

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "element type must be float or double");

 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape s) { return filled(s, T(0)); }

  static Tensor filled(Shape s, T v) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = s;
    t.node_->value.assign(static_cast<std::size_t>(s.numel()), v);
    return t;
  }

  static Tensor from_data(Shape s, std::vector<T> data) {
    if (static_cast<std::int64_t>(data.size()) != s.numel())
      throw DimensionError("from_data: buffer size " + std::to_string(data.size()) +
                           " != numel of " + s.to_string());
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = s;
    t.node_->value = std::move(data);
    return t;
  }

  /// Uniform values in [lo, hi), drawn in row-major order.
  static Tensor uniform(Shape s, T lo, T hi, Rng& rng) {
    Tensor t = zeros(s);
    for (auto& v : t.node_->value) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->shape.numel(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> data() { return node_->value; }

  T at(int n, int c, int y, int x) const { return node_->value[index(n, c, y, x)]; }
  T& at(int n, int c, int y, int x) { return node_->value[index(n, c, y, x)]; }

  std::size_t index(int n, int c, int y, int x) const {
    const Shape& s = node_->shape;
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w + x;
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  /// Gradient buffer; empty span until a backward pass has touched this node.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad() { return node_->grad; }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  Tensor clone_values() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  /// Reverse-mode sweep from a scalar. Gradients of every reachable node
  /// accumulate; the recorded graph is released afterwards.
  void backward() const {
    if (numel() != 1) throw ArgumentError("backward: tensor is not scalar, shape " + shape().to_string());
    if (!node_->backward_fn && node_->parents.empty())
      throw StateError("backward: tensor has no recorded graph");

    std::vector<Node*> order = topo_order(node_.get());
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward_fn) node->backward_fn(*node);
    }
    for (Node* node : order) {
      node->backward_fn = nullptr;
      node->parents.clear();
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

  /// Result node wired to its parents; `fn` pulls from the node's grad and
  /// pushes into parent grads.
  static Tensor make_result(Shape s, std::vector<Tensor> parents,
                            std::function<void(Node&)> fn) {
    Tensor t = zeros(s);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.node_->requires_grad;
    t.node_->requires_grad = needs;
    if (needs) {
      t.node_->parents.reserve(parents.size());
      for (auto& p : parents) t.node_->parents.push_back(p.node_);
      t.node_->backward_fn = std::move(fn);
    }
    return t;
  }

  void check_finite(const char* op) const {
    if (!debug_checks_enabled()) return;
    for (const T v : node_->value)
      if (!std::isfinite(v)) throw StateError(std::string(op) + ": non-finite output element");
  }

 private:
  static std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS; parent order is fixed, so the walk is
    // deterministic.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* parent = node->parents[next++].get();
        if (seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

/// Integer class-id mask with batch and spatial dims (no gradient).
struct ClassMask {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<int> ids;

  static ClassMask zeros(int n, int h, int w) {
    ClassMask m;
    m.n = n;
    m.h = h;
    m.w = w;
    m.ids.assign(static_cast<std::size_t>(n) * h * w, 0);
    return m;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(n) * h * w; }

  int at(int b, int y, int x) const { return ids[(static_cast<std::size_t>(b) * h + y) * w + x]; }
  int& at(int b, int y, int x) { return ids[(static_cast<std::size_t>(b) * h + y) * w + x]; }
};

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape()))
    throw DimensionError("add: shapes " + a.shape().to_string() + " vs " + b.shape().to_string());
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> out = Tensor<T>::make_result(a.shape(), {a, b}, [an, bn](auto& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] += node.grad[i];
    }
  });
  auto out_data = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = ad[i] + bd[i];
  out.check_finite("add");
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape()))
    throw DimensionError("mul: shapes " + a.shape().to_string() + " vs " + b.shape().to_string());
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> out = Tensor<T>::make_result(a.shape(), {a, b}, [an, bn](auto& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] += node.grad[i] * an->value[i];
    }
  });
  auto out_data = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = ad[i] * bd[i];
  out.check_finite("mul");
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto an = a.node();
  Tensor<T> out = Tensor<T>::make_result(a.shape(), {a}, [an, factor](auto& node) {
    an->ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i] * factor;
  });
  auto out_data = out.data();
  auto ad = a.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = ad[i] * factor;
  out.check_finite("scale");
  return out;
}

/// Sum over all elements -> scalar tensor of shape (1,1,1,1).
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto an = a.node();
  Tensor<T> out = Tensor<T>::make_result(Shape{1, 1, 1, 1}, {a}, [an](auto& node) {
    an->ensure_grad();
    const T g = node.grad[0];
    for (auto& v : an->grad) v += g;
  });
  T acc = T(0);
  for (const T v : a.data()) acc += v;
  out.data()[0] = acc;
  out.check_finite("sum");
  return out;
}

/// Extract one element as a scalar tensor; gradient scatters back.
template <typename T>
Tensor<T> pick(const Tensor<T>& a, int n, int c, int y, int x) {
  const Shape& s = a.shape();
  if (n < 0 || n >= s.n || c < 0 || c >= s.c || y < 0 || y >= s.h || x < 0 || x >= s.w)
    throw ArgumentError("pick: index out of range for shape " + s.to_string());
  const std::size_t idx = a.index(n, c, y, x);
  auto an = a.node();
  Tensor<T> out = Tensor<T>::make_result(Shape{1, 1, 1, 1}, {a}, [an, idx](auto& node) {
    an->ensure_grad();
    an->grad[idx] += node.grad[0];
  });
  out.data()[0] = a.data()[idx];
  return out;
}

}  // namespace rfc
