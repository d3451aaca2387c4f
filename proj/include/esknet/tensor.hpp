#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "esknet/errors.hpp"

namespace esknet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool released = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of `inputs`.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major array with optional participation in reverse-mode autodiff.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
/// Every operation that consumes a tensor with requires_grad() records its
/// inputs and a backward closure on the result. Calling backward() on a scalar
/// result walks that graph once, accumulates into the grads of leaf tensors,
/// and releases the graph; a second backward() on the same result throws.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + esknet::to_string(shape));
    }
    node_->data.assign(esknet::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (esknet::numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + esknet::to_string(shape) + " needs " +
                       std::to_string(esknet::numel(shape)) + " values, got " + std::to_string(values.size()));
    }
    Tensor t(shape, T(0), requires_grad);
    t.node_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t numel() const { return node().data.size(); }

  std::span<const T> data() const { return node().data; }
  std::span<T> mutable_data() { return node().data; }
  const T& operator[](std::size_t i) const { return node().data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + esknet::to_string(shape()));
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node().is_leaf) throw AutodiffError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = flag;
  }
  bool is_leaf() const { return node().is_leaf; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw AutodiffError("tensor has no gradient");
    return node().grad;
  }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (node_) node_->grad.clear();
  }

  /// Fresh leaf holding a copy of the values; no graph, no grad.
  Tensor clone() const {
    Tensor t = from(shape(), node().data, false);
    return t;
  }
  /// Same values without graph participation.
  Tensor detach() const { return clone(); }

  void backward() const;

  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  Node<T>& node() const {
    if (!node_) throw AutodiffError("use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<Node<T>> node_;

  template <typename U>
  friend Tensor<U> make_result(Shape, std::vector<U>, std::vector<Tensor<U>>, std::function<void(Node<U>&)>);
};

/// Builds an op output. The backward closure is recorded only when at least
/// one input participates in autodiff.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out;
  out.node_ = std::make_shared<Node<T>>();
  out.node_->shape = std::move(shape);
  out.node_->data = std::move(values);
  bool tracked = false;
  for (const auto& in : inputs) {
    if (!in.defined()) throw AutodiffError("undefined tensor passed to an operation");
    if (in.requires_grad()) {
      if (in.node_ptr()->released) {
        throw AutodiffError("operation consumes an intermediate whose graph was already released by backward()");
      }
      tracked = true;
    }
  }
  if (tracked) {
    out.node_->requires_grad = true;
    out.node_->is_leaf = false;
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_ptr());
    out.node_->backward_fn = std::move(backward_fn);
  }
  return out;
}

template <typename T>
void Tensor<T>::backward() const {
  Node<T>& root = node();
  if (root.data.size() != 1) {
    throw AutodiffError("backward() requires a scalar loss, got shape " + esknet::to_string(root.shape));
  }
  if (!root.requires_grad) throw AutodiffError("backward() on a tensor that is not tracked by autodiff");
  if (root.released) throw AutodiffError("backward() called twice on the same graph");
  if (root.is_leaf) {
    root.ensure_grad()[0] += T(1);
    return;
  }

  // Post-order DFS over the tracked interior nodes.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && !child->is_leaf && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node<T>* n : order) {
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->released = true;
  }
}

/// Accumulates `g` into the gradient of input `i` when that input is tracked.
template <typename T>
inline std::vector<T>* grad_target(Node<T>& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in->requires_grad) return nullptr;
  return &in->ensure_grad();
}

}  // namespace esknet
