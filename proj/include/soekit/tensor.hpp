// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_TENSOR_HPP
#define SOEKIT_TENSOR_HPP

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "soekit/rng.hpp"

namespace soekit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording for the enclosing scope.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Storage and graph linkage behind a tensor handle.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(TensorNode&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle with reverse-mode autodiff.
///
/// Copies share storage (like a smart pointer); use clone() for a deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape));
    if (numel(shape) != data.size())
      throw ShapeError("tensor: shape " + to_string(shape) + " does not match " + std::to_string(data.size()) +
                       " elements");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(const Shape& shape, bool requires_grad = false) {
    return BasicTensor(shape, std::vector<T>(numel(shape), T(0)), requires_grad);
  }
  static BasicTensor full(const Shape& shape, T value, bool requires_grad = false) {
    return BasicTensor(shape, std::vector<T>(numel(shape), value), requires_grad);
  }
  static BasicTensor scalar(T value, bool requires_grad = false) { return BasicTensor({1}, {value}, requires_grad); }
  static BasicTensor randn(const Shape& shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
    return BasicTensor(shape, std::move(v), requires_grad);
  }

  static BasicTensor from_node(std::shared_ptr<Node> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw Error("set_requires_grad: only leaf tensors can change trainability");
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  const char* op_name() const { return node_->op; }
  bool is_leaf() const { return node_->is_leaf(); }

  /// Same values, no graph linkage, no gradient.
  BasicTensor detach() const { return BasicTensor(shape(), node_->data, false); }
  BasicTensor clone() const { return BasicTensor(shape(), node_->data, node_->requires_grad); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> v(node_->data.begin(), node_->data.end());
    return BasicTensor<U>(shape(), std::move(v), node_->requires_grad);
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  bool same_storage(const BasicTensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

/// Builds an op result. The graph records the op only when grad mode is on
/// and at least one input requires grad.
template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(TensorNode<T>&)> backward_fn) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  bool track = false;
  if (grad_enabled())
    for (const auto& in : inputs) track = track || in.requires_grad();
  out.node()->op = op;
  if (track) {
    auto* node = out.node();
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return out;
}

template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data, const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(TensorNode<T>&)> backward_fn) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  bool track = false;
  if (grad_enabled())
    for (const auto& in : inputs) track = track || in.requires_grad();
  out.node()->op = op;
  if (track) {
    auto* node = out.node();
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return out;
}

/// Grad buffer of input `i` if it participates in backward, else nullptr.
template <typename T>
T* input_grad(TensorNode<T>& node, std::size_t i) {
  auto& in = *node.inputs[i];
  return in.requires_grad ? in.grad_buffer().data() : nullptr;
}

template <typename T>
const T* input_data(const TensorNode<T>& node, std::size_t i) {
  return node.inputs[i]->data.data();
}

/// Operations reachable from a root, in topological order (producers first).
template <typename T>
struct Graph {
  std::vector<TensorNode<T>*> order;

  static Graph trace(const BasicTensor<T>& root) {
    Graph g;
    std::unordered_set<TensorNode<T>*> seen;
    // Iterative post-order DFS; recursion would overflow on long chains.
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
    if (root.requires_grad()) {
      stack.emplace_back(root.node(), 0);
      seen.insert(root.node());
    }
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        TensorNode<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        g.order.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }
};

/// Populates d loss / d tensor on every requires_grad tensor reachable from
/// `loss`. Leaf gradients accumulate across calls; intermediate gradients
/// are recomputed from scratch.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) throw Error("backward: loss is not connected to any tensor that requires grad");
  auto graph = Graph<T>::trace(loss);
  for (auto* node : graph.order)
    if (!node->is_leaf()) node->grad.assign(node->data.size(), T(0));
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
    auto* node = *it;
    if (!node->is_leaf() && !node->grad.empty()) node->backward_fn(*node);
  }
  // Intermediate buffers are no longer needed.
  for (auto* node : graph.order)
    if (!node->is_leaf() && node != loss.node()) node->grad.clear();
}

}  // namespace soekit

#endif  // SOEKIT_TENSOR_HPP
