#pragma once

// Dense tensor with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node. Every differentiable op
// creates a fresh node that remembers its inputs and a closure that maps the
// node's gradient onto theirs. backward() walks that graph once in reverse
// topological order and then releases it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ccnext/error.hpp"

namespace ccnext {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

enum class DType : std::uint8_t { float32 = 0, float64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "float32 or float64 only");
  return std::is_same_v<T, float> ? DType::float32 : DType::float64;
}

// Tape recording switch (per thread).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;  // backward() already ran from this node
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    node_->value.assign(numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    if (values.size() != numel(shape))
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
    node_->value = std::move(values);
    node_->shape = std::move(shape);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::size_t size() const { return node_->value.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access. Only meaningful for leaves (inputs, parameters);
  /// writing into a recorded intermediate does not update its consumers.
  std::span<T> mutable_values() { return node_->value; }
  const std::vector<T>& vec() const& { return node_->value; }
  // A temporary may hold the last reference to its storage.
  std::vector<T> vec() && { return node_->value; }

  T item() const {
    if (size() != 1) throw ShapeError("item(): tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->value[0];
  }

  T at(int n, int c, int h, int w) const {
    const Shape& s = shape();
    return node_->value[((static_cast<std::size_t>(n) * s[1] + c) * s[2] + h) * s[3] + w];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    if (!node_->leaf) throw Error("set_requires_grad: only leaf tensors can toggle gradient tracking");
    node_->requires_grad = on;
    if (on) node_->grad_buffer();
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw Error("grad(): no gradient buffer for tensor of shape " + to_string(shape()));
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad_buffer().begin(), node_->grad.end(), T(0));
  }

  /// Copy of the values with no history.
  Tensor detach() const { return Tensor(shape(), vec()); }

  /// Same storage, new shape. Differentiable.
  Tensor reshape(Shape s) const;

  void backward() const;

  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

namespace detail {

// Builds the node for an op result. The closure is attached only when some
// input participates in differentiation and the tape is on.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = true;
  if (grad_mode()) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      node->requires_grad = true;
      node->leaf = false;
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::forward<Backward>(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

template <class T>
bool wants_grad(const std::shared_ptr<Node<T>>& p) {
  return p && p->requires_grad;
}

}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::reshape(Shape s) const {
  if (numel(s) != size()) throw ShapeError("reshape: " + to_string(shape()) + " -> " + to_string(s));
  return detail::make_result<T>(std::move(s), vec(), {*this}, [](detail::Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
void Tensor<T>::backward() const {
  if (size() != 1) throw ShapeError("backward(): loss must be a scalar, got shape " + to_string(shape()));
  if (node_->consumed) throw Error("backward(): graph already consumed; recompute the forward pass");
  if (!node_->requires_grad) throw Error("backward(): loss does not depend on any tensor that requires grad");

  // Iterative post-order DFS -> topological order.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node<T>* p = n->parents[next++].get();
      if (p && p->requires_grad && !p->leaf && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->grad.assign(n->value.size(), T(0));
  node_->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward) n->backward(*n);
  }
  // Release the recorded graph; leaves keep their accumulated gradients.
  for (auto* n : order) {
    n->backward = nullptr;
    n->parents.clear();
    n->consumed = true;
    if (n != node_.get()) std::vector<T>().swap(n->grad);
  }
}

}  // namespace ccnext
