#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "moc/error.hpp"
#include "moc/tensor.hpp"

namespace moc {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents.
  std::function<void(Node&)> backward_fn;

  BasicTensor<T>& grad_buffer() {
    if (grad.shape() != value.shape() || grad.size() != value.size()) {
      grad = BasicTensor<T>(value.shape(), T(0));
    }
    return grad;
  }

  void accumulate(const BasicTensor<T>& g) {
    auto& buf = grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }
};

/// Handle onto a node of the dynamic graph. Copies share the node.
template <class T>
class BasicVar {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  BasicVar() = default;
  explicit BasicVar(NodePtr node) : node_(std::move(node)) {}
  explicit BasicVar(BasicTensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->op = "leaf";
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  explicit operator bool() const noexcept { return defined(); }

  const BasicTensor<T>& value() const { return node_->value; }
  BasicTensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value.item(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->grad.size() > 0; }
  const BasicTensor<T>& grad() const {
    node_->grad_buffer();
    return node_->grad;
  }
  void zero_grad() {
    if (node_->grad.size()) node_->grad.fill(T(0));
  }

  bool is_leaf() const { return node_->parents.empty() && !node_->backward_fn; }
  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

using Var = BasicVar<float>;

template <class T>
BasicVar<T> constant(BasicTensor<T> value) {
  return BasicVar<T>(std::move(value), false);
}

template <class T>
BasicVar<T> parameter(BasicTensor<T> value) {
  return BasicVar<T>(std::move(value), true);
}

namespace detail {

/// Wraps an op result. Records the backward closure only when grad mode is on
/// and some input requires grad. Non-finite forward values are an error.
template <class T>
BasicVar<T> make_result(BasicTensor<T> value, std::vector<BasicVar<T>> inputs, std::string op,
                        std::function<void(Node<T>&)> backward_fn) {
  if (!value.all_finite()) throw NumericError("non-finite value produced by " + op);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = std::move(op);
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (any && grad_enabled()) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.defined() ? in.node() : nullptr);
    node->backward_fn = std::move(backward_fn);
  }
  return BasicVar<T>(std::move(node));
}

template <class T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  return i < self.parents.size() && self.parents[i] && self.parents[i]->requires_grad;
}

template <class T>
BasicTensor<T>& parent_grad(Node<T>& self, std::size_t i) {
  return self.parents[i]->grad_buffer();
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate until
/// cleared; the recorded graph is released, so a second call on the same loss
/// is a state error.
template <class T>
void backward(const BasicVar<T>& loss) {
  if (!loss.defined()) throw ArgumentError("backward on undefined variable");
  if (loss.size() != 1) {
    throw ArgumentError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (root->consumed) throw StateError("graph already consumed by an earlier backward; re-run forward");
  if (!root->requires_grad) throw StateError("loss does not depend on any parameter requiring grad");

  // Iterative post-order DFS yields a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p && p->backward_fn && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->grad.size() == n->value.size() && n->backward_fn) n->backward_fn(*n);
  }
  for (Node<T>* n : order) {
    n->backward_fn = nullptr;
    n->parents.clear();
    n->consumed = true;
  }
}

}  // namespace moc
