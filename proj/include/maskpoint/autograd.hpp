#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "maskpoint/tensor.hpp"

namespace maskpoint {

/// Node of a dynamically built computation graph. Ops allocate a node per
/// result and attach a closure that scatters the node's gradient into its
/// parents. Graphs are built per forward pass and dropped afterwards; only
/// leaf nodes (parameters, inputs) persist.
template <typename Scalar>
struct NodeT {
  TensorT<Scalar> value;
  TensorT<Scalar> grad;
  bool requires_grad = false;
  std::uint64_t order = 0;  // creation sequence; parents always precede children
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backprop;

  bool has_grad() const { return grad.size() == value.size() && grad.size() > 0; }
  void ensure_grad() {
    if (!has_grad()) grad = TensorT<Scalar>::zeros(value.shape());
  }
};

template <typename Scalar>
using NodePtrT = std::shared_ptr<NodeT<Scalar>>;

using Node = NodeT<double>;
using NodePtr = NodePtrT<double>;

namespace detail {
inline std::uint64_t& node_counter() {
  static std::uint64_t counter = 0;
  return counter;
}
inline bool& grad_enabled_flag() {
  static bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Scoped switch that disables graph construction (inference mode).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename Scalar>
NodePtrT<Scalar> make_node(TensorT<Scalar> value, bool requires_grad) {
  auto n = std::make_shared<NodeT<Scalar>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad && grad_enabled();
  n->order = ++detail::node_counter();
  return n;
}

/// Constant input: participates in forward only.
template <typename Scalar>
NodePtrT<Scalar> constant(TensorT<Scalar> value) {
  return make_node(std::move(value), false);
}

/// Differentiable leaf (parameter or input under test).
template <typename Scalar>
NodePtrT<Scalar> leaf(TensorT<Scalar> value) {
  auto n = std::make_shared<NodeT<Scalar>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->order = ++detail::node_counter();
  return n;
}

/// Registers a result node computed from `parents`; the closure must add the
/// node's gradient contribution into each differentiable parent's grad.
template <typename Scalar>
NodePtrT<Scalar> make_op(TensorT<Scalar> value, std::vector<NodePtrT<Scalar>> parents,
                         std::function<void(NodeT<Scalar>&)> backprop) {
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs |= p->requires_grad;
  auto n = make_node(std::move(value), needs);
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

/// Reverse-mode sweep from a scalar root. Seeds d(root)/d(root) = 1 and runs
/// every reachable closure in reverse creation order.
template <typename Scalar>
void backward(const NodePtrT<Scalar>& root) {
  if (root->value.size() != 1) throw ShapeError("backward: root must be a scalar");
  std::vector<NodeT<Scalar>*> nodes;
  std::unordered_set<const NodeT<Scalar>*> seen;
  std::vector<NodeT<Scalar>*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    NodeT<Scalar>* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const NodeT<Scalar>* a, const NodeT<Scalar>* b) { return a->order > b->order; });
  root->ensure_grad();
  root->grad.array()(0) += Scalar(1);
  for (NodeT<Scalar>* n : nodes) {
    if (!n->backprop || !n->has_grad()) continue;
    for (const auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();
    n->backprop(*n);
  }
}

}  // namespace maskpoint
