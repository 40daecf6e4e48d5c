#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "busu/tensor.hpp"

namespace busu {

template <Real T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a value in the differentiable graph. Copies share the node.
template <Real T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }
  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const Tensor<T>& grad() const { return node_->ensure_grad(); }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    node_->grad = Tensor<T>(node_->value.shape());
  }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds a result node. The gradient closure is attached only when some input
/// is differentiable, so inference graphs free intermediates immediately.
template <Real T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value), false);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (auto& in : inputs) node.parents.push_back(in.node());
  node.backward_fn = std::move(backward);
  return out;
}

/// Ordered record of the operations reachable from a scalar loss.
template <Real T>
class GradTape {
 public:
  explicit GradTape(const Var<T>& root) { record(root); }

  /// Nodes in topological order (inputs before consumers).
  const std::vector<Node<T>*>& order() const noexcept { return order_; }

  /// Reverse-topological accumulation. Returns the number of visited nodes.
  std::size_t run(const Var<T>& root) {
    if (root.value().size() != 1) throw UsageError("backward requires a scalar loss, got shape " + to_string(root.shape()));
    root.node()->ensure_grad().fill(T(1));
    std::size_t visited = 0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>& n = **it;
      ++visited;
      if (!n.backward_fn) continue;
      n.ensure_grad();
      for (auto& p : n.parents)
        if (p->requires_grad) p->ensure_grad();
      n.backward_fn(n);
    }
    return visited;
  }

 private:
  void record(const Var<T>& root) {
    if (!root.defined()) throw UsageError("backward on an undefined value");
    std::unordered_set<const Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::vector<Node<T>*> order_;
};

/// Accumulates d(loss)/d(param) into every reachable parameter's grad.
template <Real T>
std::size_t backward(const Var<T>& loss) {
  GradTape<T> tape(loss);
  return tape.run(loss);
}

}  // namespace busu
