#pragma once

#include <mucodec/core/tensor.hpp>

#include <cassert>
#include <deque>
#include <functional>
#include <memory>
#include <unordered_map>
#include <string>
#include <utility>
#include <vector>

namespace mucodec {

/// A learned tensor with its gradient accumulator. Frozen parameters
/// (`trainable == false`) are recorded as constants.
template <std::floating_point T>
struct Parameter {
  Parameter() = default;
  explicit Parameter(Tensor<T> v, bool trainable_ = true)
      : value(std::move(v)), grad(Tensor<T>::zeros_like(value)), trainable(trainable_) {}

  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  void zero_grad() { grad = Tensor<T>::zeros_like(value); }
};

template <std::floating_point T>
class Graph;

/// Handle to a node recorded in a Graph.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : g_(g), id_(id) {}

  Graph<T>& graph() const { return *g_; }
  std::size_t id() const { return id_; }
  bool valid() const { return g_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  Graph<T>* g_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run tape. Nodes are appended in creation order, which is a
/// topological order, so backward is a single reverse sweep.
template <std::floating_point T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until first accumulation
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), {}, nullptr, false, {}); }

  /// Leaf that receives a gradient readable via grad(var) after backward.
  Var<T> input(Tensor<T> v) { return push(std::move(v), {}, nullptr, true, {}); }

  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = push(p.value, {}, &p, p.trainable, {});
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Records a primitive. `backward` reads this node's grad and accumulates
  /// into parents; it only runs when some parent requires a gradient.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward) {
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_[p].requires_grad;
    return push(std::move(value), std::move(parents), nullptr, rg, rg ? std::move(backward) : BackwardFn{});
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of node `id`, allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>::zeros_like(n.value);
    return n.grad;
  }

  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Reverse sweep from a scalar root. Parameter gradients are added to
  /// Parameter::grad so several graphs may accumulate into one step.
  void backward(Var<T> root) {
    if (root.value().size() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got " + shape_str(root.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (!nodes_[root.id()].requires_grad) return;
    grad_buffer(root.id())[0] = T(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr && n.param->trainable) {
        auto& pg = n.param->grad;
        if (pg.size() != n.grad.size()) pg = Tensor<T>::zeros_like(n.param->value);
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  /// Gradient of the last backward w.r.t. a node; zeros if unreachable.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.empty()) return Tensor<T>::zeros_like(n.value);
    return n.grad;
  }

 private:
  Var<T> push(Tensor<T> v, std::vector<std::size_t> parents, Parameter<T>* p, bool rg, BackwardFn fn) {
    for ([[maybe_unused]] auto q : parents) assert(q < nodes_.size());
    nodes_.push_back(Node{std::move(v), Tensor<T>(), std::move(parents), std::move(fn), p, rg});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

template <std::floating_point T>
const Tensor<T>& Var<T>::value() const {
  return g_->node(id_).value;
}

template <std::floating_point T>
bool Var<T>::requires_grad() const {
  return g_->node(id_).requires_grad;
}

}  // namespace mucodec
