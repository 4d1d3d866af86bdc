#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vaffect/autodiff/tensor.hpp"

namespace vaffect {

/// A named, persistent model tensor. Gradients written by Graph::backward
/// replace the previous contents of `grad`.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
  // Non-trainable state such as batchnorm running averages; saved with the
  // model but never touched by the optimizer.
  bool is_state = false;
  // Symmetric clamp applied after each optimizer step (IndRNN recurrent weights).
  std::optional<T> clip_abs;

  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

/// Owns a model's parameters with stable addresses and unique names.
template <class T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    auto& p = items_.emplace_back(name, std::move(value));
    index_.emplace(std::move(name), &p);
    return p;
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
  }

  Parameter<T>& at(const std::string& name) {
    auto* p = find(name);
    if (!p) throw ContractError("unknown parameter: " + name);
    return *p;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::size_t size() const { return items_.size(); }

 private:
  std::deque<Parameter<T>> items_;
  std::map<std::string, Parameter<T>*> index_;
};

template <class T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const;
  const Tensor<T>& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool requires_grad() const;

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run tape. Ops evaluate eagerly when recorded, so node ids are a
/// topological order and backward simply walks them in reverse.
template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> input(Tensor<T> value, bool requires_grad = true) { return leaf(std::move(value), requires_grad); }

  // Leaf bound to a parameter; one node per parameter per graph.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = leaf(p.value, p.trainable && !p.is_state);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  Var<T> record(const char* op, Tensor<T> value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_.at(p).requires_grad;
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.parents = std::move(parents);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, zero-initialised on first access. Only called
  // from backward functions for parents that require a gradient.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  const Tensor<T>& value_of(std::size_t id) const { return nodes_[id].value; }
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

  /// Reverse sweep from a one-element loss. Every node gradient is recomputed
  /// from scratch and every bound parameter's `grad` is overwritten.
  void backward(Var<T> loss) {
    if (loss.value().size() != 1) {
      throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    grad_buffer(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.requires_grad || !n.backward) continue;
      n.backward(*this, i);
    }
    for (auto& [p, id] : param_nodes_) {
      Node& n = nodes_[id];
      if (n.has_grad) {
        p->grad = n.grad;
      } else {
        p->grad = Tensor<T>(p->value.shape());
      }
    }
  }

 private:
  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<Parameter<T>*, std::size_t> param_nodes_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return graph_->value_of(id_);
}

template <class T>
const Tensor<T>& Var<T>::grad() const {
  return graph_->grad_of(id_);
}

template <class T>
bool Var<T>::requires_grad() const {
  return graph_->wants_grad(id_);
}

}  // namespace vaffect
