#pragma once

// Dense n-d tensor with reverse-mode differentiation. Tensors are handles to
// shared nodes; operations build a DAG of nodes, backward() walks it once in
// reverse topological order. Values are immutable after creation except for
// gradient accumulation and explicit parameter updates between graphs.

#include <concepts>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <unordered_map>
#include <unordered_set>

#include "ffce/common.hpp"

namespace ffce {

template <std::floating_point T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until first accumulation
    bool track = false;   // participates in differentiation
    std::vector<Tensor> parents;
    std::function<void(const Tensor&)> backprop;
  };

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from(std::move(shape), {});
  }

  static Tensor full(Shape shape, T v) {
    std::vector<T> vals(shape_numel(shape), v);
    return from(std::move(shape), std::move(vals));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor from(Shape shape, std::vector<T> values) {
    auto n = std::make_shared<Node>();
    if (values.empty()) values.resize(shape_numel(shape), T(0));
    if (values.size() != shape_numel(shape))
      throw std::invalid_argument("tensor value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->values = std::move(values);
    return Tensor(std::move(n));
  }

  // Extension point every operation is built on: output values plus a
  // closure that routes the output gradient to the parents. The closure is
  // dropped when no parent is tracked.
  static Tensor from_op(Shape shape, std::vector<T> values, std::vector<Tensor> parents,
                        std::function<void(const Tensor&)> backprop) {
    Tensor t = from(std::move(shape), std::move(values));
    bool track = false;
    for (const auto& p : parents) track = track || p.track();
    if (track) {
      t.node_->track = true;
      t.node_->parents = std::move(parents);
      t.node_->backprop = std::move(backprop);
    }
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  // For parameter init and optimizer steps; never call on a live graph node.
  std::span<T> values_mut() { return node_->values; }

  bool track() const { return node_ && node_->track; }
  void set_requires_grad(bool rg) { node_->track = rg; }
  bool requires_grad() const { return track() && node_->parents.empty(); }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() {
    if (node_->grad.empty()) node_->grad.assign(node_->values.size(), T(0));
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw std::invalid_argument("index rank mismatch");
    std::size_t off = 0, i = 0;
    auto strides = row_major_strides(shape());
    for (std::size_t v : idx) {
      if (v >= shape()[i]) throw std::invalid_argument("index out of range");
      off += v * strides[i++];
    }
    return node_->values[off];
  }

  Tensor detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->values = node_->values;
    return Tensor(std::move(n));
  }

  Node* node() const { return node_.get(); }

  friend void backward(const Tensor& root) {
    if (root.numel() != 1)
      throw std::invalid_argument("backward requires a scalar root, got shape " + shape_str(root.shape()));
    if (!root.track()) return;

    // DFS post-order over tracked ancestors
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Tensor, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      auto& parents = t.node_->parents;
      bool descended = false;
      while (next < parents.size()) {
        const Tensor& p = parents[next++];
        if (p.track() && !seen.count(p.node())) {
          seen.insert(p.node());
          stack.emplace_back(p, 0);
          descended = true;
          break;
        }
      }
      if (descended) continue;
      order.push_back(t.node());
      stack.pop_back();
    }

    root.node_->grad.assign(1, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (!n->backprop || n->grad.empty()) continue;
      // non-owning handle; the graph outlives the sweep through root
      n->backprop(Tensor(std::shared_ptr<Node>(std::shared_ptr<Node>(), n)));
    }
  }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

// Integer-valued companion for labels, presence vectors and argmax indices.
struct ITensor {
  Shape shape;
  std::vector<std::int32_t> v;

  ITensor() = default;
  ITensor(Shape s, std::vector<std::int32_t> vals) : shape(std::move(s)), v(std::move(vals)) {
    if (v.size() != shape_numel(shape))
      throw std::invalid_argument("ITensor value count does not match shape " + shape_str(shape));
  }
  std::size_t numel() const { return v.size(); }
};

// Named learnable tensor. Names are path-like ("enc2d.b0.conv_a.kernel") and
// unique within a ParamStore.
template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;  // false for buffers such as BN running stats
};

template <std::floating_point T>
class ParamStore {
 public:
  // Returns the handle by value: it shares the node, and unlike a reference
  // into entries_ it survives later insertions.
  Tensor<T> add(const std::string& name, Tensor<T> value) {
    return insert(name, std::move(value), true);
  }

  // Non-learnable state carried through checkpoints (BN running stats).
  Tensor<T> add_state(const std::string& name, Tensor<T> value) {
    return insert(name, std::move(value), false);
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<T>& operator[](const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no parameter named " + name);
    return entries_[it->second];
  }

  const std::vector<Parameter<T>>& entries() const { return entries_; }
  std::vector<Parameter<T>>& entries() { return entries_; }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) ++n;
    return n;
  }

 private:
  Tensor<T> insert(const std::string& name, Tensor<T> value, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
    value.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back(Parameter<T>{name, value, trainable});
    return value;
  }

  std::vector<Parameter<T>> entries_;  // insertion order, the serialization order
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace ffce
