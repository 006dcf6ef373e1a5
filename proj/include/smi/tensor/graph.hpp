#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "smi/tensor/tensor.hpp"

namespace smi {

using NodeId = std::int64_t;

/// Categories for the instrumented multiply-accumulate counter. The SA bucket
/// of the analytic cost model is Qkv + Attention; the FFN bucket is Ffn.
enum class MacTag : int { Embed = 0, Qkv, Attention, Proj, Ffn, Head, Other, kCount };

struct MacCounter {
  std::array<std::int64_t, static_cast<std::size_t>(MacTag::kCount)> counts{};

  void add(MacTag tag, std::int64_t n) { counts[static_cast<std::size_t>(tag)] += n; }
  std::int64_t get(MacTag tag) const { return counts[static_cast<std::size_t>(tag)]; }
  std::int64_t self_attention() const { return get(MacTag::Qkv) + get(MacTag::Attention); }
  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
  void reset() { counts.fill(0); }
};

template <typename Scalar>
class Graph;

/// Lightweight handle to a node of a Graph. Copyable; valid while the graph lives.
template <typename Scalar>
class Var {
 public:
  using Matrix = RowMatrix<Scalar>;

  Var() = default;
  Var(Graph<Scalar>* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Matrix& value() const { return graph_->value(id_); }
  const Shape& shape() const { return graph_->shape(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }

  BasicTensor<Scalar> tensor() const {
    BasicTensor<Scalar> t(shape(), value());
    t.node_id = id_;
    return t;
  }

 private:
  Graph<Scalar>* graph_ = nullptr;
  NodeId id_ = -1;
};

/// Taped computation graph, rebuilt for every forward pass. Nodes are stored in
/// creation order, which is also a valid topological order.
template <typename Scalar>
class Graph {
 public:
  using Matrix = RowMatrix<Scalar>;
  using VarT = Var<Scalar>;
  // Receives the gradient flowing into the node; accumulates into parents.
  using BackwardFn = std::function<void(Graph&, const Matrix&)>;

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void set_checked(bool on) { checked_ = on; }
  bool checked() const { return checked_; }

  // With gradients disabled no backward closures are stored (inference only).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  MacCounter& macs() { return macs_; }
  const MacCounter& macs() const { return macs_; }

  std::size_t size() const { return nodes_.size(); }

  /// Leaf owning a copy of `t`.
  VarT leaf(const BasicTensor<Scalar>& t, bool requires_grad = false) {
    Node n;
    n.shape = t.shape();
    n.value = t.mat();
    n.requires_grad = requires_grad && grad_enabled_;
    return push(std::move(n));
  }

  VarT leaf(Shape shape, Matrix value, bool requires_grad = false) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    return push(std::move(n));
  }

  /// Leaf borrowing `t` without copying; `t` must outlive the graph.
  VarT param(const BasicTensor<Scalar>& t, bool requires_grad = false) {
    Node n;
    n.shape = t.shape();
    n.borrowed = &t.mat();
    n.requires_grad = requires_grad && grad_enabled_;
    return push(std::move(n));
  }

  /// Records the result of a primitive op. `backward` runs only if some parent
  /// requires a gradient.
  VarT record(Shape shape, Matrix value, std::vector<NodeId> parents, BackwardFn backward) {
    if (checked_ && !value.allFinite()) {
      throw Error(ErrorCode::NonFinite, "op produced NaN/Inf at node " + std::to_string(nodes_.size()));
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    bool rg = false;
    if (grad_enabled_) {
      for (NodeId p : parents) rg = rg || nodes_[static_cast<std::size_t>(p)].requires_grad;
    }
    n.requires_grad = rg;
    if (rg) {
      n.parents = std::move(parents);
      n.backward = std::move(backward);
    }
    return push(std::move(n));
  }

  /// Installs a backward closure after recording, for ops whose gradient reads
  /// their own saved output.
  void set_backward(NodeId id, BackwardFn backward) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.requires_grad) n.backward = std::move(backward);
  }

  const Matrix& value(NodeId id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.borrowed ? *n.borrowed : n.value;
  }
  const Shape& shape(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].shape; }
  bool requires_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient of a node after backward(); zeros if the node was not reached.
  Matrix grad(NodeId id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      const Matrix& v = value(id);
      return Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }
  Matrix grad(const VarT& v) const { return grad(v.id()); }

  BasicTensor<Scalar> grad_tensor(const VarT& v) const {
    return BasicTensor<Scalar>(shape(v.id()), grad(v.id()));
  }

  template <typename Expr>
  void accumulate(NodeId id, const Eigen::MatrixBase<Expr>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a scalar loss. A graph supports a single backward pass.
  void backward(const VarT& loss) {
    if (consumed_) throw Error(ErrorCode::GraphConsumed, "backward already ran on this graph");
    if (value(loss.id()).size() != 1) {
      throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar loss");
    }
    consumed_ = true;
    Node& root = nodes_[static_cast<std::size_t>(loss.id())];
    if (!root.requires_grad) return;
    root.grad = Matrix::Ones(1, 1);
    for (NodeId i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      // Closures only write to parents, which precede `i`; `n.grad` stays put.
      n.backward(*this, n.grad);
    }
  }

  bool consumed() const { return consumed_; }

 private:
  struct Node {
    Shape shape;
    Matrix value;
    const Matrix* borrowed = nullptr;
    Matrix grad;
    bool requires_grad = false;
    std::vector<NodeId> parents;
    BackwardFn backward;
  };

  VarT push(Node&& n) {
    nodes_.push_back(std::move(n));
    return VarT(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  std::vector<Node> nodes_;
  MacCounter macs_;
  bool checked_ = false;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

}  // namespace smi
