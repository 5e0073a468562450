#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "ptk/tensor.hpp"

namespace ptk {

template <typename T>
class TapeT;

// Handle into a tape. Cheap to copy; valid for the tape's lifetime.
template <typename T>
struct VarT {
  TapeT<T>* tape = nullptr;
  i64 id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const TensorT<T>& value() const;
  const std::vector<i64>& shape() const { return value().shape; }
  i64 numel() const { return value().numel(); }
  bool requires_grad() const;
};

// Reverse-mode tape. Records are appended in execution order, which is a
// topological order by construction; backward visits each record once.
// A tape is confined to a single training step on one thread.
//
// Nodes live in a deque so that references returned by value()/grad_ref()
// stay valid while later ops append nodes.
template <typename T>
class TapeT {
 public:
  using Var = VarT<T>;

  Var leaf(TensorT<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), TensorT<T>{}, requires_grad});
    return Var{this, i64(nodes_.size()) - 1};
  }

  Var constant(TensorT<T> value) { return leaf(std::move(value), false); }

  // Internal: create an op output node.
  Var make(TensorT<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), TensorT<T>{}, requires_grad});
    return Var{this, i64(nodes_.size()) - 1};
  }

  void record(std::function<void(TapeT&)> backward) {
    records_.push_back(std::move(backward));
  }

  const TensorT<T>& value(Var v) const { return nodes_[std::size_t(v.id)].value; }
  TensorT<T>& mutable_value(Var v) { return nodes_[std::size_t(v.id)].value; }
  bool needs_grad(Var v) const { return nodes_[std::size_t(v.id)].requires_grad; }

  // Gradient of the last backward() w.r.t. v; zeros if v did not participate.
  TensorT<T> grad(Var v) const {
    const Node& n = nodes_[std::size_t(v.id)];
    if (n.grad.numel() == 0) return TensorT<T>::zeros(n.value.shape);
    return n.grad;
  }

  // Accumulate into a node's gradient buffer (allocating on first touch).
  void accum(Var v, const TensorT<T>& g) {
    Node& n = nodes_[std::size_t(v.id)];
    if (n.grad.numel() == 0) n.grad = TensorT<T>::zeros(n.value.shape);
    PTK_CHECK(n.grad.shape == g.shape, "grad accumulation shape mismatch");
    for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
  }

  void accum_at(Var v, i64 flat_index, T g) {
    Node& n = nodes_[std::size_t(v.id)];
    if (n.grad.numel() == 0) n.grad = TensorT<T>::zeros(n.value.shape);
    n.grad.data[std::size_t(flat_index)] += g;
  }

  // Raw grad buffer of an op output, may be empty when the output never
  // received gradient (e.g. a recorded node on a dead branch).
  const TensorT<T>& grad_ref(Var v) const { return nodes_[std::size_t(v.id)].grad; }
  bool has_grad(Var v) const { return nodes_[std::size_t(v.id)].grad.numel() != 0; }

  void backward(Var loss) {
    PTK_CHECK(loss.tape == this, "backward: loss from another tape");
    PTK_CHECK(value(loss).numel() == 1, "backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad = TensorT<T>{};
    accum(loss, TensorT<T>::scalar(T(1)));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)(*this);
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::vector<std::function<void(TapeT&)>> records_;
};

template <typename T>
inline const TensorT<T>& VarT<T>::value() const {
  return tape->value(*this);
}

template <typename T>
inline bool VarT<T>::requires_grad() const {
  return tape->needs_grad(*this);
}

using Tape = TapeT<float>;
using Var = VarT<float>;
using TapeD = TapeT<double>;
using VarD = VarT<double>;

}  // namespace ptk
