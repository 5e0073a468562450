#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "ptk/tape.hpp"

namespace ptk {

// Named parameter container with deterministic (insertion) order.
// `trainable == false` entries are state such as batch-norm running
// statistics: checkpointed, EMA-copied, never touched by optimizers.
template <typename T>
class ParamStoreT {
 public:
  struct Entry {
    TensorT<T> value;
    bool trainable = true;
  };

  TensorT<T>& add(const std::string& name, TensorT<T> init, bool trainable = true) {
    PTK_CHECK(!entries_.count(name), "param already exists: " << name);
    order_.push_back(name);
    auto& e = entries_[name];
    e.value = std::move(init);
    e.trainable = trainable;
    return e.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  TensorT<T>& get(const std::string& name) {
    auto it = entries_.find(name);
    PTK_CHECK(it != entries_.end(), "unknown param: " << name);
    return it->second.value;
  }
  const TensorT<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    PTK_CHECK(it != entries_.end(), "unknown param: " << name);
    return it->second.value;
  }
  bool trainable(const std::string& name) const {
    auto it = entries_.find(name);
    PTK_CHECK(it != entries_.end(), "unknown param: " << name);
    return it->second.trainable;
  }

  const std::vector<std::string>& names() const { return order_; }

  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& n : order_)
      if (n.rfind(prefix, 0) == 0) out.push_back(n);
    return out;
  }

  std::size_t size() const { return order_.size(); }

  // Deep snapshot / restore, used by the loss monitor and EMA targets.
  ParamStoreT clone() const { return *this; }

  void assign_from(const ParamStoreT& other) {
    PTK_CHECK(order_ == other.order_, "param store layout mismatch");
    for (const auto& n : order_) entries_[n].value = other.entries_.at(n).value;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
};

using ParamStore = ParamStoreT<float>;

// Per-step bridge between a ParamStore and a Tape: binds each parameter as a
// leaf exactly once and remembers the mapping so gradients can be read back.
template <typename T>
class BinderT {
 public:
  BinderT(TapeT<T>& tape, ParamStoreT<T>& store, bool training = true)
      : tape_(&tape), store_(&store), training_(training) {}

  // Parameters matching a frozen prefix join the tape without gradient.
  void freeze_prefix(const std::string& prefix) { frozen_prefixes_.push_back(prefix); }

  VarT<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const bool frozen = is_frozen(name) || !store_->trainable(name);
    VarT<T> v = tape_->leaf(store_->get(name), !frozen && training_);
    bound_.emplace(name, v);
    return v;
  }

  bool training() const { return training_; }
  TapeT<T>& tape() { return *tape_; }
  ParamStoreT<T>& store() { return *store_; }

  // Gradients for every bound trainable parameter, in store order.
  std::map<std::string, TensorT<T>> gradients() const {
    std::map<std::string, TensorT<T>> out;
    for (const auto& [name, var] : bound_)
      if (tape_->needs_grad(var)) out[name] = tape_->grad(var);
    return out;
  }

 private:
  bool is_frozen(const std::string& name) const {
    for (const auto& p : frozen_prefixes_)
      if (name.rfind(p, 0) == 0) return true;
    return false;
  }

  TapeT<T>* tape_;
  ParamStoreT<T>* store_;
  bool training_;
  std::vector<std::string> frozen_prefixes_;
  std::map<std::string, VarT<T>> bound_;
};

using Binder = BinderT<float>;

}  // namespace ptk
