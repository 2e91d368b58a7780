#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "prototransfer/errors.hpp"
#include "prototransfer/tensor.hpp"

namespace prototransfer {

/// Trainable tensor with its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, BasicTensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = BasicTensor<T>(value.shape()); }

  template <class U>
  Parameter<U> cast() const {
    Parameter<U> p(name, value.template cast<U>());
    p.grad = grad.template cast<U>();
    return p;
  }
};

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Ordered record of executed primitive ops for one forward/backward pass.
///
/// Nodes are appended in execution order. backward() walks them in reverse,
/// calling each node's backward function once with its output gradient
/// already complete. Leaves bound to a Parameter add their gradient into
/// Parameter::grad. A tape supports one backward(); record a fresh tape for
/// the next step. A tape must be confined to one thread.
template <class T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(TensorT value) {
    return push(std::move(value), false, nullptr, {});
  }

  /// Leaf whose gradient is accumulated into p.grad. The parameter must
  /// outlive the tape's backward().
  Var<T> param(Parameter<T>& p) { return push(p.value, true, &p, {}); }

  /// Leaf that tracks a gradient without an owning Parameter (used by
  /// finite-difference checks on op inputs).
  Var<T> variable(TensorT value) { return push(std::move(value), true, nullptr, {}); }

  Var<T> record(TensorT value, bool requires_grad, BackwardFn fn) {
    return push(std::move(value), requires_grad, nullptr, requires_grad ? std::move(fn) : BackwardFn{});
  }

  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first access.
  TensorT& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.numel() != n.value.numel()) n.grad = TensorT(n.value.shape());
    return n.grad;
  }

  bool has_grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad.numel() == n.value.numel() && n.value.numel() > 0;
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
    if (backward_done_) {
      throw ContractError("backward: tape already consumed; run a new forward pass");
    }
    if (value(loss.id).numel() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          shape_string(value(loss.id).shape()));
    }
    backward_done_ = true;
    if (!requires_grad(loss.id)) return;
    grad(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !has_grad(i)) continue;
      if (n.backward) n.backward(*this, i);
      if (n.owner != nullptr) {
        auto dst = n.owner->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

  bool consumed() const noexcept { return backward_done_; }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    Parameter<T>* owner = nullptr;
    BackwardFn backward;
  };

  Var<T> push(TensorT value, bool requires_grad, Parameter<T>* owner, BackwardFn fn) {
    if (backward_done_) throw ContractError("tape already consumed by backward()");
    nodes_.push_back(Node{std::move(value), TensorT{}, requires_grad, owner, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace prototransfer
