#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "advclr/tensor.hpp"

namespace advclr {

/// Handle to a value recorded on a Tape. Only meaningful for the tape that
/// produced it.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;

  bool valid() const noexcept { return id != npos; }
  friend bool operator==(Var a, Var b) noexcept { return a.id == b.id; }
};

template <class T>
class Tape;

/// Leaf gradients produced by Tape::backward.
template <class T>
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<Tensor<T>> grads, std::vector<bool> tracked)
      : grads_(std::move(grads)), tracked_(std::move(tracked)) {}

  const Tensor<T>& operator[](Var v) const {
    check(v);
    return grads_[v.id];
  }

  Tensor<T> take(Var v) {
    check(v);
    return std::move(grads_[v.id]);
  }

 private:
  void check(Var v) const {
    if (!v.valid() || v.id >= tracked_.size() || !tracked_[v.id]) {
      throw std::invalid_argument(
          "gradients: handle is not a leaf that requires grad");
    }
  }

  std::vector<Tensor<T>> grads_;
  std::vector<bool> tracked_;
};

/// Records forward values and the closures that propagate gradients back to
/// their inputs. Nodes are appended in evaluation order, so the node list is
/// topologically sorted by construction. Single-threaded.
template <class T>
class Tape {
 public:
  /// Receives the tape, the handle of the node itself, and its output gradient.
  using BackwardFn = std::function<void(Tape&, Var, const Tensor<T>&)>;

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{"leaf", std::move(value), requires_grad, true, {}});
    return Var{nodes_.size() - 1};
  }

  /// Appends an op result. Non-finite outputs are rejected here so a NaN is
  /// reported at the op that produced it.
  Var record(const char* op, Tensor<T> value, std::initializer_list<Var> inputs,
             BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string(op) + ": non-finite output");
    }
    bool rg = false;
    for (Var in : inputs) {
      check(in);
      rg = rg || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{op, std::move(value), rg, false,
                          rg ? std::move(backward) : BackwardFn{}});
    return Var{nodes_.size() - 1};
  }

  Var record(const char* op, Tensor<T> value, const std::vector<Var>& inputs,
             BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string(op) + ": non-finite output");
    }
    bool rg = false;
    for (Var in : inputs) {
      check(in);
      rg = rg || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{op, std::move(value), rg, false,
                          rg ? std::move(backward) : BackwardFn{}});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }

  const Shape& shape(Var v) const { return value(v).shape(); }

  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulator for `v` during a backward pass, or nullptr when
  /// `v` does not participate in differentiation.
  Tensor<T>* grad_slot(Var v) {
    if (!nodes_[v.id].requires_grad) return nullptr;
    auto& g = grads_[v.id];
    if (g.empty() && !nodes_[v.id].value.empty()) {
      g = Tensor<T>(nodes_[v.id].value.shape());
    }
    return &g;
  }

  /// Reverse sweep from a scalar loss. Every node is visited at most once.
  Gradients<T> backward(Var loss) {
    check(loss);
    if (nodes_[loss.id].value.size() != 1) {
      shape_fail("backward", "loss must be scalar, got shape " +
                                 shape_str(nodes_[loss.id].value.shape()));
    }
    grads_.assign(nodes_.size(), Tensor<T>{});
    if (nodes_[loss.id].requires_grad) {
      grads_[loss.id] = Tensor<T>(nodes_[loss.id].value.shape(), T{1});
    }
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.is_leaf || !node.backward || grads_[i].empty()) continue;
      node.backward(*this, Var{i}, grads_[i]);
      if (!grads_[i].all_finite()) {
        throw NumericError(std::string(node.op) + ": non-finite gradient");
      }
      grads_[i] = Tensor<T>{};
    }
    std::vector<bool> tracked(nodes_.size(), false);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].is_leaf && nodes_[i].requires_grad) {
        tracked[i] = true;
        if (grads_[i].empty()) grads_[i] = Tensor<T>(nodes_[i].value.shape());
      } else {
        grads_[i] = Tensor<T>{};
      }
    }
    return Gradients<T>(std::exchange(grads_, {}), std::move(tracked));
  }

 private:
  struct Node {
    const char* op;
    Tensor<T> value;
    bool requires_grad;
    bool is_leaf;
    BackwardFn backward;
  };

  void check(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) {
      throw std::invalid_argument("tape: handle does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

}  // namespace advclr
