#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string_view>
#include <vector>

#include "mabsrec/error.hpp"
#include "mabsrec/numeric/params.hpp"
#include "mabsrec/numeric/tensor.hpp"

namespace mabsrec::numeric {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor& value() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode differentiation tape. Single-threaded; one tape per forward
/// pass. Parameter leaves flush their gradients into the owning ParamSet at
/// the end of backward(), so repeated passes accumulate.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, false, {}, nullptr, 0});
    return {this, nodes_.size() - 1};
  }

  Var parameter(ParamSet& params, std::string_view name) {
    const std::size_t index = params.index_of(name);
    nodes_.push_back(Node{params.entry(index).value, {}, recording_, false, {}, &params, index});
    return {this, nodes_.size() - 1};
  }

  /// Appends an op node. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (const Var& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id()].needs_grad;
    }
    if (!needs) backward = nullptr;
    nodes_.push_back(Node{std::move(value), {}, needs, false, std::move(backward), nullptr, 0});
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const {
    check_owner(v);
    return nodes_[v.id()].value;
  }

  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }

  /// Gradient buffer of `v`, zero-initialized on first access.
  Tensor& grad(Var v) {
    Node& n = nodes_[v.id()];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape(), 0.0);
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(Var v) const { return nodes_[v.id()].has_grad; }

  void backward(Var loss) {
    check_owner(loss);
    if (!recording_) throw InvalidArgument("backward() on a tape created without gradient recording");
    if (value(loss).size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + Tensor::shape_string(value(loss).shape()));
    }
    grad(loss).fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, n.grad);
    }
    for (Node& n : nodes_) {
      if (n.params != nullptr && n.has_grad) n.params->entry(n.param_index).grad += n.grad;
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad;
    bool has_grad;
    Backward backward;
    ParamSet* params;
    std::size_t param_index;
  };

  void check_owner(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) throw InvalidArgument("variable does not belong to this tape");
  }

  bool recording_;
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

}  // namespace mabsrec::numeric
