#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparseadapter/tensor.hpp"

namespace sparseadapter {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using ForwardFn = std::function<Tensor(std::span<const Tensor* const>)>;

struct BackwardContext {
  std::span<const Var> inputs;
  Var output;
  Var grad;  // gradient w.r.t. output

  bool needs(std::size_t i) const { return inputs[i].requires_grad(); }
};

// Returns one gradient per input (an invalid Var means "no contribution").
// Must be written in terms of recorded ops so that it is itself differentiable.
using BackwardFn = std::function<std::vector<Var>(const BackwardContext&)>;

struct Node {
  std::string op;
  Tensor value;
  std::vector<std::size_t> inputs;
  bool requires_grad = false;
  std::string leaf_name;  // set for named leaves only
  ForwardFn forward;      // empty for leaves
  BackwardFn backward;    // empty unless requires_grad and not a leaf
};

// Append-only record of primitive ops. Node ids are creation order, so the
// record is topologically sorted by construction.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad, std::string name = {});
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Computes forward(inputs), checks finiteness, and appends the node. The
  // backward closure is kept only when grad mode is on and an input requires grad.
  Var record(std::string_view op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  bool grad_enabled() const noexcept { return grad_enabled_; }
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  // Named leaves that require grad, in creation order.
  std::vector<Var> trainable_leaves();

  // Recomputes every non-leaf node from its inputs in recorded order.
  void replay();

 private:
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.grad_enabled()) { tape_.set_grad_enabled(false); }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

// Gradient map keyed by parameter name.
using GradMap = std::map<std::string, Tensor>;

// d(output)/d(wrt[i]) for a scalar output. With create_graph the returned
// Vars are themselves differentiable (used for second order). Inputs that do
// not influence the output get an explicit zero.
std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph = false);

// Gradients of a scalar loss w.r.t. every named leaf on its tape that requires grad.
GradMap backward(const Var& loss);

// Scalar loss over named parameter leaves, built on the given tape.
using LossFn = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

GradMap gradient(const LossFn& loss_fn, const GradMap& params);

// Hessian-vector product H(params)·v by double backward through the tape.
GradMap hvp(const LossFn& loss_fn, const GradMap& params, const GradMap& v);

}  // namespace sparseadapter
