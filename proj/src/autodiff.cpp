#include "sparseadapter/autodiff.hpp"

#include <algorithm>

#include "sparseadapter/errors.hpp"
#include "sparseadapter/ops.hpp"

namespace sparseadapter {

const Tensor& Var::value() const { return tape_->node(id_).value; }

bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

Var Tape::leaf(Tensor value, bool requires_grad, std::string name) {
  if (!value.all_finite()) {
    throw NumericFailure("leaf" + (name.empty() ? std::string() : ":" + name), "input " + shape_to_string(value.shape()));
  }
  Node node;
  node.op = "leaf";
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.leaf_name = std::move(name);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  std::vector<const Tensor*> values;
  values.reserve(inputs.size());
  bool any_grad = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw ContractViolation(std::string(op) + ": input from a different tape");
    values.push_back(&nodes_[v.id()].value);
    any_grad = any_grad || nodes_[v.id()].requires_grad;
  }
  Tensor out = forward(values);
  if (!out.all_finite()) {
    throw NumericFailure(std::string(op), "output " + shape_to_string(out.shape()));
  }
  Node node;
  node.op = std::string(op);
  node.value = std::move(out);
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) node.inputs.push_back(v.id());
  node.requires_grad = any_grad && grad_enabled_;
  node.forward = std::move(forward);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

std::vector<Var> Tape::trainable_leaves() {
  std::vector<Var> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op == "leaf" && n.requires_grad && !n.leaf_name.empty()) out.emplace_back(this, i);
  }
  return out;
}

void Tape::replay() {
  for (Node& node : nodes_) {
    if (!node.forward) continue;
    std::vector<const Tensor*> values;
    values.reserve(node.inputs.size());
    for (std::size_t id : node.inputs) values.push_back(&nodes_[id].value);
    node.value = node.forward(values);
  }
}

std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph) {
  Tape& tape = output.tape();
  if (output.value().numel() != 1) {
    throw ContractViolation("grad: output must be a scalar, got shape " + shape_to_string(output.shape()));
  }
  const std::size_t n = output.id() + 1;

  // A node is relevant if it requires grad and lies on a path from some wrt leaf.
  std::vector<char> is_target(n, 0);
  for (const Var& w : wrt) {
    if (&w.tape() != &tape) throw ContractViolation("grad: wrt variable from a different tape");
    if (w.id() < n) is_target[w.id()] = 1;
  }
  std::vector<char> relevant(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Node& node = tape.node(i);
    if (!node.requires_grad) continue;
    if (is_target[i]) {
      relevant[i] = 1;
      continue;
    }
    relevant[i] = std::any_of(node.inputs.begin(), node.inputs.end(), [&](std::size_t j) { return relevant[j] != 0; });
  }

  const bool prev = tape.grad_enabled();
  tape.set_grad_enabled(create_graph);

  std::vector<Var> grads(n);
  if (relevant[output.id()]) grads[output.id()] = tape.constant(Tensor(output.shape(), 1.0));

  for (std::size_t i = n; i-- > 0;) {
    if (!relevant[i] || !grads[i].valid()) continue;
    const Node& node = tape.node(i);
    if (!node.backward) continue;
    std::vector<Var> inputs;
    inputs.reserve(node.inputs.size());
    for (std::size_t j : node.inputs) inputs.emplace_back(&tape, j);
    BackwardContext ctx{inputs, Var(&tape, i), grads[i]};
    std::vector<Var> input_grads;
    try {
      input_grads = node.backward(ctx);
    } catch (...) {
      tape.set_grad_enabled(prev);
      throw;
    }
    for (std::size_t k = 0; k < inputs.size() && k < input_grads.size(); ++k) {
      const std::size_t j = inputs[k].id();
      if (!relevant[j] || !input_grads[k].valid()) continue;
      grads[j] = grads[j].valid() ? ops::add(grads[j], input_grads[k]) : input_grads[k];
    }
  }
  tape.set_grad_enabled(prev);

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() < n && grads[w.id()].valid()) {
      out.push_back(grads[w.id()]);
    } else {
      out.push_back(tape.constant(Tensor(w.shape(), 0.0)));
    }
  }
  return out;
}

GradMap backward(const Var& loss) {
  if (loss.value().numel() != 1) {
    throw ContractViolation("backward: loss must be a scalar, got shape " + shape_to_string(loss.shape()));
  }
  std::vector<Var> leaves = loss.tape().trainable_leaves();
  if (leaves.empty()) throw ContractViolation("backward: no parameter requires grad");
  std::vector<Var> grads = grad(loss, leaves, false);
  GradMap out;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    out[loss.tape().node(leaves[i].id()).leaf_name] = grads[i].value();
  }
  return out;
}

namespace {

std::map<std::string, Var> bind_leaves(Tape& tape, const GradMap& params) {
  std::map<std::string, Var> leaves;
  for (const auto& [name, value] : params) leaves.emplace(name, tape.leaf(value, true, name));
  return leaves;
}

}  // namespace

GradMap gradient(const LossFn& loss_fn, const GradMap& params) {
  Tape tape;
  auto leaves = bind_leaves(tape, params);
  Var loss = loss_fn(tape, leaves);
  std::vector<Var> wrt;
  for (const auto& [name, v] : leaves) wrt.push_back(v);
  std::vector<Var> g = grad(loss, wrt, false);
  GradMap out;
  std::size_t i = 0;
  for (const auto& [name, v] : leaves) out[name] = g[i++].value();
  return out;
}

GradMap hvp(const LossFn& loss_fn, const GradMap& params, const GradMap& v) {
  if (v.size() != params.size()) throw ContractViolation("hvp: direction and point have different keys");
  for (const auto& [name, p] : params) {
    auto it = v.find(name);
    if (it == v.end()) throw ContractViolation("hvp: direction missing key '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ContractViolation("hvp: shape mismatch for '" + name + "': " + shape_to_string(it->second.shape()) +
                              " vs " + shape_to_string(p.shape()));
    }
  }

  Tape tape;
  auto leaves = bind_leaves(tape, params);
  Var loss = loss_fn(tape, leaves);
  std::vector<Var> wrt;
  for (const auto& [name, leaf] : leaves) wrt.push_back(leaf);
  std::vector<Var> g = grad(loss, wrt, true);

  // <g, v> as a differentiable scalar; its gradient is H v.
  Var inner;
  std::size_t i = 0;
  for (const auto& [name, leaf] : leaves) {
    Var term = ops::sum_all(ops::mul(g[i++], tape.constant(v.at(name))));
    inner = inner.valid() ? ops::add(inner, term) : term;
  }

  GradMap out;
  if (!inner.requires_grad()) {
    // Gradient does not depend on the parameters: the Hessian is zero.
    for (const auto& [name, p] : params) out[name] = Tensor(p.shape(), 0.0);
    return out;
  }
  std::vector<Var> hv = grad(inner, wrt, false);
  i = 0;
  for (const auto& [name, leaf] : leaves) out[name] = hv[i++].value();
  return out;
}

}  // namespace sparseadapter
