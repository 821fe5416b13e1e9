#include "ucam/tape.hpp"

#include <string>

#include "ucam/error.hpp"

namespace ucam {

const Tensor& Var::value() const {
  if (!tape_) throw ValidationError("use of an unbound Var");
  return tape_->value(id_);
}

const Tensor& GradientStore::at(NodeId id) const {
  if (!contains(id)) throw ValidationError("no gradient recorded for node " + std::to_string(id));
  return *grads_[id];
}

Tensor GradientStore::get_or_zero(const Var& v) const {
  if (contains(v.id())) return *grads_[v.id()];
  return Tensor::zeros(v.shape());
}

void GradientStore::accumulate(NodeId id, Tensor grad) {
  if (id >= grads_.size()) grads_.resize(id + 1);
  if (grads_[id])
    *grads_[id] += grad;
  else
    grads_[id] = std::move(grad);
}

std::size_t GradientStore::count() const {
  std::size_t n = 0;
  for (const auto& g : grads_) n += g.has_value();
  return n;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericalFault("non-finite value in leaf tensor");
  nodes_.push_back(Node{"leaf", {}, std::move(value), nullptr, nullptr, requires_grad});
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(const Var& v) const {
  if (!v.valid() || v.tape_ != this || v.id_ >= nodes_.size())
    throw ValidationError("Var does not belong to this tape");
}

Var Tape::record(std::string_view op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  std::vector<NodeId> ids;
  std::vector<const Tensor*> values;
  ids.reserve(inputs.size());
  values.reserve(inputs.size());
  bool needs_grad = false;
  for (const auto& v : inputs) {
    check_owned(v);
    ids.push_back(v.id_);
    values.push_back(&nodes_[v.id_].value);
    needs_grad = needs_grad || nodes_[v.id_].requires_grad;
  }
  Tensor out = forward(values);
  if (!out.all_finite()) throw NumericalFault("operation '" + std::string(op) + "' produced a non-finite value");
  nodes_.push_back(Node{op, std::move(ids), std::move(out), std::move(forward), std::move(backward), needs_grad});
  return Var(this, nodes_.size() - 1);
}

GradientStore Tape::backward(const Var& root, std::span<const Var> stop_at) const {
  check_owned(root);
  if (root.size() != 1)
    throw ValidationError("backward needs a single-element root, got shape " + shape_string(root.shape()));
  return propagate(root.id_, Tensor::constant(root.shape(), 1.0), stop_at);
}

GradientStore Tape::backward_from(const Var& node, const Tensor& seed, std::span<const Var> stop_at) const {
  check_owned(node);
  if (seed.shape() != node.shape())
    throw ValidationError("seed gradient shape " + shape_string(seed.shape()) + " does not match node shape " +
                          shape_string(node.shape()));
  return propagate(node.id_, seed, stop_at);
}

GradientStore Tape::propagate(NodeId start, Tensor seed, std::span<const Var> stop_at) const {
  std::vector<char> stop(start + 1, 0);
  for (const auto& v : stop_at) {
    check_owned(v);
    if (v.id_ <= start) stop[v.id_] = 1;
  }
  GradientStore store;
  store.accumulate(start, std::move(seed));

  std::vector<const Tensor*> in_values;
  std::vector<Tensor> scratch;
  std::vector<Tensor*> grad_in;
  for (NodeId id = start + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.backward || !node.requires_grad || stop[id] || !store.contains(id)) continue;
    const Tensor& grad_out = store.at(id);

    in_values.clear();
    scratch.clear();
    scratch.reserve(node.inputs.size());
    grad_in.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const Node& in = nodes_[node.inputs[i]];
      in_values.push_back(&in.value);
      scratch.emplace_back(in.requires_grad ? Tensor::zeros(in.value.shape()) : Tensor());
    }
    for (std::size_t i = 0; i < node.inputs.size(); ++i)
      if (nodes_[node.inputs[i]].requires_grad) grad_in[i] = &scratch[i];

    node.backward(in_values, node.value, grad_out, grad_in);

    for (std::size_t i = 0; i < node.inputs.size(); ++i)
      if (grad_in[i]) store.accumulate(node.inputs[i], std::move(scratch[i]));
  }
  return store;
}

bool Tape::replay() const {
  std::vector<const Tensor*> in_values;
  for (const Node& node : nodes_) {
    if (!node.forward) continue;
    in_values.clear();
    for (NodeId i : node.inputs) in_values.push_back(&nodes_[i].value);
    if (!(node.forward(in_values) == node.value)) return false;
  }
  return true;
}

}  // namespace ucam
