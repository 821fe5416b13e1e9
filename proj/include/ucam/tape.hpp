#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "ucam/tensor.hpp"

namespace ucam {

using NodeId = std::size_t;
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }

  NodeId id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// node-id -> gradient. Gradient shapes always match the node's value shape.
class GradientStore {
 public:
  bool contains(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }
  bool contains(const Var& v) const { return contains(v.id()); }
  const Tensor& at(NodeId id) const;
  const Tensor& operator[](const Var& v) const { return at(v.id()); }
  /// Gradient, or zeros shaped like `v` when `v` was not reached.
  Tensor get_or_zero(const Var& v) const;

  void accumulate(NodeId id, Tensor grad);
  std::size_t count() const;

 private:
  std::vector<std::optional<Tensor>> grads_;
};

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers. Each op keeps its forward rule, which lets `replay()` recompute
/// every recorded value from its recorded inputs. Any non-finite output is
/// rejected with NumericalFault at record time.
class Tape {
 public:
  using Inputs = std::span<const Tensor* const>;
  using ForwardFn = std::function<Tensor(Inputs)>;
  /// grad_in[i] is null when input i does not need a gradient; otherwise it is
  /// a zero tensor shaped like input i which the rule accumulates into.
  using BackwardFn = std::function<void(Inputs in, const Tensor& out, const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var record(std::string_view op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  /// Gradients of a single-element root w.r.t. every node it depends on.
  /// Nodes in `stop_at` receive their gradient but do not propagate it further.
  GradientStore backward(const Var& root, std::span<const Var> stop_at = {}) const;
  /// Propagates `seed` as if it were dL/d(node) for some downstream loss L.
  GradientStore backward_from(const Var& node, const Tensor& seed, std::span<const Var> stop_at = {}) const;

  /// Re-runs every op's forward rule on the recorded input values and reports
  /// whether all outputs are bit-identical to the recorded ones.
  bool replay() const;

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::string_view op_name(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }

 private:
  struct Node {
    std::string_view op;
    std::vector<NodeId> inputs;
    Tensor value;
    ForwardFn forward;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_owned(const Var& v) const;
  GradientStore propagate(NodeId start, Tensor seed, std::span<const Var> stop_at) const;

  std::deque<Node> nodes_;
};

}  // namespace ucam
