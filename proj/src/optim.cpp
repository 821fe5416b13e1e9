#include "ucam/optim.hpp"

#include <cmath>
#include <string>

#include "ucam/error.hpp"

namespace ucam {

void optimizer_step(OptimizerKind kind, std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                    OptimizerState& state, const OptimizerHyper& hyper) {
  if (params.size() != grads.size())
    throw ValidationError("optimizer_step: " + std::to_string(params.size()) + " parameters but " +
                          std::to_string(grads.size()) + " gradients");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i]) throw ValidationError("optimizer_step: missing gradient for parameter " + std::to_string(i));
    if (grads[i]->shape() != params[i]->shape())
      throw ValidationError("optimizer_step: gradient shape " + shape_string(grads[i]->shape()) +
                            " does not match parameter " + shape_string(params[i]->shape()));
    if (!grads[i]->all_finite())
      throw NumericalFault("optimizer_step: non-finite gradient for parameter " + std::to_string(i));
  }

  if (kind == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= hyper.lr * g[j];
    }
    ++state.steps;
    return;
  }

  if (state.first.empty()) {
    for (const Tensor* p : params) {
      state.first.emplace_back(p->shape());
      state.second.emplace_back(p->shape());
    }
  } else if (state.first.size() != params.size()) {
    throw ValidationError("optimizer_step: state was built for a different parameter set");
  }
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.first[i];
    Tensor& v = state.second[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
      p[j] -= hyper.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + hyper.epsilon);
    }
  }
}

}  // namespace ucam
