#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ucam/tensor.hpp"

namespace ucam {

enum class OptimizerKind { Adam, Sgd };

struct OptimizerHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam moments (unused by SGD). Sized lazily on the first step.
struct OptimizerState {
  std::vector<Tensor> first;
  std::vector<Tensor> second;
  std::uint64_t steps = 0;
};

/// Updates params in place. grads[i] must be non-null, finite, and shaped like params[i].
///   sgd:  p <- p - lr g
///   adam: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
///         p <- p - lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
void optimizer_step(OptimizerKind kind, std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                    OptimizerState& state, const OptimizerHyper& hyper);

}  // namespace ucam
