#include <doctest.h>

#include <cmath>
#include <vector>

#include "ucam/error.hpp"
#include "ucam/optim.hpp"

using namespace ucam;

namespace {
void step(OptimizerKind kind, Tensor& p, const Tensor& g, OptimizerState& s, const OptimizerHyper& h) {
  Tensor* params[] = {&p};
  const Tensor* grads[] = {&g};
  optimizer_step(kind, params, grads, s, h);
}
}  // namespace

TEST_CASE("sgd p=1 g=0.5 lr=0.1 gives 0.95") {
  Tensor p = Tensor::scalar(1.0);
  OptimizerState s;
  step(OptimizerKind::Sgd, p, Tensor::scalar(0.5), s, {0.1});
  CHECK(p.item() == doctest::Approx(0.95).epsilon(1e-15));
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  Tensor p({3}, {1, -2, 3});
  const Tensor before = p;
  OptimizerState s;
  for (int i = 0; i < 5; ++i) step(OptimizerKind::Adam, p, Tensor::zeros({3}), s, {0.1});
  CHECK(p == before);
  CHECK(s.steps == 5);
}

TEST_CASE("adam minimizes x^2 from 1 within 500 steps at lr 0.01") {
  Tensor x = Tensor::scalar(1.0);
  OptimizerState s;
  for (int i = 0; i < 500; ++i) step(OptimizerKind::Adam, x, Tensor::scalar(2.0 * x.item()), s, {0.01});
  CHECK(std::fabs(x.item()) < 0.05);
}

TEST_CASE("adam first step moves by lr in the gradient sign") {
  // With bias correction the first update is lr * g / (|g| + eps).
  Tensor p({2}, {0.0, 0.0});
  OptimizerState s;
  step(OptimizerKind::Adam, p, Tensor({2}, {3.0, -0.5}), s, {0.01, 0.9, 0.999, 1e-8});
  CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("shape mismatch and non-finite gradients are rejected") {
  Tensor p = Tensor::zeros({2});
  OptimizerState s;
  CHECK_THROWS(step(OptimizerKind::Sgd, p, Tensor::zeros({3}), s, {0.1}));
}
