#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradient_suite.hpp"
#include "ucam/error.hpp"

using namespace ucam;

TEST_CASE("every primitive matches central differences") {
  RngStream rng(10);
  for (const auto& c : test::primitive_cases()) {
    CAPTURE(c.name);
    const auto r = test::check_gradients(c.graph, c.inputs, rng);
    CHECK(r.worst_relative < 1e-6);
  }
}

TEST_CASE("elementwise closed forms") {
  Tape tape;
  const Var zero = tape.constant(Tensor::scalar(0.0));
  CHECK(softplus(zero).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(relu(tape.constant(Tensor::scalar(-1.5))).item() == 0.0);
  CHECK(std::fabs(softplus(tape.constant(Tensor::scalar(40.0))).item() - 40.0) < 1e-12);
  CHECK_THROWS_AS(elementwise(Elementwise::Add, zero), ValidationError);
  CHECK_THROWS_AS(elementwise(Elementwise::Relu, zero, zero), ValidationError);
  CHECK_THROWS_AS(log(zero), ValidationError);
}

TEST_CASE("matmul hand products") {
  Tape tape;
  const Var a = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  const Var ones = tape.constant(Tensor({2, 1}, {1, 1}));
  const Var eye = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  CHECK(matmul(a, ones).value() == Tensor({2, 1}, {3, 7}));
  CHECK(matmul(eye, a).value() == a.value());
  CHECK_THROWS_AS(matmul(a, tape.constant(Tensor::zeros({3, 1}))), ValidationError);
}

TEST_CASE("softmax and log_sum_exp values") {
  Tape tape;
  const Var c = tape.constant(Tensor::constant({4}, 2.0));
  for (double v : softmax(c, 0).value().values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  const Var z = tape.constant(Tensor({1, 2}, {0.0, 0.0}));
  CHECK(log_sum_exp(z, 1).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  // Max shift keeps large logits finite.
  const Var big = tape.constant(Tensor({2}, {1000.0, 1000.0}));
  CHECK(softmax(big, 0).value()[0] == doctest::Approx(0.5));
}

TEST_CASE("dropout contracts") {
  RngStream rng(1);
  Tape tape;
  const Var x = tape.constant(test::random_tensor({50}, rng));
  CHECK(dropout(x, 0.0, rng, true).value() == x.value());
  CHECK(dropout(x, 0.9, rng, false).value() == x.value());
  CHECK_THROWS_AS(dropout(x, 1.0, rng, true), ValidationError);

  const Var ones = tape.constant(Tensor::constant({1000000}, 1.0));
  const Tensor out = dropout(ones, 0.5, rng, true).value();
  double total = 0.0;
  for (double v : out.values()) total += v;
  CHECK(total / 1e6 == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("shape helpers") {
  Tape tape;
  const Var x = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  const Tensor tiled = tile_rows(x, 2).value();
  CHECK(tiled == Tensor({4, 2}, {1, 2, 3, 4, 1, 2, 3, 4}));
  const std::vector<std::size_t> idx{1, 0};
  CHECK(pick(x, idx).value() == Tensor({2}, {2, 3}));
  CHECK(expand_last(tape.constant(Tensor({2}, {5, 6})), 3).value() == Tensor({2, 3}, {5, 5, 5, 6, 6, 6}));
  const Var grouped = add_rowwise(tape.constant(Tensor::zeros({4, 2})), x);
  CHECK(grouped.value() == Tensor({4, 2}, {1, 2, 1, 2, 3, 4, 3, 4}));
  const Var w = tape.constant(Tensor({1, 2}, {0.25, 0.75}));
  CHECK(weighted_pool(w, x).value() == Tensor({1, 2}, {2.5, 3.5}));
  const std::vector<std::size_t> bad{5, 0};
  CHECK_THROWS_AS(pick(x, bad), ValidationError);
}
