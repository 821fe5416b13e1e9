#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradient_suite.hpp"
#include "ucam/error.hpp"
#include "ucam/uncertainty.hpp"

using namespace ucam;

namespace {

Var constant(Tape& t, Shape s, std::vector<double> v) { return t.constant(Tensor(std::move(s), std::move(v))); }

double cross_entropy(const std::vector<double>& logits, std::size_t target) {
  double m = logits[0], s = 0.0;
  for (double l : logits) m = std::max(m, l);
  for (double l : logits) s += std::exp(l - m);
  return m + std::log(s) - logits[target];
}

}  // namespace

TEST_CASE("aleatoric variance is a stable softplus") {
  Tape t;
  const Tensor v = aleatoric_variance(constant(t, {3}, {0.0, 50.0, -20.0})).value();
  CHECK(v[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(std::fabs(v[1] - 50.0) < 1e-12);
  CHECK(v[2] > 0.0);
  CHECK(v[2] == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-12));
}

TEST_CASE("perturbed logits") {
  Tape t;
  const Var logits = constant(t, {3}, {1.0, -2.0, 0.5});
  SUBCASE("vanishing variance leaves every sample at the logits") {
    RngStream rng(1);
    const Tensor s = perturb_logits(logits, constant(t, {3}, {1e-300, 1e-300, 1e-300}), rng, 25).value();
    CHECK(s.shape() == Shape{25, 3});
    for (std::size_t k = 0; k < s.size(); ++k) CHECK(s[k] == logits.value()[k % 3]);
  }
  SUBCASE("variance 4 gives standard deviation 2") {
    RngStream rng(2);
    const std::size_t n = 100000;
    const Tensor s = perturb_logits(logits, constant(t, {3}, {4.0, 1e-12, 1e-12}), rng, n).value();
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += s[i * 3];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sq += (s[i * 3] - mean) * (s[i * 3] - mean);
    CHECK(std::sqrt(sq / static_cast<double>(n - 1)) == doctest::Approx(2.0).epsilon(0.02));
  }
  SUBCASE("batched inputs stack samples as [T*B, C]") {
    RngStream rng(3);
    const Var lb = constant(t, {2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(perturb_logits(lb, constant(t, {2, 3}, {1, 1, 1, 1, 1, 1}), rng, 4).shape() == Shape{8, 3});
  }
  SUBCASE("invalid arguments") {
    RngStream rng(4);
    CHECK_THROWS_AS(perturb_logits(logits, constant(t, {3}, {1.0, 0.0, 1.0}), rng, 2), ValidationError);
    CHECK_THROWS_AS(perturb_logits(logits, constant(t, {3}, {1.0, 1.0, 1.0}), rng, 0), ValidationError);
  }
}

TEST_CASE("aleatoric loss") {
  Tape t;
  const std::vector<double> raw{2.0, -1.0, 0.5, 0.0};
  const Var logits = constant(t, {1, 4}, raw);
  const Var tiny = constant(t, {1, 4}, {1e-300, 1e-300, 1e-300, 1e-300});
  const std::vector<std::size_t> target{2};
  RngStream rng(1);
  SUBCASE("reduces to cross-entropy at vanishing variance") {
    CHECK(std::fabs(aleatoric_loss(logits, tiny, target, rng, 10).item() - cross_entropy(raw, 2)) < 1e-9);
  }
  SUBCASE("uniform logits over four classes give ln 4") {
    const Var flat = constant(t, {1, 4}, {0.3, 0.3, 0.3, 0.3});
    CHECK(aleatoric_loss(flat, tiny, target, rng, 5).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  }
  SUBCASE("noise on confident-correct logits raises the loss") {
    const Var sure = constant(t, {1, 4}, {0.0, 0.0, 5.0, 0.0});
    const double clean = aleatoric_loss(sure, tiny, target, rng, 1).item();
    const double noisy = aleatoric_loss(sure, constant(t, {1, 4}, {4, 4, 4, 4}), target, rng, 10000).item();
    CHECK(noisy > clean);
  }
  SUBCASE("a larger noise variance raises it further") {
    // Predictive mode adds the nonnegative entropy to the variance.
    const Var sure = constant(t, {1, 4}, {0.0, 0.0, 5.0, 0.0});
    RngStream a(7), b(7);
    const double aleatoric = aleatoric_loss(sure, constant(t, {1, 4}, {1, 1, 1, 1}), target, a, 10000).item();
    const double predictive = aleatoric_loss(sure, constant(t, {1, 4}, {1.6, 1.6, 1.6, 1.6}), target, b, 10000).item();
    CHECK(predictive > aleatoric);
  }
  SUBCASE("invalid target") {
    const std::vector<std::size_t> bad{4};
    CHECK_THROWS_AS(aleatoric_loss(logits, tiny, bad, rng, 2), ValidationError);
  }
}

TEST_CASE("predictive entropy") {
  const std::vector<double> one_hot{0, 1, 0}, half{0.5, 0.5}, uniform(12, 1.0 / 12.0);
  CHECK(predictive_entropy(one_hot) == 0.0);
  CHECK(predictive_entropy(half) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(predictive_entropy(uniform) == doctest::Approx(std::log(12.0)).epsilon(1e-14));
  const std::vector<double> bad{0.7, 0.7};
  CHECK_THROWS_AS(predictive_entropy(bad), ValidationError);
  RngStream rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(6);
    double total = 0.0;
    for (auto& v : p) total += v = rng.uniform() * rng.uniform();
    for (auto& v : p) v /= total;
    const double h = predictive_entropy(p);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(6.0) + 1e-15);
  }
}

TEST_CASE("predictive uncertainty is entropy plus mean variance") {
  UncertaintyEstimate e;
  e.mean_probs = {1.0, 0.0, 0.0};
  e.per_sample_variances = {{0.3, 0.3, 0.3}, {0.3, 0.3, 0.3}};
  e.entropy = 0.0;
  CHECK(predictive_uncertainty(e) == doctest::Approx(0.3).epsilon(1e-15));
  const double before = predictive_uncertainty(e);
  e.per_sample_variances[1][2] += 1e-6;
  CHECK(predictive_uncertainty(e) > before);
}

TEST_CASE("variance equalizer") {
  const std::vector<double> at{1.0, 1.0}, below{0.2, 0.9}, two{2.0};
  CHECK(variance_equalizer_loss(at, 1.0) == 0.0);
  CHECK(variance_equalizer_loss(below, 1.0) == 0.0);
  CHECK(variance_equalizer_loss(two, 1.0) == doctest::Approx(std::exp(2.0) - std::exp(1.0)).epsilon(1e-15));
  CHECK(variance_equalizer_loss(two, 1.0) == doctest::Approx(4.670774).epsilon(1e-6));
  Tape t;
  const Tensor rows = variance_equalizer_loss(constant(t, {2, 1}, {2.0, 0.5}), 1.0).value();
  CHECK(rows[0] == doctest::Approx(std::exp(2.0) - std::exp(1.0)));
  CHECK(rows[1] == 0.0);
}

TEST_CASE("uncertainty distorted loss") {
  CHECK(uncertainty_distorted_loss(1.3, 1.3, 1.0) == 0.0);
  CHECK(uncertainty_distorted_loss(2.0, 1.0, 1.0) == 1.0);
  CHECK(uncertainty_distorted_loss(0.0, 1.0, 1.0) == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-15));
  // Continuous at the junction from both sides.
  for (double eps : {1e-6, 1e-9}) {
    CHECK(std::fabs(uncertainty_distorted_loss(1.0 + eps, 1.0, 2.0)) < 2e-6);
    CHECK(std::fabs(uncertainty_distorted_loss(1.0 - eps, 1.0, 2.0)) < 4e-6);
  }
  Tape t;
  const Tensor v =
      uncertainty_distorted_loss(constant(t, {3}, {2.0, 0.0, 1.0}), constant(t, {3}, {1.0, 1.0, 1.0}), 1.0).value();
  CHECK(v[0] == 1.0);
  CHECK(v[1] == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-15));
  CHECK(v[2] == 0.0);
}

TEST_CASE("total uncertainty loss is additive and mode-checked") {
  const auto A = UncertaintyMode::Aleatoric, P = UncertaintyMode::Predictive;
  const LossBundle zero = total_uncertainty_loss(0.7, {0.0, A}, {0.0, A}, {0.0, A}, A);
  CHECK(zero.total_uncertainty == 0.0);
  const LossBundle b = total_uncertainty_loss(0.7, {1.0, P}, {0.5, P}, {0.25, P}, P);
  CHECK(b.total_uncertainty == 1.75);
  CHECK(b.mode == P);
  CHECK_THROWS_AS(total_uncertainty_loss(0.7, {1.0, P}, {0.5, A}, {0.25, P}, P), ValidationError);
  RngStream rng(5);
  for (int i = 0; i < 100; ++i) {
    const double x = rng.gaussian(), y = rng.uniform(), z = rng.gaussian();
    CHECK(total_uncertainty_loss(0.0, {x, A}, {y, A}, {z, A}, A).total_uncertainty == x + y + z);
  }
}

TEST_CASE("Monte Carlo prediction") {
  test::TinySetup s;
  const Example& ex = s.dataset.examples[0];
  SUBCASE("zero dropout reproduces the deterministic softmax") {
    ModelConfig c = s.model;
    c.dropout = 0.0;
    RngStream rng(1);
    const UncertaintyEstimate e = mc_predict(s.params, c, ex, rng, 5);
    const auto det = predict(s.params, c, std::span<const Example>(&ex, 1));
    for (std::size_t k = 0; k < c.classes; ++k) CHECK(e.mean_probs[k] == doctest::Approx(det[0].probs[k]).epsilon(1e-14));
    CHECK(e.per_sample_attention[0] == det[0].attention);
  }
  SUBCASE("estimate invariants") {
    for (std::size_t samples : {1, 3, 25}) {
      RngStream rng(samples);
      const UncertaintyEstimate e = mc_predict(s.params, s.model, ex, rng, samples);
      double total = 0.0;
      for (double p : e.mean_probs) total += p;
      CHECK(std::fabs(total - 1.0) < 1e-9);
      CHECK(e.entropy >= 0.0);
      CHECK(e.entropy <= std::log(static_cast<double>(s.model.classes)) + 1e-12);
      for (std::size_t k = 0; k < e.aleatoric_variance.size(); ++k) {
        CHECK(e.aleatoric_variance[k] > 0.0);
        CHECK(e.precision[k] == 1.0 / e.aleatoric_variance[k]);
      }
      double mean_v = 0.0;
      for (const auto& row : e.per_sample_variances)
        for (double v : row) mean_v += v;
      mean_v /= static_cast<double>(samples * s.model.classes);
      CHECK(std::fabs(e.predictive - (e.entropy + mean_v)) < 1e-12);
    }
  }
  SUBCASE("fixed seed replays bit for bit, and batching does not change results") {
    RngStream a(9), b(9);
    const auto e1 = mc_predict(s.params, s.model, ex, a, 25), e2 = mc_predict(s.params, s.model, ex, b, 25);
    CHECK(e1.per_sample_logits == e2.per_sample_logits);
    CHECK(e1.per_sample_variances == e2.per_sample_variances);
    CHECK(e1.predictive == e2.predictive);
    const auto all = mc_predict_all(s.params, s.model, s.dataset.examples, 4, 6);
    RngStream third = RngStream(4).split(2);
    CHECK(mc_predict(s.params, s.model, s.dataset.examples[2], third, 6).per_sample_logits == all[2].per_sample_logits);
  }
  SUBCASE("JSON round trip") {
    RngStream rng(2);
    const auto e = mc_predict(s.params, s.model, ex, rng, 4);
    const auto back = estimate_from_json(estimate_json(e));
    CHECK(back.mean_probs == e.mean_probs);
    CHECK(back.per_sample_variances == e.per_sample_variances);
    CHECK(back.predictive == e.predictive);
  }
  SUBCASE("zero samples is an error") {
    RngStream rng(2);
    CHECK_THROWS_AS(mc_predict(s.params, s.model, ex, rng, 0), ValidationError);
  }
}
