#include "ucam/uncertainty.hpp"

#include <cmath>
#include <exception>
#include <string>

#include "ucam/error.hpp"

namespace ucam {

using nlohmann::json;

namespace {

// Keeps log finite where a probability underflows to exactly zero; the
// product p log(p + tiny) is then 0 as required.
constexpr double kTinyProb = 1e-300;

Var as_matrix(const Var& x) {
  if (x.value().rank() == 1) return reshape(x, {1, x.shape()[0]});
  if (x.value().rank() != 2) throw ValidationError("expected a [C] or [B,C] tensor, got " + shape_string(x.shape()));
  return x;
}

}  // namespace

const char* mode_name(UncertaintyMode m) { return m == UncertaintyMode::Aleatoric ? "aleatoric" : "predictive"; }

json estimate_json(const UncertaintyEstimate& e) {
  return json{{"aleatoric_variance", e.aleatoric_variance},
              {"entropy", e.entropy},
              {"predictive", e.predictive},
              {"per_sample_variances", e.per_sample_variances},
              {"mean_probs", e.mean_probs}};
}

UncertaintyEstimate estimate_from_json(const json& j) {
  UncertaintyEstimate e;
  e.aleatoric_variance = j.at("aleatoric_variance").get<std::vector<double>>();
  e.entropy = j.at("entropy").get<double>();
  e.predictive = j.at("predictive").get<double>();
  e.per_sample_variances = j.at("per_sample_variances").get<std::vector<std::vector<double>>>();
  e.mean_probs = j.at("mean_probs").get<std::vector<double>>();
  for (double v : e.aleatoric_variance) e.precision.push_back(1.0 / v);
  return e;
}

Var aleatoric_variance(const Var& raw) { return softplus(raw); }

Var perturb_logits(const Var& logits, const Var& variance, RngStream& rng, std::size_t samples, NoiseScale noise) {
  if (samples == 0) throw ValidationError("perturb_logits: sample count must be >= 1");
  if (logits.shape() != variance.shape())
    throw ValidationError("perturb_logits: logits " + shape_string(logits.shape()) + " and variance " +
                          shape_string(variance.shape()) + " differ in shape");
  for (double v : variance.value().values())
    if (!(v > 0.0)) throw ValidationError("perturb_logits: variance must be strictly positive");
  const Var l = as_matrix(logits);
  const Var v = as_matrix(variance);
  const Var spread = noise == NoiseScale::StdDev ? sqrt(v) : v;
  const Shape stacked{samples * l.shape()[0], l.shape()[1]};
  Tensor eps(stacked);
  for (auto& e : eps.values()) e = rng.gaussian();
  return add(tile_rows(l, samples), mul(logits.tape().constant(std::move(eps)), tile_rows(spread, samples)));
}

Var aleatoric_loss(const Var& logits, const Var& variance, std::span<const std::size_t> targets, RngStream& rng,
                   std::size_t samples, NoiseScale noise) {
  if (samples == 0) throw ValidationError("aleatoric_loss: sample count must be >= 1");
  const Var l = as_matrix(logits);
  const std::size_t b = l.shape()[0], c = l.shape()[1];
  if (targets.size() != b)
    throw ValidationError("aleatoric_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(b) +
                          " rows");
  for (auto t : targets)
    if (t >= c) throw ValidationError("aleatoric_loss: target " + std::to_string(t) + " >= classes " + std::to_string(c));

  const Var perturbed = perturb_logits(l, as_matrix(variance), rng, samples, noise);
  std::vector<std::size_t> tiled;
  tiled.reserve(samples * b);
  for (std::size_t s = 0; s < samples; ++s) tiled.insert(tiled.end(), targets.begin(), targets.end());
  const Var log_probs = sub(pick(perturbed, tiled), log_sum_exp(perturbed, 1));
  const Var per_example = log_sum_exp(reshape(log_probs, {samples, b}), 0);
  return negate(add_scalar(per_example, -std::log(static_cast<double>(samples))));
}

UncertaintyEstimate mc_predict(const ModelParams& params, const ModelConfig& config, const Example& example,
                               RngStream& rng, std::size_t samples) {
  if (samples == 0) throw ValidationError("mc_predict: sample count must be >= 1");
  Tape tape;
  const BoundParams bound(tape, params);
  const std::vector<const Example*> batch(samples, &example);
  const ForwardTrace trace = forward(tape, bound, batch, config, rng, true);
  const Var probs = softmax(trace.logits, 1);
  const Var variances = aleatoric_variance(trace.raw_variance);

  const std::size_t c = config.classes, cells = config.cells();
  UncertaintyEstimate e;
  e.mean_probs.assign(c, 0.0);
  e.aleatoric_variance.assign(c, 0.0);
  for (std::size_t t = 0; t < samples; ++t) {
    const double* p = probs.value().data() + t * c;
    const double* v = variances.value().data() + t * c;
    const double* l = trace.logits.value().data() + t * c;
    e.per_sample_probs.emplace_back(p, p + c);
    e.per_sample_variances.emplace_back(v, v + c);
    e.per_sample_logits.emplace_back(l, l + c);
    const double* a = trace.attention.value().data() + t * cells;
    e.per_sample_attention.emplace_back(Shape{config.grid_rows, config.grid_cols}, std::vector<double>(a, a + cells));
    for (std::size_t k = 0; k < c; ++k) {
      e.mean_probs[k] += p[k];
      e.aleatoric_variance[k] += v[k];
    }
  }
  for (std::size_t k = 0; k < c; ++k) {
    e.mean_probs[k] /= static_cast<double>(samples);
    e.aleatoric_variance[k] /= static_cast<double>(samples);
    e.precision.push_back(1.0 / e.aleatoric_variance[k]);
  }
  e.entropy = predictive_entropy(e.mean_probs);
  e.predictive = predictive_uncertainty(e);
  return e;
}

std::vector<UncertaintyEstimate> mc_predict_all(const ModelParams& params, const ModelConfig& config,
                                                std::span<const Example> examples, std::uint64_t seed,
                                                std::size_t samples) {
  if (samples == 0) throw ValidationError("mc_predict_all: sample count must be >= 1");
  std::vector<UncertaintyEstimate> out(examples.size());
  const RngStream root(seed);
  const auto n = static_cast<std::int64_t>(examples.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t k = 0; k < n; ++k) {
    try {
      RngStream rng = root.split(static_cast<std::uint64_t>(k));
      out[static_cast<std::size_t>(k)] = mc_predict(params, config, examples[static_cast<std::size_t>(k)], rng, samples);
    } catch (...) {
#pragma omp critical(ucam_mc_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

double predictive_entropy(std::span<const double> mean_probs) {
  double total = 0.0, h = 0.0;
  for (double p : mean_probs) {
    if (p < 0.0) throw ValidationError("predictive_entropy: negative probability " + std::to_string(p));
    total += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::fabs(total - 1.0) > 1e-6)
    throw ValidationError("predictive_entropy: probabilities sum to " + std::to_string(total));
  return std::max(h, 0.0);
}

Var predictive_entropy(const Var& probs) {
  const Var p = as_matrix(probs);
  return negate(sum_axis(mul(p, log(add_scalar(p, kTinyProb))), 1));
}

double predictive_uncertainty(const UncertaintyEstimate& estimate) {
  if (estimate.per_sample_variances.empty()) throw ValidationError("predictive_uncertainty: no samples recorded");
  double acc = 0.0;
  for (const auto& sample : estimate.per_sample_variances) {
    double row = 0.0;
    for (double v : sample) row += v;
    acc += row / static_cast<double>(sample.size());
  }
  return estimate.entropy + acc / static_cast<double>(estimate.per_sample_variances.size());
}

double variance_equalizer_loss(std::span<const double> variance, double sigma0_sq) {
  const double reference = std::exp(sigma0_sq);
  double total = 0.0;
  for (double v : variance) total += std::max(std::exp(v) - reference, 0.0);
  return total;
}

Var variance_equalizer_loss(const Var& variance, double sigma0_sq) {
  const Var excess = relu(add_scalar(exp(variance), -std::exp(sigma0_sq)));
  if (variance.value().rank() == 1) return sum(excess);
  return sum_axis(excess, 1);
}

double uncertainty_distorted_loss(double distorted, double classification, double alpha) {
  const double gap = distorted - classification;
  return gap < 0.0 ? alpha * (std::exp(gap) - 1.0) : gap;
}

Var uncertainty_distorted_loss(const Var& distorted, const Var& classification, double alpha) {
  const Var gap = sub(distorted, classification);
  const Var below = negate(relu(negate(gap)));
  return add(relu(gap), scale(add_scalar(exp(below), -1.0), alpha));
}

json bundle_json(const LossBundle& b) {
  return json{{"classification", b.classification},
              {"distorted", b.distorted},
              {"variance_equalizer", b.variance_equalizer},
              {"distorted_gap", b.distorted_gap},
              {"total_uncertainty", b.total_uncertainty},
              {"mode", mode_name(b.mode)}};
}

LossBundle total_uncertainty_loss(double classification, const LossComponent& distorted,
                                  const LossComponent& variance_equalizer, const LossComponent& distorted_gap,
                                  UncertaintyMode mode) {
  for (const LossComponent* c : {&distorted, &variance_equalizer, &distorted_gap})
    if (c->mode != mode)
      throw ValidationError(std::string("total_uncertainty_loss: component computed in ") + mode_name(c->mode) +
                            " mode, bundle requested " + mode_name(mode));
  LossBundle b;
  b.classification = classification;
  b.distorted = distorted.value;
  b.variance_equalizer = variance_equalizer.value;
  b.distorted_gap = distorted_gap.value;
  b.total_uncertainty = b.distorted + b.variance_equalizer + b.distorted_gap;
  b.mode = mode;
  return b;
}

}  // namespace ucam
