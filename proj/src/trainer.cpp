#include "ucam/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ucam/error.hpp"

namespace ucam {

using nlohmann::json;

namespace {

constexpr std::uint64_t kInitStream = 9;
constexpr std::uint64_t kShuffleStream = 10;
constexpr std::uint64_t kStepStream = 11;
constexpr std::uint64_t kValidationStream = 12;

struct ModeEntry {
  TrainMode mode;
  std::string_view label;
  ModeComponents parts;
};

// distorted, variance_equalizer, distorted_gap, predictive, inject
constexpr ModeEntry kModeTable[] = {
    {TrainMode::Baseline, "baseline", {false, false, false, false, false}},
    {TrainMode::VE, "VE", {false, true, false, false, false}},
    {TrainMode::UDL, "UDL", {false, false, true, false, false}},
    {TrainMode::AUL, "AUL", {true, false, false, false, false}},
    {TrainMode::PUL, "PUL", {true, false, false, true, false}},
    {TrainMode::PUL_VE, "PUL+VE", {true, true, false, true, false}},
    {TrainMode::PUL_UDL, "PUL+UDL", {true, false, true, true, false}},
    {TrainMode::AUL_VE, "AUL+VE", {true, true, false, false, false}},
    {TrainMode::AUL_UDL, "AUL+UDL", {true, false, true, false, false}},
    {TrainMode::A_GCA, "A-GCA", {true, true, true, false, true}},
    {TrainMode::P_GCA, "P-GCA", {true, true, true, true, true}},
};

const ModeEntry& entry(TrainMode mode) {
  for (const auto& e : kModeTable)
    if (e.mode == mode) return e;
  throw ValidationError("unknown training mode");
}

std::vector<std::size_t> answers(std::span<const Example* const> batch) {
  std::vector<std::size_t> out;
  out.reserve(batch.size());
  for (const Example* ex : batch) out.push_back(ex->answer);
  return out;
}

double batch_mean(const Var& v) {
  double s = 0.0;
  for (double x : v.value().values()) s += x;
  return s / static_cast<double>(v.size());
}

// Noise variance for the distorted loss: sigma_a^2 per class, or the
// predictive sigma_p^2 = H(mean_t p_t) + mean_{t,c} v_{t,c} from T stochastic
// classifier passes on f_i, shared by all classes of an example.
Var noise_variance(const ForwardTrace& trace, const Var& aleatoric, const BoundParams& p, const ModelConfig& model,
                   const TrainConfig& config, RngStream& rng) {
  if (!mode_components(config.mode).predictive) return aleatoric;
  const std::size_t t = config.mc_samples, b = trace.logits.shape()[0], c = model.classes;
  const ClassifierOutput mc = classify(tile_rows(trace.f_i, t), p, model.dropout, rng, true);
  const Var mean_probs = reshape(mean_axis(reshape(softmax(mc.logits, 1), {t, b * c}), 0), {b, c});
  const Var mean_var = mean_axis(reshape(aleatoric_variance(mc.raw_variance), {t, b, c}), 0);
  const Var predictive = add(predictive_entropy(mean_probs), mean_axis(mean_var, 1));
  return expand_last(predictive, c);
}

double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return s;
}

}  // namespace

ModeComponents mode_components(TrainMode mode) { return entry(mode).parts; }

std::string_view mode_label(TrainMode mode) { return entry(mode).label; }

TrainMode parse_train_mode(std::string_view label) {
  for (const auto& e : kModeTable)
    if (e.label == label) return e.mode;
  std::string known;
  for (const auto& e : kModeTable) known += (known.empty() ? "" : ", ") + std::string(e.label);
  throw ValidationError("unknown training mode '" + std::string(label) + "' (expected one of " + known + ")");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("train config: " + what); };
  for (double v : {lambda, gamma, alpha, eta, sigma0_sq, certainty_weight, adam.lr, adam.beta1, adam.beta2, adam.epsilon, sgd_lr})
    if (!std::isfinite(v)) fail("hyperparameters must be finite");
  if (lambda <= 0.0) fail("lambda must be > 0");
  if (alpha <= 0.0) fail("alpha must be > 0");
  if (eta < 0.0) fail("eta must be >= 0");
  if (certainty_weight < 0.0) fail("certainty_weight must be >= 0");
  if (mc_samples == 0) fail("mc_samples must be >= 1");
  if (adam.lr <= 0.0 || sgd_lr <= 0.0) fail("learning rates must be > 0");
  if (adam.beta1 < 0.0 || adam.beta1 >= 1.0 || adam.beta2 < 0.0 || adam.beta2 >= 1.0) fail("Adam betas must lie in [0, 1)");
  if (adam.epsilon <= 0.0) fail("Adam epsilon must be > 0");
  if (batch_size == 0) fail("batch_size must be >= 1");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lambda", c.lambda},
           {"gamma", c.gamma},
           {"alpha", c.alpha},
           {"eta", c.eta},
           {"sigma0_sq", c.sigma0_sq},
           {"mc_samples", c.mc_samples},
           {"lr", c.adam.lr},
           {"beta1", c.adam.beta1},
           {"beta2", c.adam.beta2},
           {"adam_epsilon", c.adam.epsilon},
           {"sgd_lr", c.sgd_lr},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"seed", c.seed},
           {"mode", std::string(mode_label(c.mode))},
           {"noise_scale", c.noise_scale == NoiseScale::StdDev ? "stddev" : "variance"},
           {"normalization", c.normalization == CertaintyNormalization::Softmax ? "softmax" : "sum"},
           {"validate_every", c.validate_every},
           {"disable_certainty", c.disable_certainty},
           {"certainty_weight", c.certainty_weight}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.lambda = j.value("lambda", d.lambda);
  c.gamma = j.value("gamma", d.gamma);
  c.alpha = j.value("alpha", d.alpha);
  c.eta = j.value("eta", d.eta);
  c.sigma0_sq = j.value("sigma0_sq", d.sigma0_sq);
  c.mc_samples = j.value("mc_samples", d.mc_samples);
  c.adam.lr = j.value("lr", d.adam.lr);
  c.adam.beta1 = j.value("beta1", d.adam.beta1);
  c.adam.beta2 = j.value("beta2", d.adam.beta2);
  c.adam.epsilon = j.value("adam_epsilon", d.adam.epsilon);
  c.sgd_lr = j.value("sgd_lr", d.sgd_lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.mode = parse_train_mode(j.value("mode", std::string(mode_label(d.mode))));
  const std::string noise = j.value("noise_scale", std::string("stddev"));
  if (noise != "stddev" && noise != "variance") throw ValidationError("noise_scale must be 'stddev' or 'variance'");
  c.noise_scale = noise == "stddev" ? NoiseScale::StdDev : NoiseScale::Variance;
  const std::string norm = j.value("normalization", std::string("softmax"));
  if (norm != "softmax" && norm != "sum") throw ValidationError("normalization must be 'softmax' or 'sum'");
  c.normalization = norm == "softmax" ? CertaintyNormalization::Softmax : CertaintyNormalization::Sum;
  c.validate_every = j.value("validate_every", d.validate_every);
  c.disable_certainty = j.value("disable_certainty", d.disable_certainty);
  c.certainty_weight = j.value("certainty_weight", d.certainty_weight);
}

json report_json(const StepReport& r) {
  json j{{"epoch", r.epoch},         {"step", r.step},
         {"mode", r.mode},           {"losses", bundle_json(r.losses)},
         {"grad_norms", r.grad_norms}, {"certainty_grad", r.certainty_grad},
         {"batch_accuracy", r.batch_accuracy}};
  if (r.validation_cost) j["validation_cost"] = *r.validation_cost;
  return j;
}

Var classification_loss(const Var& logits, std::span<const std::size_t> targets) {
  if (logits.value().rank() != 2 || logits.shape()[0] != targets.size())
    throw ValidationError("classification_loss: logits " + shape_string(logits.shape()) + " for " +
                          std::to_string(targets.size()) + " targets");
  for (auto t : targets)
    if (t >= logits.shape()[1]) throw ValidationError("classification_loss: target out of range");
  return sub(log_sum_exp(logits, 1), pick(logits, targets));
}

double classification_loss(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw ValidationError("classification_loss: target out of range");
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double l : logits) s += std::exp(l - m);
  return m + std::log(s) - logits[target];
}

Tensor certainty_gradient(const Tensor& grad_y, const Tensor& grad_u, double lambda, double gamma,
                          CertaintyNormalization normalization) {
  if (grad_y.shape() != grad_u.shape())
    throw ValidationError("certainty_gradient: shapes " + shape_string(grad_y.shape()) + " and " +
                          shape_string(grad_u.shape()) + " differ");
  Tensor out(grad_y.shape());
  auto y = grad_y.values();
  auto u = grad_u.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double g = -lambda * (u[i] * y[i]);
    o[i] = std::max(g, 0.0) + gamma * std::max(-g, 0.0);
  }
  if (normalization == CertaintyNormalization::Softmax) {
    const double m = *std::max_element(o.begin(), o.end());
    double s = 0.0;
    for (auto& v : o) s += (v = std::exp(v - m));
    for (auto& v : o) v /= s;
  } else {
    double s = 0.0;
    for (double v : o) s += v;
    if (s == 0.0 || !std::isfinite(s)) throw NumericalFault("certainty_gradient: sum normalization of a zero-sum gradient");
    for (auto& v : o) v /= s;
  }
  if (!out.all_finite()) throw NumericalFault("certainty_gradient: non-finite result");
  return out;
}

Tensor combined_attention_gradient(const Tensor& grad_y, const Tensor& certainty) {
  if (grad_y.shape() != certainty.shape()) throw ValidationError("combined_attention_gradient: shape mismatch");
  Tensor out = grad_y;
  out += certainty;
  return out;
}

LossGraph build_losses(Tape& tape, const BoundParams& params, std::span<const Example* const> batch,
                       const ModelConfig& model, const TrainConfig& config, RngStream& rng) {
  if (batch.empty()) throw ValidationError("build_losses: empty batch");
  const ModeComponents parts = mode_components(config.mode);
  const std::vector<std::size_t> targets = answers(batch);

  LossGraph g;
  g.trace = forward(tape, params, batch, model, rng, true);
  g.classification = classification_loss(g.trace.logits, targets);
  g.classification_mean = mean(g.classification);
  g.bundle.classification = g.classification_mean.item();
  g.bundle.mode = parts.predictive ? UncertaintyMode::Predictive : UncertaintyMode::Aleatoric;
  if (!parts.any()) return g;

  const Var aleatoric = aleatoric_variance(g.trace.raw_variance);
  const Var variance = noise_variance(g.trace, aleatoric, params, model, config, rng);
  std::vector<Var> terms;
  Var distorted;
  if (parts.distorted || parts.distorted_gap) {
    distorted = aleatoric_loss(g.trace.logits, variance, targets, rng, config.mc_samples, config.noise_scale);
    g.bundle.distorted = batch_mean(distorted);
    if (parts.distorted) terms.push_back(distorted);
  }
  if (parts.variance_equalizer) {
    // Regularizes the learned head variances in both modes.
    const Var ve = variance_equalizer_loss(aleatoric, config.sigma0_sq);
    g.bundle.variance_equalizer = batch_mean(ve);
    terms.push_back(ve);
  }
  if (parts.distorted_gap) {
    const Var udl = uncertainty_distorted_loss(distorted, g.classification, config.alpha);
    g.bundle.distorted_gap = batch_mean(udl);
    terms.push_back(udl);
  }
  g.uncertainty = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) g.uncertainty = add(g.uncertainty, terms[i]);
  g.uncertainty_mean = mean(g.uncertainty);
  g.bundle.total_uncertainty = g.uncertainty_mean.item();
  return g;
}

StepGradients compute_step_gradients(std::span<const Example* const> batch, const ModelParams& params,
                                     const ModelConfig& model, const TrainConfig& config, RngStream& rng) {
  const ModeComponents parts = mode_components(config.mode);
  Tape tape;
  const BoundParams bound(tape, params);
  const LossGraph g = build_losses(tape, bound, batch, model, config, rng);
  const Var f = g.trace.f_i;
  const Var cut[] = {f};

  StepGradients out;
  out.losses = g.bundle;
  const GradientStore gy = tape.backward(g.classification_mean, cut);
  out.grad_y = gy.get_or_zero(f);
  std::optional<GradientStore> gu;
  if (parts.any()) {
    gu = tape.backward(g.uncertainty_mean, cut);
    out.grad_u = gu->get_or_zero(f);
  } else {
    out.grad_u = Tensor(f.shape());
  }

  if (parts.inject && !config.disable_certainty) {
    out.certainty = certainty_gradient(out.grad_y, out.grad_u, config.lambda, config.gamma, config.normalization);
    if (config.certainty_weight == 1.0) {
      out.seed = combined_attention_gradient(out.grad_y, *out.certainty);
    } else {
      Tensor scaled = *out.certainty;
      scaled *= config.certainty_weight;
      out.seed = combined_attention_gradient(out.grad_y, scaled);
    }
  } else if (parts.any() && !parts.inject) {
    out.seed = out.grad_u;
    out.seed *= config.eta;
    out.seed += out.grad_y;
  } else {
    out.seed = out.grad_y;
  }
  const GradientStore upstream = tape.backward_from(f, out.seed);

  const auto& entries = params.entries();
  out.params.resize(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Var& v = bound[i];
    switch (entries[i].group) {
      case ParamGroup::Image:
      case ParamGroup::Question:
      case ParamGroup::Attention:
        out.params[i] = upstream.get_or_zero(v);
        break;
      case ParamGroup::Classifier:
      case ParamGroup::Logit: {
        Tensor grad = gy.get_or_zero(v);
        if (gu) {
          Tensor extra = gu->get_or_zero(v);
          extra *= config.eta;
          grad += extra;
        }
        out.params[i] = std::move(grad);
        break;
      }
      case ParamGroup::Variance:
        if (gu) out.params[i] = gu->get_or_zero(v);
        break;
    }
  }

  const Tensor& logits = g.trace.logits.value();
  const std::size_t c = logits.shape()[1];
  std::size_t correct = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const double* row = logits.data() + b * c;
    if (static_cast<std::size_t>(std::max_element(row, row + c) - row) == batch[b]->answer) ++correct;
  }
  out.batch_accuracy = static_cast<double>(correct) / static_cast<double>(batch.size());
  return out;
}

StepReport train_step(std::span<const Example* const> batch, ModelParams& params, TrainerState& state,
                      const ModelConfig& model, const TrainConfig& config, RngStream& rng) {
  StepGradients grads = compute_step_gradients(batch, params, model, config, rng);

  std::vector<Tensor*> adam_params, sgd_params;
  std::vector<const Tensor*> adam_grads, sgd_grads;
  StepReport report;
  report.mode = std::string(mode_label(config.mode));
  report.losses = grads.losses;
  report.batch_accuracy = grads.batch_accuracy;
  std::map<std::string, double> norms;
  auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!grads.params[i]) continue;
    norms[group_name(entries[i].group)] += squared_norm(*grads.params[i]);
    if (entries[i].group == ParamGroup::Variance) {
      sgd_params.push_back(&entries[i].value);
      sgd_grads.push_back(&*grads.params[i]);
    } else {
      adam_params.push_back(&entries[i].value);
      adam_grads.push_back(&*grads.params[i]);
    }
  }
  for (auto& [name, sq] : norms) report.grad_norms[name] = std::sqrt(sq);

  optimizer_step(OptimizerKind::Adam, adam_params, adam_grads, state.adam, config.adam);
  if (!sgd_params.empty()) {
    OptimizerHyper sgd = config.adam;
    sgd.lr = config.sgd_lr;
    optimizer_step(OptimizerKind::Sgd, sgd_params, sgd_grads, state.sgd, sgd);
  }
  if (grads.certainty) {
    const std::size_t w = grads.certainty->shape()[1];
    report.certainty_grad.assign(grads.certainty->data(), grads.certainty->data() + w);
  }
  return report;
}

double cost(std::span<const Example* const> batch, const ModelParams& params, const ModelConfig& model,
            const TrainConfig& config, RngStream& rng) {
  Tape tape;
  const BoundParams bound(tape, params);
  const LossGraph g = build_losses(tape, bound, batch, model, config, rng);
  double total = 0.0;
  const auto ly = g.classification.value().values();
  for (std::size_t j = 0; j < ly.size(); ++j) {
    double term = ly[j];
    if (g.uncertainty.valid()) term += config.eta * g.uncertainty.value()[j];
    total += term;
  }
  return total / static_cast<double>(ly.size());
}

double dataset_cost(const Dataset& data, const ModelParams& params, const ModelConfig& model, const TrainConfig& config) {
  if (data.examples.empty()) throw ValidationError("dataset_cost: empty dataset");
  RngStream rng = RngStream(config.seed).split(kValidationStream);
  double total = 0.0;
  std::vector<const Example*> batch;
  for (std::size_t start = 0; start < data.examples.size(); start += config.batch_size) {
    batch.clear();
    const std::size_t end = std::min(start + config.batch_size, data.examples.size());
    for (std::size_t i = start; i < end; ++i) batch.push_back(&data.examples[i]);
    total += cost(batch, params, model, config, rng) * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(data.examples.size());
}

ModelParams initial_params(const ModelConfig& model, std::uint64_t seed) {
  return ModelParams::initialize(model, RngStream(seed).split(kInitStream).next_u64());
}

TrainResult train(const Dataset& train_set, const Dataset* validation, const ModelConfig& model,
                  const TrainConfig& config, const ReportSink& sink) {
  model.validate();
  config.validate();
  model.check_compatible(train_set.config);
  if (train_set.examples.empty()) throw ValidationError("train: empty training set");
  if (validation && validation->examples.empty()) throw ValidationError("train: empty validation set");

  TrainResult result;
  result.params = initial_params(model, config.seed);
  result.best_params = result.params;
  TrainerState state;
  const RngStream root(config.seed);
  RngStream shuffle_rng = root.split(kShuffleStream);
  RngStream step_rng = root.split(kStepStream);

  std::size_t step = 0;
  std::vector<const Example*> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled_indices(train_set.examples.size(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      batch.clear();
      const std::size_t end = std::min(start + config.batch_size, order.size());
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train_set.examples[order[i]]);
      StepReport report;
      try {
        report = train_step(batch, result.params, state, model, config, step_rng);
      } catch (const NumericalFault& e) {
        throw NumericalFault("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + e.what());
      }
      report.epoch = epoch;
      report.step = step++;
      const bool last = end == order.size();
      if (last && validation && config.validate_every > 0 && (epoch + 1) % config.validate_every == 0) {
        const double vc = dataset_cost(*validation, result.params, model, config);
        report.validation_cost = vc;
        if (!result.best_validation_cost || vc < *result.best_validation_cost) {
          result.best_validation_cost = vc;
          result.best_params = result.params;
        }
      }
      if (sink) sink(report);
      result.history.push_back(std::move(report));
    }
  }
  if (!result.best_validation_cost) result.best_params = result.params;
  return result;
}

}  // namespace ucam
