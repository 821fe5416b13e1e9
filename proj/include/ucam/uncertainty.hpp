#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucam/model.hpp"
#include "ucam/ops.hpp"

namespace ucam {

/// How logit noise is scaled: by the standard deviation (the Gaussian
/// likelihood reading) or literally by the variance.
enum class NoiseScale { StdDev, Variance };

/// Aleatoric-only (A-GCA) vs predictive (P-GCA) uncertainty.
enum class UncertaintyMode { Aleatoric, Predictive };

const char* mode_name(UncertaintyMode m);

struct UncertaintyEstimate {
  std::vector<double> aleatoric_variance;                 ///< per class, mean over samples
  double entropy = 0.0;                                   ///< nats, of mean_probs
  double predictive = 0.0;                                ///< entropy + mean of per_sample_variances
  std::vector<std::vector<double>> per_sample_variances;  ///< [T][C]
  std::vector<double> mean_probs;                         ///< [C]
  std::vector<double> precision;                          ///< 1 / aleatoric_variance
  std::vector<std::vector<double>> per_sample_logits;     ///< [T][C]
  std::vector<std::vector<double>> per_sample_probs;      ///< [T][C]
  std::vector<Tensor> per_sample_attention;               ///< T maps [rows, cols]
};

/// Serializes the estimate fields aleatoric_variance, entropy, predictive,
/// per_sample_variances, mean_probs.
nlohmann::json estimate_json(const UncertaintyEstimate& e);
UncertaintyEstimate estimate_from_json(const nlohmann::json& j);

/// softplus(raw); strictly positive.
Var aleatoric_variance(const Var& raw);

/// logits and variance are [B,C] (or [C]). Returns the T perturbed copies
/// stacked as [T*B, C] (or [T, C]); rows t*B .. t*B+B-1 hold sample t:
///   logits + eps_t * sqrt(variance)   (NoiseScale::StdDev)
///   logits + eps_t * variance         (NoiseScale::Variance)
/// with eps_t ~ N(0, I) drawn independently per class.
Var perturb_logits(const Var& logits, const Var& variance, RngStream& rng, std::size_t samples,
                   NoiseScale noise = NoiseScale::StdDev);

/// Per-example distorted loss, shape [B]:
///   -log( (1/T) sum_t softmax(perturbed_t)[target] )
Var aleatoric_loss(const Var& logits, const Var& variance, std::span<const std::size_t> targets, RngStream& rng,
                   std::size_t samples, NoiseScale noise = NoiseScale::StdDev);

/// T stochastic passes (dropout active) on one example.
UncertaintyEstimate mc_predict(const ModelParams& params, const ModelConfig& config, const Example& example,
                               RngStream& rng, std::size_t samples);

/// mc_predict on every example; example k draws from RngStream(seed).split(k),
/// so results do not depend on thread count or evaluation order.
std::vector<UncertaintyEstimate> mc_predict_all(const ModelParams& params, const ModelConfig& config,
                                                std::span<const Example> examples, std::uint64_t seed,
                                                std::size_t samples);

/// -sum p log p with 0 log 0 = 0; p must lie on the simplex within 1e-6.
double predictive_entropy(std::span<const double> mean_probs);
/// Row-wise entropy of [B,C] probabilities, shape [B].
Var predictive_entropy(const Var& probs);

/// entropy + (1/T) sum_t mean_c v_{t,c}.
double predictive_uncertainty(const UncertaintyEstimate& estimate);

/// sum_c relu(exp(var_c) - exp(sigma0_sq)).
double variance_equalizer_loss(std::span<const double> variance, double sigma0_sq);
/// Row-wise on [B,C], shape [B].
Var variance_equalizer_loss(const Var& variance, double sigma0_sq);

/// d = L_p - L_y;  alpha (exp(d) - 1) if d < 0, else d.
double uncertainty_distorted_loss(double distorted, double classification, double alpha);
/// Elementwise on [B] tensors, as relu(d) + alpha (exp(-relu(-d)) - 1).
Var uncertainty_distorted_loss(const Var& distorted, const Var& classification, double alpha);

struct LossComponent {
  double value = 0.0;
  UncertaintyMode mode = UncertaintyMode::Aleatoric;
};

struct LossBundle {
  double classification = 0.0;      ///< L_y
  double distorted = 0.0;           ///< L_p
  double variance_equalizer = 0.0;  ///< L_VE
  double distorted_gap = 0.0;       ///< L_UDL
  double total_uncertainty = 0.0;   ///< L_u = L_p + L_VE + L_UDL
  UncertaintyMode mode = UncertaintyMode::Aleatoric;
};

nlohmann::json bundle_json(const LossBundle& b);

/// Throws ValidationError if any component was computed under a different mode.
LossBundle total_uncertainty_loss(double classification, const LossComponent& distorted,
                                  const LossComponent& variance_equalizer, const LossComponent& distorted_gap,
                                  UncertaintyMode mode);

}  // namespace ucam
