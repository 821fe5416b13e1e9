#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucam/data.hpp"
#include "ucam/model.hpp"
#include "ucam/optim.hpp"
#include "ucam/uncertainty.hpp"

namespace ucam {

/// Ablation lattice: SCE-only baseline, single uncertainty losses, pairs,
/// and the two full certainty-gradient variants.
enum class TrainMode { Baseline, VE, UDL, AUL, PUL, PUL_VE, PUL_UDL, AUL_VE, AUL_UDL, A_GCA, P_GCA };

inline constexpr TrainMode kAllModes[] = {TrainMode::Baseline, TrainMode::VE,      TrainMode::UDL,     TrainMode::AUL,
                                          TrainMode::PUL,      TrainMode::PUL_VE,  TrainMode::PUL_UDL, TrainMode::AUL_VE,
                                          TrainMode::AUL_UDL,  TrainMode::A_GCA,   TrainMode::P_GCA};

struct ModeComponents {
  bool distorted = false;           ///< L_p counted in L_u
  bool variance_equalizer = false;  ///< L_VE counted in L_u
  bool distorted_gap = false;       ///< L_UDL counted in L_u
  bool predictive = false;          ///< noise variance is H + mean MC variance instead of sigma_a^2
  bool inject = false;              ///< certainty gradient added at f_i

  bool any() const { return distorted || variance_equalizer || distorted_gap; }
};

ModeComponents mode_components(TrainMode mode);
std::string_view mode_label(TrainMode mode);
/// Accepts the labels "baseline", "VE", ..., "PUL+VE", "A-GCA", "P-GCA".
TrainMode parse_train_mode(std::string_view label);

enum class CertaintyNormalization { Softmax, Sum };

struct TrainConfig {
  double lambda = 1.0;
  double gamma = -10.0;
  double alpha = 1.0;
  double eta = 0.5;
  double sigma0_sq = 1.0;
  std::size_t mc_samples = 25;
  OptimizerHyper adam{3e-3, 0.95, 0.99, 1e-8};
  double sgd_lr = 0.004;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::P_GCA;
  NoiseScale noise_scale = NoiseScale::StdDev;
  CertaintyNormalization normalization = CertaintyNormalization::Softmax;
  /// Epochs between validation-cost evaluations; 0 disables.
  std::size_t validate_every = 1;
  /// Keeps the GCA modes' losses but drops the certainty term from the injected gradient.
  bool disable_certainty = false;
  /// Multiplies the certainty simplex before the residual sum. The simplex
  /// spreads unit mass over B * 2h coordinates, so its per-coordinate size
  /// depends on batch and feature width; 1 saturates the encoders at this scale.
  double certainty_weight = 0.005;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepReport {
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::string mode;
  LossBundle losses;
  std::map<std::string, double> grad_norms;
  /// Certainty gradient at f_i for the first example of the batch (empty when not injected).
  std::vector<double> certainty_grad;
  double batch_accuracy = 0.0;
  std::optional<double> validation_cost;
};

nlohmann::json report_json(const StepReport& r);

/// Per-example -log softmax(logits)[target], shape [B].
Var classification_loss(const Var& logits, std::span<const std::size_t> targets);
double classification_loss(std::span<const double> logits, std::size_t target);

/// grad' = -lambda (grad_u * grad_y); grad'' = relu(grad') + gamma relu(-grad');
/// result = softmax over all coordinates of grad'' (or grad'' / sum(grad'')).
Tensor certainty_gradient(const Tensor& grad_y, const Tensor& grad_u, double lambda, double gamma,
                          CertaintyNormalization normalization = CertaintyNormalization::Softmax);
/// Residual connection: grad_y + certainty.
Tensor combined_attention_gradient(const Tensor& grad_y, const Tensor& certainty);

/// Losses of one batch, all recorded on the caller's tape.
struct LossGraph {
  ForwardTrace trace;
  Var classification;        ///< [B]
  Var uncertainty;           ///< [B], unset when the mode has no uncertainty loss
  Var classification_mean;   ///< scalar
  Var uncertainty_mean;      ///< scalar, unset like `uncertainty`
  LossBundle bundle;         ///< batch means
};

LossGraph build_losses(Tape& tape, const BoundParams& params, std::span<const Example* const> batch,
                       const ModelConfig& model, const TrainConfig& config, RngStream& rng);

/// Everything one step computes before touching the optimizers.
struct StepGradients {
  std::vector<std::optional<Tensor>> params;  ///< aligned with ModelParams::entries()
  Tensor grad_y;                              ///< dL_y/df_i
  Tensor grad_u;                              ///< dL_u/df_i (zeros without uncertainty loss)
  std::optional<Tensor> certainty;            ///< certainty gradient, when injected
  Tensor seed;                                ///< gradient injected at f_i
  LossBundle losses;
  double batch_accuracy = 0.0;
};

StepGradients compute_step_gradients(std::span<const Example* const> batch, const ModelParams& params,
                                     const ModelConfig& model, const TrainConfig& config, RngStream& rng);

struct TrainerState {
  OptimizerState adam;
  OptimizerState sgd;
};

/// Adam for the image, question, attention, classifier and logit groups; SGD
/// for the variance head (frozen when the mode has no uncertainty loss).
StepReport train_step(std::span<const Example* const> batch, ModelParams& params, TrainerState& state,
                      const ModelConfig& model, const TrainConfig& config, RngStream& rng);

/// (1/n) sum_j [L_y^j + eta L_u^j] with the training-time stochastic forward.
double cost(std::span<const Example* const> batch, const ModelParams& params, const ModelConfig& model,
            const TrainConfig& config, RngStream& rng);

/// Mean cost over a whole dataset in batch_size chunks with a fixed stream.
double dataset_cost(const Dataset& data, const ModelParams& params, const ModelConfig& model, const TrainConfig& config);

struct TrainResult {
  ModelParams params;
  ModelParams best_params;
  std::optional<double> best_validation_cost;
  std::vector<StepReport> history;
};

using ReportSink = std::function<void(const StepReport&)>;

/// Seeded epoch loop. `sink` sees every report as soon as it exists, so a
/// partial history survives an abort.
TrainResult train(const Dataset& train_set, const Dataset* validation, const ModelConfig& model,
                  const TrainConfig& config, const ReportSink& sink = {});

/// Initial parameters used by `train` for a given seed.
ModelParams initial_params(const ModelConfig& model, std::uint64_t seed);

}  // namespace ucam
