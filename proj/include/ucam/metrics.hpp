#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucam/data.hpp"
#include "ucam/model.hpp"
#include "ucam/trainer.hpp"
#include "ucam/uncertainty.hpp"

namespace ucam {

/// min(#matching annotations / 3, 1).
double vqa_accuracy(std::size_t predicted, std::span<const std::size_t> annotations);

/// Ranks 1..n with tied values sharing their mean rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Pearson correlation of average ranks. Absent when either ranking has zero variance.
std::optional<double> spearman_rank_correlation(std::span<const double> a, std::span<const double> b);

/// Nonnegative weights over a rows x cols grid.
class AttentionMap {
 public:
  /// `grid` must be [rows, cols] and nonnegative. With `normalized`, it must
  /// also sum to 1 within 1e-9.
  AttentionMap(Tensor grid, bool normalized);
  /// Divides by the total mass; throws on an all-zero grid.
  static AttentionMap normalize(Tensor grid);

  const Tensor& grid() const { return grid_; }
  bool normalized() const { return normalized_; }
  std::size_t rows() const { return grid_.extent(0); }
  std::size_t cols() const { return grid_.extent(1); }

 private:
  Tensor grid_;
  bool normalized_;
};

enum class EmdMethod { Sinkhorn, ExactSmall };

struct SinkhornOptions {
  double epsilon = 0.01;
  double tolerance = 1e-7;  ///< L1 row-marginal violation
  std::size_t max_iterations = 10000;
};

/// Largest map (cells) the exact solver accepts.
inline constexpr std::size_t kExactEmdMaxCells = 16;

/// Transport cost with Euclidean ground distance between cell centers.
double emd(const AttentionMap& a, const AttentionMap& b, EmdMethod method, const SinkhornOptions& options = {});

struct UncertaintyErrorReport {
  std::vector<double> errors;  ///< log(1 / (1 - p_miss)); +inf when p_miss = 1
  std::size_t correct = 0;
  std::size_t wrong = 0;
  std::optional<double> mean_predictive_correct;
  std::optional<double> mean_predictive_wrong;
  /// Pearson correlation of sigma_p^2 with the wrong-prediction indicator,
  /// over examples with a finite error.
  std::optional<double> point_biserial;
};

UncertaintyErrorReport uncertainty_error_report(std::span<const UncertaintyEstimate> estimates,
                                                std::span<const std::size_t> predictions,
                                                std::span<const std::size_t> targets);

struct SweepEntry {
  double fraction = 0.0;
  std::size_t train_size = 0;
  double mean_entropy = 0.0;
  double entropy_variance = 0.0;
};

/// One model per fraction, trained on a nested seeded prefix of `train_set`
/// with identical configuration; entropy from MC sampling on `heldout`.
std::vector<SweepEntry> epistemic_sweep(const Dataset& train_set, const Dataset& heldout, std::span<const double> fractions,
                                        const ModelConfig& model, const TrainConfig& config, std::size_t mc_samples);

struct AleatoricSubsetReport {
  std::optional<double> clean_mean;
  std::optional<double> noisy_mean;
  std::size_t clean_count = 0;
  std::size_t noisy_count = 0;
};

/// Mean over classes and examples of sigma_a^2, split by noise flag. A subset
/// with no members is absent; no estimates at all is an error.
AleatoricSubsetReport aleatoric_subset_report(std::span<const UncertaintyEstimate> estimates,
                                              std::span<const bool> noisy);

/// Deterministic-forward attention maps, normalized, one per example.
std::vector<AttentionMap> attention_maps(std::span<const Prediction> predictions);

struct MetricsReport {
  double accuracy = 0.0;
  std::optional<double> rank_correlation;  ///< mean over examples where defined
  std::size_t rank_correlation_count = 0;
  std::optional<double> emd;
  std::optional<UncertaintyErrorReport> uncertainty_error;
  std::optional<AleatoricSubsetReport> aleatoric_subsets;
  std::vector<SweepEntry> sweep;
};

nlohmann::json report_json(const MetricsReport& r);
nlohmann::json report_json(const UncertaintyErrorReport& r);
nlohmann::json report_json(const AleatoricSubsetReport& r);

}  // namespace ucam
