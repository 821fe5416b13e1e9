#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucam/data.hpp"
#include "ucam/ops.hpp"

namespace ucam {

struct ModelConfig {
  std::size_t grid_rows = 7;
  std::size_t grid_cols = 7;
  std::size_t feature_dim = 8;
  std::size_t hidden = 32;
  std::size_t attention_dim = 32;
  std::size_t trunk = 64;
  std::size_t vocab_size = 32;
  std::size_t max_question_length = 6;
  std::size_t classes = 12;
  double dropout = 0.2;

  std::size_t cells() const { return grid_rows * grid_cols; }
  std::size_t fused_width() const { return 2 * hidden; }
  void validate() const;
  /// Extents must agree with the dataset.
  void check_compatible(const DatasetConfig& data) const;
  static ModelConfig matching(const DatasetConfig& data);
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// theta_i, theta_q, theta_f, theta_c, theta_y, theta_u.
enum class ParamGroup { Image, Question, Attention, Classifier, Logit, Variance };
inline constexpr ParamGroup kAllGroups[] = {ParamGroup::Image,      ParamGroup::Question, ParamGroup::Attention,
                                            ParamGroup::Classifier, ParamGroup::Logit,    ParamGroup::Variance};
const char* group_name(ParamGroup g);

struct Param {
  std::string name;
  ParamGroup group;
  Tensor value;

  friend bool operator==(const Param&, const Param&) = default;
};

class ModelParams {
 public:
  /// Uniform in [-s, s] with s = 1/sqrt(fan-in), seeded.
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed);

  std::vector<Param>& entries() { return entries_; }
  const std::vector<Param>& entries() const { return entries_; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t index_of(const std::string& name) const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  std::vector<Param> entries_;
};

/// Parameters placed on a tape as gradient-tracked leaves.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ModelParams& params);
  const Var& operator[](const std::string& name) const;
  const Var& operator[](std::size_t index) const { return vars_[index]; }
  std::size_t size() const { return vars_.size(); }
  const ModelParams& params() const { return *params_; }

 private:
  const ModelParams* params_;
  std::vector<Var> vars_;
};

struct ForwardTrace {
  Var g_i;           ///< [B*cells, hidden]
  Var g_q;           ///< [B, hidden]
  Var attention;     ///< [B, cells]
  Var f_i;           ///< [B, 2*hidden]
  Var trunk;         ///< [B, trunk]
  Var logits;        ///< [B, classes]
  Var raw_variance;  ///< [B, classes]
};

struct ClassifierOutput {
  Var trunk;
  Var logits;
  Var raw_variance;
};

/// grid [B*cells, d] -> tanh(grid W + b), shared across cells.
Var encode_image(const Var& grid, const BoundParams& p);
/// Embedding lookup then a gated recurrent cell, left to right. Shorter
/// questions in a batch hold their state once their tokens run out.
Var encode_question(std::span<const std::vector<std::size_t>* const> questions, const BoundParams& p,
                    const ModelConfig& config);
/// Additive attention over cells; returns (attention [B,cells], f_i [B,2h]).
std::pair<Var, Var> attend(const Var& g_i, const Var& g_q, const BoundParams& p);
ClassifierOutput classify(const Var& f_i, const BoundParams& p, double dropout_rate, RngStream& rng, bool training);

/// Batched forward pass on `tape`.
ForwardTrace forward(Tape& tape, const BoundParams& p, std::span<const Example* const> batch, const ModelConfig& config,
                     RngStream& rng, bool training);

/// Grid features of a batch as a constant [B*cells, d].
Var batch_grid(Tape& tape, std::span<const Example* const> batch, const ModelConfig& config);

struct Prediction {
  std::size_t answer = 0;
  std::vector<double> probs;
  Tensor attention;  ///< [rows, cols]
};

/// Deterministic (dropout off) predictions, evaluated in independent chunks.
std::vector<Prediction> predict(const ModelParams& params, const ModelConfig& config, std::span<const Example> examples);

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path);
nlohmann::json checkpoint_json(const ModelConfig& config, const ModelParams& params);

}  // namespace ucam
