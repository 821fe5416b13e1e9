#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucam/rng.hpp"
#include "ucam/tensor.hpp"

namespace ucam {

// Vocabulary layout: [0, kReservedTokens) reserved, then template tokens,
// then one descriptor token per marker.
inline constexpr std::size_t kPadToken = 0;
inline constexpr std::size_t kQueryToken = 1;
inline constexpr std::size_t kReservedTokens = 2;

struct DatasetConfig {
  std::size_t grid_rows = 7;
  std::size_t grid_cols = 7;
  std::size_t feature_dim = 8;
  /// Leading feature dims that carry the marker pattern; the rest carry the attribute.
  std::size_t marker_dim = 4;
  std::size_t vocab_size = 32;
  std::size_t max_question_length = 6;
  std::size_t classes = 12;
  std::size_t templates = 4;
  std::size_t markers = 4;
  std::size_t examples = 1000;
  /// Per-coordinate uniform noise amplitude added to every cell feature.
  double feature_noise = 0.1;
  /// 0 plants one-hot attention; > 0 plants a normalized Gaussian blob of this std (cells).
  double attention_blob_sigma = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct Example {
  std::size_t id = 0;
  Tensor grid;          ///< [rows, cols, feature_dim]
  std::vector<std::size_t> question;
  std::size_t answer = 0;
  Tensor gt_attention;  ///< [rows, cols], sums to 1
  bool noisy = false;

  std::size_t cells() const { return gt_attention.size(); }
};

struct Dataset {
  DatasetConfig config;
  Tensor marker_patterns;  ///< [markers, marker_dim]
  Tensor value_patterns;   ///< [classes, feature_dim - marker_dim]
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  /// Same header, chosen examples.
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Throws ValidationError describing the first violated Example invariant.
void validate_example(const Example& ex, const DatasetConfig& config);

/// Every example: one target cell holds the queried marker and the answer's
/// attribute pattern; all other cells hold different markers and random
/// attributes. The question is [template, filler..., query, marker-descriptor].
Dataset generate(const DatasetConfig& config, std::uint64_t seed);

/// Relabels round(fraction * n) examples, chosen by a seeded shuffle prefix,
/// to a uniformly drawn wrong class and flags them noisy.
Dataset inject_label_noise(const Dataset& dataset, double fraction, RngStream& rng);

/// JSON-lines: header object on line 1, then one example per line.
void save(const Dataset& dataset, const std::filesystem::path& path);
Dataset load(const std::filesystem::path& path);

/// Seeded shuffle then contiguous partition.
std::array<Dataset, 3> split(const Dataset& dataset, const std::array<double, 3>& fractions, std::uint64_t seed);

/// Seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, RngStream& rng);

}  // namespace ucam
