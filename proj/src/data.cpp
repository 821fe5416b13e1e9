#include "ucam/data.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "ucam/error.hpp"

namespace ucam {

using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;
constexpr const char* kSchemaName = "ucam-dataset";

double distance(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

// Random unit vectors with pairwise distance >= min_distance.
Tensor separated_patterns(std::size_t count, std::size_t dim, double min_distance, RngStream& rng, const char* what) {
  Tensor out({count, dim});
  constexpr int kAttempts = 20000;
  for (std::size_t p = 0; p < count; ++p) {
    bool placed = false;
    for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
      double* row = out.data() + p * dim;
      double norm = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        row[i] = rng.gaussian();
        norm += row[i] * row[i];
      }
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < dim; ++i) row[i] /= norm;
      placed = true;
      for (std::size_t q = 0; q < p && placed; ++q)
        placed = distance(row, out.data() + q * dim, dim) >= min_distance;
    }
    if (!placed)
      throw ValidationError(std::string("cannot place ") + std::to_string(count) + " separated " + what +
                            " patterns in " + std::to_string(dim) + " dims; lower feature_noise or the count");
  }
  return out;
}

json tensor_rows(const Tensor& t) {
  json rows = json::array();
  const std::size_t cols = t.shape()[1];
  for (std::size_t r = 0; r < t.shape()[0]; ++r)
    rows.push_back(std::vector<double>(t.data() + r * cols, t.data() + (r + 1) * cols));
  return rows;
}

Tensor rows_tensor(const json& j, std::size_t rows, std::size_t cols, const char* field) {
  if (!j.is_array() || j.size() != rows) throw ValidationError(std::string(field) + ": expected " + std::to_string(rows) + " rows");
  std::vector<double> values;
  for (const auto& r : j) {
    if (!r.is_array() || r.size() != cols)
      throw ValidationError(std::string(field) + ": expected rows of " + std::to_string(cols));
    for (const auto& v : r) values.push_back(v.get<double>());
  }
  return Tensor({rows, cols}, std::move(values));
}

json example_to_json(const Example& ex) {
  const std::size_t rows = ex.gt_attention.shape()[0], cols = ex.gt_attention.shape()[1];
  const std::size_t d = ex.grid.shape()[2];
  json grid = json::array();
  for (std::size_t r = 0; r < rows; ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < cols; ++c) {
      const double* cell = ex.grid.data() + (r * cols + c) * d;
      row.push_back(std::vector<double>(cell, cell + d));
    }
    grid.push_back(std::move(row));
  }
  json j;
  j["id"] = ex.id;
  j["grid"] = std::move(grid);
  j["question"] = ex.question;
  j["answer"] = ex.answer;
  j["gt_attention"] = tensor_rows(ex.gt_attention);
  j["noisy"] = ex.noisy;
  return j;
}

const json& field(const json& j, const char* name) {
  auto it = j.find(name);
  if (it == j.end()) throw ValidationError(std::string("missing field '") + name + "'");
  return *it;
}

Example example_from_json(const json& j, const DatasetConfig& config) {
  Example ex;
  const std::size_t rows = config.grid_rows, cols = config.grid_cols, d = config.feature_dim;
  ex.id = field(j, "id").get<std::size_t>();

  const json& grid = field(j, "grid");
  if (!grid.is_array() || grid.size() != rows) throw ValidationError("field 'grid': expected " + std::to_string(rows) + " rows");
  std::vector<double> cells;
  cells.reserve(rows * cols * d);
  for (const auto& row : grid) {
    if (!row.is_array() || row.size() != cols)
      throw ValidationError("field 'grid': expected " + std::to_string(cols) + " columns");
    for (const auto& cell : row) {
      if (!cell.is_array() || cell.size() != d)
        throw ValidationError("field 'grid': expected " + std::to_string(d) + " features per cell");
      for (const auto& v : cell) cells.push_back(v.get<double>());
    }
  }
  ex.grid = Tensor({rows, cols, d}, std::move(cells));
  ex.question = field(j, "question").get<std::vector<std::size_t>>();
  ex.answer = field(j, "answer").get<std::size_t>();
  try {
    ex.gt_attention = rows_tensor(field(j, "gt_attention"), rows, cols, "field 'gt_attention'");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("field 'gt_attention': ") + e.what());
  }
  ex.noisy = field(j, "noisy").get<bool>();
  return ex;
}

}  // namespace

void DatasetConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("dataset config: " + what); };
  if (grid_rows == 0 || grid_cols == 0) fail("grid extents must be positive");
  if (classes < 2) fail("classes must be >= 2");
  if (examples < 1) fail("examples must be >= 1");
  if (marker_dim == 0 || marker_dim >= feature_dim) fail("marker_dim must lie in [1, feature_dim)");
  if (markers < 2) fail("markers must be >= 2");
  if (templates < 1) fail("templates must be >= 1");
  if (templates + markers > vocab_size - kReservedTokens)
    fail("templates + markers must not exceed vocab_size - " + std::to_string(kReservedTokens));
  if (max_question_length < 3) fail("max_question_length must be >= 3");
  if (!(feature_noise >= 0.0) || !std::isfinite(feature_noise)) fail("feature_noise must be finite and >= 0");
  if (!(attention_blob_sigma >= 0.0) || !std::isfinite(attention_blob_sigma)) fail("attention_blob_sigma must be >= 0");
}

void to_json(json& j, const DatasetConfig& c) {
  j = json{{"grid_rows", c.grid_rows},     {"grid_cols", c.grid_cols},
           {"feature_dim", c.feature_dim}, {"marker_dim", c.marker_dim},
           {"vocab_size", c.vocab_size},   {"max_question_length", c.max_question_length},
           {"classes", c.classes},         {"templates", c.templates},
           {"markers", c.markers},         {"examples", c.examples},
           {"feature_noise", c.feature_noise}, {"attention_blob_sigma", c.attention_blob_sigma},
           {"seed", c.seed}};
}

void from_json(const json& j, DatasetConfig& c) {
  DatasetConfig d;
  c.grid_rows = j.value("grid_rows", d.grid_rows);
  c.grid_cols = j.value("grid_cols", d.grid_cols);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.marker_dim = j.value("marker_dim", d.marker_dim);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_question_length = j.value("max_question_length", d.max_question_length);
  c.classes = j.value("classes", d.classes);
  c.templates = j.value("templates", d.templates);
  c.markers = j.value("markers", d.markers);
  c.examples = j.value("examples", d.examples);
  c.feature_noise = j.value("feature_noise", d.feature_noise);
  c.attention_blob_sigma = j.value("attention_blob_sigma", d.attention_blob_sigma);
  c.seed = j.value("seed", d.seed);
}

void validate_example(const Example& ex, const DatasetConfig& config) {
  const std::size_t rows = config.grid_rows, cols = config.grid_cols;
  if (ex.grid.shape() != Shape{rows, cols, config.feature_dim})
    throw ValidationError("grid shape " + shape_string(ex.grid.shape()) + " does not match config");
  if (ex.gt_attention.shape() != Shape{rows, cols})
    throw ValidationError("gt_attention shape " + shape_string(ex.gt_attention.shape()) + " does not match config");
  if (ex.question.empty() || ex.question.size() > config.max_question_length)
    throw ValidationError("question length " + std::to_string(ex.question.size()) + " outside [1, " +
                          std::to_string(config.max_question_length) + "]");
  for (auto t : ex.question)
    if (t >= config.vocab_size) throw ValidationError("token id " + std::to_string(t) + " >= vocab_size");
  if (ex.answer >= config.classes) throw ValidationError("answer " + std::to_string(ex.answer) + " >= classes");
  double total = 0.0;
  for (double v : ex.gt_attention.values()) {
    if (v < 0.0) throw ValidationError("gt_attention has a negative entry");
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw ValidationError("gt_attention sums to " + std::to_string(total) + ", expected 1");
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out{config, marker_patterns, value_patterns, {}};
  out.examples.reserve(indices.size());
  for (auto i : indices) out.examples.push_back(examples.at(i));
  out.config.examples = out.examples.size();
  return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

Dataset generate(const DatasetConfig& config_in, std::uint64_t seed) {
  DatasetConfig config = config_in;
  config.seed = seed;
  config.validate();

  RngStream pattern_rng = RngStream(seed).split(1);
  RngStream rng = RngStream(seed).split(2);
  const std::size_t rows = config.grid_rows, cols = config.grid_cols, cells = rows * cols;
  const std::size_t d = config.feature_dim, dm = config.marker_dim, dv = d - dm;

  // Nearest-pattern decoding stays exact while patterns sit further apart
  // than twice the largest possible noise vector.
  const double margin = 0.1;
  Dataset ds;
  ds.config = config;
  ds.marker_patterns = separated_patterns(config.markers, dm,
                                          2.0 * config.feature_noise * std::sqrt(static_cast<double>(dm)) + margin,
                                          pattern_rng, "marker");
  ds.value_patterns = separated_patterns(config.classes, dv,
                                         2.0 * config.feature_noise * std::sqrt(static_cast<double>(dv)) + margin,
                                         pattern_rng, "attribute");

  const std::size_t max_filler = config.max_question_length - 3;
  ds.examples.reserve(config.examples);
  for (std::size_t n = 0; n < config.examples; ++n) {
    Example ex;
    ex.id = n;
    const std::size_t target = rng.below(cells);
    const std::size_t marker = rng.below(config.markers);
    const std::size_t answer = rng.below(config.classes);
    const std::size_t tmpl = rng.below(config.templates);

    ex.grid = Tensor({rows, cols, d});
    for (std::size_t c = 0; c < cells; ++c) {
      std::size_t m = marker, v = answer;
      if (c != target) {
        m = (marker + 1 + rng.below(config.markers - 1)) % config.markers;
        v = rng.below(config.classes);
      }
      double* f = ex.grid.data() + c * d;
      for (std::size_t i = 0; i < dm; ++i) f[i] = ds.marker_patterns[m * dm + i];
      for (std::size_t i = 0; i < dv; ++i) f[dm + i] = ds.value_patterns[v * dv + i];
      for (std::size_t i = 0; i < d; ++i) f[i] += config.feature_noise * (2.0 * rng.uniform() - 1.0);
    }

    const std::size_t template_token = kReservedTokens + tmpl;
    const std::size_t filler = max_filler == 0 ? 0 : tmpl % (max_filler + 1);
    ex.question.assign(1 + filler, template_token);
    ex.question.push_back(kQueryToken);
    ex.question.push_back(kReservedTokens + config.templates + marker);
    ex.answer = answer;

    ex.gt_attention = Tensor({rows, cols});
    if (config.attention_blob_sigma == 0.0) {
      ex.gt_attention[target] = 1.0;
    } else {
      const double tr = static_cast<double>(target / cols), tc = static_cast<double>(target % cols);
      const double s2 = config.attention_blob_sigma * config.attention_blob_sigma;
      double total = 0.0;
      for (std::size_t c = 0; c < cells; ++c) {
        const double dr = static_cast<double>(c / cols) - tr, dc = static_cast<double>(c % cols) - tc;
        ex.gt_attention[c] = std::exp(-0.5 * (dr * dr + dc * dc) / s2);
        total += ex.gt_attention[c];
      }
      for (auto& v : ex.gt_attention.values()) v /= total;
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

Dataset inject_label_noise(const Dataset& dataset, double fraction, RngStream& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw ValidationError("noise fraction must lie in [0, 1], got " + std::to_string(fraction));
  Dataset out = dataset;
  const std::size_t n = out.examples.size();
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  const auto order = shuffled_indices(n, rng);
  const std::size_t classes = out.config.classes;
  for (std::size_t k = 0; k < count; ++k) {
    Example& ex = out.examples[order[k]];
    ex.answer = (ex.answer + 1 + rng.below(classes - 1)) % classes;
    ex.noisy = true;
  }
  return out;
}

void save(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  json header;
  header["schema"] = kSchemaName;
  header["version"] = kSchemaVersion;
  header["config"] = dataset.config;
  header["marker_patterns"] = tensor_rows(dataset.marker_patterns);
  header["value_patterns"] = tensor_rows(dataset.value_patterns);
  out << header.dump() << '\n';
  for (const auto& ex : dataset.examples) out << example_to_json(ex).dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + what);
  };

  Dataset ds;
  if (!std::getline(in, line)) {
    line_no = 1;
    fail("empty file, expected a header line");
  }
  line_no = 1;
  try {
    const json header = json::parse(line);
    if (header.value("schema", std::string{}) != kSchemaName) fail("not a ucam dataset header");
    if (header.value("version", 0) != kSchemaVersion) fail("unsupported schema version");
    ds.config = header.at("config").get<DatasetConfig>();
    ds.config.validate();
    const std::size_t dm = ds.config.marker_dim, dv = ds.config.feature_dim - dm;
    ds.marker_patterns = rows_tensor(header.at("marker_patterns"), ds.config.markers, dm, "marker_patterns");
    ds.value_patterns = rows_tensor(header.at("value_patterns"), ds.config.classes, dv, "value_patterns");
  } catch (const json::exception& e) {
    fail(std::string("malformed header: ") + e.what());
  } catch (const ValidationError& e) {
    fail(e.what());
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      Example ex = example_from_json(json::parse(line), ds.config);
      validate_example(ex, ds.config);
      ds.examples.push_back(std::move(ex));
    } catch (const json::exception& e) {
      fail(std::string("malformed example: ") + e.what());
    } catch (const ValidationError& e) {
      fail(e.what());
    }
  }
  ds.config.examples = ds.examples.size();
  return ds;
}

std::array<Dataset, 3> split(const Dataset& dataset, const std::array<double, 3>& fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ValidationError("split fractions must all be positive");
    total += f;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1, got " + std::to_string(total));
  const std::size_t n = dataset.size();
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
    throw ValidationError("split of " + std::to_string(n) + " examples leaves an empty partition");

  RngStream rng(seed);
  const auto order = shuffled_indices(n, rng);
  const std::span<const std::size_t> all(order);
  return {dataset.subset(all.subspan(0, n_train)), dataset.subset(all.subspan(n_train, n_val)),
          dataset.subset(all.subspan(n_train + n_val))};
}

}  // namespace ucam
