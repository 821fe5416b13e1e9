#include "ucam/model.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>

#include "ucam/error.hpp"

namespace ucam {

using nlohmann::json;

namespace {

constexpr const char* kCheckpointFormat = "ucam-checkpoint";
constexpr int kCheckpointVersion = 1;
constexpr std::size_t kPredictChunk = 64;

struct ParamSpec {
  const char* name;
  ParamGroup group;
  Shape shape;
  std::size_t fan_in;
};

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  const std::size_t h = c.hidden, k = c.attention_dim, t = c.trunk, f = c.fused_width();
  return {
      {"image.w", ParamGroup::Image, {c.feature_dim, h}, c.feature_dim},
      {"image.b", ParamGroup::Image, {h}, c.feature_dim},
      // One-hot input: each embedding row is a fan-in-1 weight column.
      {"question.embed", ParamGroup::Question, {c.vocab_size, h}, 1},
      {"question.wz", ParamGroup::Question, {h, h}, h},
      {"question.uz", ParamGroup::Question, {h, h}, h},
      {"question.bz", ParamGroup::Question, {h}, h},
      {"question.wc", ParamGroup::Question, {h, h}, h},
      {"question.uc", ParamGroup::Question, {h, h}, h},
      {"question.bc", ParamGroup::Question, {h}, h},
      {"attention.wa", ParamGroup::Attention, {h, k}, h},
      {"attention.wb", ParamGroup::Attention, {h, k}, h},
      {"attention.b", ParamGroup::Attention, {k}, h},
      {"attention.v", ParamGroup::Attention, {k, 1}, k},
      {"classifier.w", ParamGroup::Classifier, {f, t}, f},
      {"classifier.b", ParamGroup::Classifier, {t}, f},
      {"logit.w", ParamGroup::Logit, {t, c.classes}, t},
      {"logit.b", ParamGroup::Logit, {c.classes}, t},
      {"variance.w", ParamGroup::Variance, {t, c.classes}, t},
      {"variance.b", ParamGroup::Variance, {c.classes}, t},
  };
}

}  // namespace

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Image: return "image";
    case ParamGroup::Question: return "question";
    case ParamGroup::Attention: return "attention";
    case ParamGroup::Classifier: return "classifier";
    case ParamGroup::Logit: return "logit";
    case ParamGroup::Variance: return "variance";
  }
  return "?";
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("model config: " + what); };
  if (grid_rows == 0 || grid_cols == 0 || feature_dim == 0) fail("grid extents must be positive");
  if (hidden == 0 || attention_dim == 0 || trunk == 0) fail("layer widths must be positive");
  if (vocab_size == 0 || max_question_length == 0) fail("vocabulary and question length must be positive");
  if (classes < 2) fail("classes must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

void ModelConfig::check_compatible(const DatasetConfig& d) const {
  if (d.grid_rows != grid_rows || d.grid_cols != grid_cols || d.feature_dim != feature_dim ||
      d.vocab_size != vocab_size || d.classes != classes || d.max_question_length > max_question_length)
    throw ValidationError("model and dataset configurations disagree on grid, features, vocabulary, or classes");
}

ModelConfig ModelConfig::matching(const DatasetConfig& d) {
  ModelConfig c;
  c.grid_rows = d.grid_rows;
  c.grid_cols = d.grid_cols;
  c.feature_dim = d.feature_dim;
  c.vocab_size = d.vocab_size;
  c.max_question_length = d.max_question_length;
  c.classes = d.classes;
  return c;
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"grid_rows", c.grid_rows},
           {"grid_cols", c.grid_cols},
           {"feature_dim", c.feature_dim},
           {"hidden", c.hidden},
           {"attention_dim", c.attention_dim},
           {"trunk", c.trunk},
           {"vocab_size", c.vocab_size},
           {"max_question_length", c.max_question_length},
           {"classes", c.classes},
           {"dropout", c.dropout}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.grid_rows = j.value("grid_rows", d.grid_rows);
  c.grid_cols = j.value("grid_cols", d.grid_cols);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.hidden = j.value("hidden", d.hidden);
  c.attention_dim = j.value("attention_dim", d.attention_dim);
  c.trunk = j.value("trunk", d.trunk);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_question_length = j.value("max_question_length", d.max_question_length);
  c.classes = j.value("classes", d.classes);
  c.dropout = j.value("dropout", d.dropout);
}

ModelParams ModelParams::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams out;
  RngStream rng(seed);
  for (const auto& spec : param_specs(config)) {
    Tensor t(spec.shape);
    const double s = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
    for (auto& v : t.values()) v = s * (2.0 * rng.uniform() - 1.0);
    out.entries_.push_back(Param{spec.name, spec.group, std::move(t)});
  }
  return out;
}

std::size_t ModelParams::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  throw ValidationError("unknown parameter '" + name + "'");
}

const Tensor& ModelParams::at(const std::string& name) const { return entries_[index_of(name)].value; }
Tensor& ModelParams::at(const std::string& name) { return entries_[index_of(name)].value; }

BoundParams::BoundParams(Tape& tape, const ModelParams& params) : params_(&params) {
  vars_.reserve(params.entries().size());
  for (const auto& p : params.entries()) vars_.push_back(tape.leaf(p.value));
}

const Var& BoundParams::operator[](const std::string& name) const { return vars_[params_->index_of(name)]; }

Var encode_image(const Var& grid, const BoundParams& p) {
  if (grid.value().rank() != 2 || grid.shape()[1] != p["image.w"].shape()[0])
    throw ValidationError("encode_image: grid " + shape_string(grid.shape()) + " does not match the image encoder");
  return tanh(add_rowwise(matmul(grid, p["image.w"]), p["image.b"]));
}

Var encode_question(std::span<const std::vector<std::size_t>* const> questions, const BoundParams& p,
                    const ModelConfig& config) {
  if (questions.empty()) throw ValidationError("encode_question: empty batch");
  Tape& tape = p["question.embed"].tape();
  const std::size_t b = questions.size(), h = config.hidden;
  std::size_t steps = 0;
  for (const auto* q : questions) {
    if (q->empty()) throw ValidationError("encode_question: empty token sequence");
    for (auto t : *q)
      if (t >= config.vocab_size)
        throw ValidationError("encode_question: token id " + std::to_string(t) + " >= vocabulary size " +
                              std::to_string(config.vocab_size));
    steps = std::max(steps, q->size());
  }

  Var state = tape.constant(Tensor({b, h}));
  std::vector<std::size_t> tokens(b);
  for (std::size_t t = 0; t < steps; ++t) {
    bool ragged = false;
    Tensor mask({b, h});
    for (std::size_t e = 0; e < b; ++e) {
      const bool active = t < questions[e]->size();
      tokens[e] = active ? (*questions[e])[t] : kPadToken;
      ragged = ragged || !active;
      if (active) std::fill_n(mask.data() + e * h, h, 1.0);
    }
    const Var x = gather_rows(p["question.embed"], tokens);
    const Var z = sigmoid(add_rowwise(add(matmul(x, p["question.wz"]), matmul(state, p["question.uz"])), p["question.bz"]));
    const Var cand = tanh(add_rowwise(add(matmul(x, p["question.wc"]), matmul(state, p["question.uc"])), p["question.bc"]));
    Var step = mul(z, sub(cand, state));
    if (ragged) step = mul(step, tape.constant(std::move(mask)));
    state = add(state, step);
  }
  return state;
}

std::pair<Var, Var> attend(const Var& g_i, const Var& g_q, const BoundParams& p) {
  const std::size_t h = p["attention.wa"].shape()[0];
  if (g_i.value().rank() != 2 || g_q.value().rank() != 2 || g_i.shape()[1] != h || g_q.shape()[1] != h)
    throw ValidationError("attend: embedding widths " + shape_string(g_i.shape()) + ", " + shape_string(g_q.shape()) +
                          " do not match attention weights");
  const std::size_t b = g_q.shape()[0];
  if (g_i.shape()[0] % b != 0) throw ValidationError("attend: cell rows not a multiple of the batch");
  const std::size_t cells = g_i.shape()[0] / b;

  const Var question_term = add_rowwise(matmul(g_q, p["attention.wb"]), p["attention.b"]);
  const Var hidden = tanh(add_rowwise(matmul(g_i, p["attention.wa"]), question_term));
  const Var scores = reshape(matmul(hidden, p["attention.v"]), {b, cells});
  const Var attention = softmax(scores, 1);
  const Var f_i = concat_columns(weighted_pool(attention, g_i), g_q);
  return {attention, f_i};
}

ClassifierOutput classify(const Var& f_i, const BoundParams& p, double dropout_rate, RngStream& rng, bool training) {
  if (f_i.value().rank() != 2 || f_i.shape()[1] != p["classifier.w"].shape()[0])
    throw ValidationError("classify: fused feature " + shape_string(f_i.shape()) + " does not match the classifier");
  ClassifierOutput out;
  out.trunk = dropout(relu(add_rowwise(matmul(f_i, p["classifier.w"]), p["classifier.b"])), dropout_rate, rng, training);
  out.logits = add_rowwise(matmul(out.trunk, p["logit.w"]), p["logit.b"]);
  out.raw_variance = add_rowwise(matmul(out.trunk, p["variance.w"]), p["variance.b"]);
  return out;
}

Var batch_grid(Tape& tape, std::span<const Example* const> batch, const ModelConfig& config) {
  const std::size_t cells = config.cells(), d = config.feature_dim;
  Tensor grid({batch.size() * cells, d});
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const Example& ex = *batch[e];
    if (ex.grid.shape() != Shape{config.grid_rows, config.grid_cols, d})
      throw ValidationError("example " + std::to_string(ex.id) + ": grid " + shape_string(ex.grid.shape()) +
                            " does not match the model configuration");
    std::copy_n(ex.grid.data(), cells * d, grid.data() + e * cells * d);
  }
  return tape.constant(std::move(grid));
}

ForwardTrace forward(Tape& tape, const BoundParams& p, std::span<const Example* const> batch, const ModelConfig& config,
                     RngStream& rng, bool training) {
  if (batch.empty()) throw ValidationError("forward: empty batch");
  ForwardTrace trace;
  trace.g_i = encode_image(batch_grid(tape, batch, config), p);
  std::vector<const std::vector<std::size_t>*> questions;
  questions.reserve(batch.size());
  for (const Example* ex : batch) questions.push_back(&ex->question);
  trace.g_q = encode_question(questions, p, config);
  std::tie(trace.attention, trace.f_i) = attend(trace.g_i, trace.g_q, p);
  const ClassifierOutput head = classify(trace.f_i, p, config.dropout, rng, training);
  trace.trunk = head.trunk;
  trace.logits = head.logits;
  trace.raw_variance = head.raw_variance;
  return trace;
}

std::vector<Prediction> predict(const ModelParams& params, const ModelConfig& config, std::span<const Example> examples) {
  std::vector<Prediction> out(examples.size());
  const auto chunks = static_cast<std::int64_t>((examples.size() + kPredictChunk - 1) / kPredictChunk);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t chunk = 0; chunk < chunks; ++chunk) {
    try {
      const std::size_t begin = static_cast<std::size_t>(chunk) * kPredictChunk;
      const std::size_t end = std::min(examples.size(), begin + kPredictChunk);
      std::vector<const Example*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&examples[i]);
      Tape tape;
      const BoundParams bound(tape, params);
      RngStream unused(0);
      const ForwardTrace trace = forward(tape, bound, batch, config, unused, false);
      const Var probs = softmax(trace.logits, 1);
      const std::size_t c = config.classes, cells = config.cells();
      for (std::size_t e = 0; e < batch.size(); ++e) {
        Prediction& p = out[begin + e];
        const double* pr = probs.value().data() + e * c;
        p.probs.assign(pr, pr + c);
        p.answer = static_cast<std::size_t>(std::max_element(pr, pr + c) - pr);
        p.attention = Tensor({config.grid_rows, config.grid_cols},
                             std::vector<double>(trace.attention.value().data() + e * cells,
                                                 trace.attention.value().data() + (e + 1) * cells));
      }
    } catch (...) {
#pragma omp critical(ucam_predict_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

json checkpoint_json(const ModelConfig& config, const ModelParams& params) {
  json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["model"] = config;
  json named = json::object();
  for (const auto& p : params.entries())
    named[p.name] = std::vector<double>(p.value.values().begin(), p.value.values().end());
  j["params"] = std::move(named);
  return j;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << checkpoint_json(config, params).dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": malformed checkpoint: " + e.what());
  }
  if (j.value("format", std::string{}) != kCheckpointFormat || j.value("version", 0) != kCheckpointVersion)
    throw ValidationError(path.string() + ": not a ucam checkpoint");
  ModelConfig config = j.at("model").get<ModelConfig>();
  config.validate();
  ModelParams params = ModelParams::initialize(config, 0);
  const json& named = j.at("params");
  for (auto& p : params.entries()) {
    auto it = named.find(p.name);
    if (it == named.end()) throw ValidationError(path.string() + ": missing parameter '" + p.name + "'");
    auto values = it->get<std::vector<double>>();
    if (values.size() != p.value.size())
      throw ValidationError(path.string() + ": parameter '" + p.name + "' has " + std::to_string(values.size()) +
                            " values, expected " + std::to_string(p.value.size()) + " for shape " +
                            shape_string(p.value.shape()));
    p.value = Tensor(p.value.shape(), std::move(values));
  }
  return {config, params};
}

}  // namespace ucam
