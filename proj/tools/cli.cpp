#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ucam/data.hpp"
#include "ucam/error.hpp"
#include "ucam/metrics.hpp"
#include "ucam/model.hpp"
#include "ucam/trainer.hpp"
#include "ucam/uncertainty.hpp"
#include "ucam/viz.hpp"

namespace ucam::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Single-label data: every simulated annotator gives the stored answer.
constexpr std::size_t kAnnotators = 10;
constexpr std::uint64_t kNoiseStream = 20;

json default_sections() {
  const ModelConfig m;
  return json{
      {"data", DatasetConfig{}},
      {"generate", {{"noise_fraction", 0.0}, {"split", {0.7, 0.15, 0.15}}}},
      {"model", {{"hidden", m.hidden}, {"attention_dim", m.attention_dim}, {"trunk", m.trunk}, {"dropout", m.dropout}}},
      {"train", TrainConfig{}},
      {"eval",
       {{"emd_method", "sinkhorn"},
        {"mc_samples", 25},
        {"seed", 1},
        {"self_check", false},
        {"sweep_fractions", {0.5, 0.75, 1.0}}}},
      {"viz", {{"width", 448}, {"height", 448}, {"kernel_size", 31}, {"sigma", 1.0}, {"gain", 0.0}}},
  };
}

std::vector<double> parse_number_list(const std::string& text, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError(key + ": '" + text + "' is not a comma-separated number list");
    }
  }
  return out;
}

// Converts a flag's text to the JSON type of the field's default value.
json coerce(const json& like, const std::string& text, const std::string& key) {
  try {
    std::size_t used = 0;
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw std::invalid_argument(text);
    }
    if (like.is_number_unsigned() || like.is_number_integer()) {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument(text);
      const auto v = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    }
    if (like.is_number()) {
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    }
  } catch (const std::exception&) {
    throw ValidationError(key + ": cannot read '" + text + "' as " + like.type_name());
  }
  if (like.is_array()) return parse_number_list(text, key);
  return text;
}

struct RunConfig {
  json sections;
  json to_echo(const std::string& verb, const json& inputs) const {
    json e = sections;
    e["verb"] = verb;
    e["inputs"] = inputs;
    return e;
  }
};

// Layers defaults <- config file <- flag overrides. Bare keys resolve to the
// first section in `order` that has them; `section.key` is always accepted.
RunConfig merge_config(const std::string& config_path, const std::vector<std::string>& extras,
                       const std::vector<std::string>& order) {
  RunConfig rc{default_sections()};
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ValidationError("cannot read config file " + config_path);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw ValidationError("config file " + config_path + ": " + e.what());
    }
    if (!file.is_object()) throw ValidationError("config file " + config_path + " must hold a JSON object");
    for (auto& [section, body] : file.items()) {
      if (!rc.sections.contains(section)) throw ValidationError("config file: unknown section '" + section + "'");
      if (!body.is_object()) throw ValidationError("config file: section '" + section + "' must be an object");
      for (auto& [key, value] : body.items()) {
        if (!rc.sections[section].contains(key))
          throw ValidationError("config file: unknown key '" + section + "." + key + "'");
        rc.sections[section][key] = value;
      }
    }
  }

  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string flag = extras[i];
    if (flag.rfind("--", 0) != 0) throw ValidationError("unexpected argument '" + flag + "'");
    flag = flag.substr(2);
    std::optional<std::string> value;
    if (auto eq = flag.find('='); eq != std::string::npos) {
      value = flag.substr(eq + 1);
      flag = flag.substr(0, eq);
    } else if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0) {
      value = extras[++i];
    }
    std::string key = flag;
    for (auto& ch : key)
      if (ch == '-') ch = '_';
    if (key == "T" || key == "samples") key = "mc_samples";
    std::string section;
    if (auto dot = key.find('.'); dot != std::string::npos) {
      section = key.substr(0, dot);
      key = key.substr(dot + 1);
      if (!rc.sections.contains(section) || !rc.sections[section].contains(key))
        throw ValidationError("unknown option --" + flag);
    } else {
      for (const auto& s : order)
        if (rc.sections[s].contains(key)) {
          section = s;
          break;
        }
      if (section.empty()) throw ValidationError("unknown option --" + flag);
    }
    json& slot = rc.sections[section][key];
    if (!value) {
      if (!slot.is_boolean()) throw ValidationError("option --" + flag + " needs a value");
      slot = true;
    } else {
      slot = coerce(slot, *value, key);
    }
  }
  return rc;
}

template <typename T>
T section_as(const RunConfig& rc, const std::string& section) {
  try {
    return rc.sections.at(section).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("config section '" + section + "': " + e.what());
  }
}

template <typename T>
T field(const RunConfig& rc, const std::string& section, const std::string& key) {
  try {
    return rc.sections.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(section + "." + key + ": " + e.what());
  }
}

ModelConfig model_config(const RunConfig& rc, const DatasetConfig& data) {
  ModelConfig m = ModelConfig::matching(data);
  m.hidden = field<std::size_t>(rc, "model", "hidden");
  m.attention_dim = field<std::size_t>(rc, "model", "attention_dim");
  m.trunk = field<std::size_t>(rc, "model", "trunk");
  m.dropout = field<double>(rc, "model", "dropout");
  m.validate();
  return m;
}

VizConfig viz_config(const RunConfig& rc) {
  VizConfig v;
  v.width = field<std::size_t>(rc, "viz", "width");
  v.height = field<std::size_t>(rc, "viz", "height");
  v.kernel_size = field<std::size_t>(rc, "viz", "kernel_size");
  v.sigma = field<double>(rc, "viz", "sigma");
  const double gain = field<double>(rc, "viz", "gain");
  if (gain < 0.0) throw ValidationError("viz.gain must be >= 0 (0 selects the peak gain)");
  if (gain > 0.0) v.gain = gain;
  if (v.kernel_size % 2 == 0) throw ValidationError("viz.kernel_size must be odd");
  if (!(v.sigma > 0.0)) throw ValidationError("viz.sigma must be > 0");
  if (v.width <= v.kernel_size || v.height <= v.kernel_size)
    throw ValidationError("viz.width and viz.height must exceed viz.kernel_size");
  return v;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ValidationError("missing --" + what);
  if (!fs::is_regular_file(path)) throw ValidationError(what + " file not found: " + path);
}

void prepare_dir(const std::string& dir) {
  if (dir.empty()) throw ValidationError("missing --out");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir);
}

std::vector<std::size_t> parse_ids(const std::string& text) {
  std::vector<std::size_t> ids;
  for (double v : parse_number_list(text, "ids")) {
    if (v < 0.0 || v != std::floor(v)) throw ValidationError("ids: '" + text + "' must list nonnegative integers");
    ids.push_back(static_cast<std::size_t>(v));
  }
  if (ids.empty()) throw ValidationError("ids: no example ids given");
  return ids;
}

std::vector<std::size_t> positions_of(const Dataset& data, const std::vector<std::size_t>& ids) {
  std::vector<std::size_t> pos;
  for (std::size_t id : ids) {
    std::size_t k = 0;
    while (k < data.examples.size() && data.examples[k].id != id) ++k;
    if (k == data.examples.size()) throw ValidationError("unknown example id " + std::to_string(id));
    pos.push_back(k);
  }
  return pos;
}

std::pair<ModelConfig, ModelParams> load_model_for(const std::string& checkpoint, const Dataset& data) {
  auto loaded = load_checkpoint(checkpoint);
  try {
    loaded.first.check_compatible(data.config);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("checkpoint does not match the dataset: ") + e.what());
  }
  return loaded;
}

// ---- verbs -----------------------------------------------------------------

struct Paths {
  std::string config, out, train, val, data, checkpoint, ids;
};

int cmd_generate(const Paths& p, const std::vector<std::string>& extras, std::ostream& out) {
  const RunConfig rc = merge_config(p.config, extras, {"generate", "data"});
  DatasetConfig dc = section_as<DatasetConfig>(rc, "data");
  dc.validate();
  const double noise = field<double>(rc, "generate", "noise_fraction");
  if (!(noise >= 0.0 && noise <= 1.0))
    throw ValidationError("noise_fraction must lie in [0, 1], got " + std::to_string(noise));
  const auto fr = field<std::vector<double>>(rc, "generate", "split");
  if (fr.size() != 3) throw ValidationError("split must list three fractions (train, val, test)");
  for (double f : fr)
    if (!(f > 0.0)) throw ValidationError("split fractions must all be positive");
  if (std::fabs(fr[0] + fr[1] + fr[2] - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
  prepare_dir(p.out);

  Dataset ds = generate(dc, dc.seed);
  if (noise > 0.0) {
    RngStream rng = RngStream(dc.seed).split(kNoiseStream);
    ds = inject_label_noise(ds, noise, rng);
  }
  const auto parts = split(ds, {fr[0], fr[1], fr[2]}, dc.seed);
  const char* names[] = {"train.jsonl", "val.jsonl", "test.jsonl"};
  std::size_t flagged = 0;
  for (const auto& ex : ds.examples) flagged += ex.noisy ? 1 : 0;
  for (std::size_t i = 0; i < 3; ++i) save(parts[i], fs::path(p.out) / names[i]);
  write_json(fs::path(p.out) / "effective_config.json", rc.to_echo("generate", {{"out", p.out}}));
  out << "generated " << ds.size() << " examples (" << parts[0].size() << " train, " << parts[1].size() << " val, "
      << parts[2].size() << " test), " << flagged << " relabeled as noise\n";
  return kExitOk;
}

int cmd_train(const Paths& p, const std::vector<std::string>& extras, std::ostream& out) {
  const RunConfig rc = merge_config(p.config, extras, {"train", "model"});
  const TrainConfig tc = section_as<TrainConfig>(rc, "train");
  tc.validate();
  require_file(p.train, "train");
  if (!p.val.empty()) require_file(p.val, "val");
  const Dataset train_set = load(p.train);
  std::optional<Dataset> val_set;
  if (!p.val.empty()) val_set = load(p.val);
  const ModelConfig mc = model_config(rc, train_set.config);
  mc.check_compatible(train_set.config);
  if (val_set) mc.check_compatible(val_set->config);
  prepare_dir(p.out);

  const fs::path dir(p.out);
  write_json(dir / "effective_config.json", rc.to_echo("train", {{"train", p.train}, {"val", p.val}, {"out", p.out}}));
  std::ofstream history(dir / "history.jsonl");
  if (!history) throw IoError("cannot open history file in " + p.out);
  const TrainResult result = train(train_set, val_set ? &*val_set : nullptr, mc, tc, [&](const StepReport& r) {
    history << report_json(r).dump() << "\n";
    history.flush();
  });
  save_checkpoint(dir / "checkpoint.json", mc, result.params);
  save_checkpoint(dir / "best.json", mc, result.best_params);
  out << "trained " << mode_label(tc.mode) << " for " << tc.epochs << " epochs (" << result.history.size()
      << " steps)";
  if (result.best_validation_cost) out << ", best validation cost " << *result.best_validation_cost;
  out << "\n";
  return kExitOk;
}

int cmd_eval(const Paths& p, const std::vector<std::string>& extras, std::ostream& out) {
  const RunConfig rc = merge_config(p.config, extras, {"eval", "train", "model"});
  const std::string method_name = field<std::string>(rc, "eval", "emd_method");
  if (method_name != "sinkhorn" && method_name != "exact")
    throw ValidationError("emd_method must be 'sinkhorn' or 'exact', got '" + method_name + "'");
  const EmdMethod method = method_name == "exact" ? EmdMethod::ExactSmall : EmdMethod::Sinkhorn;
  const auto samples = field<std::size_t>(rc, "eval", "mc_samples");
  if (samples == 0) throw ValidationError("mc_samples must be >= 1");
  const auto seed = field<std::uint64_t>(rc, "eval", "seed");
  const bool self_check = field<bool>(rc, "eval", "self_check");
  require_file(p.checkpoint, "checkpoint");
  require_file(p.data, "data");
  if (!p.train.empty()) require_file(p.train, "train");
  const Dataset data = load(p.data);
  if (data.examples.empty()) throw ValidationError("evaluation data is empty");
  const auto [mc, params] = load_model_for(p.checkpoint, data);
  if (method == EmdMethod::ExactSmall && mc.cells() > kExactEmdMaxCells)
    throw ValidationError("emd_method exact supports maps of at most " + std::to_string(kExactEmdMaxCells) +
                          " cells; these maps have " + std::to_string(mc.cells()) + ", use --emd-method sinkhorn");
  std::optional<TrainConfig> sweep_config;
  std::vector<double> sweep_fractions;
  if (!p.train.empty()) {
    sweep_config = section_as<TrainConfig>(rc, "train");
    sweep_config->validate();
    sweep_fractions = field<std::vector<double>>(rc, "eval", "sweep_fractions");
    for (double f : sweep_fractions)
      if (!(f > 0.0 && f <= 1.0)) throw ValidationError("sweep_fractions must lie in (0, 1]");
  }

  const std::vector<Prediction> preds = predict(params, mc, data.examples);
  MetricsReport report;
  double acc = 0.0, rc_sum = 0.0, emd_sum = 0.0;
  std::vector<std::size_t> predicted, targets;
  // std::vector<bool> has no contiguous storage to hand out as a span.
  const auto noisy = std::make_unique<bool[]>(preds.size());
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const Example& ex = data.examples[k];
    const std::vector<std::size_t> annotations(kAnnotators, ex.answer);
    acc += vqa_accuracy(preds[k].answer, annotations);
    const Tensor& reference = self_check ? preds[k].attention : ex.gt_attention;
    if (auto r = spearman_rank_correlation(preds[k].attention.values(), reference.values())) {
      rc_sum += *r;
      ++report.rank_correlation_count;
    }
    emd_sum += emd(AttentionMap::normalize(preds[k].attention), AttentionMap::normalize(reference), method);
    predicted.push_back(preds[k].answer);
    targets.push_back(ex.answer);
    noisy[k] = ex.noisy;
  }
  const auto n = static_cast<double>(preds.size());
  report.accuracy = acc / n;
  if (report.rank_correlation_count > 0)
    report.rank_correlation = rc_sum / static_cast<double>(report.rank_correlation_count);
  report.emd = emd_sum / n;
  const auto estimates = mc_predict_all(params, mc, data.examples, seed, samples);
  report.uncertainty_error = uncertainty_error_report(estimates, predicted, targets);
  report.aleatoric_subsets = aleatoric_subset_report(estimates, std::span<const bool>(noisy.get(), preds.size()));
  if (sweep_config) {
    const Dataset train_set = load(p.train);
    report.sweep = epistemic_sweep(train_set, data, sweep_fractions, mc, *sweep_config, samples);
  }

  json j = report_json(report);
  j["examples"] = preds.size();
  j["effective_config"] =
      rc.to_echo("eval", {{"checkpoint", p.checkpoint}, {"data", p.data}, {"train", p.train}, {"out", p.out}});
  if (p.out.empty()) {
    out << j.dump(2) << "\n";
  } else {
    if (auto parent = fs::path(p.out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_json(p.out, j);
    out << "accuracy " << report.accuracy << " over " << preds.size() << " examples, report written to " << p.out
        << "\n";
  }
  return kExitOk;
}

int cmd_mc_sample(const Paths& p, const std::vector<std::string>& extras, std::ostream& out) {
  const RunConfig rc = merge_config(p.config, extras, {"eval", "viz"});
  const auto samples = field<std::size_t>(rc, "eval", "mc_samples");
  if (samples == 0) throw ValidationError("mc_samples (T) must be >= 1");
  const auto seed = field<std::uint64_t>(rc, "eval", "seed");
  const VizConfig vc = viz_config(rc);
  require_file(p.checkpoint, "checkpoint");
  require_file(p.data, "data");
  const Dataset data = load(p.data);
  if (data.examples.empty()) throw ValidationError("data file holds no examples");
  const auto [mc, params] = load_model_for(p.checkpoint, data);
  const auto ids = p.ids.empty() ? std::vector<std::size_t>{data.examples.front().id} : parse_ids(p.ids);
  const auto pos = positions_of(data, ids);
  prepare_dir(p.out);

  const fs::path dir(p.out);
  for (std::size_t s = 0; s < pos.size(); ++s) {
    const Example& ex = data.examples[pos[s]];
    RngStream rng = RngStream(seed).split(ex.id);
    const UncertaintyEstimate e = mc_predict(params, mc, ex, rng, samples);
    json record = estimate_json(e);
    std::vector<double> sample_entropy;
    for (const auto& probs : e.per_sample_probs) sample_entropy.push_back(predictive_entropy(probs));
    record["id"] = ex.id;
    record["answer"] = ex.answer;
    record["samples"] = samples;
    record["per_sample_logits"] = e.per_sample_logits;
    record["per_sample_entropy"] = sample_entropy;
    write_json(dir / (std::to_string(ex.id) + ".mc.json"), record);
    const RasterImage base = base_image(ex, vc.width, vc.height);
    for (std::size_t t = 0; t < samples; ++t) {
      const RenderedAttention r = render_attention(AttentionMap::normalize(e.per_sample_attention[t]), base, vc);
      write_image(r.smooth, dir / (std::to_string(ex.id) + ".sample-" + std::to_string(t) + ".smoothed.pgm"),
                  ImageFormat::Pgm);
    }
  }
  write_json(dir / "effective_config.json",
             rc.to_echo("mc-sample", {{"checkpoint", p.checkpoint}, {"data", p.data}, {"ids", ids}, {"out", p.out}}));
  out << "wrote " << samples << " samples for " << pos.size() << " example(s) to " << p.out << "\n";
  return kExitOk;
}

int cmd_visualize(const Paths& p, const std::vector<std::string>& extras, std::ostream& out) {
  const RunConfig rc = merge_config(p.config, extras, {"viz"});
  const VizConfig vc = viz_config(rc);
  require_file(p.checkpoint, "checkpoint");
  require_file(p.data, "data");
  if (p.ids.empty()) throw ValidationError("missing --ids");
  const Dataset data = load(p.data);
  const auto [mc, params] = load_model_for(p.checkpoint, data);
  const auto pos = positions_of(data, parse_ids(p.ids));
  prepare_dir(p.out);

  std::vector<Example> chosen;
  for (std::size_t k : pos) chosen.push_back(data.examples[k]);
  const auto preds = predict(params, mc, chosen);
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    const RenderedAttention r = render_attention(AttentionMap::normalize(preds[k].attention),
                                                 base_image(chosen[k], vc.width, vc.height), vc);
    write_rendered(r, p.out, std::to_string(chosen[k].id));
  }
  write_json(fs::path(p.out) / "effective_config.json",
             rc.to_echo("visualize", {{"checkpoint", p.checkpoint}, {"data", p.data}, {"ids", p.ids}, {"out", p.out}}));
  out << "rendered " << chosen.size() << " example(s) to " << p.out << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Uncertainty-aware attention for grid question answering", "ucam"};
  app.require_subcommand(1);
  Paths p;
  auto* gen = app.add_subcommand("generate", "Generate a planted-attention dataset and split it");
  auto* trn = app.add_subcommand("train", "Train a model in one ablation mode");
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
  auto* mcs = app.add_subcommand("mc-sample", "Dump Monte Carlo dropout samples");
  auto* viz = app.add_subcommand("visualize", "Render attention maps");
  for (auto* sub : {gen, trn, evl, mcs, viz}) {
    sub->allow_extras();
    sub->add_option("--config", p.config, "JSON config file with sections data, generate, model, train, eval, viz");
    sub->add_option("--out", p.out, "Output directory (eval: report file)");
  }
  trn->add_option("--train", p.train, "Training data (JSON-lines)");
  trn->add_option("--val", p.val, "Validation data (JSON-lines)");
  evl->add_option("--train", p.train, "Training data for the epistemic sweep (optional)");
  for (auto* sub : {evl, mcs, viz}) {
    sub->add_option("--checkpoint", p.checkpoint, "Checkpoint JSON");
    sub->add_option("--data", p.data, "Dataset (JSON-lines)");
  }
  mcs->add_option("--ids", p.ids, "Comma-separated example ids");
  viz->add_option("--ids", p.ids, "Comma-separated example ids");
  app.footer(
      "Any other --key value pair overrides the config field of that name, e.g. --epochs 5 --mode P-GCA "
      "--noise-fraction 0.2; use --section.key to disambiguate.");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    for (auto* sub : app.get_subcommands()) {
      const auto extras = sub->remaining();
      if (sub == gen) return cmd_generate(p, extras, out);
      if (sub == trn) return cmd_train(p, extras, out);
      if (sub == evl) return cmd_eval(p, extras, out);
      if (sub == mcs) return cmd_mc_sample(p, extras, out);
      if (sub == viz) return cmd_visualize(p, extras, out);
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericalFault& e) {
    err << "numerical fault: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace ucam::cli
