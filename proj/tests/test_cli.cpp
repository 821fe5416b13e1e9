#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "support.hpp"
#include "ucam/data.hpp"
#include "ucam/model.hpp"

using namespace ucam;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const std::filesystem::path& p) { return json::parse(slurp(p)); }

// A 3x3 task small enough for quick end-to-end runs.
void generate_small(const test::TempDir& dir, const std::string& name, std::vector<std::string> extra = {}) {
  std::vector<std::string> args{"generate", "--out", (dir / name).string(), "--examples", "100", "--grid-rows", "3",
                                "--grid-cols", "3"};
  args.insert(args.end(), extra.begin(), extra.end());
  const Outcome o = run(args);
  REQUIRE_MESSAGE(o.code == 0, o.err);
}

}  // namespace

TEST_CASE("generate") {
  test::TempDir dir("cli-gen");
  SUBCASE("default config writes the three splits and the effective config") {
    const Outcome o = run({"generate", "--out", (dir / "d").string()});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "effective_config.json"})
      CHECK(std::filesystem::is_regular_file(dir / "d" / f));
    const json cfg = read_json(dir / "d" / "effective_config.json");
    CHECK(cfg["data"]["examples"] == DatasetConfig{}.examples);
    CHECK(load(dir / "d" / "train.jsonl").size() == 700);
  }
  SUBCASE("noise fraction flags that share of all examples") {
    generate_small(dir, "n", {"--noise-fraction", "0.2"});
    std::size_t flagged = 0, total = 0;
    for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl"})
      for (const auto& ex : load(dir / "n" / f).examples) {
        flagged += ex.noisy ? 1 : 0;
        ++total;
      }
    CHECK(total == 100);
    CHECK(flagged == 20);
  }
  SUBCASE("invalid fraction exits with a validation error naming the field") {
    const Outcome o = run({"generate", "--out", (dir / "bad").string(), "--noise-fraction", "1.5"});
    CHECK(o.code == cli::kExitValidation);
    CHECK(o.err.find("noise_fraction") != std::string::npos);
    CHECK_FALSE(std::filesystem::exists(dir / "bad"));
  }
  SUBCASE("generation is byte-identical for the same seed") {
    generate_small(dir, "a");
    generate_small(dir, "b");
    CHECK(slurp(dir / "a" / "train.jsonl") == slurp(dir / "b" / "train.jsonl"));
  }
  SUBCASE("config files and section-qualified flags") {
    std::ofstream(dir / "c.json") << R"({"data": {"examples": 40, "seed": 3}, "generate": {"split": [0.5, 0.25, 0.25]}})";
    const Outcome o = run({"generate", "--config", (dir / "c.json").string(), "--out", (dir / "c").string(),
                           "--data.feature-noise", "0.2"});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    const Dataset train = load(dir / "c" / "train.jsonl");
    CHECK(train.size() == 20);
    CHECK(train.config.feature_noise == 0.2);
    CHECK(train.config.seed == 3);
  }
  SUBCASE("unknown keys are rejected") {
    const Outcome flag = run({"generate", "--out", (dir / "u").string(), "--colour", "3"});
    CHECK(flag.code == cli::kExitValidation);
    CHECK(flag.err.find("--colour") != std::string::npos);
    std::ofstream(dir / "u.json") << R"({"data": {"colour": 1}})";
    const Outcome file = run({"generate", "--config", (dir / "u.json").string(), "--out", (dir / "u").string()});
    CHECK(file.code == cli::kExitValidation);
    CHECK(file.err.find("data.colour") != std::string::npos);
    const Outcome type = run({"generate", "--out", (dir / "u").string(), "--examples", "many"});
    CHECK(type.code == cli::kExitValidation);
  }
}

TEST_CASE("train, eval, mc-sample and visualize on a small task") {
  test::TempDir dir("cli-flow");
  generate_small(dir, "d");
  const std::string train_file = (dir / "d" / "train.jsonl").string(), val_file = (dir / "d" / "val.jsonl").string();

  SUBCASE("one baseline epoch is fast and reproducible") {
    const auto start = std::chrono::steady_clock::now();
    const Outcome a = run({"train", "--train", train_file, "--val", val_file, "--out", (dir / "a").string(), "--mode",
                           "baseline", "--epochs", "1"});
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    REQUIRE_MESSAGE(a.code == 0, a.err);
    CHECK(seconds < 30.0);
    const Outcome b = run({"train", "--train", train_file, "--val", val_file, "--out", (dir / "b").string(), "--mode",
                           "baseline", "--epochs", "1"});
    REQUIRE(b.code == 0);
    CHECK(slurp(dir / "a" / "checkpoint.json") == slurp(dir / "b" / "checkpoint.json"));
    CHECK(std::filesystem::is_regular_file(dir / "a" / "best.json"));
    CHECK(read_json(dir / "a" / "effective_config.json")["train"]["mode"] == "baseline");
  }
  SUBCASE("P-GCA history lines carry every loss component") {
    const Outcome o = run({"train", "--train", train_file, "--out", (dir / "p").string(), "--mode", "P-GCA", "--epochs",
                           "2", "--mc-samples", "5"});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    std::ifstream history(dir / "p" / "history.jsonl");
    std::string line;
    std::size_t lines = 0;
    bool gap_nonzero = false;
    while (std::getline(history, line)) {
      const json j = json::parse(line);
      CHECK(j["mode"] == "P-GCA");
      for (const char* k : {"classification", "distorted", "variance_equalizer", "distorted_gap", "total_uncertainty"})
        CHECK(j["losses"].contains(k));
      CHECK(j["losses"]["variance_equalizer"].get<double>() >= 0.0);
      gap_nonzero = gap_nonzero || j["losses"]["distorted_gap"].get<double>() != 0.0;
      CHECK(j["certainty_grad"].size() == 64);
      ++lines;
    }
    CHECK(lines == 6);  // 70 examples in batches of 32, two epochs
    CHECK(gap_nonzero);
  }
  SUBCASE("invalid train settings fail before writing anything") {
    const Outcome mode = run({"train", "--train", train_file, "--out", (dir / "x").string(), "--mode", "GCA"});
    CHECK(mode.code == cli::kExitValidation);
    CHECK(mode.err.find("GCA") != std::string::npos);
    const Outcome missing = run({"train", "--train", (dir / "none.jsonl").string(), "--out", (dir / "x").string()});
    CHECK(missing.code == cli::kExitValidation);
    CHECK_FALSE(std::filesystem::exists(dir / "x"));
  }

  // Shared checkpoint for the evaluation verbs; dropout 0 makes MC samples deterministic.
  const Outcome trained = run({"train", "--train", train_file, "--out", (dir / "m").string(), "--mode", "baseline",
                               "--epochs", "3", "--dropout", "0"});
  REQUIRE_MESSAGE(trained.code == 0, trained.err);
  const std::string ckpt = (dir / "m" / "checkpoint.json").string();

  SUBCASE("eval reports bounded metrics, exact EMD on 3x3, and self-check rank correlation 1") {
    const Outcome o = run({"eval", "--checkpoint", ckpt, "--data", val_file, "--out", (dir / "r.json").string(),
                           "--emd-method", "exact", "--mc-samples", "4"});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    const json r = read_json(dir / "r.json");
    CHECK(r["accuracy"].get<double>() >= 0.0);
    CHECK(r["accuracy"].get<double>() <= 1.0);
    CHECK(r["emd"].get<double>() >= 0.0);
    CHECK(r["examples"] == 15);
    CHECK(r["effective_config"]["eval"]["emd_method"] == "exact");
    CHECK(r.contains("uncertainty_error"));
    CHECK(r["aleatoric_subsets"]["clean_count"] == 15);

    const Outcome self = run({"eval", "--checkpoint", ckpt, "--data", val_file, "--self-check", "--mc-samples", "2"});
    REQUIRE_MESSAGE(self.code == 0, self.err);
    const json s = json::parse(self.out);
    CHECK(s["rank_correlation"].get<double>() == 1.0);
    CHECK(s["emd"].get<double>() < 1e-6);
  }
  SUBCASE("exact EMD on larger maps is refused with advice") {
    test::TempDir big("cli-big");
    REQUIRE(run({"generate", "--out", big.path().string(), "--examples", "30"}).code == 0);
    REQUIRE(run({"train", "--train", (big / "train.jsonl").string(), "--out", (big / "m").string(), "--mode",
                 "baseline", "--epochs", "1"})
                .code == 0);
    const Outcome o = run({"eval", "--checkpoint", (big / "m" / "checkpoint.json").string(), "--data",
                           (big / "val.jsonl").string(), "--emd-method", "exact"});
    CHECK(o.code == cli::kExitValidation);
    CHECK(o.err.find("sinkhorn") != std::string::npos);
  }
  SUBCASE("mc-sample with one sample and no dropout equals the deterministic forward") {
    const Dataset val = load(val_file);
    const std::size_t id = val.examples[2].id;
    const Outcome o = run({"mc-sample", "--checkpoint", ckpt, "--data", val_file, "--ids", std::to_string(id), "--T",
                           "1", "--out", (dir / "mc").string()});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    const json j = read_json(dir / "mc" / (std::to_string(id) + ".mc.json"));
    const auto [mc, params] = load_checkpoint(ckpt);
    const auto det = predict(params, mc, std::span<const Example>(&val.examples[2], 1));
    const auto probs = j["mean_probs"].get<std::vector<double>>();
    for (std::size_t k = 0; k < probs.size(); ++k) CHECK(probs[k] == doctest::Approx(det[0].probs[k]).epsilon(1e-12));
    CHECK(std::filesystem::is_regular_file(dir / "mc" / (std::to_string(id) + ".sample-0.smoothed.pgm")));
  }
  SUBCASE("mc-sample defaults to 25 samples with bounded entropies") {
    const Outcome o = run({"mc-sample", "--checkpoint", ckpt, "--data", val_file, "--out", (dir / "mc25").string()});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    const std::size_t id = load(val_file).examples[0].id;
    const json j = read_json(dir / "mc25" / (std::to_string(id) + ".mc.json"));
    CHECK(j["samples"] == 25);
    CHECK(j["per_sample_entropy"].size() == 25);
    for (double h : j["per_sample_entropy"]) {
      CHECK(h >= 0.0);
      CHECK(h <= std::log(12.0) + 1e-12);
    }
    CHECK(std::filesystem::is_regular_file(dir / "mc25" / (std::to_string(id) + ".sample-24.smoothed.pgm")));
  }
  SUBCASE("visualize writes three files per id and rejects unknown ids") {
    const std::size_t id = load(val_file).examples[1].id;
    const Outcome o = run({"visualize", "--checkpoint", ckpt, "--data", val_file, "--ids", std::to_string(id), "--out",
                           (dir / "v").string(), "--width", "96", "--height", "96"});
    REQUIRE_MESSAGE(o.code == 0, o.err);
    for (const std::string suffix : {".raw.pgm", ".smoothed.pgm", ".overlay.ppm"})
      CHECK(std::filesystem::is_regular_file(dir / "v" / (std::to_string(id) + suffix)));
    const Outcome bad = run({"visualize", "--checkpoint", ckpt, "--data", val_file, "--ids", "99999", "--out",
                             (dir / "v2").string()});
    CHECK(bad.code != 0);
    CHECK(bad.err.find("99999") != std::string::npos);
  }
}

TEST_CASE("the installed binary maps errors to exit codes") {
  test::TempDir dir("cli-bin");
  const std::string bin = UCAM_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int raw = std::system(cmd.c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  CHECK(status(bin + " --help > /dev/null") == 0);
  CHECK(status(bin + " generate --out " + (dir / "g").string() + " --examples 20 > /dev/null") == 0);
  CHECK(status(bin + " generate --out " + (dir / "h").string() + " --noise-fraction 1.5 2> /dev/null") == 2);
  CHECK(status(bin + " frobnicate 2> /dev/null") == 2);
}
