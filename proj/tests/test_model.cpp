#include <doctest.h>

#include <cmath>
#include <fstream>
#include <vector>

#ifdef UCAM_HAVE_OPENMP
#include <omp.h>
#endif

#include "support.hpp"
#include "ucam/error.hpp"
#include "ucam/model.hpp"

using namespace ucam;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.hidden = 6;
  c.attention_dim = 5;
  c.trunk = 7;
  return c;
}

void zero_all(ModelParams& p) {
  for (auto& e : p.entries())
    for (auto& v : e.value.values()) v = 0.0;
}

}  // namespace

TEST_CASE("initialization is seeded and bounded by 1/sqrt(fan-in)") {
  const ModelConfig c;
  const ModelParams a = ModelParams::initialize(c, 1), b = ModelParams::initialize(c, 1);
  CHECK(a == b);
  CHECK_FALSE(a == ModelParams::initialize(c, 2));
  const double bound = 1.0 / std::sqrt(static_cast<double>(c.feature_dim));
  for (double v : a.at("image.w").values()) CHECK(std::fabs(v) <= bound);
  CHECK_THROWS_AS(a.at("nope"), ValidationError);
}

TEST_CASE("image encoder") {
  const ModelConfig c;
  ModelParams p = ModelParams::initialize(c, 3);
  RngStream rng(1);
  SUBCASE("output is [cells, hidden]") {
    Tape tape;
    const BoundParams bound(tape, p);
    const Var g = encode_image(tape.constant(test::random_tensor({49, c.feature_dim}, rng)), bound);
    CHECK(g.shape() == Shape{49, 32});
  }
  SUBCASE("zero weights give zero embeddings") {
    zero_all(p);
    Tape tape;
    const BoundParams bound(tape, p);
    for (double v : encode_image(tape.constant(test::random_tensor({5, c.feature_dim}, rng)), bound).value().values())
      CHECK(v == 0.0);
  }
  SUBCASE("identical cells embed identically") {
    Tensor grid = test::random_tensor({2, c.feature_dim}, rng);
    for (std::size_t i = 0; i < c.feature_dim; ++i) grid[c.feature_dim + i] = grid[i];
    Tape tape;
    const BoundParams bound(tape, p);
    const Tensor g = encode_image(tape.constant(grid), bound).value();
    for (std::size_t i = 0; i < c.hidden; ++i) CHECK(g[i] == g[c.hidden + i]);
  }
}

TEST_CASE("question encoder") {
  const ModelConfig c = small_config();
  ModelParams p = ModelParams::initialize(c, 4);
  const std::vector<std::size_t> ab{3, 5}, ba{5, 3}, single{7};

  auto encode = [&](const std::vector<std::size_t>& q) {
    Tape tape;
    const BoundParams bound(tape, p);
    const std::vector<const std::vector<std::size_t>*> batch{&q};
    return encode_question(batch, bound, c).value();
  };
  CHECK(encode(ab) == encode(ab));
  CHECK_FALSE(encode(ab) == encode(ba));

  SUBCASE("a single token with zero recurrent weights is the gated input projection") {
    for (const char* name : {"question.uz", "question.uc"})
      for (auto& v : p.at(name).values()) v = 0.0;
    const Tensor g = encode(single);
    const std::size_t h = c.hidden;
    for (std::size_t j = 0; j < h; ++j) {
      double zin = p.at("question.bz")[j], cin = p.at("question.bc")[j];
      for (std::size_t i = 0; i < h; ++i) {
        zin += p.at("question.embed")[7 * h + i] * p.at("question.wz")[i * h + j];
        cin += p.at("question.embed")[7 * h + i] * p.at("question.wc")[i * h + j];
      }
      CHECK(g[j] == doctest::Approx(std::tanh(cin) / (1.0 + std::exp(-zin))).epsilon(1e-14));
    }
  }
  SUBCASE("shorter questions hold their state") {
    const std::vector<std::size_t> longer{7, 2, 2};
    Tape tape;
    const BoundParams bound(tape, p);
    const std::vector<const std::vector<std::size_t>*> batch{&single, &longer};
    const Tensor both = encode_question(batch, bound, c).value();
    const Tensor alone = encode(single);
    for (std::size_t j = 0; j < c.hidden; ++j) CHECK(both[j] == alone[j]);
  }
  SUBCASE("out-of-vocabulary tokens are rejected") {
    const std::vector<std::size_t> bad{c.vocab_size};
    CHECK_THROWS_AS(encode(bad), ValidationError);
  }
}

TEST_CASE("attention") {
  ModelConfig c = small_config();
  ModelParams p = ModelParams::initialize(c, 5);
  RngStream rng(2);
  const std::size_t cells = 49;
  SUBCASE("equal scores give uniform weights") {
    for (auto& v : p.at("attention.v").values()) v = 0.0;
    Tape tape;
    const BoundParams bound(tape, p);
    const auto [att, f] = attend(tape.constant(test::random_tensor({2 * cells, c.hidden}, rng)),
                                 tape.constant(test::random_tensor({2, c.hidden}, rng)), bound);
    for (double v : att.value().values()) CHECK(v == doctest::Approx(1.0 / cells).epsilon(1e-14));
    CHECK(f.shape() == Shape{2, 2 * c.hidden});
  }
  SUBCASE("weights sum to one") {
    Tape tape;
    const BoundParams bound(tape, p);
    const auto [att, f] = attend(tape.constant(test::random_tensor({3 * cells, c.hidden}, rng)),
                                 tape.constant(test::random_tensor({3, c.hidden}, rng)), bound);
    for (std::size_t b = 0; b < 3; ++b) {
      double total = 0.0;
      for (std::size_t k = 0; k < cells; ++k) total += att.value()[b * cells + k];
      CHECK(std::fabs(total - 1.0) < 1e-12);
    }
  }
  SUBCASE("a score 10 above the rest takes more than 0.99") {
    zero_all(p);
    // Score of cell k is v * tanh(g_i[k, 0] * wa); only cell 4 has a nonzero input.
    p.at("attention.wa")[0] = 1.0;
    p.at("attention.v")[0] = 10.0 / std::tanh(3.0);
    Tensor gi({cells, c.hidden});
    gi[4 * c.hidden] = 3.0;
    Tape tape;
    const BoundParams bound(tape, p);
    const auto [att, f] = attend(tape.constant(gi), tape.constant(Tensor({1, c.hidden})), bound);
    CHECK(att.value()[4] > 0.99);
  }
}

TEST_CASE("classifier heads and dropout") {
  const ModelConfig c;
  const ModelParams p = ModelParams::initialize(c, 6);
  RngStream rng(3);
  Tape tape;
  const BoundParams bound(tape, p);
  const Var f = tape.constant(test::random_tensor({2, c.fused_width()}, rng));
  RngStream r1(1), r2(1);
  const auto a = classify(f, bound, 0.0, r1, true), b = classify(f, bound, 0.0, r2, true);
  CHECK(a.logits.value() == b.logits.value());
  CHECK(a.logits.shape() == Shape{2, 12});
  CHECK(a.raw_variance.shape() == Shape{2, 12});
  RngStream draws(9);
  const auto s1 = classify(f, bound, 0.2, draws, true), s2 = classify(f, bound, 0.2, draws, true);
  CHECK_FALSE(s1.logits.value() == s2.logits.value());
}

TEST_CASE("forward pass") {
  DatasetConfig dc;
  dc.examples = 1000;
  const Dataset ds = generate(dc, 7);
  const ModelConfig c = ModelConfig::matching(dc);
  const ModelParams p = ModelParams::initialize(c, 8);
  std::vector<const Example*> batch;
  for (std::size_t i = 0; i < 4; ++i) batch.push_back(&ds.examples[i]);

  auto run = [&] {
    Tape tape;
    const BoundParams bound(tape, p);
    RngStream rng(5);
    const ForwardTrace t = forward(tape, bound, batch, c, rng, true);
    return std::vector<Tensor>{t.attention.value(), t.f_i.value(), t.logits.value(), t.raw_variance.value()};
  };
  const auto first = run();
  CHECK(first == run());
  CHECK(first[0].shape() == Shape{4, 49});
  CHECK(first[1].shape() == Shape{4, 2 * c.hidden});
  for (std::size_t b = 0; b < 4; ++b) {
    double total = 0.0;
    for (std::size_t k = 0; k < 49; ++k) total += first[0][b * 49 + k];
    CHECK(std::fabs(total - 1.0) < 1e-12);
  }

  SUBCASE("untrained accuracy is at chance") {
    const auto preds = predict(p, c, ds.examples);
    double hits = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i].answer == ds.examples[i].answer ? 1.0 : 0.0;
    CHECK(std::fabs(hits / 1000.0 - 1.0 / 12.0) < 0.04);
  }
  SUBCASE("predictions do not depend on thread count") {
#ifdef UCAM_HAVE_OPENMP
    omp_set_num_threads(1);
    const auto one = predict(p, c, ds.examples);
    omp_set_num_threads(4);
    const auto four = predict(p, c, ds.examples);
    for (std::size_t i = 0; i < one.size(); ++i) {
      CHECK(one[i].probs == four[i].probs);
      CHECK(one[i].attention == four[i].attention);
    }
#endif
  }
  SUBCASE("mismatched grids are rejected") {
    DatasetConfig other = dc;
    other.grid_rows = 5;
    other.examples = 1;
    const Dataset small = generate(other, 1);
    CHECK_THROWS_AS(predict(p, c, small.examples), ValidationError);
    CHECK_THROWS_AS(c.check_compatible(other), ValidationError);
  }
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig c = small_config();
  const ModelParams p = ModelParams::initialize(c, 9);
  test::TempDir dir("ckpt");
  save_checkpoint(dir / "c.json", c, p);
  const auto [c2, p2] = load_checkpoint(dir / "c.json");
  CHECK(p2 == p);
  CHECK(c2.hidden == c.hidden);

  nlohmann::json j = checkpoint_json(c, p);
  j["params"].erase("logit.b");
  std::ofstream(dir / "bad.json") << j.dump();
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.json"), ValidationError);
}
