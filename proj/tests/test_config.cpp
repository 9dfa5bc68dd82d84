#include <cmath>
#include <limits>
#include <string>

#include "doctest.h"
#include "mtts/config.hpp"
#include "mtts/errors.hpp"

using namespace mtts;

namespace {

std::size_t parse_error_line(std::string_view text) {
  try {
    RunConfig::parse(text);
  } catch (const ParseError& e) {
    return e.offset();
  }
  return 0;
}

}  // namespace

TEST_CASE("defaults round-trip through text") {
  RunConfig c;
  const std::string text = c.to_text();
  CHECK(text.rfind("[run]\nvariant = GEN\n", 0) == 0);
  CHECK(text.find("lr0 = auto") != std::string::npos);
  CHECK(text.find("language_dim = auto") != std::string::npos);
  CHECK(RunConfig::parse(text) == c);
  CHECK(RunConfig::parse(text).to_text() == text);
}

TEST_CASE("modified values survive the round trip exactly") {
  RunConfig c;
  c.variant = Variant::SEP;
  c.seed = 12345678901234ULL;
  c.name = "stress-run";
  c.corpus.noise_std = 0.1 + 0.2;  // not representable in short decimal
  c.decoder.prenet = {16, 24, 8};
  c.language_dim = 7;
  c.classifier_weight = 0.3;
  c.classifier_clamp = std::numeric_limits<double>::infinity();
  c.train.lr0 = 3e-3;
  c.train.g_growth = 1.0002;
  c.compare_variants = {Variant::SGL, Variant::GEN};
  c.compare_seeds = {4, 9};
  const RunConfig back = RunConfig::parse(c.to_text());
  CHECK(back == c);
  CHECK(back.corpus.noise_std == c.corpus.noise_std);
  CHECK(back.decoder.prenet == std::vector<std::size_t>{16, 24, 8});
  CHECK(back.language_dim == std::optional<std::size_t>{7});
  CHECK(std::isinf(back.classifier_clamp));
  CHECK(back.compare_seeds == std::vector<std::uint64_t>{4, 9});
}

TEST_CASE("regimes parse and map to their sizes and schedules") {
  const RunConfig c = RunConfig::parse(
      "[train]\nlr_halving_interval = 9000\n"
      "[compare]\nregimes = full, stress_tiny\nstress_tiny_per_language = 30\n");
  CHECK(c.compare_regimes == std::vector<Regime>{Regime::Full, Regime::StressTiny});
  CHECK(c.regime_per_language(Regime::Full) == 0);
  CHECK(c.regime_per_language(Regime::StressTiny) == 30);
  CHECK(c.regime_lr_halving_interval(Regime::Full) == 9000);
  CHECK(c.regime_lr_halving_interval(Regime::StressTiny) == 5000);
  CHECK(c.regime_lr_halving_interval(Regime::StressSmall) == 7500);
  CHECK(parse_error_line("[compare]\nregimes = full, huge\n") == 2);
}

TEST_CASE("partial files keep defaults; comments and spacing are ignored") {
  const RunConfig c = RunConfig::parse(
      "# desk run\n"
      "[run]\n"
      "  variant=sha   # lower case accepted\n"
      "\n"
      "[train]\n"
      "steps = 200\n"
      "lr0 = 0.002\n");
  CHECK(c.variant == Variant::SHA);
  CHECK(c.train.steps == 200);
  CHECK(c.train.lr0 == 0.002);
  CHECK(c.train.batch_size == TrainConfig{}.batch_size);
  CHECK(c.corpus.languages == CorpusConfig{}.languages);
}

TEST_CASE("unknown keys, sections and malformed lines are rejected with their line") {
  CHECK(parse_error_line("[run]\nvariant = GEN\nvarient = SHA\n") == 3);
  CHECK(parse_error_line("[run]\n[training]\nsteps = 3\n") == 2);
  CHECK(parse_error_line("steps = 3\n") == 1);
  CHECK(parse_error_line("[train]\nsteps 3\n") == 2);
  CHECK(parse_error_line("[train]\nsteps = 3\nsteps = 4\n") == 3);
  CHECK(parse_error_line("[train]\nsteps = -3\n") == 2);
  CHECK(parse_error_line("[train]\nlr0 = fast\n") == 2);
  CHECK(parse_error_line("[run]\nvariant = XYZ\n") == 2);
  CHECK(parse_error_line("[classifier]\nenabled = maybe\n") == 2);
  CHECK(parse_error_line("[run\n") == 1);
}

TEST_CASE("semantic validation runs after parsing") {
  CHECK_THROWS_AS(RunConfig::parse("[train]\nsteps = 0\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[encoder]\nsites = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[run]\nlanguage = 9\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[compare]\nseeds =\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[codeswitch]\nvariants = GEN, SGL\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/desk.cfg"), ConfigError);
}

TEST_CASE("derived model and training settings") {
  RunConfig c;
  c.corpus.languages = 3;
  c.corpus.speakers_per_language = 2;
  ModelConfig m = c.model_config();
  CHECK(m.languages == 3);
  CHECK(m.speakers == 6);
  CHECK(m.language_dim == ModelConfig::defaults(Variant::GEN, 3, 6).language_dim);
  CHECK(m.classifier.weight == ModelConfig::defaults(Variant::GEN, 3, 6).classifier.weight);

  c.variant = Variant::SHA;
  c.classifier_weight = 0.9;
  CHECK(c.model_config().classifier.weight == 0.9);
  CHECK(c.model_config().language_dim == ModelConfig::defaults(Variant::SHA, 3, 6).language_dim);

  c.variant = Variant::SGL;
  CHECK(c.model_languages() == 1);
  CHECK(c.model_config().languages == 1);
  CHECK(c.model_config().speakers == 2);

  c.variant = Variant::SEP;
  c.seed = 42;
  TrainConfig t = c.train_config();
  CHECK(t.lr0 == 1e-4);
  CHECK(t.seed == 42);
  CHECK(t.g_growth > 1.0);
  c.train.lr0 = 3e-3;
  CHECK(c.train_config().lr0 == 3e-3 / 10.0);
  c.sep_lr0 = 5e-4;
  CHECK(c.train_config().lr0 == 5e-4);
  c.variant = Variant::GEN;
  CHECK(c.train_config().lr0 == 3e-3);
  c.variant = Variant::SEP;
  CHECK(c.model_seed() != c.seed);
  RunConfig other = c;
  other.seed = 43;
  CHECK(other.model_seed() != c.model_seed());
}
