#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtts/cleaning.hpp"
#include "mtts/corpus.hpp"
#include "mtts/evaluation.hpp"
#include "mtts/model.hpp"
#include "mtts/training.hpp"

namespace mtts {

/// Training-set sizes of a comparison: the whole corpus, or a per-language
/// subset trained with a shorter learning-rate halving interval.
enum class Regime { Full, StressSmall, StressTiny };
std::string_view regime_name(Regime r);
Regime parse_regime(std::string_view name);

/// Everything a command needs, in one text file:
///
///   # comment
///   [section]
///   key = value
///
/// Keys are unique per section, unknown sections or keys are rejected, and
/// lists are comma separated. Fields whose default depends on the variant
/// accept "auto". to_text() emits every field in a fixed order, so
/// parse(to_text(c)) == c and the text doubles as the run's config echo.
struct RunConfig {
  // [run]
  Variant variant = Variant::GEN;
  std::uint64_t seed = 1;  // model init, batch order and dropout; the corpus has its own seed
  std::string name = "run";
  int language = 0;  // the language an SGL run trains on

  // [corpus]
  CorpusConfig corpus;
  // [clean]
  bool clean_enabled = true;
  CleanConfig clean;

  // [encoder]
  std::size_t embedding_dim = 64;
  std::size_t channels = 64;
  std::size_t sites = 5;
  std::size_t kernel = 5;
  double encoder_dropout = 0.05;
  // [decoder]
  DecoderSpec decoder;
  // [model]
  std::optional<std::size_t> language_dim;  // auto: variant default
  std::size_t generator_dim = 8;
  std::size_t speaker_dim = 32;
  // [classifier]
  bool classifier_enabled = false;
  std::size_t classifier_hidden = 256;
  double classifier_lambda = 1.0;
  std::optional<double> classifier_weight;  // auto: variant default
  double classifier_clamp = 0.25;

  // [train]; lr0 and g_growth keep their 0 = auto convention
  TrainConfig train;
  // Used instead of train.lr0 by SEP. auto: a tenth of the non-SEP lr0.
  std::optional<double> sep_lr0;
  // [eval]
  EvalConfig eval;

  // [compare]
  std::vector<Variant> compare_variants{Variant::GEN, Variant::SHA, Variant::SEP};
  std::vector<std::uint64_t> compare_seeds{1, 2, 3};
  std::vector<Regime> compare_regimes{Regime::Full, Regime::StressSmall, Regime::StressTiny};
  std::size_t stress_small_per_language = 150;
  std::size_t stress_small_lr_halving_interval = 7500;
  std::size_t stress_tiny_per_language = 60;
  std::size_t stress_tiny_lr_halving_interval = 5000;

  // [codeswitch]
  CodeSwitchSpec codeswitch;
  std::vector<Variant> codeswitch_variants{Variant::GEN, Variant::SHA};
  bool codeswitch_classifier = true;  // overrides classifier.enabled for these runs

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;

  /// Languages seen by the model: 1 for SGL, corpus.languages otherwise.
  std::size_t model_languages() const;
  ModelConfig model_config() const;
  /// Training settings with lr0 and g_growth resolved for the variant.
  TrainConfig train_config() const;
  std::uint64_t model_seed() const;
  /// Per-language training examples of a regime; 0 means the full split.
  std::size_t regime_per_language(Regime r) const;
  std::size_t regime_lr_halving_interval(Regime r) const;
  void validate() const;

  bool operator==(const RunConfig&) const;
};

}  // namespace mtts
