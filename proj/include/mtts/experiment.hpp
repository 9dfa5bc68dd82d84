#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mtts/cleaning.hpp"
#include "mtts/config.hpp"
#include "mtts/evaluation.hpp"
#include "mtts/model.hpp"
#include "mtts/training.hpp"

namespace mtts {

/// Generated (or loaded), optionally cleaned corpus with its splits.
struct Dataset {
  Corpus corpus;
  CleanReport clean;
  std::vector<Utterance> train, validation, test;
};

/// Generates the corpus described by cfg.corpus and cleans it when enabled.
Dataset build_dataset(const RunConfig& cfg);
/// Same, from an existing manifest instead of the generator.
Dataset load_dataset(const RunConfig& cfg, const std::filesystem::path& manifest);

/// What the model of `cfg` sees: for SGL only cfg.language, renumbered to
/// language 0 with speakers counted from 0; otherwise `pool` unchanged.
std::vector<Utterance> model_view(const RunConfig& cfg, const std::vector<Utterance>& pool);

/// Training pool of a regime. Stress subsets depend only on the corpus seed
/// and the subset size, so every variant and seed trains on the same examples.
std::vector<Utterance> regime_pool(const RunConfig& cfg, const std::vector<Utterance>& train, Regime regime);

/// Output directory that records every file written through it. finish()
/// appends manifest.txt: one "<bytes> <relative path>" line per file.
class RunDirectory {
 public:
  explicit RunDirectory(std::filesystem::path root);
  const std::filesystem::path& root() const { return root_; }
  void write(const std::string& relative, std::string_view content);
  /// Path for a file produced elsewhere (checkpoints, feature files); recorded on finish().
  std::filesystem::path reserve(const std::string& relative);
  /// Records every regular file under `relative`, which must be a directory.
  void adopt_tree(const std::string& relative);
  void finish();

 private:
  std::filesystem::path root_;
  std::vector<std::string> files_;
};

/// One trained model with its logs and held-out results.
struct RunOutcome {
  std::unique_ptr<Model> model;
  TrainResult result;
  TrainLog log;
  TrainState state;
  std::vector<UtteranceEval> test;
  double train_seconds = 0.0;
};

/// Builds the model of `cfg`, trains it on `train` (validating on
/// `validation`), evaluates on `test` and, when `dir` is given, writes the
/// standard run files: config.cfg, run.txt, steps.csv, validation.csv,
/// timings.csv, checkpoint.bin, test.csv, report.csv and report.txt.
/// Pools are taken as given; callers apply model_view first.
RunOutcome train_and_evaluate(const RunConfig& cfg, const std::vector<Utterance>& train,
                              const std::vector<Utterance>& validation, const std::vector<Utterance>& test,
                              RunDirectory* dir);

/// Rebuilds the model recorded in a checkpoint and loads its weights.
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt, RunConfig* config = nullptr);

/// One line per utterance: id, language, cer, stopped, frames, expected, word_skip.
std::string utterance_csv(const std::vector<UtteranceEval>& results);

/// Conv parameters one language's encoder uses: read from the generated
/// vectors for GEN and from the stacked SEP weights, so the two are
/// measured independently.
std::size_t encoder_params_per_language(Model& model);

struct ComparisonRun {
  Variant variant = Variant::GEN;
  Regime regime = Regime::Full;
  std::uint64_t seed = 0;
  int language = -1;  // SGL: the language of this model
  bool failed = false;
  std::string message;
  std::vector<UtteranceEval> test;  // languages in corpus numbering
  double train_seconds = 0.0;
  std::size_t steps_done = 0;
};

struct Comparison {
  EvalReport report;  // rows pooled over seeds, per (variant, regime, language)
  std::vector<ComparisonRun> runs;
  std::map<std::string, std::size_t> encoder_params;  // variant name -> per-language count
  double seconds = 0.0;
  std::string metadata() const;
};

/// Trains every variant of cfg.compare_variants in every regime for every
/// seed of cfg.compare_seeds and evaluates on the test split. A run that
/// throws or diverges marks its cell failed; the other cells still complete.
/// When `dir` is given each run writes its files under
/// runs/<regime>/<variant>/seed<k>/ and the report goes to report.csv,
/// report.txt and metadata.txt.
Comparison run_comparison(const RunConfig& cfg, const Dataset& data, RunDirectory* dir);

struct CodeSwitchRun {
  Variant variant = Variant::GEN;
  std::uint64_t seed = 0;
  std::vector<CodeSwitchEval> results;
  double mean_cer() const;
  double mean_foreign_cer() const;
  std::size_t word_skips() const;
};

/// Trains cfg.codeswitch_variants for every comparison seed on the full
/// training split and scores the synthetic code-switched sentences.
std::vector<CodeSwitchRun> run_code_switch(const RunConfig& cfg, const Dataset& data,
                                           const std::vector<CodeSwitchSentence>& sentences, RunDirectory* dir);

}  // namespace mtts
