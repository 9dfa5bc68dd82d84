#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtts/corpus.hpp"
#include "mtts/model.hpp"

namespace mtts {

/// Levenshtein distance with unit costs.
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);
/// edit_distance / |reference|; may exceed 1. Empty reference is a ContractViolation.
double cer(std::span<const int> reference, std::span<const int> hypothesis);
double cer(std::string_view reference, std::string_view hypothesis);

/// Per-reference-position error counts of one optimal alignment: a
/// substitution or deletion is charged to its reference symbol, an insertion
/// to the next reference symbol (the last one at the end). Sums to the edit
/// distance.
std::vector<std::size_t> aligned_errors(std::span<const int> reference, std::span<const int> hypothesis);

/// Averages consecutive runs of `r` frames (a shorter tail run is averaged as
/// is), maps each to the nearest canonical vector and drops silence.
std::vector<int> frames_to_symbols(const Tensor& frames, const PhonemeBank& bank = PhonemeBank::standard(),
                                   std::size_t r = kFramesPerPhoneme);

/// Ground-truth phoneme sequence of an utterance.
std::vector<int> reference_symbols(const Utterance& u);
/// r * len + trailing silence.
std::size_t expected_frames(std::size_t text_length);

struct EvalConfig {
  /// Inference stops after max_steps_factor * expected_frames + 10 frames.
  std::size_t max_steps_factor = 3;
  /// Keep prenet dropout on at synthesis (with a per-utterance fixed stream).
  bool prenet_dropout = true;
  std::uint64_t seed = 1;
};

struct UtteranceEval {
  std::string id;
  int language = 0;
  double cer = 0.0;
  bool stopped = false;
  std::size_t frames = 0;
  std::size_t expected = 0;
  /// Failed to stop, or the decoded length misses the expected length by more than r frames.
  bool word_skip = false;
  std::vector<int> hypothesis;
};

/// Free-running synthesis of one text. `languages` holds one language id per
/// grapheme: GEN/SEP mix per-language encoder outputs with one-hot weights,
/// SHA and SGL use `base` for the whole utterance.
InferenceResult synthesize(Model& model, std::string_view text, std::span<const int> languages, int base,
                           int speaker, std::size_t max_steps, SeededRng& rng, bool prenet_dropout);

/// Scores precomputed frames (the model-free path used for the ground-truth column).
UtteranceEval score_frames(const Utterance& u, const Tensor& frames, bool stopped);

/// Synthesizes and scores every utterance; utterance i uses rng stream derive_seed(cfg.seed, i).
std::vector<UtteranceEval> evaluate_model(Model& model, const std::vector<Utterance>& split, const EvalConfig& cfg);

struct EvalRow {
  std::string variant;
  std::string regime;
  int language = 0;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t n = 0;
  std::size_t word_skips = 0;
  bool failed = false;
};

/// Mean, population std, count and skips per language (ascending language id).
std::vector<EvalRow> summarize(std::string_view variant, std::string_view regime,
                               const std::vector<UtteranceEval>& results);

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string config;  // echo of the producing configuration

  static constexpr const char* kCsvHeader = "variant,regime,language,mean_cer,std_cer,n,word_skips,failed";
  std::string csv() const;
  /// One block per regime: languages as rows, variants as columns ("mean +- std"),
  /// followed by a word-skip line.
  std::string table() const;
};

// ---- code switching --------------------------------------------------------

struct CodeSwitchToken {
  std::string word;
  int language = 0;
};

struct CodeSwitchSentence {
  int base = 0;
  std::vector<CodeSwitchToken> tokens;

  std::string text() const;
  /// Language of every grapheme of text().
  std::vector<int> grapheme_languages() const;
  std::vector<int> reference() const;
  /// True for graphemes whose language differs from the base.
  std::vector<bool> foreign_mask() const;
};

struct CodeSwitchSpec {
  std::size_t per_language = 10;
  std::size_t words = 12;
  std::size_t word_length = 2;
  std::size_t foreign_words = 3;  // one contiguous span
  std::uint64_t seed = 1;
};

/// `per_language` sentences for each base language 0..languages-1; the
/// foreign span sits at a uniform position and uses a uniformly drawn other language.
std::vector<CodeSwitchSentence> make_code_switch_sentences(std::size_t languages, const CodeSwitchSpec& spec);

/// token<TAB>language lines, a blank line between sentences. The base is the
/// majority language of a sentence.
void write_code_switch(const std::filesystem::path& path, const std::vector<CodeSwitchSentence>& sentences);
std::vector<CodeSwitchSentence> read_code_switch(const std::filesystem::path& path);

struct CodeSwitchEval {
  int base = 0;
  double cer = 0.0;
  double foreign_cer = 0.0;  // aligned errors on foreign graphemes / foreign span length
  bool word_skip = false;
};

/// Speaker is the base language's primary speaker (base * speakers_per_language).
/// Unknown language tags raise LookupError.
std::vector<CodeSwitchEval> code_switch_eval(Model& model, const std::vector<CodeSwitchSentence>& sentences,
                                             const EvalConfig& cfg);

}  // namespace mtts
