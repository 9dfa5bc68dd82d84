#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mtts/rng.hpp"
#include "mtts/tensor.hpp"

namespace mtts {

inline constexpr std::size_t kAlphabetSize = 20;     // shared grapheme/phoneme alphabet
inline constexpr std::size_t kFrameDim = 8;          // F
inline constexpr std::size_t kFramesPerPhoneme = 2;  // r
inline constexpr std::size_t kSilenceFrames = 2;     // trailing silence per utterance
inline constexpr std::size_t kMaxLanguages = 10;
inline constexpr int kPadToken = 0;
inline constexpr std::size_t kVocabSize = kAlphabetSize + 1;  // graphemes + padding
inline constexpr int kSilence = static_cast<int>(kAlphabetSize);

/// Grapheme 'a' + i is token i + 1.
int grapheme_token(char grapheme);
char token_grapheme(int token);
std::vector<int> tokenize(std::string_view text);

/// A synthetic language: a cipher mapping each grapheme to a phoneme.
struct ToyLanguage {
  int id = 0;
  std::string name;
  std::array<int, kAlphabetSize> grapheme_to_phoneme{};

  std::vector<int> phonemes(std::string_view text) const;
};

/// The fixed set of toy languages (ids 0..kMaxLanguages-1). Generated once
/// from a constant seed; every pair of permutations differs in at least
/// kAlphabetSize / 2 positions.
const std::vector<ToyLanguage>& standard_languages();
const ToyLanguage& language(int id);

/// Canonical frame vectors for the kAlphabetSize phonemes plus silence
/// (index kSilence, the zero vector). Minimum pairwise distance is at least
/// kMinDistance, which also bounds every phoneme's norm from below, and every
/// triangle of bank vectors is acute.
class PhonemeBank {
 public:
  static constexpr double kMinDistance = 1.0;
  using Vector = std::array<double, kFrameDim>;

  static const PhonemeBank& standard();

  const Vector& vector(int symbol) const { return vectors_.at(static_cast<std::size_t>(symbol)); }
  std::size_t size() const { return vectors_.size(); }
  /// Index of the Euclidean-nearest canonical vector (ties: lowest index).
  int nearest(std::span<const double> frame) const;
  double min_pairwise_distance() const;

 private:
  explicit PhonemeBank(std::vector<Vector> vectors);
  std::vector<Vector> vectors_;
};

struct Utterance {
  std::string id;
  int language = 0;
  int speaker = 0;
  std::string text;
  Tensor frames;  // [N, F]
  std::string split = "train";

  std::size_t num_frames() const { return frames.defined() ? frames.dim(0) : 0; }
  /// Duration proxy used by the cleaning filters.
  double duration() const { return static_cast<double>(num_frames()); }
};

struct CorpusConfig {
  std::size_t languages = 4;
  std::size_t speakers_per_language = 2;
  std::size_t train_per_language = 400;
  std::size_t val_per_language = 20;
  std::size_t test_per_language = 20;
  std::size_t text_min = 3;
  std::size_t text_max = 30;
  double noise_std = 0.01;
  double speaker_offset_norm = 0.1;
  /// Fraction of utterances given extra trailing silence (duration outliers).
  double outlier_rate = 0.0;
  std::uint64_t seed = 1;
};

struct Corpus {
  std::size_t num_languages = 0;
  std::size_t speakers_per_language = 0;
  std::vector<Utterance> utterances;

  std::size_t num_speakers() const { return num_languages * speakers_per_language; }
  /// First speaker of a language; used as the voice for code-switched synthesis.
  int primary_speaker(int language) const { return language * static_cast<int>(speakers_per_language); }
  std::vector<Utterance> split(std::string_view name) const;
};

/// Renders phonemes as frames: each canonical vector repeated r times, then
/// `silence` frames of the silence vector, all shifted by `offset`.
Tensor render_frames(std::span<const int> phonemes, const PhonemeBank::Vector& offset, std::size_t silence,
                     double noise_std, SeededRng& rng);

/// Speaker offset vectors of fixed norm, one per global speaker id.
std::vector<PhonemeBank::Vector> speaker_offsets(std::size_t speakers, double norm, std::uint64_t seed);

Corpus generate_toy_corpus(const CorpusConfig& cfg);

/// Manifest columns: id, language, speaker, text, feature_path, split.
inline constexpr std::string_view kManifestHeader = "id\tlanguage\tspeaker\ttext\tfeature_path\tsplit";

/// Writes manifest.tsv and features/<id>.feat under dir; returns the manifest path.
std::filesystem::path write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Reads a manifest and every referenced feature file (paths relative to the manifest).
Corpus load_corpus(const std::filesystem::path& manifest);
void write_manifest(const std::vector<Utterance>& utterances, const std::filesystem::path& manifest,
                    const std::filesystem::path& feature_dir);

/// Feature file: little-endian IEEE-754 doubles; header (magic, N, F) then N*F values row-major.
inline constexpr double kFeatureMagic = 1297371718.0;  // "MTTF"
void write_features(const std::filesystem::path& path, const Tensor& frames);
Tensor read_features(const std::filesystem::path& path);

}  // namespace mtts
