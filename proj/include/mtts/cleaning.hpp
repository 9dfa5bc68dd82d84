#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mtts/corpus.hpp"
#include "mtts/rng.hpp"

namespace mtts {

/// Acceptance windows; bounds are inclusive. Durations are in frames.
struct CleanConfig {
  double min_duration = 5.0;
  double max_duration = 101.0;
  std::size_t min_chars = 3;
  std::size_t max_chars = 190;
};

struct LanguageCleanCounts {
  std::size_t before = 0;
  std::size_t window_dropped = 0;
  std::size_t outlier_dropped = 0;
  std::size_t after = 0;
};

struct CleanReport {
  std::map<int, LanguageCleanCounts> languages;
  std::vector<std::string> warnings;

  std::size_t total_dropped() const;
};

struct DurationItem {
  std::size_t chars = 0;
  double duration = 0.0;
};

/// Keep flags for items grouped by exact character count. An item survives
/// iff mu - 3 sigma < duration < mu + 3 sigma within its group (population
/// sigma); every member of a group with sigma = 0 survives.
std::vector<bool> outlier_filter(std::span<const DurationItem> items);

/// Window filter, then outlier_filter per language. Order is preserved.
std::vector<Utterance> clean_corpus(const std::vector<Utterance>& utterances, const CleanConfig& cfg,
                                    CleanReport* report = nullptr);

/// Uniform sample of n utterances per language, without replacement.
std::vector<Utterance> subset_per_language(const std::vector<Utterance>& utterances, std::size_t n, SeededRng& rng);

}  // namespace mtts
