#include "mtts/cleaning.hpp"

#include <algorithm>
#include <cmath>

#include "mtts/errors.hpp"

namespace mtts {

std::size_t CleanReport::total_dropped() const {
  std::size_t n = 0;
  for (const auto& [lang, c] : languages) n += c.window_dropped + c.outlier_dropped;
  return n;
}

std::vector<bool> outlier_filter(std::span<const DurationItem> items) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < items.size(); ++i) groups[items[i].chars].push_back(i);

  std::vector<bool> keep(items.size(), true);
  for (const auto& [chars, members] : groups) {
    // With n, S = sum d, Q = sum d^2: |d - mu| < 3 sigma  <=>  (n d - S)^2 < 9 (n Q - S^2).
    // This form is exact for integral durations, so boundary values compare exactly.
    double n = static_cast<double>(members.size());
    double s = 0.0, q = 0.0;
    for (std::size_t i : members) {
      s += items[i].duration;
      q += items[i].duration * items[i].duration;
    }
    double spread = n * q - s * s;
    if (spread <= 0.0) continue;  // sigma = 0: keep the whole group
    for (std::size_t i : members) {
      double dev = n * items[i].duration - s;
      keep[i] = dev * dev < 9.0 * spread;
    }
  }
  return keep;
}

std::vector<Utterance> clean_corpus(const std::vector<Utterance>& utterances, const CleanConfig& cfg,
                                    CleanReport* report) {
  if (cfg.min_duration > cfg.max_duration || cfg.min_chars > cfg.max_chars)
    throw ConfigError("clean: empty acceptance window");
  CleanReport local;
  CleanReport& rep = report ? *report : local;
  rep = CleanReport{};

  std::map<int, std::vector<std::size_t>> in_window;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    const auto& u = utterances[i];
    auto& counts = rep.languages[u.language];
    ++counts.before;
    double d = u.duration();
    std::size_t chars = u.text.size();
    if (d < cfg.min_duration || d > cfg.max_duration || chars < cfg.min_chars || chars > cfg.max_chars) {
      ++counts.window_dropped;
      continue;
    }
    in_window[u.language].push_back(i);
  }

  std::vector<bool> keep(utterances.size(), false);
  for (const auto& [lang, idx] : in_window) {
    std::vector<DurationItem> items;
    items.reserve(idx.size());
    for (std::size_t i : idx) items.push_back({utterances[i].text.size(), utterances[i].duration()});
    auto flags = outlier_filter(items);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      keep[idx[k]] = flags[k];
      if (!flags[k]) ++rep.languages[lang].outlier_dropped;
    }
  }

  std::vector<Utterance> out;
  for (std::size_t i = 0; i < utterances.size(); ++i)
    if (keep[i]) {
      out.push_back(utterances[i]);
      ++rep.languages[utterances[i].language].after;
    }
  for (const auto& [lang, c] : rep.languages)
    if (c.after == 0) rep.warnings.push_back("language " + std::to_string(lang) + " has no examples after cleaning");
  return out;
}

std::vector<Utterance> subset_per_language(const std::vector<Utterance>& utterances, std::size_t n, SeededRng& rng) {
  std::map<int, std::vector<std::size_t>> by_language;
  for (std::size_t i = 0; i < utterances.size(); ++i) by_language[utterances[i].language].push_back(i);
  std::vector<Utterance> out;
  for (auto& [lang, idx] : by_language) {
    if (n > idx.size())
      throw ConfigError("subset: language " + std::to_string(lang) + " has " + std::to_string(idx.size()) +
                        " examples, " + std::to_string(n) + " requested");
    rng.shuffle(idx);
    for (std::size_t k = 0; k < n; ++k) out.push_back(utterances[idx[k]]);
  }
  return out;
}

}  // namespace mtts
