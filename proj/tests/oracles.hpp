#pragma once

// Reference implementations used only by tests and the acceptance runner.
// Each one is written independently of the library code it checks.

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "mtts/cleaning.hpp"

namespace oracle {

// Survival by direct two-pass moments; ties within 1e-9 of a bound are settled
// with exact integer arithmetic (durations must then be integral).
inline std::vector<bool> outlier_keep(const std::vector<mtts::DurationItem>& items) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < items.size(); ++i) groups[items[i].chars].push_back(i);
  std::vector<bool> keep(items.size(), true);
  for (const auto& [chars, g] : groups) {
    long double n = g.size(), mu = 0;
    for (auto i : g) mu += items[i].duration;
    mu /= n;
    long double var = 0;
    for (auto i : g) var += (items[i].duration - mu) * (items[i].duration - mu);
    var /= n;
    long double sigma = std::sqrt(var);
    if (sigma == 0) continue;
    for (auto i : g) {
      long double d = items[i].duration;
      long double lo = mu - 3 * sigma, hi = mu + 3 * sigma;
      if (std::fabs(d - lo) > 1e-9L && std::fabs(d - hi) > 1e-9L) {
        keep[i] = lo < d && d < hi;
        continue;
      }
      __int128 s = 0, q = 0, cnt = static_cast<__int128>(g.size());
      for (auto j : g) {
        auto v = static_cast<std::int64_t>(items[j].duration);
        s += v;
        q += static_cast<__int128>(v) * v;
      }
      __int128 dev = cnt * static_cast<std::int64_t>(items[i].duration) - s;
      keep[i] = dev * dev < 9 * (cnt * q - s * s);
    }
  }
  return keep;
}

// Full-matrix Wagner-Fischer edit distance with unit costs.
template <typename Seq>
std::size_t edit_distance(const Seq& a, const Seq& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      d[i][j] = std::min({sub, d[i - 1][j] + 1, d[i][j - 1] + 1});
    }
  return d[a.size()][b.size()];
}

// Guided attention weight evaluated straight from its definition.
inline double guided_weight(std::size_t n, std::size_t N, std::size_t t, std::size_t T, double g) {
  double x = static_cast<double>(n) / static_cast<double>(N) - static_cast<double>(t) / static_cast<double>(T);
  return 1.0 - std::exp(-x * x / (2.0 * g * g));
}

}  // namespace oracle
