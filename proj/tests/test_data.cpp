#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mtts/cleaning.hpp"
#include "mtts/corpus.hpp"
#include "mtts/errors.hpp"
#include "oracles.hpp"

using namespace mtts;
namespace fs = std::filesystem;

namespace {

CorpusConfig small_config(std::uint64_t seed = 3) {
  CorpusConfig cfg;
  cfg.languages = 3;
  cfg.speakers_per_language = 2;
  cfg.train_per_language = 30;
  cfg.val_per_language = 4;
  cfg.test_per_language = 4;
  cfg.seed = seed;
  return cfg;
}

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mtts_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Average each run of r frames, then nearest bank vector; silence is dropped.
std::vector<int> decode_clean(const Tensor& frames) {
  const auto& bank = PhonemeBank::standard();
  std::vector<int> out;
  for (std::size_t n = 0; n + kFramesPerPhoneme <= frames.dim(0); n += kFramesPerPhoneme) {
    std::vector<double> avg(kFrameDim, 0.0);
    for (std::size_t r = 0; r < kFramesPerPhoneme; ++r)
      for (std::size_t f = 0; f < kFrameDim; ++f) avg[f] += frames[(n + r) * kFrameDim + f] / kFramesPerPhoneme;
    int p = bank.nearest(avg);
    if (p != kSilence) out.push_back(p);
  }
  return out;
}

Utterance fake(int language, std::size_t chars, std::size_t frames) {
  Utterance u;
  u.id = "u" + std::to_string(language) + "_" + std::to_string(chars) + "_" + std::to_string(frames);
  u.language = language;
  u.text.assign(chars, 'a');
  u.frames = Tensor::zeros({frames, kFrameDim});
  return u;
}

}  // namespace

TEST_CASE("toy languages are bijections that differ in at least half the alphabet") {
  const auto& langs = standard_languages();
  REQUIRE(langs.size() == kMaxLanguages);
  for (const auto& l : langs) {
    std::set<int> image(l.grapheme_to_phoneme.begin(), l.grapheme_to_phoneme.end());
    CHECK(image.size() == kAlphabetSize);
    CHECK(*image.begin() == 0);
    CHECK(*image.rbegin() == static_cast<int>(kAlphabetSize) - 1);
  }
  for (std::size_t a = 0; a < langs.size(); ++a)
    for (std::size_t b = a + 1; b < langs.size(); ++b) {
      std::size_t diff = 0;
      for (std::size_t i = 0; i < kAlphabetSize; ++i) diff += langs[a].grapheme_to_phoneme[i] != langs[b].grapheme_to_phoneme[i];
      CHECK(diff >= kAlphabetSize / 2);
    }
  CHECK_THROWS_AS(language(static_cast<int>(kMaxLanguages)), LookupError);
}

TEST_CASE("phoneme bank spacing and self-decoding") {
  const auto& bank = PhonemeBank::standard();
  CHECK(bank.size() == kAlphabetSize + 1);
  CHECK(bank.min_pairwise_distance() >= 0.5);
  CHECK(bank.min_pairwise_distance() >= PhonemeBank::kMinDistance);
  for (int p = 0; p <= kSilence; ++p) {
    const auto& v = bank.vector(p);
    CHECK(bank.nearest(std::span<const double>(v.data(), v.size())) == p);
  }
  for (double x : bank.vector(kSilence)) CHECK(x == 0.0);
}

TEST_CASE("every triangle of bank vectors is acute") {
  // Acute at every vertex k means no third vector is as close to a midpoint
  // as its two endpoints, so mixed frames decode to one of their sources.
  const auto& bank = PhonemeBank::standard();
  const int n = static_cast<int>(bank.size());
  double worst = 1.0;
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        if (i == k || j == k) continue;
        double dot = 0.0, ni = 0.0, nj = 0.0;
        for (std::size_t d = 0; d < kFrameDim; ++d) {
          const double a = bank.vector(i)[d] - bank.vector(k)[d];
          const double b = bank.vector(j)[d] - bank.vector(k)[d];
          dot += a * b;
          ni += a * a;
          nj += b * b;
        }
        worst = std::min(worst, dot / std::sqrt(ni * nj));
      }
  CHECK(worst > 0.05);
}

TEST_CASE("utterance frame count is r per grapheme plus trailing silence") {
  auto corpus = generate_toy_corpus(small_config());
  for (const auto& u : corpus.utterances) {
    CHECK(u.num_frames() == kFramesPerPhoneme * u.text.size() + kSilenceFrames);
    CHECK(u.text.size() >= 3);
    CHECK(u.text.size() <= 30);
    CHECK(u.speaker / 2 == u.language);
  }
  CHECK(corpus.split("train").size() == 90);
  CHECK(corpus.split("val").size() == 12);
  CHECK(corpus.split("test").size() == 12);
}

TEST_CASE("decoding clean frames recovers the phoneme sequence") {
  auto corpus = generate_toy_corpus(small_config());
  for (const auto& u : corpus.utterances) CHECK(decode_clean(u.frames) == language(u.language).phonemes(u.text));
}

TEST_CASE("corpus generation is deterministic byte for byte") {
  auto a = temp_dir("det_a"), b = temp_dir("det_b"), c = temp_dir("det_c");
  write_corpus(generate_toy_corpus(small_config(11)), a);
  write_corpus(generate_toy_corpus(small_config(11)), b);
  write_corpus(generate_toy_corpus(small_config(12)), c);
  CHECK(slurp(a / "manifest.tsv") == slurp(b / "manifest.tsv"));
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a / "features")) {
    CHECK(slurp(entry.path()) == slurp(b / "features" / entry.path().filename()));
    ++files;
  }
  CHECK(files == 114);
  CHECK(slurp(a / "manifest.tsv") != slurp(c / "manifest.tsv"));
}

TEST_CASE("single-language single-speaker corpus") {
  CorpusConfig cfg = small_config();
  cfg.languages = 1;
  cfg.speakers_per_language = 1;
  auto corpus = generate_toy_corpus(cfg);
  CHECK(corpus.num_speakers() == 1);
  for (const auto& u : corpus.utterances) {
    CHECK(u.language == 0);
    CHECK(u.speaker == 0);
  }
}

TEST_CASE("manifest round trip and error handling") {
  auto dir = temp_dir("manifest");
  auto corpus = generate_toy_corpus(small_config());
  auto manifest = write_corpus(corpus, dir);
  auto header = slurp(manifest).substr(0, kManifestHeader.size());
  CHECK(header == kManifestHeader);

  auto loaded = load_corpus(manifest);
  REQUIRE(loaded.utterances.size() == corpus.utterances.size());
  CHECK(loaded.num_languages == 3);
  CHECK(loaded.speakers_per_language == 2);
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    const auto &x = corpus.utterances[i], &y = loaded.utterances[i];
    CHECK(x.id == y.id);
    CHECK(x.text == y.text);
    CHECK(x.split == y.split);
    CHECK(x.speaker == y.speaker);
    CHECK(x.frames.values() == y.frames.values());
  }

  auto victim = dir / "features" / (corpus.utterances[5].id + ".feat");
  auto bytes = slurp(victim);
  {
    std::ofstream out(victim, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), 40);
  }
  CHECK_THROWS_AS(read_features(victim), ParseError);
  fs::remove(victim);
  CHECK_THROWS_AS(load_corpus(manifest), ParseError);
}

TEST_CASE("outlier filter: documented examples") {
  std::vector<DurationItem> group(9, {4, 2.0});
  group.push_back({4, 10.0});
  auto keep = outlier_filter(group);
  for (int i = 0; i < 9; ++i) CHECK(keep[static_cast<std::size_t>(i)]);
  CHECK_FALSE(keep[9]);

  std::vector<DurationItem> equal(7, {5, 3.0});
  auto all = outlier_filter(equal);
  CHECK(std::all_of(all.begin(), all.end(), [](bool b) { return b; }));

  std::vector<DurationItem> single{{9, 100.0}};
  CHECK(outlier_filter(single)[0]);

  // With nine members a lone deviant sits at 8/sqrt(8) < 3 sigma and survives.
  std::vector<DurationItem> inside(8, {4, 2.0});
  inside.push_back({4, 9.0});
  auto kept = outlier_filter(inside);
  CHECK(std::all_of(kept.begin(), kept.end(), [](bool b) { return b; }));
}

TEST_CASE("outlier filter matches the brute-force oracle on random groups") {
  SeededRng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<DurationItem> items;
    std::size_t groups = 1 + rng.below(4);
    for (std::size_t g = 0; g < groups; ++g) {
      std::size_t kind = rng.below(3);
      if (kind == 0) {
        // Nine equal values plus one sitting exactly on mu + 3 sigma (or mu - 3 sigma).
        double base = static_cast<double>(1 + rng.below(50)), off = static_cast<double>(1 + rng.below(30));
        for (int i = 0; i < 9; ++i) items.push_back({g, base});
        items.push_back({g, rng.bernoulli(0.5) ? base + off : base - off});
      } else if (kind == 1) {
        std::size_t n = 1 + rng.below(4);
        double v = static_cast<double>(rng.below(60));
        for (std::size_t i = 0; i < n; ++i) items.push_back({g, v});
      } else {
        std::size_t n = 2 + rng.below(40);
        for (std::size_t i = 0; i < n; ++i) items.push_back({g, static_cast<double>(rng.below(120))});
      }
    }
    rng.shuffle(items);
    CHECK(outlier_filter(items) == oracle::outlier_keep(items));
  }
}

TEST_CASE("clean_corpus window and counts") {
  std::vector<Utterance> us{fake(0, 2, 8), fake(0, 5, 12), fake(1, 5, 4), fake(1, 6, 14), fake(1, 200, 60)};
  CleanReport rep;
  auto kept = clean_corpus(us, CleanConfig{}, &rep);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].id == us[1].id);
  CHECK(kept[1].id == us[3].id);
  CHECK(rep.languages[0].window_dropped == 1);
  CHECK(rep.languages[1].window_dropped == 2);
  CHECK(rep.total_dropped() == 3);
  CHECK(rep.warnings.empty());

  std::vector<Utterance> lonely{fake(2, 1, 8)};
  auto none = clean_corpus(lonely, CleanConfig{}, &rep);
  CHECK(none.empty());
  CHECK(rep.warnings.size() == 1);
}

TEST_CASE("clean_corpus on a clean corpus is the identity") {
  auto corpus = generate_toy_corpus(small_config());
  auto kept = clean_corpus(corpus.utterances, CleanConfig{});
  REQUIRE(kept.size() == corpus.utterances.size());
  for (std::size_t i = 0; i < kept.size(); ++i) CHECK(kept[i].id == corpus.utterances[i].id);
}

TEST_CASE("clean_corpus drop counts match an independent recount, and it is idempotent") {
  CorpusConfig cfg = small_config(5);
  cfg.outlier_rate = 0.1;
  cfg.text_min = 1;
  cfg.train_per_language = 200;
  auto corpus = generate_toy_corpus(cfg);
  CleanConfig cc;
  cc.max_duration = 60;

  std::size_t expected = 0;
  std::map<int, std::vector<std::size_t>> window;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    const auto& u = corpus.utterances[i];
    bool in = u.duration() >= cc.min_duration && u.duration() <= cc.max_duration && u.text.size() >= cc.min_chars &&
              u.text.size() <= cc.max_chars;
    if (in) window[u.language].push_back(i);
    else ++expected;
  }
  for (const auto& [lang, idx] : window) {
    std::vector<DurationItem> items;
    for (auto i : idx) items.push_back({corpus.utterances[i].text.size(), corpus.utterances[i].duration()});
    auto keep = oracle::outlier_keep(items);
    expected += static_cast<std::size_t>(std::count(keep.begin(), keep.end(), false));
  }
  CleanReport rep;
  auto once = clean_corpus(corpus.utterances, cc, &rep);
  CHECK(rep.total_dropped() == expected);
  CHECK(corpus.utterances.size() - once.size() == expected);
  CHECK(expected > 0);

  auto twice = clean_corpus(once, cc);
  REQUIRE(twice.size() == once.size());
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(twice[i].id == once[i].id);
}

TEST_CASE("generate, clean and split keep languages balanced") {
  auto corpus = generate_toy_corpus(small_config(8));
  auto kept = clean_corpus(corpus.utterances, CleanConfig{});
  std::map<int, std::size_t> train;
  for (const auto& u : kept)
    if (u.split == "train") ++train[u.language];
  auto [lo, hi] = std::minmax_element(train.begin(), train.end(),
                                      [](const auto& a, const auto& b) { return a.second < b.second; });
  CHECK(hi->second - lo->second <= 1);
}

TEST_CASE("subset_per_language") {
  auto train = generate_toy_corpus(small_config()).split("train");
  SeededRng a(4), b(4);
  auto s1 = subset_per_language(train, 12, a);
  auto s2 = subset_per_language(train, 12, b);
  REQUIRE(s1.size() == 36);
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1[i].id == s2[i].id);
  std::map<int, std::size_t> counts;
  std::set<std::string> ids;
  for (const auto& u : s1) {
    ++counts[u.language];
    ids.insert(u.id);
  }
  CHECK(ids.size() == 36);
  for (const auto& [lang, n] : counts) CHECK(n == 12);

  auto full = subset_per_language(train, 30, a);
  std::vector<std::string> x, y;
  for (const auto& u : full) x.push_back(u.id);
  for (const auto& u : train) y.push_back(u.id);
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  CHECK(x == y);

  try {
    subset_per_language(train, 31, a);
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("language 0") != std::string::npos);
  }
}
