// Acceptance runner: one PASS/FAIL line per criterion. Tolerances and
// sizes are fixed here, not taken from the command line; the flags only
// choose which criteria run and where run artifacts go.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "mtts/batching.hpp"
#include "mtts/config.hpp"
#include "mtts/experiment.hpp"
#include "mtts/gradient_suite.hpp"
#include "mtts/model_check.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace mtts;

namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Utterance> toy_pool(std::size_t languages, std::size_t per_language, std::uint64_t seed) {
  CorpusConfig cfg;
  cfg.languages = languages;
  cfg.train_per_language = per_language;
  cfg.val_per_language = 0;
  cfg.test_per_language = 0;
  cfg.seed = seed;
  return generate_toy_corpus(cfg).utterances;
}

ModelConfig small_config(Variant v, std::size_t languages) {
  ModelConfig c = ModelConfig::defaults(v, languages, 2 * languages);
  c.encoder = EncoderSpec::standard(8, 12, 3, 5, 0.05);
  c.decoder.prenet = {8, 8};
  c.decoder.attention_lstm = 12;
  c.decoder.decoder_lstm = 12;
  c.decoder.attention_dim = 8;
  c.speaker_dim = 6;
  c.classifier.hidden = 16;
  return c;
}

const ForwardSettings kBatchStats{Mode::Train, false, false, nullptr};

// ---- 1 ---------------------------------------------------------------------

Verdict gradient_suite() {
  constexpr std::size_t kSeeds = 20;
  constexpr double kPrimitiveTol = 1e-4, kModelTol = 1e-3, kBudgetSeconds = 120.0;
  const auto t0 = Clock::now();
  double worst_primitive = 0.0, worst_model = 0.0;
  std::string failure;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    for (const auto& c : check_primitives(seed, kPrimitiveTol)) {
      worst_primitive = std::max(worst_primitive, c.report.max_rel_error);
      if (!c.report.passed && failure.empty()) failure = c.op + " seed " + std::to_string(seed) + ": " + c.report.detail;
    }
    const GradCheckReport m = check_tiny_model(seed, kModelTol);
    worst_model = std::max(worst_model, m.max_rel_error);
    if (!m.passed && failure.empty()) failure = "model seed " + std::to_string(seed) + ": " + m.detail;
  }
  const double secs = elapsed(t0);
  Verdict v;
  v.pass = failure.empty() && secs <= kBudgetSeconds;
  v.detail = "20 seeds, worst primitive " + fmt("%.2e", worst_primitive) + " (<= 1e-4), worst model " +
             fmt("%.2e", worst_model) + " (<= 1e-3), " + fmt("%.1f", secs) + " s (<= 120)";
  if (!failure.empty()) v.detail += "; " + failure;
  return v;
}

// ---- 2 ---------------------------------------------------------------------

Verdict reversal_law() {
  constexpr double kTol = 1e-10;
  ModelConfig cfg = small_config(Variant::GEN, 4);
  cfg.classifier.enabled = true;
  Model model(cfg, 13);
  const auto pool = toy_pool(4, 8, 6);
  SeededRng rng(4);
  const Batch batch = assemble_batch(pool, plan_epoch(pool, 8, 4, rng).batches.front());

  auto encoder_side = [](const std::string& n) {
    return n.rfind("encoder.", 0) == 0 || n.rfind("generator.", 0) == 0 || n == "token_embedding" ||
           n == "language_embedding";
  };
  auto grads = [&](const ClassifierSpec& spec) {
    model.parameters().zero_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor enc = model.encode(TokenBatch::from(batch), kBatchStats);
    tape.backward(model.speaker_classifier_loss(enc, batch.speakers, batch.token_mask, &spec));
    std::vector<double> g;
    for (const auto& [name, t] : model.parameters().entries())
      if (encoder_side(name)) {
        if (t.has_grad())
          g.insert(g.end(), t.grad().begin(), t.grad().end());
        else
          g.insert(g.end(), t.numel(), 0.0);
      }
    return g;
  };
  ClassifierSpec identity = cfg.classifier;
  identity.reverse = false;
  identity.clamp = std::numeric_limits<double>::infinity();  // pre-clamp comparison
  const auto base = grads(identity);
  const bool nonzero = std::any_of(base.begin(), base.end(), [](double x) { return x != 0.0; });
  Verdict v{nonzero, ""};
  for (double lambda : {0.0, 0.5, 1.0}) {
    ClassifierSpec rev = identity;
    rev.reverse = true;
    rev.lambda = lambda;
    const auto g = grads(rev);
    double worst = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, std::abs(g[i] + lambda * base[i]));
    v.pass = v.pass && worst <= kTol;
    if (lambda == 0.0) v.pass = v.pass && std::all_of(g.begin(), g.end(), [](double x) { return x == 0.0; });
    v.detail += "lambda " + fmt("%.1f", lambda) + ": max |g + lambda g_id| " + fmt("%.1e", worst) + "; ";
  }
  v.detail += std::to_string(base.size()) + " encoder-side entries, tolerance 1e-10, lambda 0 exactly zero";
  return v;
}

// ---- 3 ---------------------------------------------------------------------

Verdict grouped_equivalence() {
  constexpr double kTol = 1e-10;
  constexpr std::uint64_t kBatches = 100;
  double worst = 0.0;
  bool dispatch_same = true;
  for (Variant variant : {Variant::GEN, Variant::SEP}) {
    Model model(small_config(variant, 4), 11);
    const auto pool = toy_pool(4, 24, 7);
    for (std::uint64_t trial = 0; trial < kBatches; ++trial) {
      const std::size_t B = 4 * (1 + trial % 4);
      SeededRng rng(trial);
      const TokenBatch tb = TokenBatch::from(assemble_batch(pool, plan_epoch(pool, B, 4, rng).batches.front()));
      NoGradScope no_grad;
      const Tensor grouped = model.encode_grouped(tb, kBatchStats);
      dispatch_same = dispatch_same && model.encode(tb, kBatchStats).values() == grouped.values();
      const std::size_t stride = grouped.numel() / B;
      for (int l = 0; l < 4; ++l) {
        std::vector<std::size_t> rows;
        for (std::size_t r = static_cast<std::size_t>(l); r < B; r += 4) rows.push_back(r);
        const Tensor seq = model.encode_language(tb.select(rows), l, kBatchStats);
        for (std::size_t k = 0; k < rows.size(); ++k)
          for (std::size_t j = 0; j < stride; ++j)
            worst = std::max(worst, std::abs(grouped.data()[rows[k] * stride + j] - seq.data()[k * stride + j]));
      }
    }
  }
  return {worst <= kTol && dispatch_same,
          "GEN and SEP, 100 batches each, max |grouped - sequential| " + fmt("%.1e", worst) + " (<= 1e-10)"};
}

// ---- 4 ---------------------------------------------------------------------

Verdict sampler() {
  constexpr std::size_t kL = 5, kB = 50, kBatches = 1000;
  auto pool = toy_pool(kL, 41, 2);
  pool.resize(pool.size() - 7);  // the last language is short
  SeededRng rng(9);
  std::size_t batches = 0, bad = 0, worst_spread = 0;
  while (batches < kBatches) {
    const BatchPlan plan = plan_epoch(pool, kB, kL, rng);
    std::map<int, std::size_t> counts;
    for (const auto& b : plan.batches) {
      if (batches == kBatches) break;
      std::vector<int> langs;
      for (auto i : b) langs.push_back(pool[i].language);
      bad += !verify_interleave(langs, kL) || b.size() != kB;
      for (int l : langs) ++counts[l];
      ++batches;
    }
    std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
    for (std::size_t l = 0; l < kL; ++l) {
      lo = std::min(lo, counts[static_cast<int>(l)]);
      hi = std::max(hi, counts[static_cast<int>(l)]);
    }
    worst_spread = std::max(worst_spread, hi - lo);
  }
  return {bad == 0 && worst_spread <= kB / kL,
          "1000 batches (L=5, B=50), " + std::to_string(bad) + " interleave violations, worst per-epoch spread " +
              std::to_string(worst_spread) + " (<= 10)"};
}

// ---- 5 ---------------------------------------------------------------------

Verdict schedules() {
  TrainConfig cfg = TrainConfig{}.resolved(Variant::GEN);
  const bool lr = lr_at(0, cfg) == 1e-3 && lr_at(10000, cfg) == 5e-4 && lr_at(25000, cfg) == 2.5e-4;
  bool monotone = true, capped = true, reaches = false;
  double prev = 0.0;
  for (std::size_t s = 0; s <= 50000; s += 7) {
    const double g = tolerance_at(s, cfg);
    monotone = monotone && g >= prev;
    capped = capped && g <= cfg.g_cap;
    reaches = reaches || g == cfg.g_cap;
    prev = g;
  }
  return {lr && monotone && capped && reaches && tolerance_at(0, cfg) == cfg.g0,
          std::string("lr 1e-3/5e-4/2.5e-4 at 0/10000/25000 ") + (lr ? "exact" : "MISMATCH") +
              "; tolerance non-decreasing " + (monotone ? "yes" : "no") + ", capped at " + fmt("%.2f", cfg.g_cap) +
              " " + (capped && reaches ? "yes" : "no")};
}

// ---- 6 ---------------------------------------------------------------------

Verdict cleaning() {
  constexpr int kGroups = 10000;
  SeededRng rng(23);
  std::size_t mismatches = 0, boundary = 0, boundary_kept = 0, flat = 0;
  for (int trial = 0; trial < kGroups; ++trial) {
    std::vector<DurationItem> items;
    const std::size_t kind = trial % 3;
    if (kind == 0) {
      // Nine equal values and one lying exactly on mu +- 3 sigma.
      const double base = static_cast<double>(20 + rng.below(50)), off = static_cast<double>(1 + rng.below(15));
      for (int i = 0; i < 9; ++i) items.push_back({7, base});
      items.push_back({7, rng.bernoulli(0.5) ? base + off : base - off});
    } else if (kind == 1) {
      const std::size_t n = 1 + rng.below(6);
      const double v = static_cast<double>(rng.below(60));
      for (std::size_t i = 0; i < n; ++i) items.push_back({5, v});
      ++flat;
    } else {
      const std::size_t n = 2 + rng.below(40);
      for (std::size_t i = 0; i < n; ++i) items.push_back({3, static_cast<double>(rng.below(120))});
      if (rng.bernoulli(0.3)) items.push_back({3, 1000.0});
    }
    const auto got = outlier_filter(items);
    mismatches += got != oracle::outlier_keep(items);
    if (kind == 0) {
      ++boundary;
      boundary_kept += got.back();
    }
  }
  return {mismatches == 0 && boundary_kept == 0,
          "10000 groups, " + std::to_string(mismatches) + " mismatches vs brute force; " + std::to_string(boundary) +
              " groups with a member on mu+-3 sigma (" + std::to_string(boundary_kept) + " kept, open interval); " +
              std::to_string(flat) + " sigma=0 groups"};
}

// ---- 7 ---------------------------------------------------------------------

Verdict cer_oracle() {
  constexpr int kPairs = 10000;
  SeededRng rng(31);
  auto random_string = [&](std::size_t min_len) {
    std::string s(min_len + rng.below(21 - min_len), 'a');
    for (char& c : s) c = static_cast<char>('a' + rng.below(5));
    return s;
  };
  std::size_t mismatches = 0;
  for (int i = 0; i < kPairs; ++i) {
    const std::string ref = random_string(1), hyp = random_string(0);
    const double expected = static_cast<double>(oracle::edit_distance(ref, hyp)) / static_cast<double>(ref.size());
    mismatches += cer(ref, hyp) != expected;
  }
  return {mismatches == 0, "10000 random pairs, " + std::to_string(mismatches) + " differences from the DP oracle"};
}

// ---- 8 ---------------------------------------------------------------------

double regime_mean(const Comparison& cmp, Variant v, Regime r, bool* failed) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& row : cmp.report.rows)
    if (row.variant == variant_name(v) && row.regime == regime_name(r)) {
      if (row.failed) *failed = true;
      sum += row.mean * static_cast<double>(row.n);
      n += row.n;
    }
  if (n == 0) *failed = true;
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

Verdict knowledge_sharing(const RunConfig& desk, const Dataset& data, const fs::path& out, Comparison* keep) {
  constexpr double kGenFullCer = 0.15, kBudgetSeconds = 1800.0;
  RunConfig cfg = desk;
  cfg.compare_variants = {Variant::GEN, Variant::SHA, Variant::SEP};
  cfg.compare_regimes = {Regime::Full, Regime::StressTiny};
  RunDirectory dir(out / "compare");
  *keep = run_comparison(cfg, data, &dir);
  dir.finish();
  bool failed = false;
  const double gen_full = regime_mean(*keep, Variant::GEN, Regime::Full, &failed);
  const double gen_stress = regime_mean(*keep, Variant::GEN, Regime::StressTiny, &failed);
  const double sep_stress = regime_mean(*keep, Variant::SEP, Regime::StressTiny, &failed);
  const double sha_full = regime_mean(*keep, Variant::SHA, Regime::Full, &failed);
  const double sha_stress = regime_mean(*keep, Variant::SHA, Regime::StressTiny, &failed);
  const double sep_full = regime_mean(*keep, Variant::SEP, Regime::Full, &failed);
  const bool ordering = gen_stress <= sep_stress, full = gen_full < kGenFullCer, fast = keep->seconds <= kBudgetSeconds;
  return {!failed && ordering && full && fast,
          "stress (60/lang) GEN " + fmt("%.3f", gen_stress) + " <= SEP " + fmt("%.3f", sep_stress) + " [SHA " +
              fmt("%.3f", sha_stress) + "]; full GEN " + fmt("%.3f", gen_full) + " < 0.15 [SHA " +
              fmt("%.3f", sha_full) + ", SEP " + fmt("%.3f", sep_full) + "]; " + std::to_string(keep->runs.size()) +
              " runs in " + fmt("%.0f", keep->seconds) + " s (<= 1800)" + (failed ? "; a cell FAILED" : "")};
}

// ---- 9 ---------------------------------------------------------------------

Verdict code_switching(const RunConfig& desk, const Dataset& data, const fs::path& out) {
  RunConfig cfg = desk;
  cfg.codeswitch_variants = {Variant::GEN, Variant::SHA};
  cfg.codeswitch_classifier = true;
  const auto sentences = make_code_switch_sentences(cfg.corpus.languages, cfg.codeswitch);
  RunDirectory dir(out / "codeswitch");
  write_code_switch(dir.reserve("sentences.tsv"), sentences);
  const auto runs = run_code_switch(cfg, data, sentences, &dir);
  dir.finish();
  double gen_cer = 0.0, sha_cer = 0.0;
  std::size_t gen_skips = 0, sha_skips = 0, gen_n = 0, sha_n = 0;
  for (const auto& r : runs) {
    const bool gen = r.variant == Variant::GEN;
    (gen ? gen_cer : sha_cer) += r.mean_foreign_cer();
    (gen ? gen_skips : sha_skips) += r.word_skips();
    (gen ? gen_n : sha_n) += r.results.size();
  }
  const double seeds = static_cast<double>(cfg.compare_seeds.size());
  gen_cer /= seeds;
  sha_cer /= seeds;
  return {sentences.size() == 40 && gen_cer <= sha_cer && gen_skips <= sha_skips,
          std::to_string(sentences.size()) + " sentences x " + std::to_string(cfg.compare_seeds.size()) +
              " seeds; foreign-span CER GEN " + fmt("%.3f", gen_cer) + " <= SHA " + fmt("%.3f", sha_cer) +
              "; skips GEN " + std::to_string(gen_skips) + "/" + std::to_string(gen_n) + " <= SHA " +
              std::to_string(sha_skips) + "/" + std::to_string(sha_n)};
}

// ---- 10 --------------------------------------------------------------------

bool same_first_lines(const std::string& a, const std::string& b, std::size_t lines) {
  std::istringstream sa(a), sb(b);
  std::string la, lb;
  for (std::size_t i = 0; i < lines; ++i) {
    const bool ga = static_cast<bool>(std::getline(sa, la)), gb = static_cast<bool>(std::getline(sb, lb));
    if (ga != gb || la != lb) return false;
    if (!ga) return i > 0;
  }
  return true;
}

Verdict reproducibility(const RunConfig& desk, const Dataset& data, const fs::path& out) {
  RunConfig cfg = desk;
  cfg.variant = Variant::GEN;
  cfg.seed = desk.compare_seeds.front();
  std::vector<fs::path> dirs{out / "repeat" / "a", out / "repeat" / "b"};
  for (const auto& d : dirs) {
    fs::remove_all(d);
    RunDirectory dir(d);
    train_and_evaluate(cfg, data.train, data.validation, data.test, &dir);
    dir.finish();
  }
  std::string detail;
  bool ok = same_first_lines(read_file(dirs[0] / "steps.csv"), read_file(dirs[1] / "steps.csv"), 51);
  detail += std::string("first 50 step rows ") + (ok ? "identical" : "DIFFER");
  for (const char* f : {"steps.csv", "validation.csv", "run.txt", "test.csv", "report.csv", "checkpoint.bin"}) {
    const bool same = read_file(dirs[0] / f) == read_file(dirs[1] / f) && !read_file(dirs[0] / f).empty();
    ok = ok && same;
    detail += std::string(", ") + f + (same ? " identical" : " DIFFERS");
  }
  return {ok, "two full GEN runs: " + detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> only;
  std::string out = "acceptance_out";
  std::string config_path = MTTS_DESK_CONFIG;
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_option("--out", out, "Directory for run artifacts");
  app.add_option("--config", config_path, "Desk-scale run configuration")->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  const RunConfig desk = RunConfig::load(config_path);
  std::optional<Dataset> data;
  auto dataset = [&]() -> const Dataset& {
    if (!data) data = build_dataset(desk);
    return *data;
  };

  const std::vector<std::pair<int, std::string>> names{
      {1, "gradient suite"},        {2, "reversal law"}, {3, "grouped equivalence"}, {4, "sampler"},
      {5, "schedules"},             {6, "cleaning math"}, {7, "CER oracle"},
      {8, "knowledge sharing"},     {9, "code switching"}, {10, "reproducibility"}};
  bool all = true;
  Comparison comparison;
  for (const auto& [id, name] : names) {
    if (!wanted(id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      switch (id) {
        case 1: v = gradient_suite(); break;
        case 2: v = reversal_law(); break;
        case 3: v = grouped_equivalence(); break;
        case 4: v = sampler(); break;
        case 5: v = schedules(); break;
        case 6: v = cleaning(); break;
        case 7: v = cer_oracle(); break;
        case 8: v = knowledge_sharing(desk, dataset(), out, &comparison); break;
        case 9: v = code_switching(desk, dataset(), out); break;
        case 10: v = reproducibility(desk, dataset(), out); break;
      }
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    all = all && v.pass;
    std::printf("criterion %2d %-20s %s  %s  [%.1f s]\n", id, name.c_str(), v.pass ? "PASS" : "FAIL",
                v.detail.c_str(), elapsed(t0));
    std::fflush(stdout);
    if (id == 8 && !comparison.report.rows.empty()) std::printf("%s", comparison.report.table().c_str());
  }
  return all ? 0 : 1;
}
