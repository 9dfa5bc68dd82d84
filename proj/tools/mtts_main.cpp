// Command-line entry point. Exit codes: 0 success, 1 failure while running,
// 2 bad usage (flags, unreadable or invalid config). Every command that
// writes files puts them under --out and lists them in manifest.txt.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "mtts/config.hpp"
#include "mtts/errors.hpp"
#include "mtts/experiment.hpp"
#include "mtts/gradient_suite.hpp"
#include "mtts/model_check.hpp"

namespace fs = std::filesystem;
using namespace mtts;

namespace {

/// Raised for usage problems detected after flag parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string text;
  std::string codeswitch;
  int language = 0;
  int speaker = -1;
  std::size_t seeds = 20;
};

RunConfig load_config(const Options& o) {
  RunConfig cfg;
  if (!o.config.empty()) {
    try {
      cfg = RunConfig::load(o.config);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    } catch (const ParseError& e) {
      throw UsageError(o.config + ": " + e.what());
    }
  }
  if (o.seed) {
    cfg.seed = *o.seed;
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  return cfg;
}

Dataset dataset_for(const RunConfig& cfg, const Options& o) {
  return o.data.empty() ? build_dataset(cfg) : load_dataset(cfg, o.data);
}

std::string clean_summary(const CleanReport& r) {
  std::ostringstream os;
  os << "language,before,window_dropped,outlier_dropped,after\n";
  for (const auto& [lang, c] : r.languages)
    os << lang << "," << c.before << "," << c.window_dropped << "," << c.outlier_dropped << "," << c.after << "\n";
  for (const auto& w : r.warnings) os << "# warning: " << w << "\n";
  return os.str();
}

int cmd_datagen(const Options& o) {
  RunConfig cfg = load_config(o);
  if (o.seed) cfg.corpus.seed = *o.seed;
  RunDirectory dir(o.out);
  const Corpus corpus = generate_toy_corpus(cfg.corpus);
  write_corpus(corpus, dir.root());
  dir.reserve("manifest.tsv");
  dir.adopt_tree("features");
  const auto sentences = make_code_switch_sentences(cfg.corpus.languages, cfg.codeswitch);
  write_code_switch(dir.reserve("codeswitch.tsv"), sentences);
  dir.write("config.cfg", cfg.to_text());
  dir.finish();
  std::cout << "wrote " << corpus.utterances.size() << " utterances and " << sentences.size()
            << " code-switched sentences to " << o.out << "\n";
  return 0;
}

int cmd_clean(const Options& o) {
  const RunConfig cfg = load_config(o);
  Corpus corpus = load_corpus(o.data);
  CleanReport report;
  corpus.utterances = clean_corpus(corpus.utterances, cfg.clean, &report);
  RunDirectory dir(o.out);
  write_corpus(corpus, dir.root());
  dir.reserve("manifest.tsv");
  dir.adopt_tree("features");
  dir.write("clean.csv", clean_summary(report));
  dir.write("config.cfg", cfg.to_text());
  dir.finish();
  std::cout << clean_summary(report);
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig cfg = load_config(o);
  const Dataset data = dataset_for(cfg, o);
  RunDirectory dir(o.out);
  if (cfg.clean_enabled) dir.write("clean.csv", clean_summary(data.clean));
  RunOutcome out = train_and_evaluate(cfg, model_view(cfg, data.train), model_view(cfg, data.validation),
                                      model_view(cfg, data.test), &dir);
  dir.finish();
  std::cout << variant_name(cfg.variant) << ": " << stop_reason_name(out.result.reason) << " after "
            << out.result.steps_done << " steps";
  if (!out.test.empty()) {
    double mean = 0.0;
    for (const auto& u : out.test) mean += u.cer;
    std::cout << ", test CER " << mean / static_cast<double>(out.test.size());
  }
  std::cout << "\n";
  return out.result.reason == StopReason::Diverged ? 1 : 0;
}

int cmd_synth(const Options& o) {
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  RunConfig cfg;
  auto model = model_from_checkpoint(ckpt, &cfg);
  const int lang = cfg.variant == Variant::SGL ? 0 : o.language;
  if (lang < 0 || static_cast<std::size_t>(lang) >= model->config().languages)
    throw UsageError("--language " + std::to_string(o.language) + " is not a language of this model");
  const int speaker = o.speaker >= 0 ? o.speaker : lang * static_cast<int>(cfg.corpus.speakers_per_language);
  const std::vector<int> languages(o.text.size(), lang);
  SeededRng rng(o.seed.value_or(cfg.eval.seed));
  const std::size_t max_steps = cfg.eval.max_steps_factor * expected_frames(o.text.size()) + 10;
  const InferenceResult res =
      synthesize(*model, o.text, languages, lang, speaker, max_steps, rng, cfg.eval.prenet_dropout);
  const std::vector<int> symbols = frames_to_symbols(res.frames);

  RunDirectory dir(o.out);
  std::ostringstream frames;
  frames.precision(17);
  for (std::size_t t = 0; t < res.frames.dim(0); ++t) {
    for (std::size_t f = 0; f < res.frames.dim(1); ++f) frames << (f ? "," : "") << res.frames.data()[t * res.frames.dim(1) + f];
    frames << "\n";
  }
  dir.write("frames.csv", frames.str());
  std::ostringstream align;
  align.precision(17);
  for (std::size_t t = 0; t < res.alignments.dim(0); ++t) {
    for (std::size_t j = 0; j < res.alignments.dim(1); ++j) align << (j ? "," : "") << res.alignments.data()[t * res.alignments.dim(1) + j];
    align << "\n";
  }
  dir.write("alignments.csv", align.str());
  const std::vector<int> reference = language(cfg.variant == Variant::SGL ? cfg.language : lang).phonemes(o.text);
  std::ostringstream summary;
  summary << "text = " << o.text << "\nlanguage = " << lang << "\nspeaker = " << speaker
          << "\nstopped = " << (res.stopped ? "true" : "false") << "\nframes = " << res.steps << "\nsymbols =";
  for (int s : symbols) summary << " " << s;
  summary << "\nreference =";
  for (int s : reference) summary << " " << s;
  summary << "\ncer = " << cer(reference, symbols) << "\n";
  dir.write("synth.txt", summary.str());
  dir.finish();
  std::cout << summary.str();
  return 0;
}

int cmd_eval(const Options& o) {
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  RunConfig cfg;
  auto model = model_from_checkpoint(ckpt, &cfg);
  const Dataset data = dataset_for(cfg, o);
  RunDirectory dir(o.out);
  auto results = evaluate_model(*model, model_view(cfg, data.test), cfg.eval);
  if (cfg.variant == Variant::SGL)
    for (auto& r : results) r.language = cfg.language;
  EvalReport report;
  report.rows = summarize(variant_name(cfg.variant), "test", results);
  report.config = cfg.to_text();
  dir.write("config.cfg", report.config);
  dir.write("test.csv", utterance_csv(results));
  dir.write("report.csv", report.csv());
  dir.write("report.txt", report.table());
  std::cout << report.table();
  if (!o.codeswitch.empty()) {
    const auto sentences = read_code_switch(o.codeswitch);
    const auto cs = code_switch_eval(*model, sentences, cfg.eval);
    std::ostringstream os;
    os.precision(17);
    os << "sentence,base,cer,foreign_cer,word_skip\n";
    double mean = 0.0, foreign = 0.0;
    std::size_t skips = 0;
    for (std::size_t i = 0; i < cs.size(); ++i) {
      os << i << "," << cs[i].base << "," << cs[i].cer << "," << cs[i].foreign_cer << "," << cs[i].word_skip << "\n";
      mean += cs[i].cer;
      foreign += cs[i].foreign_cer;
      skips += cs[i].word_skip;
    }
    dir.write("codeswitch.csv", os.str());
    const double n = static_cast<double>(cs.size());
    std::cout << "code-switching: " << cs.size() << " sentences, CER " << mean / n << ", foreign-span CER "
              << foreign / n << ", skips " << skips << "/" << cs.size() << "\n";
  }
  dir.finish();
  return 0;
}

int cmd_compare(const Options& o) {
  const RunConfig cfg = load_config(o);
  const Dataset data = dataset_for(cfg, o);
  RunDirectory dir(o.out);
  const Comparison cmp = run_comparison(cfg, data, &dir);
  std::cout << cmp.report.table() << cmp.metadata();
  if (!o.codeswitch.empty()) {
    RunDirectory cs_dir(dir.root() / "codeswitch");
    const auto runs = run_code_switch(cfg, data, read_code_switch(o.codeswitch), &cs_dir);
    cs_dir.finish();
    dir.adopt_tree("codeswitch");
    for (const auto& r : runs)
      std::cout << "code-switching " << variant_name(r.variant) << " seed " << r.seed << ": CER " << r.mean_cer()
                << ", foreign-span CER " << r.mean_foreign_cer() << ", skips " << r.word_skips() << "/"
                << r.results.size() << "\n";
  }
  dir.finish();
  return 0;
}

int cmd_gradcheck(const Options& o) {
  const std::uint64_t first = o.seed.value_or(1);
  bool ok = true;
  std::optional<RunDirectory> dir;
  if (!o.out.empty()) dir.emplace(o.out);
  std::ostringstream csv;
  csv.precision(6);
  csv << "seed,check,max_rel_error,checked,passed\n";
  std::map<std::string, double> worst;
  for (std::uint64_t seed = first; seed < first + o.seeds; ++seed) {
    for (const auto& c : check_primitives(seed)) {
      worst[c.op] = std::max(worst[c.op], c.report.max_rel_error);
      ok = ok && c.report.passed;
      csv << seed << "," << c.op << "," << c.report.max_rel_error << "," << c.report.checked << ","
          << c.report.passed << "\n";
    }
    const GradCheckReport m = check_tiny_model(seed);
    worst["model"] = std::max(worst["model"], m.max_rel_error);
    ok = ok && m.passed;
    csv << seed << ",model," << m.max_rel_error << "," << m.checked << "," << m.passed << "\n";
  }
  std::printf("%-28s %s\n", "check", "max relative error");
  for (const auto& [op, err] : worst)
    std::printf("%-28s %.3e  %s\n", op.c_str(), err, err <= (op == "model" ? 1e-3 : 1e-4) ? "pass" : "FAIL");
  std::printf("%s over %zu seeds starting at %llu\n", ok ? "PASS" : "FAIL", o.seeds,
              static_cast<unsigned long long>(first));
  if (dir) {
    dir->write("gradcheck.csv", csv.str());
    dir->finish();
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multilingual toy text-to-speech with generated encoder parameters"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  Options o;

  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", o.config, "Run configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Override the run seed");
    auto* out = sub->add_option("--out", o.out, "Output directory");
    if (needs_out) out->required();
  };

  auto* datagen = app.add_subcommand("datagen", "Generate the toy corpus and code-switched sentences");
  add_common(datagen, true);
  auto* clean = app.add_subcommand("clean", "Filter a corpus manifest by duration and length");
  add_common(clean, true);
  clean->add_option("--data", o.data, "Input manifest.tsv")->required()->check(CLI::ExistingFile);
  auto* train = app.add_subcommand("train", "Train one model and evaluate it on the test split");
  add_common(train, true);
  train->add_option("--data", o.data, "Manifest to train on instead of generating")->check(CLI::ExistingFile);
  auto* synth = app.add_subcommand("synth", "Synthesize one sentence from a checkpoint");
  add_common(synth, true);
  synth->add_option("--checkpoint", o.checkpoint, "checkpoint.bin")->required()->check(CLI::ExistingFile);
  synth->add_option("--text", o.text, "Graphemes to speak")->required();
  synth->add_option("--language", o.language, "Language id");
  synth->add_option("--speaker", o.speaker, "Speaker id (default: the language's first speaker)");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(eval, true);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint.bin")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", o.data, "Manifest to evaluate on instead of generating")->check(CLI::ExistingFile);
  eval->add_option("--codeswitch", o.codeswitch, "Code-switched sentence file")->check(CLI::ExistingFile);
  auto* compare = app.add_subcommand("compare", "Train and evaluate every variant in every regime");
  add_common(compare, true);
  compare->add_option("--data", o.data, "Manifest to use instead of generating")->check(CLI::ExistingFile);
  compare->add_option("--codeswitch", o.codeswitch, "Also train the code-switching variants and score these sentences")
      ->check(CLI::ExistingFile);
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of every primitive and the model");
  add_common(gradcheck, false);
  gradcheck->add_option("--seeds", o.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    return 2;
  }

  try {
    if (*datagen) return cmd_datagen(o);
    if (*clean) return cmd_clean(o);
    if (*train) return cmd_train(o);
    if (*synth) return cmd_synth(o);
    if (*eval) return cmd_eval(o);
    if (*compare) return cmd_compare(o);
    if (*gradcheck) return cmd_gradcheck(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
