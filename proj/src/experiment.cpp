#include "mtts/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include "mtts/errors.hpp"

namespace mtts {

namespace {

constexpr std::uint64_t kSubsetStream = 0x737562736574ULL;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string run_summary(const RunConfig& cfg, const TrainConfig& tc, const TrainResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "version = " << kVersion << "\n"
     << "variant = " << variant_name(cfg.variant) << "\n"
     << "seed = " << cfg.seed << "\n"
     << "model_seed = " << cfg.model_seed() << "\n"
     << "lr0 = " << tc.lr0 << "\n"
     << "g_growth = " << tc.g_growth << "\n"
     << "stop_reason = " << stop_reason_name(r.reason) << "\n"
     << "steps_done = " << r.steps_done << "\n"
     << "best_step = " << (r.has_best ? std::to_string(r.best_step) : "none") << "\n"
     << "best_validation = " << r.best_validation << "\n";
  if (!r.message.empty()) os << "message = " << r.message << "\n";
  return os.str();
}

Dataset split_dataset(const RunConfig& cfg, Corpus corpus) {
  Dataset d;
  if (cfg.clean_enabled) corpus.utterances = clean_corpus(corpus.utterances, cfg.clean, &d.clean);
  d.train = corpus.split("train");
  d.validation = corpus.split("val");
  d.test = corpus.split("test");
  d.corpus = std::move(corpus);
  if (d.train.empty() || d.validation.empty() || d.test.empty())
    throw ConfigError("dataset: train, val and test splits must all be non-empty");
  return d;
}

}  // namespace

Dataset build_dataset(const RunConfig& cfg) { return split_dataset(cfg, generate_toy_corpus(cfg.corpus)); }

Dataset load_dataset(const RunConfig& cfg, const std::filesystem::path& manifest) {
  Corpus corpus = load_corpus(manifest);
  if (corpus.num_languages != cfg.corpus.languages || corpus.speakers_per_language != cfg.corpus.speakers_per_language)
    throw ConfigError("dataset: manifest has " + std::to_string(corpus.num_languages) + " languages x " +
                      std::to_string(corpus.speakers_per_language) + " speakers, config expects " +
                      std::to_string(cfg.corpus.languages) + " x " + std::to_string(cfg.corpus.speakers_per_language));
  return split_dataset(cfg, std::move(corpus));
}

std::vector<Utterance> model_view(const RunConfig& cfg, const std::vector<Utterance>& pool) {
  if (cfg.variant != Variant::SGL) return pool;
  const int spl = static_cast<int>(cfg.corpus.speakers_per_language);
  std::vector<Utterance> out;
  for (const auto& u : pool) {
    if (u.language != cfg.language) continue;
    Utterance v = u;
    v.language = 0;
    v.speaker = u.speaker - cfg.language * spl;
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<Utterance> regime_pool(const RunConfig& cfg, const std::vector<Utterance>& train, Regime regime) {
  const std::size_t n = cfg.regime_per_language(regime);
  if (n == 0) return train;
  SeededRng rng(derive_seed(derive_seed(cfg.corpus.seed, kSubsetStream), n));
  return subset_per_language(train, n, rng);
}

// ---- run directories -------------------------------------------------------

RunDirectory::RunDirectory(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_);
}

void RunDirectory::write(const std::string& relative, std::string_view content) {
  const auto path = reserve(relative);
  std::ofstream out(path, std::ios::binary);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw ConfigError("cannot write " + path.string());
}

std::filesystem::path RunDirectory::reserve(const std::string& relative) {
  const auto path = root_ / relative;
  std::filesystem::create_directories(path.parent_path());
  if (std::find(files_.begin(), files_.end(), relative) == files_.end()) files_.push_back(relative);
  return path;
}

void RunDirectory::adopt_tree(const std::string& relative) {
  std::vector<std::string> found;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root_ / relative))
    if (entry.is_regular_file()) found.push_back(std::filesystem::relative(entry.path(), root_).generic_string());
  std::sort(found.begin(), found.end());
  for (auto& f : found)
    if (std::find(files_.begin(), files_.end(), f) == files_.end()) files_.push_back(std::move(f));
}

void RunDirectory::finish() {
  std::string manifest;
  for (const auto& f : files_)
    manifest += std::to_string(std::filesystem::file_size(root_ / f)) + " " + f + "\n";
  manifest += std::to_string(manifest.size()) + " manifest.txt\n";  // size excludes this line
  std::ofstream out(root_ / "manifest.txt", std::ios::binary);
  out << manifest;
}

// ---- single runs -----------------------------------------------------------

std::string utterance_csv(const std::vector<UtteranceEval>& results) {
  std::ostringstream os;
  os.precision(17);
  os << "id,language,cer,stopped,frames,expected,word_skip\n";
  for (const auto& r : results)
    os << r.id << "," << r.language << "," << r.cer << "," << r.stopped << "," << r.frames << "," << r.expected << ","
       << r.word_skip << "\n";
  return os.str();
}

RunOutcome train_and_evaluate(const RunConfig& cfg, const std::vector<Utterance>& train,
                              const std::vector<Utterance>& validation, const std::vector<Utterance>& test,
                              RunDirectory* dir) {
  RunOutcome out;
  out.model = std::make_unique<Model>(cfg.model_config(), cfg.model_seed());
  const TrainConfig tc = cfg.train_config();
  Trainer trainer(*out.model, train, validation, tc);
  const auto t0 = Clock::now();
  out.result = trainer.run();
  out.train_seconds = seconds_since(t0);
  out.log = trainer.log();
  out.state = trainer.state();
  if (out.result.reason != StopReason::Diverged) out.test = evaluate_model(*out.model, test, cfg.eval);

  if (dir) {
    const std::string config_text = cfg.to_text();
    dir->write("config.cfg", config_text);
    dir->write("run.txt", run_summary(cfg, trainer.config(), out.result));
    dir->write("steps.csv", out.log.steps_csv());
    dir->write("validation.csv", out.log.validations_csv());
    dir->write("timings.csv", out.log.timings_csv());
    save_checkpoint(dir->reserve("checkpoint.bin"),
                    make_checkpoint(*out.model, out.state, config_text, cfg.model_seed()));
    if (!out.test.empty()) {
      EvalReport report;
      report.rows = summarize(variant_name(cfg.variant), "single", out.test);
      report.config = config_text;
      dir->write("test.csv", utterance_csv(out.test));
      dir->write("report.csv", report.csv());
      dir->write("report.txt", report.table());
    }
  }
  return out;
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt, RunConfig* config) {
  RunConfig cfg = RunConfig::parse(ckpt.config);
  auto model = std::make_unique<Model>(cfg.model_config(), ckpt.model_seed);
  apply_checkpoint(ckpt, *model);
  if (config) *config = std::move(cfg);
  return model;
}

std::size_t encoder_params_per_language(Model& model) {
  const ModelConfig& mc = model.config();
  if (model.variant() == Variant::GEN) return model.generate_params(std::vector<int>{0}).length_per_language();
  std::size_t total = 0;
  for (std::size_t s = 0; s < mc.encoder.sites.size(); ++s) {
    const std::string prefix = "encoder." + std::to_string(s) + ".";
    total += model.parameters().at(prefix + "weight").numel() + model.parameters().at(prefix + "bias").numel();
  }
  const std::size_t groups = traits(model.variant()).encoders_per_language ? mc.languages : 1;
  return total / groups;
}

// ---- comparison ------------------------------------------------------------

std::string Comparison::metadata() const {
  std::ostringstream os;
  os.precision(6);
  os << "version = " << kVersion << "\n";
  for (const auto& [variant, n] : encoder_params) os << "encoder_params_per_language." << variant << " = " << n << "\n";
  os << "runs = " << runs.size() << "\n";
  std::size_t failed = 0;
  for (const auto& r : runs) failed += r.failed;
  os << "failed_runs = " << failed << "\n";
  os << "seconds = " << seconds << "\n";
  return os.str();
}

Comparison run_comparison(const RunConfig& base, const Dataset& data, RunDirectory* dir) {
  Comparison cmp;
  const auto t0 = Clock::now();
  for (Regime regime : base.compare_regimes) {
    const std::vector<Utterance> pool = regime_pool(base, data.train, regime);
    for (Variant variant : base.compare_variants) {
      std::vector<ComparisonRun> cell;
      for (std::uint64_t seed : base.compare_seeds) {
        // SGL trains one model per language; the others one model in total.
        std::vector<int> languages{-1};
        if (variant == Variant::SGL) {
          languages.clear();
          for (std::size_t l = 0; l < base.corpus.languages; ++l) languages.push_back(static_cast<int>(l));
        }
        for (int lang : languages) {
          RunConfig cfg = base;
          cfg.variant = variant;
          cfg.seed = seed;
          cfg.train.lr_halving_interval = base.regime_lr_halving_interval(regime);
          if (lang >= 0) cfg.language = lang;
          cfg.name = base.name + "-" + std::string(regime_name(regime)) + "-" + std::string(variant_name(variant)) +
                     "-seed" + std::to_string(seed) + (lang >= 0 ? "-lang" + std::to_string(lang) : "");
          ComparisonRun run;
          run.variant = variant;
          run.regime = regime;
          run.seed = seed;
          run.language = lang;
          try {
            std::unique_ptr<RunDirectory> sub;
            if (dir) {
              std::string rel = "runs/" + std::string(regime_name(regime)) + "/" + std::string(variant_name(variant)) +
                                "/seed" + std::to_string(seed) + (lang >= 0 ? "/lang" + std::to_string(lang) : "");
              sub = std::make_unique<RunDirectory>(dir->root() / rel);
            }
            RunOutcome out = train_and_evaluate(cfg, model_view(cfg, pool), model_view(cfg, data.validation),
                                                model_view(cfg, data.test), sub.get());
            if (sub) sub->finish();
            run.train_seconds = out.train_seconds;
            run.steps_done = out.result.steps_done;
            if (out.result.reason == StopReason::Diverged) {
              run.failed = true;
              run.message = out.result.message;
            } else {
              run.test = std::move(out.test);
              if (lang >= 0)
                for (auto& u : run.test) u.language = lang;
            }
            const std::string vname(variant_name(variant));
            if ((variant == Variant::GEN || variant == Variant::SEP) && !cmp.encoder_params.count(vname))
              cmp.encoder_params[vname] = encoder_params_per_language(*out.model);
          } catch (const std::exception& e) {
            run.failed = true;
            run.message = e.what();
          }
          cell.push_back(run);
        }
      }
      const bool failed = std::any_of(cell.begin(), cell.end(), [](const ComparisonRun& r) { return r.failed; });
      if (failed) {
        EvalRow row;
        row.variant = variant_name(variant);
        row.regime = regime_name(regime);
        row.language = -1;
        row.failed = true;
        cmp.report.rows.push_back(row);
      } else {
        std::vector<UtteranceEval> pooled;
        for (const auto& r : cell) pooled.insert(pooled.end(), r.test.begin(), r.test.end());
        for (auto& row : summarize(variant_name(variant), regime_name(regime), pooled))
          cmp.report.rows.push_back(std::move(row));
      }
      cmp.runs.insert(cmp.runs.end(), cell.begin(), cell.end());
    }
  }
  cmp.seconds = seconds_since(t0);
  cmp.report.config = base.to_text();
  if (dir) {
    dir->write("config.cfg", cmp.report.config);
    dir->write("report.csv", cmp.report.csv());
    dir->write("report.txt", cmp.report.table());
    dir->write("metadata.txt", cmp.metadata());
    std::ostringstream runs;
    runs.precision(6);
    runs << "regime,variant,seed,language,failed,steps_done,train_seconds,message\n";
    for (const auto& r : cmp.runs)
      runs << regime_name(r.regime) << "," << variant_name(r.variant) << "," << r.seed << "," << r.language << ","
           << r.failed << "," << r.steps_done << "," << r.train_seconds << ",\"" << r.message << "\"\n";
    dir->write("runs.csv", runs.str());
    dir->adopt_tree("runs");
  }
  return cmp;
}

// ---- code switching --------------------------------------------------------

double CodeSwitchRun::mean_cer() const {
  double s = 0.0;
  for (const auto& r : results) s += r.cer;
  return results.empty() ? 0.0 : s / static_cast<double>(results.size());
}

double CodeSwitchRun::mean_foreign_cer() const {
  double s = 0.0;
  for (const auto& r : results) s += r.foreign_cer;
  return results.empty() ? 0.0 : s / static_cast<double>(results.size());
}

std::size_t CodeSwitchRun::word_skips() const {
  return static_cast<std::size_t>(
      std::count_if(results.begin(), results.end(), [](const CodeSwitchEval& r) { return r.word_skip; }));
}

std::vector<CodeSwitchRun> run_code_switch(const RunConfig& base, const Dataset& data,
                                           const std::vector<CodeSwitchSentence>& sentences, RunDirectory* dir) {
  std::vector<CodeSwitchRun> runs;
  std::ostringstream summary;
  summary.precision(17);
  summary << "variant,seed,sentences,mean_cer,mean_foreign_cer,word_skips\n";
  for (Variant variant : base.codeswitch_variants) {
    for (std::uint64_t seed : base.compare_seeds) {
      RunConfig cfg = base;
      cfg.variant = variant;
      cfg.seed = seed;
      cfg.classifier_enabled = base.codeswitch_classifier;
      std::unique_ptr<RunDirectory> sub;
      if (dir)
        sub = std::make_unique<RunDirectory>(dir->root() / "runs" / std::string(variant_name(variant)) /
                                             ("seed" + std::to_string(seed)));
      RunOutcome out = train_and_evaluate(cfg, data.train, data.validation, data.test, sub.get());
      CodeSwitchRun run;
      run.variant = variant;
      run.seed = seed;
      run.results = code_switch_eval(*out.model, sentences, cfg.eval);
      if (sub) {
        std::ostringstream os;
        os.precision(17);
        os << "sentence,base,cer,foreign_cer,word_skip\n";
        for (std::size_t i = 0; i < run.results.size(); ++i)
          os << i << "," << run.results[i].base << "," << run.results[i].cer << "," << run.results[i].foreign_cer
             << "," << run.results[i].word_skip << "\n";
        sub->write("codeswitch.csv", os.str());
        sub->finish();
      }
      summary << variant_name(variant) << "," << seed << "," << run.results.size() << "," << run.mean_cer() << ","
              << run.mean_foreign_cer() << "," << run.word_skips() << "\n";
      runs.push_back(std::move(run));
    }
  }
  if (dir) {
    dir->write("config.cfg", base.to_text());
    dir->write("codeswitch.csv", summary.str());
    dir->adopt_tree("runs");
  }
  return runs;
}

}  // namespace mtts
