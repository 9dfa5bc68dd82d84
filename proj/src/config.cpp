#include "mtts/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <limits>

#include "mtts/errors.hpp"

namespace mtts {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> out;
  if (trim(v).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    out.push_back(trim(v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

[[noreturn]] void bad_value(std::string_view v, const char* expected) {
  throw ConfigError("'" + std::string(v) + "' is not " + expected);
}

std::string show(std::size_t v) { return std::to_string(v); }
std::string show(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}
std::string show(int v) { return std::to_string(v); }
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(const std::string& v) { return v; }
std::string show(Variant v) { return std::string(variant_name(v)); }
std::string show(Regime r) { return std::string(regime_name(r)); }
template <typename T>
std::string show(const std::optional<T>& v) {
  return v ? show(*v) : "auto";
}
template <typename T>
std::string show(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + show(v[i]);
  return out;
}

void read(std::string_view v, std::size_t& out) {
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(v, "a non-negative integer");
}
void read(std::string_view v, double& out) {
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    if (v == "inf") {
      out = std::numeric_limits<double>::infinity();
      return;
    }
    bad_value(v, "a number");
  }
}
void read(std::string_view v, int& out) {
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(v, "an integer");
}
void read(std::string_view v, bool& out) {
  if (v == "true" || v == "1" || v == "yes")
    out = true;
  else if (v == "false" || v == "0" || v == "no")
    out = false;
  else
    bad_value(v, "a boolean");
}
void read(std::string_view v, std::string& out) {
  if (v.empty()) bad_value(v, "a non-empty string");
  out = std::string(v);
}
void read(std::string_view v, Variant& out) {
  try {
    out = parse_variant(v);
  } catch (const std::exception&) {
    bad_value(v, "a variant (GEN, SHA, SEP, SGL)");
  }
}
void read(std::string_view v, Regime& out) {
  try {
    out = parse_regime(v);
  } catch (const std::exception&) {
    bad_value(v, "a regime (full, stress_small, stress_tiny)");
  }
}
template <typename T>
void read(std::string_view v, std::optional<T>& out) {
  if (v == "auto") {
    out.reset();
    return;
  }
  T x{};
  read(v, x);
  out = x;
}
template <typename T>
void read(std::string_view v, std::vector<T>& out) {
  out.clear();
  for (auto item : split_list(v)) {
    T x{};
    read(item, x);
    out.push_back(x);
  }
}

/// 0 means "auto" for these fields.
struct AutoDouble {
  double& value;
};
std::string show(const AutoDouble& a) { return a.value == 0.0 ? "auto" : show(a.value); }
void read(std::string_view v, AutoDouble a) {
  if (v == "auto")
    a.value = 0.0;
  else
    read(v, a.value);
}

struct Field {
  std::string section, key;
  std::function<std::string(RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename Access>
Field field(std::string section, std::string key, Access access) {
  return {std::move(section), std::move(key), [access](RunConfig& c) { return show(access(c)); },
          [access](RunConfig& c, std::string_view v) { read(v, access(c)); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using C = RunConfig;
    std::vector<Field> f;
    f.push_back(field("run", "variant", [](C& c) -> auto& { return c.variant; }));
    f.push_back(field("run", "seed", [](C& c) -> auto& { return c.seed; }));
    f.push_back(field("run", "name", [](C& c) -> auto& { return c.name; }));
    f.push_back(field("run", "language", [](C& c) -> auto& { return c.language; }));

    f.push_back(field("corpus", "languages", [](C& c) -> auto& { return c.corpus.languages; }));
    f.push_back(field("corpus", "speakers_per_language", [](C& c) -> auto& { return c.corpus.speakers_per_language; }));
    f.push_back(field("corpus", "train_per_language", [](C& c) -> auto& { return c.corpus.train_per_language; }));
    f.push_back(field("corpus", "val_per_language", [](C& c) -> auto& { return c.corpus.val_per_language; }));
    f.push_back(field("corpus", "test_per_language", [](C& c) -> auto& { return c.corpus.test_per_language; }));
    f.push_back(field("corpus", "text_min", [](C& c) -> auto& { return c.corpus.text_min; }));
    f.push_back(field("corpus", "text_max", [](C& c) -> auto& { return c.corpus.text_max; }));
    f.push_back(field("corpus", "noise_std", [](C& c) -> auto& { return c.corpus.noise_std; }));
    f.push_back(field("corpus", "speaker_offset_norm", [](C& c) -> auto& { return c.corpus.speaker_offset_norm; }));
    f.push_back(field("corpus", "outlier_rate", [](C& c) -> auto& { return c.corpus.outlier_rate; }));
    f.push_back(field("corpus", "seed", [](C& c) -> auto& { return c.corpus.seed; }));

    f.push_back(field("clean", "enabled", [](C& c) -> auto& { return c.clean_enabled; }));
    f.push_back(field("clean", "min_duration", [](C& c) -> auto& { return c.clean.min_duration; }));
    f.push_back(field("clean", "max_duration", [](C& c) -> auto& { return c.clean.max_duration; }));
    f.push_back(field("clean", "min_chars", [](C& c) -> auto& { return c.clean.min_chars; }));
    f.push_back(field("clean", "max_chars", [](C& c) -> auto& { return c.clean.max_chars; }));

    f.push_back(field("encoder", "embedding_dim", [](C& c) -> auto& { return c.embedding_dim; }));
    f.push_back(field("encoder", "channels", [](C& c) -> auto& { return c.channels; }));
    f.push_back(field("encoder", "sites", [](C& c) -> auto& { return c.sites; }));
    f.push_back(field("encoder", "kernel", [](C& c) -> auto& { return c.kernel; }));
    f.push_back(field("encoder", "dropout", [](C& c) -> auto& { return c.encoder_dropout; }));

    f.push_back(field("decoder", "prenet", [](C& c) -> auto& { return c.decoder.prenet; }));
    f.push_back(field("decoder", "prenet_dropout", [](C& c) -> auto& { return c.decoder.prenet_dropout; }));
    f.push_back(field("decoder", "attention_lstm", [](C& c) -> auto& { return c.decoder.attention_lstm; }));
    f.push_back(field("decoder", "decoder_lstm", [](C& c) -> auto& { return c.decoder.decoder_lstm; }));
    f.push_back(field("decoder", "attention_dim", [](C& c) -> auto& { return c.decoder.attention_dim; }));
    f.push_back(field("decoder", "location_filters", [](C& c) -> auto& { return c.decoder.location_filters; }));
    f.push_back(field("decoder", "location_kernel", [](C& c) -> auto& { return c.decoder.location_kernel; }));
    f.push_back(field("decoder", "stop_pos_weight", [](C& c) -> auto& { return c.decoder.stop_pos_weight; }));

    f.push_back(field("model", "language_dim", [](C& c) -> auto& { return c.language_dim; }));
    f.push_back(field("model", "generator_dim", [](C& c) -> auto& { return c.generator_dim; }));
    f.push_back(field("model", "speaker_dim", [](C& c) -> auto& { return c.speaker_dim; }));

    f.push_back(field("classifier", "enabled", [](C& c) -> auto& { return c.classifier_enabled; }));
    f.push_back(field("classifier", "hidden", [](C& c) -> auto& { return c.classifier_hidden; }));
    f.push_back(field("classifier", "lambda", [](C& c) -> auto& { return c.classifier_lambda; }));
    f.push_back(field("classifier", "weight", [](C& c) -> auto& { return c.classifier_weight; }));
    f.push_back(field("classifier", "clamp", [](C& c) -> auto& { return c.classifier_clamp; }));

    f.push_back(field("train", "steps", [](C& c) -> auto& { return c.train.steps; }));
    f.push_back(field("train", "lr0", [](C& c) { return AutoDouble{c.train.lr0}; }));
    f.push_back(field("train", "sep_lr0", [](C& c) -> auto& { return c.sep_lr0; }));
    f.push_back(field("train", "lr_halving_interval", [](C& c) -> auto& { return c.train.lr_halving_interval; }));
    f.push_back(field("train", "beta1", [](C& c) -> auto& { return c.train.beta1; }));
    f.push_back(field("train", "beta2", [](C& c) -> auto& { return c.train.beta2; }));
    f.push_back(field("train", "epsilon", [](C& c) -> auto& { return c.train.epsilon; }));
    f.push_back(field("train", "weight_decay", [](C& c) -> auto& { return c.train.weight_decay; }));
    f.push_back(field("train", "batch_size", [](C& c) -> auto& { return c.train.batch_size; }));
    f.push_back(field("train", "g0", [](C& c) -> auto& { return c.train.g0; }));
    f.push_back(field("train", "g_growth", [](C& c) { return AutoDouble{c.train.g_growth}; }));
    f.push_back(field("train", "g_cap", [](C& c) -> auto& { return c.train.g_cap; }));
    f.push_back(field("train", "guided_weight", [](C& c) -> auto& { return c.train.guided_weight; }));
    f.push_back(field("train", "validation_tolerance", [](C& c) -> auto& { return c.train.validation_tolerance; }));
    f.push_back(field("train", "validate_every", [](C& c) -> auto& { return c.train.validate_every; }));
    f.push_back(field("train", "patience", [](C& c) -> auto& { return c.train.patience; }));
    f.push_back(field("train", "clip_norm", [](C& c) -> auto& { return c.train.clip_norm; }));
    f.push_back(field("train", "divergence_threshold", [](C& c) -> auto& { return c.train.divergence_threshold; }));

    f.push_back(field("eval", "max_steps_factor", [](C& c) -> auto& { return c.eval.max_steps_factor; }));
    f.push_back(field("eval", "prenet_dropout", [](C& c) -> auto& { return c.eval.prenet_dropout; }));
    f.push_back(field("eval", "seed", [](C& c) -> auto& { return c.eval.seed; }));

    f.push_back(field("compare", "variants", [](C& c) -> auto& { return c.compare_variants; }));
    f.push_back(field("compare", "seeds", [](C& c) -> auto& { return c.compare_seeds; }));
    f.push_back(field("compare", "regimes", [](C& c) -> auto& { return c.compare_regimes; }));
    f.push_back(field("compare", "stress_small_per_language",
                      [](C& c) -> auto& { return c.stress_small_per_language; }));
    f.push_back(field("compare", "stress_small_lr_halving_interval",
                      [](C& c) -> auto& { return c.stress_small_lr_halving_interval; }));
    f.push_back(field("compare", "stress_tiny_per_language",
                      [](C& c) -> auto& { return c.stress_tiny_per_language; }));
    f.push_back(field("compare", "stress_tiny_lr_halving_interval",
                      [](C& c) -> auto& { return c.stress_tiny_lr_halving_interval; }));

    f.push_back(field("codeswitch", "variants", [](C& c) -> auto& { return c.codeswitch_variants; }));
    f.push_back(field("codeswitch", "classifier", [](C& c) -> auto& { return c.codeswitch_classifier; }));
    f.push_back(field("codeswitch", "per_language", [](C& c) -> auto& { return c.codeswitch.per_language; }));
    f.push_back(field("codeswitch", "words", [](C& c) -> auto& { return c.codeswitch.words; }));
    f.push_back(field("codeswitch", "word_length", [](C& c) -> auto& { return c.codeswitch.word_length; }));
    f.push_back(field("codeswitch", "foreign_words", [](C& c) -> auto& { return c.codeswitch.foreign_words; }));
    f.push_back(field("codeswitch", "seed", [](C& c) -> auto& { return c.codeswitch.seed; }));
    return f;
  }();
  return table;
}

}  // namespace

std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::Full:
      return "full";
    case Regime::StressSmall:
      return "stress_small";
    case Regime::StressTiny:
      return "stress_tiny";
  }
  return "?";
}

Regime parse_regime(std::string_view name) {
  for (Regime r : {Regime::Full, Regime::StressSmall, Regime::StressTiny})
    if (name == regime_name(r)) return r;
  throw ConfigError("unknown regime '" + std::string(name) + "'");
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  std::set<std::string> sections;
  for (const auto& f : fields()) sections.insert(f.section);
  std::set<std::pair<std::string, std::string>> seen;
  std::string section;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("config: unterminated section header", line_no);
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!sections.count(section)) throw ParseError("config: unknown section [" + section + "]", line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError("config: expected key = value", line_no);
    if (section.empty()) throw ParseError("config: key outside any section", line_no);
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto it = std::find_if(fields().begin(), fields().end(),
                                 [&](const Field& f) { return f.section == section && f.key == key; });
    if (it == fields().end()) throw ParseError("config: unknown key '" + key + "' in [" + section + "]", line_no);
    if (!seen.insert({section, key}).second)
      throw ParseError("config: duplicate key '" + key + "' in [" + section + "]", line_no);
    try {
      it->set(c, value);
    } catch (const ConfigError& e) {
      throw ParseError("config: [" + section + "] " + key + ": " + e.what(), line_no);
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  std::string out, section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get(copy) + "\n";
  }
  return out;
}

bool RunConfig::operator==(const RunConfig& other) const { return to_text() == other.to_text(); }

std::size_t RunConfig::model_languages() const { return variant == Variant::SGL ? 1 : corpus.languages; }

ModelConfig RunConfig::model_config() const {
  const std::size_t L = model_languages();
  ModelConfig m = ModelConfig::defaults(variant, L, L * corpus.speakers_per_language);
  m.encoder = EncoderSpec::standard(embedding_dim, channels, sites, kernel, encoder_dropout);
  m.decoder = decoder;
  if (language_dim) m.language_dim = *language_dim;
  m.generator_dim = generator_dim;
  m.speaker_dim = speaker_dim;
  m.classifier.enabled = classifier_enabled;
  m.classifier.hidden = classifier_hidden;
  m.classifier.lambda = classifier_lambda;
  if (classifier_weight) m.classifier.weight = *classifier_weight;
  m.classifier.clamp = classifier_clamp;
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  if (variant == Variant::SEP) {
    if (sep_lr0)
      t.lr0 = *sep_lr0;
    else if (train.lr0 != 0.0)
      t.lr0 = train.lr0 / 10.0;
  }
  return t.resolved(variant);
}

std::size_t RunConfig::regime_per_language(Regime r) const {
  switch (r) {
    case Regime::Full:
      return 0;
    case Regime::StressSmall:
      return stress_small_per_language;
    case Regime::StressTiny:
      return stress_tiny_per_language;
  }
  return 0;
}

std::size_t RunConfig::regime_lr_halving_interval(Regime r) const {
  switch (r) {
    case Regime::Full:
      return train.lr_halving_interval;
    case Regime::StressSmall:
      return stress_small_lr_halving_interval;
    case Regime::StressTiny:
      return stress_tiny_lr_halving_interval;
  }
  return train.lr_halving_interval;
}

std::uint64_t RunConfig::model_seed() const { return derive_seed(seed, 0x6d6f64656c); }

void RunConfig::validate() const {
  if (corpus.languages == 0 || corpus.languages > kMaxLanguages)
    throw ConfigError("config: corpus.languages must be in [1, " + std::to_string(kMaxLanguages) + "]");
  if (corpus.speakers_per_language == 0) throw ConfigError("config: corpus.speakers_per_language must be positive");
  if (language < 0 || static_cast<std::size_t>(language) >= corpus.languages)
    throw ConfigError("config: run.language must name one of the corpus languages");
  if (compare_variants.empty()) throw ConfigError("config: compare.variants is empty");
  if (compare_seeds.empty()) throw ConfigError("config: compare.seeds is empty");
  if (compare_regimes.empty()) throw ConfigError("config: compare.regimes is empty");
  if (stress_small_per_language == 0 || stress_tiny_per_language == 0 || stress_small_lr_halving_interval == 0 ||
      stress_tiny_lr_halving_interval == 0)
    throw ConfigError("config: stress settings must be positive");
  if (sep_lr0 && !(*sep_lr0 > 0.0)) throw ConfigError("config: train.sep_lr0 must be positive");
  if (eval.max_steps_factor == 0) throw ConfigError("config: eval.max_steps_factor must be positive");
  for (Variant v : codeswitch_variants)
    if (v == Variant::SGL) throw ConfigError("config: SGL cannot run code-switching");
  model_config().validate();
  train_config().validate();
}

}  // namespace mtts
