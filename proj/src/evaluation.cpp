#include "mtts/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "mtts/errors.hpp"

namespace mtts {

namespace {

std::vector<int> chars(std::string_view s) { return {s.begin(), s.end()}; }

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string full(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({up + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

double cer(std::span<const int> reference, std::span<const int> hypothesis) {
  if (reference.empty()) throw ContractViolation("cer: empty reference");
  return static_cast<double>(edit_distance(reference, hypothesis)) / static_cast<double>(reference.size());
}

double cer(std::string_view reference, std::string_view hypothesis) {
  const auto r = chars(reference), h = chars(hypothesis);
  return cer(r, h);
}

std::vector<std::size_t> aligned_errors(std::span<const int> reference, std::span<const int> hypothesis) {
  const std::size_t n = reference.size(), m = hypothesis.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j) + 1, at(i, j - 1) + 1,
                           at(i - 1, j - 1) + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1)});
  std::vector<std::size_t> errors(n, 0);
  if (n == 0) return errors;
  // Backtrace preferring match/substitution, then deletion, then insertion.
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1)) {
      if (reference[i - 1] != hypothesis[j - 1]) ++errors[i - 1];
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++errors[i - 1];
      --i;
    } else {
      ++errors[std::min(i, n - 1)];  // insertion before reference symbol i
      --j;
    }
  }
  return errors;
}

std::vector<int> frames_to_symbols(const Tensor& frames, const PhonemeBank& bank, std::size_t r) {
  if (r == 0) throw ContractViolation("frames_to_symbols: r must be positive");
  if (!frames.defined() || frames.numel() == 0) return {};
  if (frames.rank() != 2 || frames.dim(1) != kFrameDim)
    throw ContractViolation("frames_to_symbols: frames must be [N, " + std::to_string(kFrameDim) + "], got " +
                            shape_str(frames.shape()));
  const std::size_t N = frames.dim(0);
  std::vector<int> out;
  std::array<double, kFrameDim> mean{};
  for (std::size_t start = 0; start < N; start += r) {
    const std::size_t end = std::min(N, start + r);
    mean.fill(0.0);
    for (std::size_t n = start; n < end; ++n)
      for (std::size_t f = 0; f < kFrameDim; ++f) mean[f] += frames[n * kFrameDim + f];
    for (double& v : mean) v /= static_cast<double>(end - start);
    const int symbol = bank.nearest(mean);
    if (symbol != kSilence) out.push_back(symbol);
  }
  return out;
}

std::vector<int> reference_symbols(const Utterance& u) { return language(u.language).phonemes(u.text); }

std::size_t expected_frames(std::size_t text_length) { return kFramesPerPhoneme * text_length + kSilenceFrames; }

InferenceResult synthesize(Model& model, std::string_view text, std::span<const int> languages, int base,
                           int speaker, std::size_t max_steps, SeededRng& rng, bool prenet_dropout) {
  if (text.empty()) throw ContractViolation("synthesize: empty text");
  if (languages.size() != text.size())
    throw ContractViolation("synthesize: one language per grapheme required");
  const ModelConfig& mc = model.config();
  const auto check = [&](int l) {
    if (l < 0 || static_cast<std::size_t>(l) >= mc.languages) throw LookupError("unknown language id " + std::to_string(l));
  };
  check(base);
  for (int l : languages) check(l);

  NoGradScope no_grad;
  const ForwardSettings settings{Mode::Eval, false, prenet_dropout, &rng};
  TokenBatch tb = TokenBatch::single(text, base);
  const bool mixed = std::any_of(languages.begin(), languages.end(), [&](int l) { return l != base; });
  Tensor encoded;
  if (mixed && traits(mc.variant).encoders_per_language) {
    const std::size_t T = text.size(), L = mc.languages;
    std::vector<double> w(T * L, 0.0);
    for (std::size_t t = 0; t < T; ++t) w[t * L + static_cast<std::size_t>(languages[t])] = 1.0;
    encoded = model.encode_mixed(tb, Tensor::from({1, T, L}, std::move(w)), settings);
  } else {
    encoded = model.encode(tb, settings);
  }
  const std::vector<int> speakers{speaker}, langs{base};
  Tensor memory = model.memory(encoded, speakers, langs);
  return model.infer(memory, tb.mask, max_steps, settings);
}

UtteranceEval score_frames(const Utterance& u, const Tensor& frames, bool stopped) {
  UtteranceEval e;
  e.id = u.id;
  e.language = u.language;
  e.stopped = stopped;
  e.frames = frames.defined() ? frames.dim(0) : 0;
  e.expected = expected_frames(u.text.size());
  e.hypothesis = frames_to_symbols(frames);
  e.cer = cer(reference_symbols(u), e.hypothesis);
  const std::size_t gap = e.frames > e.expected ? e.frames - e.expected : e.expected - e.frames;
  e.word_skip = !stopped || gap > kFramesPerPhoneme;
  return e;
}

std::vector<UtteranceEval> evaluate_model(Model& model, const std::vector<Utterance>& split, const EvalConfig& cfg) {
  std::vector<UtteranceEval> out;
  out.reserve(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    const Utterance& u = split[i];
    SeededRng rng(derive_seed(cfg.seed, i));
    const std::vector<int> langs(u.text.size(), u.language);
    const std::size_t max_steps = cfg.max_steps_factor * expected_frames(u.text.size()) + 10;
    InferenceResult inf = synthesize(model, u.text, langs, u.language, u.speaker, max_steps, rng, cfg.prenet_dropout);
    out.push_back(score_frames(u, inf.frames, inf.stopped));
  }
  return out;
}

std::vector<EvalRow> summarize(std::string_view variant, std::string_view regime,
                               const std::vector<UtteranceEval>& results) {
  std::map<int, std::vector<const UtteranceEval*>> by_language;
  for (const auto& r : results) by_language[r.language].push_back(&r);
  std::vector<EvalRow> rows;
  for (const auto& [lang, items] : by_language) {
    EvalRow row;
    row.variant = variant;
    row.regime = regime;
    row.language = lang;
    row.n = items.size();
    for (const auto* r : items) {
      row.mean += r->cer;
      row.word_skips += r->word_skip ? 1 : 0;
    }
    row.mean /= static_cast<double>(row.n);
    for (const auto* r : items) row.std += (r->cer - row.mean) * (r->cer - row.mean);
    row.std = std::sqrt(row.std / static_cast<double>(row.n));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string EvalReport::csv() const {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : rows)
    out += r.variant + "," + r.regime + "," + std::to_string(r.language) + "," + (r.failed ? "" : full(r.mean)) + "," +
           (r.failed ? "" : full(r.std)) + "," + std::to_string(r.n) + "," + std::to_string(r.word_skips) + "," +
           (r.failed ? "1" : "0") + "\n";
  return out;
}

std::string EvalReport::table() const {
  std::vector<std::string> regimes, variants;
  std::set<int> languages;
  for (const auto& r : rows) {
    if (std::find(regimes.begin(), regimes.end(), r.regime) == regimes.end()) regimes.push_back(r.regime);
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
    if (r.language >= 0) languages.insert(r.language);
  }
  auto find = [&](const std::string& regime, const std::string& variant, int lang) -> const EvalRow* {
    for (const auto& r : rows)
      if (r.regime == regime && r.variant == variant && (r.language == lang || r.failed)) return &r;
    return nullptr;
  };
  constexpr int kWidth = 16;
  std::ostringstream os;
  for (const auto& regime : regimes) {
    os << "regime: " << regime << "\n" << std::left << std::setw(10) << "language";
    for (const auto& v : variants) os << std::right << std::setw(kWidth) << v;
    os << "\n";
    for (int lang : languages) {
      os << std::left << std::setw(10) << lang;
      for (const auto& v : variants) {
        const EvalRow* r = find(regime, v, lang);
        std::string cell = !r ? "-" : r->failed ? "failed" : fixed(r->mean, 3) + " +- " + fixed(r->std, 3);
        os << std::right << std::setw(kWidth) << cell;
      }
      os << "\n";
    }
    os << std::left << std::setw(10) << "skips";
    for (const auto& v : variants) {
      std::size_t skips = 0, n = 0;
      for (const auto& r : rows)
        if (r.regime == regime && r.variant == v) {
          skips += r.word_skips;
          n += r.n;
        }
      os << std::right << std::setw(kWidth) << (std::to_string(skips) + "/" + std::to_string(n));
    }
    os << "\n\n";
  }
  return os.str();
}

// ---- code switching --------------------------------------------------------

std::string CodeSwitchSentence::text() const {
  std::string s;
  for (const auto& t : tokens) s += t.word;
  return s;
}

std::vector<int> CodeSwitchSentence::grapheme_languages() const {
  std::vector<int> out;
  for (const auto& t : tokens) out.insert(out.end(), t.word.size(), t.language);
  return out;
}

std::vector<int> CodeSwitchSentence::reference() const {
  std::vector<int> out;
  for (const auto& t : tokens) {
    const auto p = language(t.language).phonemes(t.word);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<bool> CodeSwitchSentence::foreign_mask() const {
  std::vector<bool> out;
  for (const auto& t : tokens) out.insert(out.end(), t.word.size(), t.language != base);
  return out;
}

std::vector<CodeSwitchSentence> make_code_switch_sentences(std::size_t languages, const CodeSwitchSpec& spec) {
  if (languages < 2) throw ConfigError("code switching needs at least two languages");
  if (languages > kMaxLanguages) throw ConfigError("code switching: too many languages");
  if (spec.words == 0 || spec.word_length == 0 || spec.foreign_words == 0 || spec.foreign_words >= spec.words)
    throw ConfigError("code switching: need 0 < foreign_words < words and non-empty words");
  SeededRng rng(spec.seed);
  std::vector<CodeSwitchSentence> out;
  for (std::size_t base = 0; base < languages; ++base) {
    for (std::size_t k = 0; k < spec.per_language; ++k) {
      CodeSwitchSentence s;
      s.base = static_cast<int>(base);
      std::size_t other = rng.below(languages - 1);
      if (other >= base) ++other;
      const std::size_t start = rng.below(spec.words - spec.foreign_words + 1);
      for (std::size_t w = 0; w < spec.words; ++w) {
        CodeSwitchToken t;
        for (std::size_t c = 0; c < spec.word_length; ++c)
          t.word.push_back(static_cast<char>('a' + rng.below(kAlphabetSize)));
        const bool foreign = w >= start && w < start + spec.foreign_words;
        t.language = static_cast<int>(foreign ? other : base);
        s.tokens.push_back(std::move(t));
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

void write_code_switch(const std::filesystem::path& path, const std::vector<CodeSwitchSentence>& sentences) {
  std::ofstream out(path);
  if (!out) throw ContractViolation("cannot write " + path.string());
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i > 0) out << "\n";
    for (const auto& t : sentences[i].tokens) out << t.word << '\t' << t.language << "\n";
  }
}

std::vector<CodeSwitchSentence> read_code_switch(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractViolation("cannot read " + path.string());
  std::vector<CodeSwitchSentence> out;
  CodeSwitchSentence current;
  auto flush = [&] {
    if (current.tokens.empty()) return;
    std::map<int, std::size_t> counts;
    for (const auto& t : current.tokens) counts[t.language] += t.word.size();
    current.base = std::max_element(counts.begin(), counts.end(), [](const auto& a, const auto& b) {
                     return a.second < b.second;
                   })->first;
    out.push_back(std::move(current));
    current = {};
  };
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) throw ParseError("code-switch file: expected token<TAB>language", line_no);
    CodeSwitchToken t;
    t.word = line.substr(0, tab);
    for (char c : t.word)
      if (c < 'a' || c >= static_cast<char>('a' + kAlphabetSize))
        throw ParseError("code-switch file: grapheme outside the alphabet in '" + t.word + "'", line_no);
    const std::string lang = line.substr(tab + 1);
    std::size_t used = 0;
    try {
      t.language = std::stoi(lang, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != lang.size()) throw ParseError("code-switch file: bad language '" + lang + "'", line_no);
    current.tokens.push_back(std::move(t));
  }
  flush();
  return out;
}

std::vector<CodeSwitchEval> code_switch_eval(Model& model, const std::vector<CodeSwitchSentence>& sentences,
                                             const EvalConfig& cfg) {
  const ModelConfig& mc = model.config();
  if (mc.variant == Variant::SGL) throw ContractViolation("code_switch_eval: a single-language model cannot switch");
  const std::size_t spl = mc.speakers / mc.languages;
  std::vector<CodeSwitchEval> out;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const CodeSwitchSentence& s = sentences[i];
    for (const auto& t : s.tokens)
      if (t.language < 0 || static_cast<std::size_t>(t.language) >= mc.languages)
        throw LookupError("code_switch_eval: unknown language tag " + std::to_string(t.language));
    const std::string text = s.text();
    const std::vector<int> langs = s.grapheme_languages();
    SeededRng rng(derive_seed(cfg.seed, i));
    const std::size_t max_steps = cfg.max_steps_factor * expected_frames(text.size()) + 10;
    InferenceResult inf = synthesize(model, text, langs, s.base, s.base * static_cast<int>(spl), max_steps, rng,
                                     cfg.prenet_dropout);
    const std::vector<int> ref = s.reference();
    const std::vector<int> hyp = frames_to_symbols(inf.frames);
    const std::vector<std::size_t> errors = aligned_errors(ref, hyp);
    const std::vector<bool> foreign = s.foreign_mask();
    std::size_t span = 0, span_errors = 0;
    for (std::size_t k = 0; k < ref.size(); ++k)
      if (foreign[k]) {
        ++span;
        span_errors += errors[k];
      }
    CodeSwitchEval e;
    e.base = s.base;
    e.cer = cer(ref, hyp);
    e.foreign_cer = span ? static_cast<double>(span_errors) / static_cast<double>(span) : 0.0;
    const std::size_t expected = expected_frames(text.size());
    const std::size_t gap = inf.steps > expected ? inf.steps - expected : expected - inf.steps;
    e.word_skip = !inf.stopped || gap > kFramesPerPhoneme;
    out.push_back(e);
  }
  return out;
}

}  // namespace mtts
