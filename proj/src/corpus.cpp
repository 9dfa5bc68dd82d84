#include "mtts/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include "mtts/errors.hpp"

namespace mtts {

namespace {

constexpr std::uint64_t kLanguageSeed = 0x6c616e6775616765ULL;
// Phoneme vectors chosen so that every triangle formed by two of them and a
// third (silence included) has all angles below 90 degrees, with cosine at
// least 0.0789. Hence the midpoint of any two vectors is strictly nearer to
// those two than to any other. Pairwise distance >= 1.0136, norms <= 1.9972.
constexpr double kBankTable[kAlphabetSize][kFrameDim] = {
    {0.73055244268998909, -0.41171037118364062, -0.21615520609524469, 0.24792390849598753, 0.89223959965701127, -0.66017396380198157, -0.32056572179729681, -0.5343376408382603},
    {0.96894419804869203, 0.49057586903202172, 0.011919075259130503, 0.70858467646903378, 0.28957293126615535, -0.59130167697353242, -0.12460952357398644, 0.0096156574935681791},
    {-0.039406182728871267, 0.43538441058834776, -0.97240887686720823, 0.081959921698798677, 0.16787200495003063, -1.0752056617347261, -0.17657695944213322, 0.19037772416123128},
    {-0.1209420121883422, 0.43149066437851125, -0.62450512245740475, 0.88609303465709843, 0.27814785106740414, -0.45068354667140331, -0.95534697446123029, -0.5343974463796568},
    {0.64389093264226172, -0.081513442210393944, -0.77935471254194444, 0.82952393768040233, -0.68281074219890947, -0.39677252200882795, -0.25694698790944498, -0.0085437150338813824},
    {0.16470034648539, -0.431051566592483, -1.290049022198426, 0.44285391102770516, 0.27609897173993625, -0.6554714721880126, -0.10690819843344811, -0.45380926127272275},
    {0.5564097996601518, 0.4026161463681277, -0.28090123587387544, 1.0621974237139291, 0.43443572077649872, 0.18675536848922936, -0.58300630457988589, 0.1616057475251835},
    {0.7496037183260722, -0.011585805463088584, -1.0367032488440215, 0.65985808014373781, 0.35950297965069, -0.92164460460540121, -0.96020812049659987, -0.12589157918633695},
    {0.14030702344174539, 0.58318733061982031, 0.027127120054444755, 0.13165333850416491, 0.31206707765486708, -0.84855308308823019, -0.70983350859729599, -0.51992204885194548},
    {0.77985434384751184, 0.37434450177257339, -0.72733990972683582, -0.37683402418068329, -0.3108976164062085, -0.63021822568636154, -0.9165938245228169, -0.1151759499039591},
    {0.60238003516793115, 0.13204811258384297, -0.61255220235192176, 0.092025498148458937, 0.76599658495304068, -0.29243131618189838, -0.67891622897269499, 0.72532086216776948},
    {0.070328908119470762, -0.66164032817974971, -0.36053788776105855, 0.07383595635006969, 0.65861038208382539, -0.55403824833328297, 0.0085000633040507208, 0.21009268514128854},
    {-0.12925945082887211, 0.066817510924219642, -0.20859761552511277, 1.0043454551952684, -0.22679561362652914, -0.2361413653106918, -0.65907075267771675, 0.29527685257553027},
    {0.57183049210543302, 0.34940336618482609, -0.49851239838321793, 0.15452842989514365, -0.080320320880732557, -0.29588855836716016, 0.39058206240642385, 0.24386802639185176},
    {0.2138862996132494, -0.66829558386808585, -0.6220723317162723, 0.63138735273605473, 0.18615177763101087, -0.50076088246549044, -0.96663627018240528, 0.53385844755898537},
    {0.51222291789108154, -0.50429036512579861, -0.39439550914858629, -0.022427905583010822, -0.57433686296030229, -0.068659409295277557, -0.47395627258889861, -0.28502998862926171},
    {-0.081368745618257729, 0.47491255492839157, -0.60139373255376694, -0.28518542375213551, 0.29328545620308849, -0.018950264832927836, -0.77133579188402657, 0.17161605429015864},
    {0.37983829194503749, 0.059274278899676465, -0.2728850737500389, 0.36766535841548559, 0.33643684546541097, 0.078672654446855561, -0.15946187411658325, -0.88066431262749534},
    {0.69188406014943171, -0.13150854490343605, -1.1215587452841727, 0.025701751427257349, 0.32765123565556981, 0.1161624829505212, -0.89041461269028321, -0.36946511201562687},
    {0.83156450735204945, -0.59267583351073816, 0.10460922203995436, 0.24740817534158438, -0.10624134389572425, -0.69353555082649077, -0.85786931570022396, -0.0041013109534919533},
};

std::size_t permutation_distance(const std::array<int, kAlphabetSize>& a, const std::array<int, kAlphabetSize>& b) {
  std::size_t d = 0;
  for (std::size_t i = 0; i < kAlphabetSize; ++i) d += a[i] != b[i];
  return d;
}

double distance(const PhonemeBank::Vector& a, const PhonemeBank::Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < kFrameDim; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

int parse_int(const std::string& s, const std::string& what, std::size_t line) {
  try {
    std::size_t used = 0;
    int v = std::stoi(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError("manifest: bad " + what + " '" + s + "'", line);
}

}  // namespace

int grapheme_token(char grapheme) {
  int idx = grapheme - 'a';
  if (idx < 0 || idx >= static_cast<int>(kAlphabetSize))
    throw LookupError(std::string("grapheme '") + grapheme + "' outside the alphabet");
  return idx + 1;
}

char token_grapheme(int token) {
  if (token < 1 || token > static_cast<int>(kAlphabetSize))
    throw LookupError("token " + std::to_string(token) + " is not a grapheme");
  return static_cast<char>('a' + token - 1);
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(grapheme_token(c));
  return out;
}

std::vector<int> ToyLanguage::phonemes(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(grapheme_to_phoneme[static_cast<std::size_t>(grapheme_token(c) - 1)]);
  return out;
}

const std::vector<ToyLanguage>& standard_languages() {
  static const std::vector<ToyLanguage> languages = [] {
    SeededRng rng(kLanguageSeed);
    std::vector<ToyLanguage> out;
    while (out.size() < kMaxLanguages) {
      ToyLanguage lang;
      lang.id = static_cast<int>(out.size());
      lang.name = "lang" + std::to_string(lang.id);
      std::vector<int> perm(kAlphabetSize);
      for (std::size_t i = 0; i < kAlphabetSize; ++i) perm[i] = static_cast<int>(i);
      rng.shuffle(perm);
      std::copy(perm.begin(), perm.end(), lang.grapheme_to_phoneme.begin());
      bool distinct = std::all_of(out.begin(), out.end(), [&](const ToyLanguage& other) {
        return permutation_distance(other.grapheme_to_phoneme, lang.grapheme_to_phoneme) >= kAlphabetSize / 2;
      });
      if (distinct) out.push_back(std::move(lang));
    }
    return out;
  }();
  return languages;
}

const ToyLanguage& language(int id) {
  const auto& all = standard_languages();
  if (id < 0 || id >= static_cast<int>(all.size())) throw LookupError("unknown language id " + std::to_string(id));
  return all[static_cast<std::size_t>(id)];
}

PhonemeBank::PhonemeBank(std::vector<Vector> vectors) : vectors_(std::move(vectors)) {}

const PhonemeBank& PhonemeBank::standard() {
  static const PhonemeBank bank = [] {
    std::vector<Vector> v(kAlphabetSize + 1, Vector{});
    for (std::size_t i = 0; i < kAlphabetSize; ++i) std::copy(std::begin(kBankTable[i]), std::end(kBankTable[i]), v[i].begin());
    return PhonemeBank(std::move(v));
  }();
  return bank;
}

int PhonemeBank::nearest(std::span<const double> frame) const {
  if (frame.size() != kFrameDim)
    throw ContractViolation("nearest: frame of size " + std::to_string(frame.size()) + ", expected " +
                            std::to_string(kFrameDim));
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < vectors_.size(); ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < kFrameDim; ++i) s += (frame[i] - vectors_[p][i]) * (frame[i] - vectors_[p][i]);
    if (s < best_d) {
      best_d = s;
      best = static_cast<int>(p);
    }
  }
  return best;
}

double PhonemeBank::min_pairwise_distance() const {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < vectors_.size(); ++a)
    for (std::size_t b = a + 1; b < vectors_.size(); ++b) best = std::min(best, distance(vectors_[a], vectors_[b]));
  return best;
}

std::vector<Utterance> Corpus::split(std::string_view name) const {
  std::vector<Utterance> out;
  for (const auto& u : utterances)
    if (u.split == name) out.push_back(u);
  return out;
}

Tensor render_frames(std::span<const int> phonemes, const PhonemeBank::Vector& offset, std::size_t silence,
                     double noise_std, SeededRng& rng) {
  const auto& bank = PhonemeBank::standard();
  std::size_t n = phonemes.size() * kFramesPerPhoneme + silence;
  std::vector<double> data;
  data.reserve(n * kFrameDim);
  auto emit = [&](const PhonemeBank::Vector& v) {
    for (std::size_t i = 0; i < kFrameDim; ++i) data.push_back(v[i] + offset[i] + noise_std * rng.normal());
  };
  for (int p : phonemes)
    for (std::size_t r = 0; r < kFramesPerPhoneme; ++r) emit(bank.vector(p));
  for (std::size_t s = 0; s < silence; ++s) emit(bank.vector(kSilence));
  return Tensor::from({n, kFrameDim}, std::move(data));
}

std::vector<PhonemeBank::Vector> speaker_offsets(std::size_t speakers, double norm, std::uint64_t seed) {
  SeededRng rng(derive_seed(seed, 0x73706b));
  std::vector<PhonemeBank::Vector> out(speakers);
  for (auto& v : out) {
    double len = 0.0;
    while (len < 1e-6) {
      for (double& x : v) x = rng.normal();
      len = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    }
    for (double& x : v) x *= norm / len;
  }
  return out;
}

Corpus generate_toy_corpus(const CorpusConfig& cfg) {
  if (cfg.languages < 1 || cfg.languages > kMaxLanguages)
    throw ConfigError("corpus: languages must be in [1, " + std::to_string(kMaxLanguages) + "]");
  if (cfg.speakers_per_language < 1) throw ConfigError("corpus: speakers_per_language must be >= 1");
  if (cfg.text_min < 1 || cfg.text_min > cfg.text_max) throw ConfigError("corpus: bad text length range");
  if (cfg.outlier_rate < 0.0 || cfg.outlier_rate > 1.0) throw ConfigError("corpus: outlier_rate outside [0, 1]");

  Corpus corpus;
  corpus.num_languages = cfg.languages;
  corpus.speakers_per_language = cfg.speakers_per_language;
  auto offsets = speaker_offsets(corpus.num_speakers(), cfg.speaker_offset_norm, cfg.seed);

  std::size_t per_language = cfg.train_per_language + cfg.val_per_language + cfg.test_per_language;
  for (std::size_t l = 0; l < cfg.languages; ++l) {
    const ToyLanguage& lang = language(static_cast<int>(l));
    SeededRng rng(derive_seed(cfg.seed, 0x1000 + l));
    for (std::size_t i = 0; i < per_language; ++i) {
      Utterance u;
      std::ostringstream id;
      id << lang.name << '_' << std::setw(5) << std::setfill('0') << i;
      u.id = id.str();
      u.language = static_cast<int>(l);
      u.speaker = static_cast<int>(l * cfg.speakers_per_language + rng.below(cfg.speakers_per_language));
      std::size_t len = cfg.text_min + rng.below(cfg.text_max - cfg.text_min + 1);
      for (std::size_t c = 0; c < len; ++c) u.text.push_back(static_cast<char>('a' + rng.below(kAlphabetSize)));
      std::size_t silence = kSilenceFrames;
      if (cfg.outlier_rate > 0.0 && rng.bernoulli(cfg.outlier_rate)) silence += 2 * len * kFramesPerPhoneme;
      u.frames = render_frames(lang.phonemes(u.text), offsets[static_cast<std::size_t>(u.speaker)], silence,
                               cfg.noise_std, rng);
      u.split = i < cfg.val_per_language                           ? "val"
                : i < cfg.val_per_language + cfg.test_per_language ? "test"
                                                                    : "train";
      corpus.utterances.push_back(std::move(u));
    }
  }
  return corpus;
}

void write_features(const std::filesystem::path& path, const Tensor& frames) {
  if (frames.rank() != 2) throw ContractViolation("write_features: frames must be [N, F], got " + shape_str(frames.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  double header[3] = {kFeatureMagic, static_cast<double>(frames.dim(0)), static_cast<double>(frames.dim(1))};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  out.write(reinterpret_cast<const char*>(frames.data().data()),
            static_cast<std::streamsize>(frames.numel() * sizeof(double)));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

Tensor read_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open feature file " + path.string(), 0);
  double header[3];
  if (!in.read(reinterpret_cast<char*>(header), sizeof header))
    throw ParseError("truncated feature header in " + path.string(), 0);
  if (header[0] != kFeatureMagic) throw ParseError("bad feature magic in " + path.string(), 0);
  double n = header[1], f = header[2];
  if (!(n >= 0 && f >= 1 && n == std::floor(n) && f == std::floor(f) && n * f < 1e9))
    throw ParseError("bad feature dimensions in " + path.string(), sizeof(double));
  auto rows = static_cast<std::size_t>(n), cols = static_cast<std::size_t>(f);
  std::vector<double> data(rows * cols);
  if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
    throw ParseError("truncated feature data in " + path.string(), sizeof header + static_cast<std::size_t>(in.gcount()));
  return Tensor::from({rows, cols}, std::move(data));
}

void write_manifest(const std::vector<Utterance>& utterances, const std::filesystem::path& manifest,
                    const std::filesystem::path& feature_dir) {
  std::filesystem::create_directories(feature_dir);
  std::ofstream out(manifest);
  if (!out) throw std::runtime_error("cannot write " + manifest.string());
  out << kManifestHeader << '\n';
  auto base = manifest.parent_path();
  for (const auto& u : utterances) {
    auto feat = feature_dir / (u.id + ".feat");
    write_features(feat, u.frames);
    out << u.id << '\t' << u.language << '\t' << u.speaker << '\t' << u.text << '\t'
        << std::filesystem::relative(feat, base.empty() ? "." : base).generic_string() << '\t' << u.split << '\n';
  }
}

std::filesystem::path write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto manifest = dir / "manifest.tsv";
  write_manifest(corpus.utterances, manifest, dir / "features");
  return manifest;
}

Corpus load_corpus(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ParseError("cannot open manifest " + manifest.string(), 0);
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) throw ParseError("manifest: missing header", 0);
  Corpus corpus;
  std::vector<std::string> seen;
  int max_language = -1, max_speaker = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cols = split_tabs(line);
    if (cols.size() != 6) throw ParseError("manifest: expected 6 columns", line_no);
    Utterance u;
    u.id = cols[0];
    u.language = parse_int(cols[1], "language", line_no);
    u.speaker = parse_int(cols[2], "speaker", line_no);
    u.text = cols[3];
    u.split = cols[5];
    if (u.text.empty()) throw ParseError("manifest: empty text for " + u.id, line_no);
    auto feat = manifest.parent_path() / cols[4];
    if (!std::filesystem::exists(feat)) throw ParseError("manifest: missing feature file " + feat.string(), line_no);
    u.frames = read_features(feat);
    max_language = std::max(max_language, u.language);
    max_speaker = std::max(max_speaker, u.speaker);
    seen.push_back(u.id);
    corpus.utterances.push_back(std::move(u));
  }
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) throw ParseError("manifest: duplicate ids", 0);
  corpus.num_languages = static_cast<std::size_t>(max_language + 1);
  if (corpus.num_languages > 0)
    corpus.speakers_per_language = static_cast<std::size_t>(max_speaker + 1) / corpus.num_languages;
  return corpus;
}

}  // namespace mtts
