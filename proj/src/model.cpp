#include "mtts/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>

#include "mtts/errors.hpp"

namespace mtts {

namespace {

// Stream tags for parameter initialization; each component draws from its own
// stream so enabling one part never shifts another's initial values.
enum InitStream : std::uint64_t {
  kInitTokens = 1,
  kInitLanguages,
  kInitSpeakers,
  kInitGenerator,
  kInitSites,
  kInitProjection,
  kInitPrenet,
  kInitAttentionLstm,
  kInitAttention,
  kInitDecoderLstm,
  kInitHeads,
  kInitClassifier,
};

Tensor uniform(Shape shape, double bound, SeededRng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor normal(Shape shape, double stddev, SeededRng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor xavier(std::size_t fan_in, std::size_t fan_out, SeededRng& rng) {
  return uniform({fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

LstmWeights make_lstm(std::size_t input, std::size_t hidden, SeededRng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  LstmWeights w{uniform({input, 4 * hidden}, bound, rng), uniform({hidden, 4 * hidden}, bound, rng),
                Tensor::zeros({4 * hidden}, true)};
  auto b = w.bias.mutable_data();
  for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0;  // forget gate
  return w;
}

constexpr double kStopBiasInit = -3.5;

std::string upper(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::GEN: return "GEN";
    case Variant::SHA: return "SHA";
    case Variant::SEP: return "SEP";
    case Variant::SGL: return "SGL";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  auto u = upper(name);
  for (Variant v : {Variant::GEN, Variant::SHA, Variant::SEP, Variant::SGL})
    if (u == variant_name(v)) return v;
  throw ConfigError("unknown model variant '" + std::string(name) + "'");
}

VariantTraits traits(Variant v) {
  switch (v) {
    case Variant::GEN: return {true, true, false, true};
    case Variant::SHA: return {false, false, true, true};
    case Variant::SEP: return {false, true, false, false};
    case Variant::SGL: return {false, false, false, false};
  }
  return {};
}

EncoderSpec EncoderSpec::standard(std::size_t embedding_dim, std::size_t channels, std::size_t num_sites,
                                  std::size_t kernel, double dropout) {
  if (num_sites < 2) throw ConfigError("encoder needs at least 2 conv sites");
  EncoderSpec spec;
  spec.embedding_dim = embedding_dim;
  for (std::size_t s = 0; s < num_sites; ++s) {
    ConvSite site;
    site.c_in = s == 0 ? embedding_dim : channels;
    site.c_out = s + 1 == num_sites ? embedding_dim : channels;
    site.kernel = kernel;
    site.dropout = dropout;
    spec.sites.push_back(site);
  }
  return spec;
}

void EncoderSpec::validate() const {
  if (sites.empty()) throw ConfigError("encoder has no sites");
  if (embedding_dim == 0 || vocab_size < 2) throw ConfigError("encoder embedding/vocab sizes must be positive");
  if (sites.front().c_in != embedding_dim) throw ConfigError("first encoder site must read the embedding dim");
  if (sites.back().c_out != embedding_dim) throw ConfigError("last encoder site must emit the embedding dim");
  for (std::size_t s = 0; s < sites.size(); ++s) {
    const auto& site = sites[s];
    if (site.c_in == 0 || site.c_out == 0) throw ConfigError("encoder site " + std::to_string(s) + " has zero channels");
    if (site.kernel % 2 == 0) throw ConfigError("encoder site " + std::to_string(s) + " has an even kernel");
    if (site.dropout < 0.0 || site.dropout >= 1.0) throw ConfigError("encoder dropout outside [0, 1)");
    if (s + 1 < sites.size() && site.c_out != sites[s + 1].c_in)
      throw ConfigError("encoder sites " + std::to_string(s) + " and " + std::to_string(s + 1) +
                        " are not channel-compatible");
  }
}

std::size_t EncoderSpec::param_count() const {
  std::size_t n = 0;
  for (const auto& s : sites) n += s.param_count();
  return n;
}

void DecoderSpec::validate() const {
  if (prenet.empty()) throw ConfigError("decoder prenet needs at least one layer");
  if (prenet_dropout < 0.0 || prenet_dropout >= 1.0) throw ConfigError("prenet dropout outside [0, 1)");
  if (attention_lstm == 0 || decoder_lstm == 0 || attention_dim == 0 || location_filters == 0)
    throw ConfigError("decoder sizes must be positive");
  if (location_kernel % 2 == 0) throw ConfigError("location kernel must be odd");
  if (frame_dim != kFrameDim) throw ConfigError("decoder frame dim must be " + std::to_string(kFrameDim));
  if (reduction != 1) throw ConfigError("only reduction factor 1 is supported");
  if (stop_pos_weight <= 0.0) throw ConfigError("stop positive weight must be positive");
}

ModelConfig ModelConfig::defaults(Variant variant, std::size_t languages, std::size_t speakers) {
  ModelConfig c;
  c.variant = variant;
  c.languages = variant == Variant::SGL ? 1 : languages;
  c.speakers = speakers;
  c.language_dim = variant == Variant::SHA ? 4 : 10;
  c.classifier.weight = variant == Variant::SHA ? 0.5 : 0.125;
  return c;
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (languages == 0 || speakers == 0) throw ConfigError("model needs at least one language and speaker");
  if (variant == Variant::SGL && languages != 1) throw ConfigError("SGL is a single-language model (languages = 1)");
  if (language_dim == 0 || generator_dim == 0 || speaker_dim == 0) throw ConfigError("embedding sizes must be positive");
  if (classifier.enabled && !traits(variant).uses_adversarial_classifier)
    throw ConfigError(std::string(variant_name(variant)) + " has no adversarial speaker classifier");
  if (classifier.lambda < 0.0) throw ConfigError("reversal lambda must be non-negative");
  if (!(classifier.clamp > 0.0)) throw ConfigError("classifier gradient clamp must be positive");
  if (classifier.weight < 0.0) throw ConfigError("classifier loss weight must be non-negative");
}

std::size_t ModelConfig::memory_dim() const {
  return encoder.embedding_dim + speaker_dim + (traits(variant).uses_language_embedding_concat ? language_dim : 0);
}

Tensor ParameterStore::add(std::string name, Tensor value) {
  if (contains(name)) throw ContractViolation("duplicate parameter " + name);
  value.set_requires_grad(true);
  entries_.emplace_back(std::move(name), value);
  return value;
}

const Tensor& ParameterStore::at(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw LookupError("no parameter named " + std::string(name));
}

bool ParameterStore::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

std::pair<Tensor, Tensor> GeneratedParams::unflatten(std::size_t site, const ConvSite& spec) const {
  const Tensor& flat = sites.at(site);
  const std::size_t n = flat.dim(0);
  if (flat.dim(1) != spec.param_count())
    throw ContractViolation("generated site " + std::to_string(site) + " has " + std::to_string(flat.dim(1)) +
                            " values, expected " + std::to_string(spec.param_count()));
  Tensor w = reshape(slice(flat, 1, 0, spec.weight_count()), {n * spec.c_out, spec.c_in, spec.kernel});
  Tensor b = reshape(slice(flat, 1, spec.weight_count(), spec.c_out), {n * spec.c_out});
  return {w, b};
}

Tensor GeneratedParams::vector(std::size_t slot, std::size_t site) const {
  const Tensor& flat = sites.at(site);
  return reshape(slice(flat, 0, slot, 1), {flat.dim(1)});
}

std::size_t GeneratedParams::length_per_language() const {
  std::size_t n = 0;
  for (const auto& s : sites) n += s.dim(1);
  return n;
}

std::vector<double> flatten_site(const Tensor& weight, const Tensor& bias) {
  std::vector<double> out(weight.data().begin(), weight.data().end());
  out.insert(out.end(), bias.data().begin(), bias.data().end());
  return out;
}

std::pair<Tensor, Tensor> unflatten_site(std::span<const double> flat, const ConvSite& spec) {
  if (flat.size() != spec.param_count()) throw ContractViolation("unflatten_site: wrong vector length");
  auto w_end = flat.begin() + static_cast<std::ptrdiff_t>(spec.weight_count());
  return {Tensor::from({spec.c_out, spec.c_in, spec.kernel}, std::vector<double>(flat.begin(), w_end)),
          Tensor::from({spec.c_out}, std::vector<double>(w_end, flat.end()))};
}

TokenBatch TokenBatch::from(const Batch& b) {
  return TokenBatch{b.tokens, b.size, b.max_tokens, b.token_mask, b.languages};
}

TokenBatch TokenBatch::single(std::string_view text, int language) {
  TokenBatch tb;
  tb.tokens = tokenize(text);
  tb.batch = 1;
  tb.steps = tb.tokens.size();
  tb.mask = Tensor::full({1, tb.steps}, 1.0);
  tb.languages = {language};
  return tb;
}

TokenBatch TokenBatch::select(std::span<const std::size_t> rows) const {
  TokenBatch out;
  out.batch = rows.size();
  out.steps = steps;
  std::vector<double> mask_values;
  for (std::size_t r : rows) {
    if (r >= batch) throw ContractViolation("TokenBatch::select: row out of range");
    out.tokens.insert(out.tokens.end(), tokens.begin() + static_cast<std::ptrdiff_t>(r * steps),
                      tokens.begin() + static_cast<std::ptrdiff_t>((r + 1) * steps));
    auto m = mask.data().subspan(r * steps, steps);
    mask_values.insert(mask_values.end(), m.begin(), m.end());
    out.languages.push_back(languages.at(r));
  }
  out.mask = Tensor::from({out.batch, steps}, std::move(mask_values));
  return out;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const auto tr = traits(config_.variant);
  const auto& enc = config_.encoder;
  const auto& dec = config_.decoder;
  const std::size_t E = enc.embedding_dim, L = config_.languages;

  {
    SeededRng rng(derive_seed(seed, kInitTokens));
    token_embedding_ = params_.add("token_embedding", normal({enc.vocab_size, E}, 0.3, rng));
  }
  if (tr.uses_generator || tr.uses_language_embedding_concat) {
    SeededRng rng(derive_seed(seed, kInitLanguages));
    double stddev = tr.uses_generator ? 1.0 : 0.3;
    language_embedding_ = params_.add("language_embedding", normal({L, config_.language_dim}, stddev, rng));
  }
  {
    SeededRng rng(derive_seed(seed, kInitSpeakers));
    speaker_embedding_ = params_.add("speaker_embedding", normal({config_.speakers, config_.speaker_dim}, 0.3, rng));
  }

  const std::size_t groups = tr.encoders_per_language ? L : 1;
  SeededRng gen_rng(derive_seed(seed, kInitGenerator)), site_rng(derive_seed(seed, kInitSites));
  for (std::size_t s = 0; s < enc.sites.size(); ++s) {
    const ConvSite& site = enc.sites[s];
    const std::string prefix = "encoder." + std::to_string(s) + ".";
    const double bound = 1.0 / std::sqrt(static_cast<double>(site.c_in * site.kernel));
    Site p;
    if (tr.uses_generator) {
      const std::size_t g = config_.generator_dim;
      Generator gen;
      const std::string gp = "generator." + std::to_string(s) + ".";
      gen.w1 = params_.add(gp + "w1", xavier(config_.language_dim, g, gen_rng));
      gen.b1 = params_.add(gp + "b1", Tensor::zeros({g}, true));
      gen.w2 = params_.add(gp + "w2", uniform({g, site.param_count()}, bound / std::sqrt(static_cast<double>(g)), gen_rng));
      gen.b2 = params_.add(gp + "b2", uniform({site.param_count()}, bound, gen_rng));
      generators_.push_back(gen);
    } else {
      p.weight = params_.add(prefix + "weight", uniform({groups * site.c_out, site.c_in, site.kernel}, bound, site_rng));
      p.bias = params_.add(prefix + "bias", uniform({groups * site.c_out}, bound, site_rng));
    }
    if (site.batchnorm) {
      p.gamma = params_.add(prefix + "bn_gamma", Tensor::full({groups * site.c_out}, 1.0, true));
      p.beta = params_.add(prefix + "bn_beta", Tensor::zeros({groups * site.c_out}, true));
    }
    sites_.push_back(p);
    bn_states_.emplace_back(site.batchnorm ? groups * site.c_out : 0);
  }
  {
    SeededRng rng(derive_seed(seed, kInitProjection));
    double bound = 1.0 / std::sqrt(static_cast<double>(E));
    projection_weight_ = params_.add("encoder.projection.weight", uniform({E, E, 1}, bound, rng));
    projection_bias_ = params_.add("encoder.projection.bias", uniform({E}, bound, rng));
  }

  const std::size_t M = config_.memory_dim(), F = dec.frame_dim;
  {
    SeededRng rng(derive_seed(seed, kInitPrenet));
    std::size_t in = F;
    for (std::size_t i = 0; i < dec.prenet.size(); ++i) {
      const std::string pp = "prenet." + std::to_string(i) + ".";
      Tensor w = params_.add(pp + "weight", xavier(in, dec.prenet[i], rng));
      Tensor b = params_.add(pp + "bias", Tensor::zeros({dec.prenet[i]}, true));
      prenet_layers_.emplace_back(w, b);
      in = dec.prenet[i];
    }
  }
  {
    SeededRng rng(derive_seed(seed, kInitAttentionLstm));
    attention_lstm_ = make_lstm(dec.prenet.back() + M, dec.attention_lstm, rng);
    params_.add("attention_lstm.input_weight", attention_lstm_.input_weight);
    params_.add("attention_lstm.hidden_weight", attention_lstm_.hidden_weight);
    params_.add("attention_lstm.bias", attention_lstm_.bias);
  }
  {
    SeededRng rng(derive_seed(seed, kInitAttention));
    const std::size_t A = dec.attention_dim;
    query_weight_ = params_.add("attention.query_weight", xavier(dec.attention_lstm, A, rng));
    memory_weight_ = params_.add("attention.memory_weight", xavier(M, A, rng));
    location_conv_ = params_.add(
        "attention.location_conv",
        uniform({dec.location_filters, 2, dec.location_kernel},
                1.0 / std::sqrt(static_cast<double>(2 * dec.location_kernel)), rng));
    location_weight_ = params_.add("attention.location_weight", xavier(dec.location_filters, A, rng));
    energy_weight_ = params_.add("attention.energy_weight", xavier(A, 1, rng));
  }
  {
    SeededRng rng(derive_seed(seed, kInitDecoderLstm));
    decoder_lstm_ = make_lstm(M + dec.attention_lstm, dec.decoder_lstm, rng);
    params_.add("decoder_lstm.input_weight", decoder_lstm_.input_weight);
    params_.add("decoder_lstm.hidden_weight", decoder_lstm_.hidden_weight);
    params_.add("decoder_lstm.bias", decoder_lstm_.bias);
  }
  {
    SeededRng rng(derive_seed(seed, kInitHeads));
    frame_weight_ = params_.add("frame_head.weight", xavier(dec.decoder_lstm + M, F, rng));
    frame_bias_ = params_.add("frame_head.bias", Tensor::zeros({F}, true));
    stop_weight_ = params_.add("stop_head.weight", xavier(dec.decoder_lstm + M, 1, rng));
    // Log-odds prior of roughly one stop per 33 frames, so an untrained model does not stop.
    stop_bias_ = params_.add("stop_head.bias", Tensor::full({1}, kStopBiasInit, true));
  }
  if (config_.classifier_active()) {
    SeededRng rng(derive_seed(seed, kInitClassifier));
    const std::size_t H = config_.classifier.hidden;
    cls_w1_ = params_.add("classifier.w1", xavier(E, H, rng));
    cls_b1_ = params_.add("classifier.b1", Tensor::zeros({H}, true));
    cls_w2_ = params_.add("classifier.w2", uniform({H, config_.speakers}, 0.1 / std::sqrt(static_cast<double>(H)), rng));
    cls_b2_ = params_.add("classifier.b2", Tensor::zeros({config_.speakers}, true));
  }
}

GeneratedParams Model::generate_params(std::span<const int> languages) const {
  if (!traits(config_.variant).uses_generator)
    throw ContractViolation(std::string(variant_name(config_.variant)) + " does not generate encoder parameters");
  for (int l : languages)
    if (l < 0 || static_cast<std::size_t>(l) >= config_.languages)
      throw LookupError("unknown language id " + std::to_string(l));
  GeneratedParams out;
  out.languages.assign(languages.begin(), languages.end());
  Tensor emb = embedding_lookup(language_embedding_, languages);  // [n, d_lang]
  for (const auto& gen : generators_) {
    Tensor hidden = tanh(linear(emb, gen.w1, gen.b1));
    out.sites.push_back(linear(hidden, gen.w2, gen.b2));
  }
  return out;
}

Tensor Model::embed(const TokenBatch& batch) const {
  if (batch.tokens.size() != batch.batch * batch.steps || batch.mask.shape() != Shape{batch.batch, batch.steps})
    throw ContractViolation("token batch layout does not match its declared shape");
  for (int t : batch.tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= config_.encoder.vocab_size)
      throw LookupError("token id " + std::to_string(t) + " outside the vocabulary");
  const std::size_t E = config_.encoder.embedding_dim;
  Tensor x = reshape(embedding_lookup(token_embedding_, batch.tokens), {batch.batch, batch.steps, E});
  x = swap_last_axes(x);  // [B, E, T]
  return apply_time_mask(x, reshape(batch.mask, {batch.batch, 1, batch.steps}));
}

Tensor Model::run_sites(Tensor x, const Tensor& mask, std::size_t groups, int language,
                        const ForwardSettings& settings, const GeneratedParams* params) {
  const auto& spec = config_.encoder;
  const Mode drop_mode = settings.encoder_dropout ? Mode::Train : Mode::Eval;
  for (std::size_t s = 0; s < spec.sites.size(); ++s) {
    const ConvSite& site = spec.sites[s];
    const Site& p = sites_[s];
    Tensor w, b, gamma = p.gamma, beta = p.beta;
    std::size_t offset = 0;
    if (params) {
      std::tie(w, b) = params->unflatten(s, site);
    } else if (language >= 0 && traits(config_.variant).encoders_per_language) {
      auto l = static_cast<std::size_t>(language);
      w = slice(p.weight, 0, l * site.c_out, site.c_out);
      b = slice(p.bias, 0, l * site.c_out, site.c_out);
    } else {
      w = p.weight;
      b = p.bias;
    }
    if (language >= 0 && traits(config_.variant).encoders_per_language && site.batchnorm) {
      offset = static_cast<std::size_t>(language) * site.c_out;
      gamma = slice(p.gamma, 0, offset, site.c_out);
      beta = slice(p.beta, 0, offset, site.c_out);
    }
    x = conv1d_grouped(x, w, b, groups);
    if (site.batchnorm) x = batch_norm_1d(x, gamma, beta, bn_states_[s], settings.batchnorm, mask, offset);
    x = relu(x);
    if (site.dropout > 0.0 && settings.encoder_dropout) {
      if (!settings.rng) throw ContractViolation("encoder dropout requires an rng");
      x = dropout(x, site.dropout, *settings.rng, drop_mode);
    }
    x = apply_time_mask(x, mask);
  }
  return x;
}

Tensor Model::finish_encoder(const Tensor& x, const TokenBatch& batch) const {
  Tensor y = conv1d_grouped(x, projection_weight_, projection_bias_, 1);
  y = apply_time_mask(y, reshape(batch.mask, {batch.batch, 1, batch.steps}));
  return swap_last_axes(y);  // [B, T, E]
}

Tensor Model::encode(const TokenBatch& batch, const ForwardSettings& settings) {
  const auto tr = traits(config_.variant);
  if (!tr.encoders_per_language) {
    Tensor x = run_sites(embed(batch), reshape(batch.mask, {batch.batch, 1, batch.steps}), 1, -1, settings, nullptr);
    return finish_encoder(x, batch);
  }
  if (batch.languages.size() != batch.batch) throw ContractViolation("encode: one language id per example required");
  if (std::all_of(batch.languages.begin(), batch.languages.end(),
                  [&](int l) { return l == batch.languages.front(); }))
    return encode_language(batch, batch.languages.front(), settings);
  return encode_grouped(batch, settings);
}

Tensor Model::encode_language(const TokenBatch& batch, int language, const ForwardSettings& settings) {
  const auto tr = traits(config_.variant);
  if (language < 0 || static_cast<std::size_t>(language) >= config_.languages)
    throw LookupError("unknown language id " + std::to_string(language));
  const Tensor mask = reshape(batch.mask, {batch.batch, 1, batch.steps});
  if (!tr.encoders_per_language) return finish_encoder(run_sites(embed(batch), mask, 1, -1, settings, nullptr), batch);
  GeneratedParams generated;
  if (tr.uses_generator) {
    const int ids[] = {language};
    generated = generate_params(ids);
  }
  Tensor x = run_sites(embed(batch), mask, 1, language, settings, tr.uses_generator ? &generated : nullptr);
  return finish_encoder(x, batch);
}

Tensor Model::encode_grouped(const TokenBatch& batch, const ForwardSettings& settings, const GeneratedParams* params) {
  const auto tr = traits(config_.variant);
  if (!tr.encoders_per_language)
    throw ContractViolation(std::string(variant_name(config_.variant)) + " has a single encoder; nothing to group");
  const std::size_t L = config_.languages;
  if (!verify_interleave(batch.languages, L) || batch.languages.size() != batch.batch)
    throw ContractViolation(
        "encode: batch cannot be regrouped into [B/L, L]; the sampler must place language l at every index l + iL");
  const std::size_t E = config_.encoder.embedding_dim, rows = batch.batch / L;
  GeneratedParams generated;
  if (tr.uses_generator && !params) {
    std::vector<int> all(L);
    std::iota(all.begin(), all.end(), 0);
    generated = generate_params(all);
    params = &generated;
  }
  if (params && params->languages.size() != L) throw ContractViolation("encode: generated params must cover every language");
  Tensor x = reshape(embed(batch), {rows, L * E, batch.steps});
  Tensor mask = reshape(batch.mask, {rows, L, batch.steps});
  x = run_sites(x, mask, L, -1, settings, params);
  return finish_encoder(reshape(x, {batch.batch, E, batch.steps}), batch);
}

Tensor Model::encode_mixed(const TokenBatch& batch, const Tensor& weights, const ForwardSettings& settings) {
  if (!traits(config_.variant).encoders_per_language)
    throw ContractViolation("encode_mixed needs per-language encoders (GEN or SEP)");
  const std::size_t B = batch.batch, T = batch.steps, L = config_.languages, E = config_.encoder.embedding_dim;
  if (weights.shape() != Shape{B, T, L})
    throw ContractViolation("encode_mixed: weights " + shape_str(weights.shape()) + " do not match " +
                            shape_str({B, T, L}));
  std::vector<bool> used(L, false);
  for (std::size_t r = 0; r < B * T; ++r) {
    double total = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      double w = weights[r * L + l];
      if (!(w >= 0.0)) throw ContractViolation("encode_mixed: negative or non-finite language weight");
      total += w;
      if (w > 0.0) used[l] = true;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw ContractViolation("encode_mixed: language weights must sum to 1");
  }
  Tensor out;
  for (std::size_t l = 0; l < L; ++l) {
    if (!used[l]) continue;
    Tensor enc = encode_language(batch, static_cast<int>(l), settings);
    std::vector<double> w(B * T * E);
    for (std::size_t r = 0; r < B * T; ++r) std::fill_n(w.begin() + static_cast<std::ptrdiff_t>(r * E), E, weights[r * L + l]);
    Tensor term = mul(enc, Tensor::from({B, T, E}, std::move(w)));
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

void Model::check_speakers(std::span<const int> speakers) const {
  for (int s : speakers)
    if (s < 0 || static_cast<std::size_t>(s) >= config_.speakers)
      throw LookupError("unknown speaker id " + std::to_string(s));
}

Tensor Model::memory(const Tensor& encoded, std::span<const int> speakers, std::span<const int> languages) const {
  const std::size_t B = encoded.dim(0), T = encoded.dim(1);
  if (speakers.size() != B) throw ContractViolation("memory: one speaker id per example required");
  check_speakers(speakers);
  std::vector<Tensor> parts{encoded, expand_time(embedding_lookup(speaker_embedding_, speakers), T)};
  if (traits(config_.variant).uses_language_embedding_concat) {
    if (languages.size() != B) throw ContractViolation("memory: one language id per example required");
    parts.push_back(expand_time(embedding_lookup(language_embedding_, languages), T));
  }
  return concat(parts, 2);
}

Tensor Model::speaker_classifier_loss(const Tensor& encoded, std::span<const int> speakers, const Tensor& mask,
                                      const ClassifierSpec* spec) const {
  if (!config_.classifier_active()) throw ContractViolation("speaker classifier is not part of this model");
  const ClassifierSpec& cs = spec ? *spec : config_.classifier;
  const std::size_t B = encoded.dim(0), T = encoded.dim(1), E = encoded.dim(2);
  if (speakers.size() != B) throw ContractViolation("classifier: one speaker id per example required");
  check_speakers(speakers);
  Tensor x = std::isinf(cs.clamp) ? encoded : clamp_gradient(encoded, cs.clamp);
  if (cs.reverse) x = gradient_reverse(x, cs.lambda);
  x = reshape(x, {B * T, E});
  Tensor logits = linear(relu(linear(x, cls_w1_, cls_b1_)), cls_w2_, cls_b2_);
  std::vector<int> labels(B * T);
  for (std::size_t b = 0; b < B; ++b) std::fill_n(labels.begin() + static_cast<std::ptrdiff_t>(b * T), T, speakers[b]);
  return cross_entropy_with_logits(logits, labels, mask.data());
}

ModelOutputs Model::forward(const Batch& batch, const ForwardSettings& settings) {
  ModelOutputs out;
  out.encoded = encode(TokenBatch::from(batch), settings);
  out.memory = memory(out.encoded, batch.speakers, batch.languages);
  out.decoder = decode_teacher_forced(out.memory, batch.token_mask, batch.frames, settings);
  if (config_.classifier_active())
    out.classifier_loss = speaker_classifier_loss(out.encoded, batch.speakers, batch.token_mask);
  return out;
}

Model::Snapshot Model::snapshot() const {
  Snapshot s;
  for (const auto& [name, t] : params_.entries()) s.values.push_back(t.values());
  s.batchnorm = bn_states_;
  return s;
}

void Model::restore(const Snapshot& snap) {
  const auto& entries = params_.entries();
  if (snap.values.size() != entries.size() || snap.batchnorm.size() != bn_states_.size())
    throw ContractViolation("restore: snapshot does not match the model layout");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].second;
    if (snap.values[i].size() != t.numel()) throw ContractViolation("restore: size mismatch for " + entries[i].first);
    std::copy(snap.values[i].begin(), snap.values[i].end(), t.mutable_data().begin());
  }
  bn_states_ = snap.batchnorm;
}

}  // namespace mtts
