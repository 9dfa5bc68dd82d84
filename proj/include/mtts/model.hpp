#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mtts/batching.hpp"
#include "mtts/corpus.hpp"
#include "mtts/ops.hpp"
#include "mtts/rng.hpp"
#include "mtts/tensor.hpp"

namespace mtts {

enum class Variant { GEN, SHA, SEP, SGL };

std::string_view variant_name(Variant v);
/// Accepts GEN/SHA/SEP/SGL in any letter case.
Variant parse_variant(std::string_view name);

struct VariantTraits {
  bool uses_generator = false;
  bool encoders_per_language = false;
  bool uses_language_embedding_concat = false;
  bool uses_adversarial_classifier = false;
};
VariantTraits traits(Variant v);

struct ConvSite {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t kernel = 5;
  bool batchnorm = true;
  double dropout = 0.05;

  std::size_t weight_count() const { return c_out * c_in * kernel; }
  std::size_t param_count() const { return weight_count() + c_out; }
};

struct EncoderSpec {
  std::vector<ConvSite> sites;
  std::size_t embedding_dim = 64;  // E; also the encoder output size
  std::size_t vocab_size = kVocabSize;

  /// [E->C, C->C x (n-2), C->E], all with the same kernel and dropout.
  static EncoderSpec standard(std::size_t embedding_dim = 64, std::size_t channels = 64, std::size_t num_sites = 5,
                              std::size_t kernel = 5, double dropout = 0.05);
  void validate() const;
  /// Conv parameters of one language's encoder.
  std::size_t param_count() const;
};

struct DecoderSpec {
  std::vector<std::size_t> prenet{64, 64};
  double prenet_dropout = 0.25;
  std::size_t attention_lstm = 128;
  std::size_t decoder_lstm = 128;
  std::size_t attention_dim = 64;
  std::size_t location_filters = 8;
  std::size_t location_kernel = 15;
  std::size_t frame_dim = kFrameDim;
  double stop_pos_weight = 5.0;
  std::size_t reduction = 1;

  void validate() const;
};

struct ClassifierSpec {
  bool enabled = false;
  std::size_t hidden = 256;
  double lambda = 1.0;
  double weight = 0.125;
  /// Elementwise bound on the gradient returned to the encoder; infinity disables it.
  double clamp = 0.25;
  /// False substitutes an identity layer for the reversal (paired-run checks).
  bool reverse = true;
};

struct ModelConfig {
  Variant variant = Variant::GEN;
  std::size_t languages = 4;
  std::size_t speakers = 8;
  EncoderSpec encoder = EncoderSpec::standard();
  DecoderSpec decoder;
  std::size_t language_dim = 10;
  std::size_t generator_dim = 8;
  std::size_t speaker_dim = 32;
  ClassifierSpec classifier;

  /// Variant defaults: language_dim 10 (GEN) or 4 (SHA), classifier weight 0.125 (GEN) or 0.5 (SHA).
  static ModelConfig defaults(Variant variant, std::size_t languages, std::size_t speakers);
  void validate() const;
  /// Width of the attention memory: E + speaker_dim (+ language_dim for SHA).
  std::size_t memory_dim() const;
  bool classifier_active() const { return classifier.enabled && traits(variant).uses_adversarial_classifier; }
};

/// Named trainable tensors in registration order.
class ParameterStore {
 public:
  Tensor add(std::string name, Tensor value);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t total_size() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

/// Per-language, per-site flat parameter vectors. Site s of language slot i is
/// row i of sites[s]; the flat layout is weight [c_out, c_in, k] row-major, then bias.
struct GeneratedParams {
  std::vector<int> languages;
  std::vector<Tensor> sites;  // [languages.size(), param_count(s)]

  /// Stacked weight [n*c_out, c_in, k] and bias [n*c_out] for every requested language.
  std::pair<Tensor, Tensor> unflatten(std::size_t site, const ConvSite& spec) const;
  /// Flat vector [param_count(s)] of one language slot.
  Tensor vector(std::size_t slot, std::size_t site) const;
  std::size_t length_per_language() const;
};

/// Flat layout used by GeneratedParams: weight row-major, then bias.
std::vector<double> flatten_site(const Tensor& weight, const Tensor& bias);
std::pair<Tensor, Tensor> unflatten_site(std::span<const double> flat, const ConvSite& spec);

/// Stochastic and normalization behavior of one forward pass.
struct ForwardSettings {
  Mode batchnorm = Mode::Train;
  bool encoder_dropout = true;
  bool prenet_dropout = true;
  SeededRng* rng = nullptr;  // required when any dropout is on

  static ForwardSettings training(SeededRng& rng) { return {Mode::Train, true, true, &rng}; }
  /// Running BN statistics, no encoder dropout, prenet dropout kept.
  static ForwardSettings inference(SeededRng& rng) { return {Mode::Eval, false, true, &rng}; }
  /// No randomness at all; requires populated BN statistics.
  static ForwardSettings deterministic() { return {Mode::Eval, false, false, nullptr}; }
};

struct TokenBatch {
  std::vector<int> tokens;  // [batch, steps]
  std::size_t batch = 0;
  std::size_t steps = 0;
  Tensor mask;  // [batch, steps]
  std::vector<int> languages;

  static TokenBatch from(const Batch& b);
  /// One utterance; the language is only used by variants that need it.
  static TokenBatch single(std::string_view text, int language);
  /// Rows `rows` of this batch, same padded length.
  TokenBatch select(std::span<const std::size_t> rows) const;
};

struct DecoderOutput {
  Tensor frames;       // [B, N, F]
  Tensor stop_logits;  // [B, N]
  Tensor alignments;   // [B, N, T]
};

struct InferenceResult {
  Tensor frames;      // [steps, F]
  Tensor alignments;  // [steps, T]
  bool stopped = false;
  std::size_t steps = 0;
};

struct AttentionStep {
  Tensor context;    // [B, M]
  Tensor alignment;  // [B, T]
};

struct ModelOutputs {
  Tensor encoded;  // [B, T, E]
  Tensor memory;   // [B, T, M]
  DecoderOutput decoder;
  Tensor classifier_loss;  // undefined unless the classifier is active
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }
  std::vector<BatchNormState>& batchnorm_states() { return bn_states_; }
  const std::vector<BatchNormState>& batchnorm_states() const { return bn_states_; }

  /// GEN only. Differentiable through the language table and the generators.
  GeneratedParams generate_params(std::span<const int> languages) const;

  /// Dispatches by variant. GEN/SEP accept an interleaved batch (grouped
  /// execution) or a single-language batch; anything else is a ContractViolation.
  Tensor encode(const TokenBatch& batch, const ForwardSettings& settings);
  /// Runs the whole batch through one language's encoder.
  Tensor encode_language(const TokenBatch& batch, int language, const ForwardSettings& settings);
  /// Grouped execution; `params` overrides generation for GEN.
  Tensor encode_grouped(const TokenBatch& batch, const ForwardSettings& settings,
                        const GeneratedParams* params = nullptr);
  /// GEN/SEP: per-token convex combination of per-language encodings; weights [B, T, L].
  Tensor encode_mixed(const TokenBatch& batch, const Tensor& weights, const ForwardSettings& settings);

  /// encoded [B, T, E] joined with speaker (and for SHA language) embeddings.
  Tensor memory(const Tensor& encoded, std::span<const int> speakers, std::span<const int> languages) const;

  AttentionStep attend(const Tensor& query, const Tensor& memory, const Tensor& processed_memory,
                       const Tensor& mask, const Tensor& previous, const Tensor& cumulative) const;
  Tensor process_memory(const Tensor& memory) const;

  DecoderOutput decode_teacher_forced(const Tensor& memory, const Tensor& mask, const Tensor& targets,
                                      const ForwardSettings& settings) const;
  /// Free-running decode of a single sequence (memory [1, T, M]).
  InferenceResult infer(const Tensor& memory, const Tensor& mask, std::size_t max_steps,
                        const ForwardSettings& settings) const;

  /// Mean per-time-step cross-entropy; `spec` defaults to the model's classifier settings.
  Tensor speaker_classifier_loss(const Tensor& encoded, std::span<const int> speakers, const Tensor& mask,
                                 const ClassifierSpec* spec = nullptr) const;

  ModelOutputs forward(const Batch& batch, const ForwardSettings& settings);

  /// Deep copy of every parameter value and BN buffer.
  struct Snapshot {
    std::vector<std::vector<double>> values;
    std::vector<BatchNormState> batchnorm;
  };
  Snapshot snapshot() const;
  void restore(const Snapshot& snap);

 private:
  struct Generator {
    Tensor w1, b1, w2, b2;
  };
  struct Site {
    Tensor weight, bias;  // SHA/SGL: single encoder; SEP: stacked per language
    Tensor gamma, beta;   // [groups * c_out]
  };

  Tensor embed(const TokenBatch& batch) const;
  Tensor run_sites(Tensor x, const Tensor& mask, std::size_t groups, int language, const ForwardSettings& settings,
                   const GeneratedParams* params);
  Tensor finish_encoder(const Tensor& x, const TokenBatch& batch) const;
  Tensor prenet(const Tensor& frame, const ForwardSettings& settings) const;
  void check_speakers(std::span<const int> speakers) const;

  ModelConfig config_;
  ParameterStore params_;
  std::vector<BatchNormState> bn_states_;

  Tensor token_embedding_;
  Tensor language_embedding_;
  Tensor speaker_embedding_;
  std::vector<Generator> generators_;
  std::vector<Site> sites_;
  Tensor projection_weight_, projection_bias_;

  std::vector<std::pair<Tensor, Tensor>> prenet_layers_;
  LstmWeights attention_lstm_, decoder_lstm_;
  Tensor query_weight_, memory_weight_, location_conv_, location_weight_, energy_weight_;
  Tensor frame_weight_, frame_bias_, stop_weight_, stop_bias_;
  Tensor cls_w1_, cls_b1_, cls_w2_, cls_b2_;
};

/// Mean over real (n, t) of A[n,t] * (1 - exp(-(n/N - t/T)^2 / (2 g^2))), per-example lengths.
Tensor guided_attention_loss(const Tensor& alignments, double g, std::span<const std::size_t> frame_lengths,
                             std::span<const std::size_t> token_lengths);

struct LossWeights {
  double guided = 1.0;     // w_ga
  double tolerance = 0.2;  // g for this step
  bool include_classifier = true;
};

struct LossBreakdown {
  Tensor total;
  std::map<std::string, double> components;  // unweighted term values
  std::map<std::string, double> weights;
};

/// frame MSE + stop BCE + w_ga * guided (+ w_cls * classifier when active and requested).
LossBreakdown total_loss(const Model& model, const Batch& batch, const ModelOutputs& outputs, const LossWeights& w);

}  // namespace mtts
