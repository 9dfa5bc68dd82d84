#include "mtts/model_check.hpp"

#include <algorithm>

#include "mtts/ops.hpp"

namespace mtts {

ModelConfig tiny_model_config(Variant variant) {
  ModelConfig c = ModelConfig::defaults(variant, 2, 4);
  c.encoder = EncoderSpec::standard(4, 6, 2, 3, 0.0);
  c.encoder.vocab_size = 5;
  c.decoder.prenet = {6};
  c.decoder.prenet_dropout = 0.0;
  c.decoder.attention_lstm = 5;
  c.decoder.decoder_lstm = 5;
  c.decoder.attention_dim = 4;
  c.decoder.location_filters = 2;
  c.decoder.location_kernel = 3;
  c.language_dim = 3;
  c.generator_dim = 2;
  c.speaker_dim = 3;
  c.classifier.hidden = 4;
  return c;
}

Batch tiny_batch(const ModelConfig& config, SeededRng& rng) {
  const std::size_t B = 2, T = 4, N = 3, F = config.decoder.frame_dim;
  const std::size_t token_len[B] = {4, 3}, frame_len[B] = {3, 2};
  Batch b;
  b.size = B;
  b.max_tokens = T;
  b.max_frames = N;
  b.ids = {"tiny0", "tiny1"};
  b.languages = config.languages > 1 ? std::vector<int>{0, 1} : std::vector<int>{0, 0};
  b.speakers = {0, static_cast<int>(config.speakers) - 1};
  std::vector<double> tmask(B * T, 0.0), fmask(B * N, 0.0), stops(B * N, 0.0), frames(B * N * F, 0.0);
  b.tokens.assign(B * T, kPadToken);
  for (std::size_t i = 0; i < B; ++i) {
    b.token_lengths.push_back(token_len[i]);
    b.frame_lengths.push_back(frame_len[i]);
    for (std::size_t t = 0; t < token_len[i]; ++t) {
      b.tokens[i * T + t] = 1 + static_cast<int>(rng.below(config.encoder.vocab_size - 1));
      tmask[i * T + t] = 1.0;
    }
    for (std::size_t n = 0; n < frame_len[i]; ++n) {
      fmask[i * N + n] = 1.0;
      for (std::size_t f = 0; f < F; ++f) frames[(i * N + n) * F + f] = rng.uniform(-1.0, 1.0);
    }
    stops[i * N + frame_len[i] - 1] = 1.0;
  }
  b.token_mask = Tensor::from({B, T}, std::move(tmask));
  b.frame_mask = Tensor::from({B, N}, std::move(fmask));
  b.stop_targets = Tensor::from({B, N}, std::move(stops));
  b.frames = Tensor::from({B, N, F}, std::move(frames));
  return b;
}

GradCheckReport check_tiny_model(std::uint64_t seed, double tol) {
  static constexpr Variant kCycle[] = {Variant::GEN, Variant::SHA, Variant::SEP, Variant::SGL};
  const Variant variant = kCycle[seed % 4];
  Model model(tiny_model_config(variant), seed);
  SeededRng rng(derive_seed(seed, 0x7e57));
  const Batch batch = tiny_batch(model.config(), rng);
  // Move every parameter off its initializer: zero biases against a zero
  // go-frame would otherwise put prenet ReLUs exactly on their kink.
  std::vector<Tensor> params;
  for (const auto& entry : model.parameters().entries()) {
    Tensor t = entry.second;
    for (double& x : t.mutable_data()) x += rng.uniform(-0.2, 0.2);
    params.push_back(t);
  }
  {
    // One train-mode pass populates the batch-norm statistics used in eval mode.
    NoGradScope no_grad;
    model.forward(batch, ForwardSettings{Mode::Train, false, false, nullptr});
  }
  LossWeights weights;
  weights.tolerance = 0.3;
  auto loss = [&](const std::vector<Tensor>&) {
    ModelOutputs out = model.forward(batch, ForwardSettings::deterministic());
    return total_loss(model, batch, out, weights).total;
  };
  return grad_check(loss, params, tol);
}

}  // namespace mtts
