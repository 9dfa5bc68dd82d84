#include <cmath>
#include <tuple>

#include "mtts/errors.hpp"
#include "mtts/model.hpp"

namespace mtts {

Tensor Model::process_memory(const Tensor& memory) const {
  const std::size_t B = memory.dim(0), T = memory.dim(1), M = memory.dim(2);
  return reshape(matmul(reshape(memory, {B * T, M}), memory_weight_), {B, T, config_.decoder.attention_dim});
}

AttentionStep Model::attend(const Tensor& query, const Tensor& memory, const Tensor& processed_memory,
                            const Tensor& mask, const Tensor& previous, const Tensor& cumulative) const {
  const std::size_t B = memory.dim(0), T = memory.dim(1), M = memory.dim(2);
  const std::size_t A = config_.decoder.attention_dim, Fl = config_.decoder.location_filters;
  Tensor location = concat({reshape(previous, {B, 1, T}), reshape(cumulative, {B, 1, T})}, 1);
  location = swap_last_axes(conv1d_grouped(location, location_conv_, Tensor{}, 1));  // [B, T, Fl]
  location = reshape(matmul(reshape(location, {B * T, Fl}), location_weight_), {B, T, A});
  Tensor energies = additive_energies(processed_memory, matmul(query, query_weight_), location, energy_weight_);
  Tensor alignment = masked_softmax(energies, mask);
  Tensor context = reshape(bmm(reshape(alignment, {B, 1, T}), memory), {B, M});
  return {context, alignment};
}

Tensor Model::prenet(const Tensor& frame, const ForwardSettings& settings) const {
  Tensor x = frame;
  const double rate = config_.decoder.prenet_dropout;
  for (const auto& [w, b] : prenet_layers_) {
    x = relu(linear(x, w, b));
    if (settings.prenet_dropout && rate > 0.0) {
      if (!settings.rng) throw ContractViolation("prenet dropout requires an rng");
      x = dropout(x, rate, *settings.rng, Mode::Train);
    }
  }
  return x;
}

DecoderOutput Model::decode_teacher_forced(const Tensor& memory, const Tensor& mask, const Tensor& targets,
                                           const ForwardSettings& settings) const {
  const auto& dec = config_.decoder;
  if (memory.rank() != 3 || memory.dim(2) != config_.memory_dim())
    throw ContractViolation("decode: memory " + shape_str(memory.shape()) + " does not have width " +
                            std::to_string(config_.memory_dim()));
  const std::size_t B = memory.dim(0), T = memory.dim(1), M = memory.dim(2);
  if (targets.rank() != 3 || targets.dim(0) != B || targets.dim(2) != dec.frame_dim)
    throw ContractViolation("decode: targets " + shape_str(targets.shape()) + " do not match [" + std::to_string(B) +
                            ", N, " + std::to_string(dec.frame_dim) + "]");
  const std::size_t N = targets.dim(1), F = dec.frame_dim;
  if (N == 0) throw ContractViolation("decode: zero-length target");
  if (mask.shape() != Shape{B, T}) throw ContractViolation("decode: mask does not match memory");

  // Prenet inputs for every step at once: targets shifted right by one frame.
  std::vector<double> shifted(B * N * F, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 1; n < N; ++n)
      for (std::size_t f = 0; f < F; ++f) shifted[(b * N + n) * F + f] = targets[(b * N + n - 1) * F + f];
  const std::size_t P = dec.prenet.back();
  Tensor pre = reshape(prenet(Tensor::from({B * N, F}, std::move(shifted)), settings), {B, N, P});

  Tensor pm = process_memory(memory);
  Tensor h1 = Tensor::zeros({B, dec.attention_lstm}), c1 = h1;
  Tensor h2 = Tensor::zeros({B, dec.decoder_lstm}), c2 = h2;
  Tensor context = Tensor::zeros({B, M});
  Tensor previous = Tensor::zeros({B, T}), cumulative = previous;
  std::vector<Tensor> outputs, alignments;
  outputs.reserve(N);
  alignments.reserve(N);
  for (std::size_t n = 0; n < N; ++n) {
    Tensor p = reshape(slice(pre, 1, n, 1), {B, P});
    std::tie(h1, c1) = lstm_cell(concat({p, context}, 1), h1, c1, attention_lstm_);
    AttentionStep att = attend(h1, memory, pm, mask, previous, cumulative);
    context = att.context;
    previous = att.alignment;
    cumulative = add(cumulative, att.alignment);
    std::tie(h2, c2) = lstm_cell(concat({context, h1}, 1), h2, c2, decoder_lstm_);
    outputs.push_back(reshape(concat({h2, context}, 1), {B, 1, dec.decoder_lstm + M}));
    alignments.push_back(reshape(att.alignment, {B, 1, T}));
  }
  Tensor out = reshape(concat(outputs, 1), {B * N, dec.decoder_lstm + M});
  DecoderOutput result;
  result.frames = reshape(linear(out, frame_weight_, frame_bias_), {B, N, F});
  result.stop_logits = reshape(linear(out, stop_weight_, stop_bias_), {B, N});
  result.alignments = concat(alignments, 1);
  return result;
}

InferenceResult Model::infer(const Tensor& memory, const Tensor& mask, std::size_t max_steps,
                             const ForwardSettings& settings) const {
  if (max_steps == 0) throw ContractViolation("infer: max_steps must be positive");
  if (memory.rank() != 3 || memory.dim(0) != 1 || memory.dim(2) != config_.memory_dim())
    throw ContractViolation("infer: memory must be [1, T, " + std::to_string(config_.memory_dim()) + "], got " +
                            shape_str(memory.shape()));
  NoGradScope no_grad;
  const auto& dec = config_.decoder;
  const std::size_t T = memory.dim(1), M = memory.dim(2), F = dec.frame_dim;
  Tensor pm = process_memory(memory);
  Tensor h1 = Tensor::zeros({1, dec.attention_lstm}), c1 = h1;
  Tensor h2 = Tensor::zeros({1, dec.decoder_lstm}), c2 = h2;
  Tensor context = Tensor::zeros({1, M});
  Tensor previous = Tensor::zeros({1, T}), cumulative = previous;
  Tensor frame = Tensor::zeros({1, F});
  std::vector<double> frames, aligns;
  InferenceResult result;
  while (result.steps < max_steps) {
    std::tie(h1, c1) = lstm_cell(concat({prenet(frame, settings), context}, 1), h1, c1, attention_lstm_);
    AttentionStep att = attend(h1, memory, pm, mask, previous, cumulative);
    context = att.context;
    previous = att.alignment;
    cumulative = add(cumulative, att.alignment);
    std::tie(h2, c2) = lstm_cell(concat({context, h1}, 1), h2, c2, decoder_lstm_);
    Tensor out = concat({h2, context}, 1);
    frame = linear(out, frame_weight_, frame_bias_);
    double stop = linear(out, stop_weight_, stop_bias_).item();
    frames.insert(frames.end(), frame.data().begin(), frame.data().end());
    aligns.insert(aligns.end(), att.alignment.data().begin(), att.alignment.data().end());
    ++result.steps;
    if (stop > 0.0) {  // sigmoid(stop) > 0.5
      result.stopped = true;
      break;
    }
  }
  result.frames = Tensor::from({result.steps, F}, std::move(frames));
  result.alignments = Tensor::from({result.steps, T}, std::move(aligns));
  return result;
}

Tensor guided_attention_loss(const Tensor& alignments, double g, std::span<const std::size_t> frame_lengths,
                             std::span<const std::size_t> token_lengths) {
  if (!(g > 0.0)) throw ConfigError("guided attention tolerance must be positive");
  if (alignments.rank() != 3) throw ContractViolation("guided_attention_loss: alignments must be [B, N, T]");
  const std::size_t B = alignments.dim(0), N = alignments.dim(1), T = alignments.dim(2);
  if (frame_lengths.size() != B || token_lengths.size() != B)
    throw ContractViolation("guided_attention_loss: one length pair per example required");
  std::vector<double> w(B * N * T, 0.0);
  double count = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t nb = frame_lengths[b], tb = token_lengths[b];
    if (nb == 0 || tb == 0 || nb > N || tb > T) throw ContractViolation("guided_attention_loss: bad lengths");
    for (std::size_t n = 0; n < nb; ++n)
      for (std::size_t t = 0; t < tb; ++t) {
        double d = static_cast<double>(n) / static_cast<double>(nb) - static_cast<double>(t) / static_cast<double>(tb);
        w[(b * N + n) * T + t] = 1.0 - std::exp(-d * d / (2.0 * g * g));
      }
    count += static_cast<double>(nb * tb);
  }
  return scale(sum(mul(alignments, Tensor::from({B, N, T}, std::move(w)))), 1.0 / count);
}

LossBreakdown total_loss(const Model& model, const Batch& batch, const ModelOutputs& outputs, const LossWeights& w) {
  const auto& dec = outputs.decoder;
  LossBreakdown out;
  std::vector<std::pair<std::string, Tensor>> terms;
  terms.emplace_back("frame", masked_mse_loss(dec.frames, batch.frames, batch.frame_mask));
  terms.emplace_back("stop", binary_cross_entropy(dec.stop_logits, batch.stop_targets, batch.frame_mask,
                                                  model.config().decoder.stop_pos_weight));
  terms.emplace_back("guided",
                     guided_attention_loss(dec.alignments, w.tolerance, batch.frame_lengths, batch.token_lengths));
  out.weights = {{"frame", 1.0}, {"stop", 1.0}, {"guided", w.guided}};
  if (w.include_classifier && outputs.classifier_loss.defined()) {
    terms.emplace_back("classifier", outputs.classifier_loss);
    out.weights["classifier"] = model.config().classifier.weight;
  }
  for (const auto& [name, t] : terms) {
    double v = t.item();
    if (!std::isfinite(v)) throw NumericalError("loss component '" + name + "' is not finite");
    out.components[name] = v;
    Tensor weighted = out.weights[name] == 1.0 ? t : scale(t, out.weights[name]);
    out.total = out.total.defined() ? add(out.total, weighted) : weighted;
  }
  return out;
}

}  // namespace mtts
