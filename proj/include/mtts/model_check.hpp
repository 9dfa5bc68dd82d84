#pragma once

#include <cstdint>

#include "mtts/batching.hpp"
#include "mtts/grad_check.hpp"
#include "mtts/model.hpp"

namespace mtts {

/// Tiny model for whole-model derivative checks: vocab 5, every width <= 8,
/// no dropout, two languages (one for SGL), two speakers per language.
ModelConfig tiny_model_config(Variant variant);

/// Hand-built batch for the tiny model: 2 examples (interleaved languages),
/// up to 4 tokens and 3 frames, the second example shorter than the first.
Batch tiny_batch(const ModelConfig& config, SeededRng& rng);

/// Finite-difference check of the total loss against every trainable
/// parameter of a tiny model. The variant cycles with the seed over
/// GEN, SHA, SEP, SGL; batch norm runs in eval mode on populated statistics.
GradCheckReport check_tiny_model(std::uint64_t seed, double tol = 1e-3);

}  // namespace mtts
