#pragma once

#include <span>
#include <utility>
#include <vector>

#include "mtts/rng.hpp"
#include "mtts/tensor.hpp"

// Differentiable primitives. Every op records a backward rule on the active
// tape when any input requires grad; with no active tape they only compute.
//
// Binary elementwise ops accept equal shapes, or one operand whose shape equals
// the other's shape without its leading (batch) axis. Anything else is a
// ContractViolation naming the op and both shapes.

namespace mtts {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

/// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B,M,K] x [B,K,N] -> [B,M,N]
Tensor bmm(const Tensor& a, const Tensor& b);
/// x[N,I] * w[I,O] + b[O]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);
/// Swaps the two trailing axes: [..., M, N] -> [..., N, M].
Tensor swap_last_axes(const Tensor& a);
/// [B,D] -> [B,T,D], repeating each row T times.
Tensor expand_time(const Tensor& a, std::size_t steps);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
/// Throws DomainError when an input would overflow.
Tensor exp(const Tensor& a);
/// Throws DomainError on non-positive input.
Tensor log(const Tensor& a);

Tensor softmax(const Tensor& a, std::size_t axis);
/// Row softmax of [B,T] restricted to positions with mask > 0; others get 0.
Tensor masked_softmax(const Tensor& a, const Tensor& mask);

/// table[V,D] gathered at ids -> [ids.size(), D]. Unknown id -> LookupError.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor mse_loss(const Tensor& pred, const Tensor& target);
/// Mean squared error over positions where `mask` (a prefix-shape of pred) is positive.
Tensor masked_mse_loss(const Tensor& pred, const Tensor& target, const Tensor& mask);
/// Binary cross-entropy on logits. `mask` may be undefined (all positions count).
Tensor binary_cross_entropy(const Tensor& logits, const Tensor& targets, const Tensor& mask,
                            double pos_weight = 1.0);
/// Mean softmax cross-entropy of logits[N,S] against labels; rows with mask 0 are skipped.
Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> labels,
                                 std::span<const double> mask = {});

/// Identity forward; backward multiplies the upstream gradient by -lambda.
Tensor gradient_reverse(const Tensor& x, double lambda);
/// Identity forward; backward clamps the upstream gradient to [-bound, bound].
Tensor clamp_gradient(const Tensor& x, double bound);

/// Additive attention energies e[b,t] = sum_a v[a] * tanh(keys[b,t,a] + query[b,a] + location[b,t,a]).
/// keys and location [B,T,A], query [B,A], v [A,1] -> [B,T].
Tensor additive_energies(const Tensor& keys, const Tensor& query, const Tensor& location, const Tensor& v);

/// Grouped 1-D cross-correlation with same padding.
/// input [B, C_in, T], weight [C_out, C_in/groups, k] (k odd), bias [C_out] or undefined.
Tensor conv1d_grouped(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t groups);

/// x[N, C, T] times mask[N, G, T], where channel c reads mask group c / (C/G).
Tensor apply_time_mask(const Tensor& x, const Tensor& mask);

enum class Mode { Train, Eval };

struct BatchNormState {
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.1;

  std::vector<double> running_mean;
  std::vector<double> running_var;
  std::vector<long> updates;  // per channel

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, 0.0), running_var(channels, 1.0), updates(channels, 0) {}
  std::size_t channels() const { return running_mean.size(); }
};

/// Per-channel normalization of x[B, C, T] over (B, T).
///
/// Channels c map to state channels state_offset + c. `mask` ([B, G, T], may be
/// undefined) restricts statistics to real positions; masked outputs are zero.
/// Eval mode requires every used state channel to have seen a train update.
Tensor batch_norm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                     Mode mode, const Tensor& mask = {}, std::size_t state_offset = 0);

/// Inverted dropout. Eval mode or rate 0 is the identity.
Tensor dropout(const Tensor& x, double rate, SeededRng& rng, Mode mode);

struct LstmWeights {
  Tensor input_weight;   // [I, 4H], gate order (i, f, g, o)
  Tensor hidden_weight;  // [H, 4H]
  Tensor bias;           // [4H]
};

/// One LSTM step. Gates (i, f, g, o): i, f, o sigmoid, g tanh.
/// c' = f*c + i*g, h' = o*tanh(c'). Returns {h', c'}.
std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c, const LstmWeights& w);

}  // namespace mtts
