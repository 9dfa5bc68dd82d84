#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mtts/corpus.hpp"
#include "mtts/rng.hpp"
#include "mtts/tensor.hpp"

namespace mtts {

/// Padded minibatch. Example b sits in slot b % L; with L > 1 slot l holds language l.
struct Batch {
  std::size_t size = 0;        // B
  std::size_t max_tokens = 0;  // T
  std::size_t max_frames = 0;  // N
  std::vector<std::string> ids;
  std::vector<int> tokens;  // [B, T], kPadToken beyond each length
  Tensor token_mask;        // [B, T]
  std::vector<int> languages;
  std::vector<int> speakers;
  std::vector<std::size_t> token_lengths;
  std::vector<std::size_t> frame_lengths;
  Tensor frames;        // [B, N, F], zero padded
  Tensor frame_mask;    // [B, N]
  Tensor stop_targets;  // [B, N], 1 at the last real frame
};

Batch assemble_batch(std::span<const Utterance* const> items);
Batch assemble_batch(const std::vector<Utterance>& pool, std::span<const std::size_t> indices);

struct BatchPlan {
  std::size_t batch_size = 0;
  std::size_t languages = 0;
  std::vector<std::vector<std::size_t>> batches;  // indices into the planned pool
  std::vector<std::size_t> dropped;               // leftovers per language slot

  std::size_t size() const { return batches.size(); }
};

/// One epoch of interleaved, language-balanced batches. Each language queue is
/// shuffled, then bucketed by length in windows of kBucketWindow batches; batch
/// order is shuffled at the end. L = 1 ignores language ids.
BatchPlan plan_epoch(const std::vector<Utterance>& pool, std::size_t batch_size, std::size_t languages,
                     SeededRng& rng);
inline constexpr std::size_t kBucketWindow = 4;

/// True iff example b has language b % L for every b (and B % L == 0). L = 1 is always true.
bool verify_interleave(std::span<const int> languages, std::size_t num_languages);

/// Index view [B/L, L] over an interleaved batch.
class RegroupedView {
 public:
  RegroupedView(std::span<const int> languages, std::size_t num_languages);

  std::size_t rows() const { return rows_; }
  std::size_t lanes() const { return lanes_; }
  std::size_t index(std::size_t row, std::size_t lane) const { return row * lanes_ + lane; }
  int language(std::size_t row, std::size_t lane) const { return languages_[index(row, lane)]; }
  /// Batch indices in view order; the identity permutation.
  std::vector<std::size_t> flatten() const;

 private:
  std::vector<int> languages_;
  std::size_t rows_ = 0, lanes_ = 0;
};

RegroupedView regroup(const Batch& batch, std::size_t num_languages);

}  // namespace mtts
