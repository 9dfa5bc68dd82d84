#include "mtts/batching.hpp"

#include <algorithm>

#include "mtts/errors.hpp"

namespace mtts {

Batch assemble_batch(std::span<const Utterance* const> items) {
  if (items.empty()) throw ContractViolation("assemble_batch: empty batch");
  Batch b;
  b.size = items.size();
  for (const Utterance* u : items) {
    if (u->text.empty() || u->num_frames() == 0) throw ContractViolation("assemble_batch: empty utterance " + u->id);
    if (u->frames.dim(1) != kFrameDim)
      throw ContractViolation("assemble_batch: utterance " + u->id + " has frame dim " +
                              std::to_string(u->frames.dim(1)));
    b.max_tokens = std::max(b.max_tokens, u->text.size());
    b.max_frames = std::max(b.max_frames, u->num_frames());
  }
  const std::size_t B = b.size, T = b.max_tokens, N = b.max_frames;
  b.tokens.assign(B * T, kPadToken);
  std::vector<double> token_mask(B * T, 0.0), frames(B * N * kFrameDim, 0.0), frame_mask(B * N, 0.0),
      stop(B * N, 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    const Utterance& u = *items[i];
    b.ids.push_back(u.id);
    b.languages.push_back(u.language);
    b.speakers.push_back(u.speaker);
    b.token_lengths.push_back(u.text.size());
    b.frame_lengths.push_back(u.num_frames());
    auto toks = tokenize(u.text);
    for (std::size_t t = 0; t < toks.size(); ++t) {
      b.tokens[i * T + t] = toks[t];
      token_mask[i * T + t] = 1.0;
    }
    auto src = u.frames.data();
    std::copy(src.begin(), src.end(), frames.begin() + static_cast<std::ptrdiff_t>(i * N * kFrameDim));
    for (std::size_t n = 0; n < u.num_frames(); ++n) frame_mask[i * N + n] = 1.0;
    stop[i * N + u.num_frames() - 1] = 1.0;
  }
  b.token_mask = Tensor::from({B, T}, std::move(token_mask));
  b.frames = Tensor::from({B, N, kFrameDim}, std::move(frames));
  b.frame_mask = Tensor::from({B, N}, std::move(frame_mask));
  b.stop_targets = Tensor::from({B, N}, std::move(stop));
  return b;
}

Batch assemble_batch(const std::vector<Utterance>& pool, std::span<const std::size_t> indices) {
  std::vector<const Utterance*> items;
  items.reserve(indices.size());
  for (std::size_t i : indices) items.push_back(&pool.at(i));
  return assemble_batch(items);
}

BatchPlan plan_epoch(const std::vector<Utterance>& pool, std::size_t batch_size, std::size_t languages,
                     SeededRng& rng) {
  if (languages == 0 || batch_size == 0) throw ConfigError("plan_epoch: batch size and language count must be positive");
  if (batch_size % languages != 0)
    throw ConfigError("plan_epoch: batch size " + std::to_string(batch_size) + " not divisible by " +
                      std::to_string(languages) + " languages");
  const std::size_t per = batch_size / languages;

  std::vector<std::vector<std::size_t>> queues(languages);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    std::size_t slot = 0;
    if (languages > 1) {
      if (pool[i].language < 0 || static_cast<std::size_t>(pool[i].language) >= languages)
        throw ConfigError("plan_epoch: language " + std::to_string(pool[i].language) + " has no slot among " +
                          std::to_string(languages));
      slot = static_cast<std::size_t>(pool[i].language);
    }
    queues[slot].push_back(i);
  }
  std::size_t num_batches = pool.size();
  for (std::size_t l = 0; l < languages; ++l) {
    if (queues[l].size() < per)
      throw ConfigError("plan_epoch: language " + std::to_string(l) + " has " + std::to_string(queues[l].size()) +
                        " examples, fewer than " + std::to_string(per) + " per batch");
    num_batches = std::min(num_batches, queues[l].size() / per);
  }

  BatchPlan plan;
  plan.batch_size = batch_size;
  plan.languages = languages;
  for (auto& q : queues) {
    rng.shuffle(q);
    plan.dropped.push_back(q.size() - num_batches * per);
    q.resize(num_batches * per);
    const std::size_t window = kBucketWindow * per;
    for (std::size_t start = 0; start < q.size(); start += window) {
      auto end = q.begin() + static_cast<std::ptrdiff_t>(std::min(q.size(), start + window));
      std::stable_sort(q.begin() + static_cast<std::ptrdiff_t>(start), end, [&](std::size_t a, std::size_t b) {
        return pool[a].text.size() < pool[b].text.size();
      });
    }
  }
  plan.batches.resize(num_batches);
  for (std::size_t j = 0; j < num_batches; ++j) {
    auto& batch = plan.batches[j];
    batch.resize(batch_size);
    for (std::size_t i = 0; i < per; ++i)
      for (std::size_t l = 0; l < languages; ++l) batch[i * languages + l] = queues[l][j * per + i];
  }
  rng.shuffle(plan.batches);
  return plan;
}

bool verify_interleave(std::span<const int> languages, std::size_t num_languages) {
  if (num_languages == 1) return true;
  if (num_languages == 0 || languages.size() % num_languages != 0) return false;
  for (std::size_t b = 0; b < languages.size(); ++b)
    if (languages[b] != static_cast<int>(b % num_languages)) return false;
  return true;
}

RegroupedView::RegroupedView(std::span<const int> languages, std::size_t num_languages)
    : languages_(languages.begin(), languages.end()) {
  if (!verify_interleave(languages, num_languages))
    throw ContractViolation("regroup: batch does not follow the interleaved language order required by the sampler");
  lanes_ = num_languages;
  rows_ = languages.size() / num_languages;
}

std::vector<std::size_t> RegroupedView::flatten() const {
  std::vector<std::size_t> out;
  out.reserve(rows_ * lanes_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t l = 0; l < lanes_; ++l) out.push_back(index(r, l));
  return out;
}

RegroupedView regroup(const Batch& batch, std::size_t num_languages) {
  return RegroupedView(batch.languages, num_languages);
}

}  // namespace mtts
