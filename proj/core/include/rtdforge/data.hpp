#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtdforge/rng.hpp"
#include "rtdforge/tokenizer.hpp"

namespace rtdforge {

/// One model input, padded out to `max_seq_len`.
struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::int32_t> attention_mask;  // 0 marks padding
  std::size_t max_seq_len = 0;

  /// Number of non-pad positions.
  std::size_t length() const;
};

/// Row-major [batch_size x seq_len] view of several sequences.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::int32_t> attention_mask;

  std::size_t flat(std::size_t row, std::size_t pos) const { return row * seq_len + pos; }
  std::size_t non_pad_count() const;
};

/// Stacks sequences, padding every row to the longest non-pad length in the
/// group (or to each sequence's max_seq_len when `pad_to_max`).
Batch collate(std::span<const TokenSequence> sequences, bool pad_to_max = false);

struct MaskedBatch {
  Batch inputs;    // MASK at selected positions
  Batch original;  // pre-mask tokens
  std::vector<std::vector<std::size_t>> mask_positions;  // ascending per row
  std::vector<std::vector<TokenId>> originals;

  /// row * seq_len + position for every masked slot, row-major order.
  std::vector<std::size_t> flat_positions() const;
  std::vector<TokenId> flat_originals() const;
  std::size_t masked_count() const;
};

/// [CLS] window [SEP] where the window is the whole document when it fits,
/// else a uniformly placed slice of max_seq_len - 2 tokens. nullopt for an
/// empty document (the caller draws another).
std::optional<TokenSequence> dynamic_segment(std::span<const TokenId> doc, std::size_t max_seq_len,
                                             Rng& rng);

/// round-half-up(mask_percent * eligible), at least 1.
std::size_t mask_count(std::size_t eligible, double mask_percent);

/// Replaces a uniformly chosen subset of non-special positions with MASK.
MaskedBatch apply_masking(const Batch& batch, double mask_percent, Rng& rng);

struct TaskExample {
  std::string sentence1;
  std::optional<std::string> sentence2;
  std::string label;
};

/// Packs token ids as [CLS] a [SEP] or [CLS] a [SEP] b [SEP]. Truncation
/// trims the end of the currently longer sentence one token at a time (the
/// second on ties) until everything fits.
TokenSequence pack_token_ids(std::span<const TokenId> first,
                             std::optional<std::span<const TokenId>> second,
                             std::size_t max_seq_len);
TokenSequence pack_downstream(const TaskExample& example, const Vocab& vocab,
                              std::size_t max_seq_len);

/// Reads `sentence1<TAB>[sentence2<TAB>]label` rows after a header line.
std::vector<TaskExample> read_task_tsv(const std::filesystem::path& path);
std::vector<TaskExample> parse_task_tsv(std::string_view text, const std::string& source = "tsv");

enum class IterationMode {
  kStep,   // sample with replacement, never exhausts
  kEpoch,  // shuffled pass, each index once, final partial batch included
};

/// Yields batches of indices into a source of `source_size` items.
class BatchIterator {
 public:
  BatchIterator(std::size_t source_size, std::size_t batch_size, IterationMode mode, Rng rng);

  /// Next batch; nullopt once an epoch is exhausted (epoch mode only). The
  /// following call starts a freshly shuffled epoch.
  std::optional<std::vector<std::size_t>> next();

  Rng& rng() noexcept { return rng_; }
  const Rng& rng() const noexcept { return rng_; }

 private:
  void reshuffle();

  std::size_t source_size_;
  std::size_t batch_size_;
  IterationMode mode_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  bool exhausted_ = true;
};

}  // namespace rtdforge
