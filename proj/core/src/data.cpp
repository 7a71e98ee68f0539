#include "rtdforge/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rtdforge/error.hpp"

namespace rtdforge {

std::size_t TokenSequence::length() const {
  return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), 1));
}

std::size_t Batch::non_pad_count() const {
  return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), 1));
}

Batch collate(std::span<const TokenSequence> sequences, bool pad_to_max) {
  Batch batch;
  batch.batch_size = sequences.size();
  for (const TokenSequence& s : sequences) {
    batch.seq_len = std::max(batch.seq_len, pad_to_max ? s.ids.size() : s.length());
  }
  const std::size_t total = batch.batch_size * batch.seq_len;
  batch.ids.assign(total, Vocab::kPad);
  batch.segment_ids.assign(total, 0);
  batch.attention_mask.assign(total, 0);
  for (std::size_t r = 0; r < sequences.size(); ++r) {
    const TokenSequence& s = sequences[r];
    const std::size_t n = std::min(batch.seq_len, s.ids.size());
    std::copy_n(s.ids.begin(), n, batch.ids.begin() + static_cast<std::ptrdiff_t>(r * batch.seq_len));
    std::copy_n(s.segment_ids.begin(), n,
                batch.segment_ids.begin() + static_cast<std::ptrdiff_t>(r * batch.seq_len));
    std::copy_n(s.attention_mask.begin(), n,
                batch.attention_mask.begin() + static_cast<std::ptrdiff_t>(r * batch.seq_len));
  }
  return batch;
}

std::vector<std::size_t> MaskedBatch::flat_positions() const {
  std::vector<std::size_t> flat;
  flat.reserve(masked_count());
  for (std::size_t r = 0; r < mask_positions.size(); ++r) {
    for (std::size_t p : mask_positions[r]) {
      flat.push_back(inputs.flat(r, p));
    }
  }
  return flat;
}

std::vector<TokenId> MaskedBatch::flat_originals() const {
  std::vector<TokenId> flat;
  flat.reserve(masked_count());
  for (const auto& row : originals) {
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return flat;
}

std::size_t MaskedBatch::masked_count() const {
  std::size_t n = 0;
  for (const auto& row : mask_positions) {
    n += row.size();
  }
  return n;
}

namespace {

TokenSequence wrap(std::span<const TokenId> body, std::size_t max_seq_len) {
  TokenSequence seq;
  seq.max_seq_len = max_seq_len;
  seq.ids.assign(max_seq_len, Vocab::kPad);
  seq.segment_ids.assign(max_seq_len, 0);
  seq.attention_mask.assign(max_seq_len, 0);
  seq.ids[0] = Vocab::kCls;
  std::copy(body.begin(), body.end(), seq.ids.begin() + 1);
  seq.ids[body.size() + 1] = Vocab::kSep;
  std::fill_n(seq.attention_mask.begin(), body.size() + 2, 1);
  return seq;
}

}  // namespace

std::optional<TokenSequence> dynamic_segment(std::span<const TokenId> doc, std::size_t max_seq_len,
                                             Rng& rng) {
  if (max_seq_len < 3) {
    throw ValueError("max_seq_len must be at least 3 (CLS, one token, SEP)");
  }
  if (doc.empty()) {
    return std::nullopt;
  }
  const std::size_t budget = max_seq_len - 2;
  if (doc.size() <= budget) {
    return wrap(doc, max_seq_len);
  }
  const std::size_t start = rng.uniform_index(doc.size() - budget + 1);
  return wrap(doc.subspan(start, budget), max_seq_len);
}

std::size_t mask_count(std::size_t eligible, double mask_percent) {
  const auto rounded = static_cast<std::size_t>(std::floor(mask_percent * static_cast<double>(eligible) + 0.5));
  return std::max<std::size_t>(1, std::min(rounded, eligible));
}

MaskedBatch apply_masking(const Batch& batch, double mask_percent, Rng& rng) {
  if (!(mask_percent > 0.0 && mask_percent <= 0.5)) {
    throw ValueError("mask_percent must lie in (0, 0.5]");
  }
  MaskedBatch out;
  out.inputs = batch;
  out.original = batch;
  out.mask_positions.resize(batch.batch_size);
  out.originals.resize(batch.batch_size);
  std::vector<std::size_t> eligible;
  for (std::size_t r = 0; r < batch.batch_size; ++r) {
    eligible.clear();
    for (std::size_t p = 0; p < batch.seq_len; ++p) {
      const std::size_t i = batch.flat(r, p);
      if (batch.attention_mask[i] != 0 && !Vocab::is_special(batch.ids[i])) {
        eligible.push_back(p);
      }
    }
    if (eligible.empty()) {
      throw ValueError("unmaskable sequence (row " + std::to_string(r) + ")");
    }
    const std::size_t k = mask_count(eligible.size(), mask_percent);
    // Partial Fisher-Yates: the first k slots become a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + rng.uniform_index(eligible.size() - i);
      std::swap(eligible[i], eligible[j]);
    }
    std::vector<std::size_t> chosen(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t p : chosen) {
      const std::size_t i = batch.flat(r, p);
      out.originals[r].push_back(batch.ids[i]);
      out.inputs.ids[i] = Vocab::kMask;
    }
    out.mask_positions[r] = std::move(chosen);
  }
  return out;
}

TokenSequence pack_token_ids(std::span<const TokenId> first,
                             std::optional<std::span<const TokenId>> second,
                             std::size_t max_seq_len) {
  const bool pair = second.has_value();
  if (first.empty() && (!pair || second->empty())) {
    throw ValueError("cannot pack an example whose sentences are all empty");
  }
  const std::size_t overhead = pair ? 3 : 2;
  if (max_seq_len <= overhead) {
    throw ValueError("max_seq_len too small for the special tokens");
  }
  const std::size_t budget = max_seq_len - overhead;
  std::size_t len_a = first.size();
  std::size_t len_b = pair ? second->size() : 0;
  while (len_a + len_b > budget) {
    if (len_a > len_b) {
      --len_a;
    } else {
      --len_b;
    }
  }

  TokenSequence seq;
  seq.max_seq_len = max_seq_len;
  seq.ids.assign(max_seq_len, Vocab::kPad);
  seq.segment_ids.assign(max_seq_len, 0);
  seq.attention_mask.assign(max_seq_len, 0);
  std::size_t pos = 0;
  seq.ids[pos++] = Vocab::kCls;
  for (std::size_t i = 0; i < len_a; ++i) {
    seq.ids[pos++] = first[i];
  }
  seq.ids[pos++] = Vocab::kSep;
  if (pair) {
    for (std::size_t i = 0; i < len_b; ++i) {
      seq.segment_ids[pos] = 1;
      seq.ids[pos++] = (*second)[i];
    }
    seq.segment_ids[pos] = 1;
    seq.ids[pos++] = Vocab::kSep;
  }
  std::fill_n(seq.attention_mask.begin(), pos, 1);
  return seq;
}

TokenSequence pack_downstream(const TaskExample& example, const Vocab& vocab,
                              std::size_t max_seq_len) {
  const std::vector<TokenId> a = encode(vocab, example.sentence1);
  if (!example.sentence2) {
    return pack_token_ids(a, std::nullopt, max_seq_len);
  }
  const std::vector<TokenId> b = encode(vocab, *example.sentence2);
  return pack_token_ids(a, std::span<const TokenId>(b), max_seq_len);
}

namespace {

std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    fields.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos
                                                                         : tab - start));
    if (tab == std::string_view::npos) {
      break;
    }
    start = tab + 1;
  }
  return fields;
}

}  // namespace

std::vector<TaskExample> parse_task_tsv(std::string_view text, const std::string& source) {
  std::vector<TaskExample> examples;
  std::size_t pos = 0;
  int line_no = 0;
  bool pair = false;
  bool have_header = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) {
      end = text.size();
    }
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.remove_suffix(1);
    }
    if (line.empty()) {
      continue;
    }
    const std::vector<std::string> fields = split_tabs(line);
    if (!have_header) {
      if (fields.size() == 2 && fields[0] == "sentence1" && fields[1] == "label") {
        pair = false;
      } else if (fields.size() == 3 && fields[0] == "sentence1" && fields[1] == "sentence2" &&
                 fields[2] == "label") {
        pair = true;
      } else {
        throw DataError(source + " line " + std::to_string(line_no) +
                            ": expected header 'sentence1<TAB>[sentence2<TAB>]label'",
                        line_no);
      }
      have_header = true;
      continue;
    }
    const std::size_t expected = pair ? 3 : 2;
    if (fields.size() != expected) {
      throw DataError(source + " line " + std::to_string(line_no) + ": expected " +
                          std::to_string(expected) + " tab-separated fields, got " +
                          std::to_string(fields.size()),
                      line_no);
    }
    TaskExample ex;
    ex.sentence1 = fields[0];
    if (pair) {
      ex.sentence2 = fields[1];
    }
    ex.label = fields.back();
    examples.push_back(std::move(ex));
  }
  if (!have_header) {
    throw DataError(source + ": missing header row", 0);
  }
  return examples;
}

std::vector<TaskExample> read_task_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open task file " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_task_tsv(buffer.str(), path.string());
}

BatchIterator::BatchIterator(std::size_t source_size, std::size_t batch_size, IterationMode mode,
                             Rng rng)
    : source_size_(source_size), batch_size_(batch_size), mode_(mode), rng_(std::move(rng)) {
  if (source_size == 0) {
    throw ValueError("batch iterator over an empty source");
  }
  if (batch_size == 0) {
    throw ValueError("batch size must be positive");
  }
}

void BatchIterator::reshuffle() {
  order_.resize(source_size_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  for (std::size_t i = source_size_; i > 1; --i) {
    std::swap(order_[i - 1], order_[rng_.uniform_index(i)]);
  }
  cursor_ = 0;
  exhausted_ = false;
}

std::optional<std::vector<std::size_t>> BatchIterator::next() {
  if (mode_ == IterationMode::kStep) {
    std::vector<std::size_t> batch(batch_size_);
    for (std::size_t& i : batch) {
      i = rng_.uniform_index(source_size_);
    }
    return batch;
  }
  if (exhausted_) {
    reshuffle();
  }
  if (cursor_ >= source_size_) {
    exhausted_ = true;
    return std::nullopt;
  }
  const std::size_t end = std::min(source_size_, cursor_ + batch_size_);
  std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return batch;
}

}  // namespace rtdforge
