#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "rtdforge/data.hpp"
#include "rtdforge/error.hpp"

namespace rtdforge {
namespace {

// Upper critical value of chi-square at p = 0.01 (Wilson-Hilferty).
double chi2_critical_99(std::size_t df) {
  const double k = static_cast<double>(df);
  const double z = 2.3263478740408408;
  const double a = 2.0 / (9.0 * k);
  return k * std::pow(1.0 - a + z * std::sqrt(a), 3);
}

double chi2_uniform(const std::vector<double>& counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0.0;
  for (double c : counts) stat += (c - expected) * (c - expected) / expected;
  return stat;
}

std::vector<TokenId> iota_doc(std::size_t n, TokenId first = 10) {
  std::vector<TokenId> doc(n);
  std::iota(doc.begin(), doc.end(), first);
  return doc;
}

Batch single_row(std::size_t body_len) {
  Rng rng(0);
  const auto seq = dynamic_segment(iota_doc(body_len), body_len + 2, rng);
  return collate(std::span<const TokenSequence>(&*seq, 1));
}

TEST(DynamicSegment, ShortDocumentIsWrappedWhole) {
  Rng rng(1);
  const auto doc = iota_doc(10);
  const auto seq = dynamic_segment(doc, 128, rng);
  ASSERT_TRUE(seq.has_value());
  ASSERT_EQ(seq->ids.size(), 128u);
  EXPECT_EQ(seq->ids[0], Vocab::kCls);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seq->ids[i + 1], doc[i]);
  EXPECT_EQ(seq->ids[11], Vocab::kSep);
  EXPECT_EQ(std::count(seq->ids.begin(), seq->ids.end(), Vocab::kPad), 116);
  EXPECT_EQ(std::accumulate(seq->attention_mask.begin(), seq->attention_mask.end(), 0), 12);
  EXPECT_EQ(seq->length(), 12u);
  for (std::size_t i = 0; i < 128; ++i) {
    EXPECT_EQ(seq->segment_ids[i], 0);
    EXPECT_EQ(seq->attention_mask[i] == 0, seq->ids[i] == Vocab::kPad);
  }
}

TEST(DynamicSegment, ExactBudgetStartsAtZero) {
  const auto doc = iota_doc(126);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto seq = dynamic_segment(doc, 128, rng);
    EXPECT_EQ(seq->ids[1], doc[0]);
    EXPECT_EQ(seq->ids[126], doc[125]);
    EXPECT_EQ(seq->ids[127], Vocab::kSep);
  }
}

TEST(DynamicSegment, EmptyDocumentSignalsSkip) {
  Rng rng(2);
  EXPECT_FALSE(dynamic_segment(std::vector<TokenId>{}, 128, rng).has_value());
  EXPECT_THROW(dynamic_segment(iota_doc(3), 2, rng), ValueError);
}

TEST(DynamicSegment, WindowStartIsUniform) {
  const auto doc = iota_doc(1000, 0);
  const std::size_t budget = 126;
  const std::size_t starts = doc.size() - budget + 1;
  std::vector<double> counts(starts, 0.0);
  Rng rng(3);
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws; ++i) {
    const auto seq = dynamic_segment(doc, budget + 2, rng);
    const std::size_t start = static_cast<std::size_t>(seq->ids[1]);
    ASSERT_LT(start, starts);
    // Window is contiguous.
    ASSERT_EQ(seq->ids[budget], static_cast<TokenId>(start + budget - 1));
    counts[start] += 1.0;
  }
  EXPECT_LT(chi2_uniform(counts), chi2_critical_99(starts - 1));
}

TEST(Masking, MaskCountRounding) {
  EXPECT_EQ(mask_count(128, 0.15), 19u);
  EXPECT_EQ(mask_count(1, 0.15), 1u);
  EXPECT_EQ(mask_count(10, 0.15), 2u);  // 1.5 rounds half up
  EXPECT_EQ(mask_count(3, 0.5), 2u);
  EXPECT_EQ(mask_count(100, 0.15), 15u);
}

TEST(Masking, FifteenPercentOf128Is19) {
  const Batch batch = single_row(128);
  Rng rng(4);
  const MaskedBatch mb = apply_masking(batch, 0.15, rng);
  ASSERT_EQ(mb.mask_positions[0].size(), 19u);
  EXPECT_EQ(mb.masked_count(), 19u);
  for (std::size_t k = 0; k < 19; ++k) {
    const std::size_t p = mb.mask_positions[0][k];
    EXPECT_EQ(mb.inputs.ids[p], Vocab::kMask);
    EXPECT_EQ(mb.originals[0][k], batch.ids[p]);
    EXPECT_EQ(mb.original.ids[p], batch.ids[p]);
  }
}

TEST(Masking, SingleEligibleTokenIsMasked) {
  const Batch batch = single_row(1);
  Rng rng(5);
  const MaskedBatch mb = apply_masking(batch, 0.15, rng);
  ASSERT_EQ(mb.mask_positions[0].size(), 1u);
  EXPECT_EQ(mb.mask_positions[0][0], 1u);
}

TEST(Masking, SpecialsAndPaddingAreNeverSelected) {
  Rng rng(6);
  std::vector<TokenSequence> seqs;
  for (std::size_t n : {5u, 40u, 17u}) seqs.push_back(*dynamic_segment(iota_doc(n), 64, rng));
  const Batch batch = collate(seqs);
  EXPECT_EQ(batch.seq_len, 42u);
  for (int trial = 0; trial < 200; ++trial) {
    const MaskedBatch mb = apply_masking(batch, 0.5, rng);
    for (std::size_t r = 0; r < batch.batch_size; ++r) {
      const auto& pos = mb.mask_positions[r];
      EXPECT_TRUE(std::is_sorted(pos.begin(), pos.end()));
      EXPECT_EQ(std::set<std::size_t>(pos.begin(), pos.end()).size(), pos.size());
      EXPECT_EQ(pos.size(), mask_count(seqs[r].length() - 2, 0.5));
      for (std::size_t p : pos) {
        const std::size_t i = batch.flat(r, p);
        EXPECT_EQ(batch.attention_mask[i], 1);
        EXPECT_FALSE(Vocab::is_special(batch.ids[i]));
      }
    }
  }
}

TEST(Masking, SelectionFrequencyIsUniform) {
  const Batch batch = single_row(128);
  std::vector<double> counts(128, 0.0);
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const MaskedBatch mb = apply_masking(batch, 0.15, rng);
    for (std::size_t p : mb.mask_positions[0]) counts[p - 1] += 1.0;
  }
  EXPECT_LT(chi2_uniform(counts), chi2_critical_99(127));
}

TEST(Masking, FixedSeedIsReproducible) {
  const Batch batch = single_row(80);
  Rng a(8);
  Rng b(8);
  const MaskedBatch x = apply_masking(batch, 0.15, a);
  const MaskedBatch y = apply_masking(batch, 0.15, b);
  EXPECT_EQ(x.mask_positions, y.mask_positions);
  EXPECT_EQ(x.inputs.ids, y.inputs.ids);
  EXPECT_TRUE(a == b);
}

TEST(Masking, RejectsBadRatesAndUnmaskableRows) {
  const Batch batch = single_row(10);
  Rng rng(9);
  EXPECT_THROW(apply_masking(batch, 0.0, rng), ValueError);
  EXPECT_THROW(apply_masking(batch, 0.6, rng), ValueError);
  TokenSequence only_specials;
  only_specials.ids = {Vocab::kCls, Vocab::kSep};
  only_specials.segment_ids = {0, 0};
  only_specials.attention_mask = {1, 1};
  only_specials.max_seq_len = 2;
  const Batch bad = collate(std::span<const TokenSequence>(&only_specials, 1));
  try {
    apply_masking(bad, 0.15, rng);
    FAIL() << "expected ValueError";
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("unmaskable sequence"), std::string::npos);
  }
}

TEST(Packing, PairLayoutAndSegments) {
  const std::vector<TokenId> a = {100, 101};
  const std::vector<TokenId> b = {102, 103};
  const TokenSequence seq = pack_token_ids(a, std::span<const TokenId>(b), 16);
  const std::vector<TokenId> expected = {Vocab::kCls, 100, 101, Vocab::kSep, 102, 103, Vocab::kSep};
  const std::vector<std::int32_t> segments = {0, 0, 0, 0, 1, 1, 1};
  ASSERT_EQ(seq.length(), 7u);
  EXPECT_EQ(std::vector<TokenId>(seq.ids.begin(), seq.ids.begin() + 7), expected);
  EXPECT_EQ(std::vector<std::int32_t>(seq.segment_ids.begin(), seq.segment_ids.begin() + 7), segments);
  for (std::size_t i = 7; i < 16; ++i) {
    EXPECT_EQ(seq.ids[i], Vocab::kPad);
    EXPECT_EQ(seq.attention_mask[i], 0);
  }
}

TEST(Packing, DownstreamTextPair) {
  Vocab vocab;
  const TaskExample ex{"ab", std::string("cd"), "1"};
  const TokenSequence seq = pack_downstream(ex, vocab, 10);
  const std::vector<TokenId> expected = {Vocab::kCls,          Vocab::byte_token('a'), Vocab::byte_token('b'),
                                         Vocab::kSep,          Vocab::byte_token('c'), Vocab::byte_token('d'),
                                         Vocab::kSep};
  EXPECT_EQ(std::vector<TokenId>(seq.ids.begin(), seq.ids.begin() + 7), expected);
  EXPECT_EQ(seq.segment_ids[3], 0);
  EXPECT_EQ(seq.segment_ids[4], 1);
}

TEST(Packing, SingleSentenceHasSegmentZero) {
  Vocab vocab;
  const TokenSequence seq = pack_downstream(TaskExample{"hello", std::nullopt, "0"}, vocab, 12);
  EXPECT_EQ(seq.length(), 7u);
  for (std::int32_t s : seq.segment_ids) EXPECT_EQ(s, 0);
}

TEST(Packing, LongestFirstTruncation) {
  const auto a = iota_doc(100, 1000);
  const auto b = iota_doc(10, 2000);
  const TokenSequence seq = pack_token_ids(a, std::span<const TokenId>(b), 64);
  const std::size_t sep = static_cast<std::size_t>(
      std::find(seq.ids.begin(), seq.ids.end(), Vocab::kSep) - seq.ids.begin());
  EXPECT_EQ(sep - 1, 51u);
  EXPECT_EQ(seq.length() - sep - 2, 10u);
  EXPECT_EQ(seq.ids[51], a[50]);  // end of the first sentence was trimmed
  EXPECT_EQ(seq.length(), 64u);
}

TEST(Packing, TruncationTrimsSecondOnTies) {
  const auto a = iota_doc(10, 1000);
  const auto b = iota_doc(10, 2000);
  const TokenSequence seq = pack_token_ids(a, std::span<const TokenId>(b), 3 + 15);
  const std::size_t sep = static_cast<std::size_t>(
      std::find(seq.ids.begin(), seq.ids.end(), Vocab::kSep) - seq.ids.begin());
  EXPECT_EQ(sep - 1, 8u);
  EXPECT_EQ(seq.length() - sep - 2, 7u);
}

TEST(Packing, BothEmptyIsAnError) {
  const std::vector<TokenId> none;
  EXPECT_THROW(pack_token_ids(none, std::span<const TokenId>(none), 16), ValueError);
}

TEST(TaskTsv, ParsesSingleAndPairRows) {
  const auto single = parse_task_tsv("sentence1\tlabel\nhello there\t1\nbye\t0\n");
  ASSERT_EQ(single.size(), 2u);
  EXPECT_EQ(single[0].sentence1, "hello there");
  EXPECT_FALSE(single[0].sentence2.has_value());
  EXPECT_EQ(single[1].label, "0");
  const auto pair = parse_task_tsv("sentence1\tsentence2\tlabel\na\tb\t3.5\n");
  ASSERT_EQ(pair.size(), 1u);
  EXPECT_EQ(*pair[0].sentence2, "b");
  EXPECT_EQ(pair[0].label, "3.5");
}

TEST(TaskTsv, WrongFieldCountReportsLine) {
  try {
    parse_task_tsv("sentence1\tlabel\nok\t1\nbroken\n");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  EXPECT_THROW(parse_task_tsv(""), DataError);
}

TEST(BatchIterator, EpochModeYieldsPartialFinalBatch) {
  BatchIterator it(10, 4, IterationMode::kEpoch, Rng(10));
  std::vector<std::size_t> sizes;
  std::multiset<std::size_t> seen;
  while (auto b = it.next()) {
    sizes.push_back(b->size());
    seen.insert(b->begin(), b->end());
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  std::multiset<std::size_t> all;
  for (std::size_t i = 0; i < 10; ++i) all.insert(i);
  EXPECT_EQ(seen, all);
  // A new epoch follows.
  EXPECT_TRUE(it.next().has_value());
}

TEST(BatchIterator, SameSeedSameStream) {
  for (IterationMode mode : {IterationMode::kEpoch, IterationMode::kStep}) {
    BatchIterator a(25, 4, mode, Rng(11));
    BatchIterator b(25, 4, mode, Rng(11));
    for (int i = 0; i < 20; ++i) EXPECT_EQ(a.next(), b.next());
  }
}

TEST(BatchIterator, StepModeSamplesWithReplacement) {
  BatchIterator it(3, 1, IterationMode::kStep, Rng(12));
  std::vector<int> counts(3, 0);
  for (int i = 0; i < 3000; ++i) {
    const auto b = it.next();
    ASSERT_TRUE(b.has_value());
    ++counts[(*b)[0]];
  }
  for (int c : counts) EXPECT_NEAR(c, 1000, 150);
}

TEST(BatchIterator, RejectsEmptySource) {
  EXPECT_THROW(BatchIterator(0, 4, IterationMode::kEpoch, Rng(0)), ValueError);
}

TEST(Collate, PadsToLongestRow) {
  Rng rng(13);
  std::vector<TokenSequence> seqs = {*dynamic_segment(iota_doc(3), 32, rng),
                                     *dynamic_segment(iota_doc(7), 32, rng)};
  const Batch b = collate(seqs);
  EXPECT_EQ(b.seq_len, 9u);
  EXPECT_EQ(b.non_pad_count(), 14u);
  EXPECT_EQ(b.ids[b.flat(0, 5)], Vocab::kPad);
  const Batch full = collate(seqs, true);
  EXPECT_EQ(full.seq_len, 32u);
}

}  // namespace
}  // namespace rtdforge
