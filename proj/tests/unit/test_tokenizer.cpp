#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rtdforge/error.hpp"
#include "rtdforge/rng.hpp"
#include "rtdforge/tokenizer.hpp"
#include "synthetic.hpp"

namespace rtdforge {
namespace {

// Naive greedy BPE over byte strings: full recount every round.
std::vector<MergeRule> reference_merges(const std::vector<std::string>& docs, std::size_t target) {
  std::vector<std::vector<std::string>> words;
  for (const std::string& d : docs) {
    for (std::string_view chunk : split_chunks(d)) {
      std::vector<std::string> w;
      for (char c : chunk) w.emplace_back(1, c);
      words.push_back(std::move(w));
    }
  }
  std::set<std::string> tokens;
  std::vector<MergeRule> rules;
  std::set<std::pair<std::string, std::string>> seen;
  std::size_t size = Vocab::kBaseSize;
  while (size < target) {
    std::map<std::pair<std::string, std::string>, long> counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.size(); ++i) ++counts[{w[i], w[i + 1]}];
    }
    long best = 0;
    std::pair<std::string, std::string> pick;
    for (const auto& [pair, c] : counts) {
      if (c > best) {  // map order gives the lexicographic tie-break
        best = c;
        pick = pair;
      }
    }
    if (best < 2) break;
    if (seen.insert(pick).second) rules.push_back(MergeRule{pick.first, pick.second});
    const std::string joined = pick.first + pick.second;
    if (joined.size() > 1 && tokens.insert(joined).second) ++size;
    for (auto& w : words) {
      std::vector<std::string> out;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == pick.first && w[i + 1] == pick.second) {
          out.push_back(joined);
          ++i;
        } else {
          out.push_back(w[i]);
        }
      }
      w = std::move(out);
    }
  }
  return rules;
}

std::string random_utf8(Rng& rng, std::size_t max_chars) {
  static const std::vector<std::string> pieces = {"a", "b", "z", " ", "\n", "\t", std::string(1, '\0'),
                                                   "\xc3\xa9", "\xe2\x82\xac", "\xf0\x9f\x98\x80",
                                                   "\xe4\xb8\xad", "ab", "  "};
  std::string s;
  const std::size_t n = rng.uniform_index(max_chars + 1);
  for (std::size_t i = 0; i < n; ++i) s += pieces[rng.uniform_index(pieces.size())];
  return s;
}

std::vector<std::string> toy_docs(std::size_t bytes, std::uint64_t seed) {
  const auto grammar = testing::make_grammar(seed, 4, 8);
  return testing::make_corpus(grammar, bytes, seed + 1);
}

TEST(Vocab, BaseInventory) {
  Vocab v;
  EXPECT_EQ(v.size(), 260u);
  EXPECT_EQ(Vocab::kCls, 0);
  EXPECT_EQ(Vocab::kSep, 1);
  EXPECT_EQ(Vocab::kPad, 2);
  EXPECT_EQ(Vocab::kMask, 3);
  for (int b = 0; b < 256; ++b) {
    const TokenId id = Vocab::byte_token(static_cast<std::uint8_t>(b));
    EXPECT_EQ(v.token_bytes(id), std::string(1, static_cast<char>(b)));
    EXPECT_FALSE(Vocab::is_special(id));
  }
  EXPECT_EQ(v.token_bytes(Vocab::kMask), "[MASK]");
}

TEST(TrainVocab, RepeatedRunMergesDoubleAFirst) {
  const std::vector<std::string> docs = {"aaab aaab aaab"};
  Vocab v = train_vocab(docs, 262);
  ASSERT_FALSE(v.merges().empty());
  EXPECT_EQ(v.merges().front(), (MergeRule{"a", "a"}));
}

TEST(TrainVocab, MinimalTargetLearnsNothing) {
  const std::vector<std::string> docs = {"aaab aaab aaab"};
  Vocab v = train_vocab(docs, 260);
  EXPECT_TRUE(v.merges().empty());
  EXPECT_EQ(v.size(), 260u);
}

TEST(TrainVocab, RejectsBadInputs) {
  const std::vector<std::string> docs = {"abc abc"};
  EXPECT_THROW(train_vocab(docs, 259), ValueError);
  const std::vector<std::string> empty;
  EXPECT_THROW(train_vocab(empty, 300), ValueError);
  const std::vector<std::string> blank = {""};
  EXPECT_THROW(train_vocab(blank, 300), ValueError);
}

TEST(TrainVocab, MatchesBruteForceOracle) {
  const std::vector<std::vector<std::string>> corpora = {
      {"aaab aaab aaab"},
      {"low lower lowest newer newest wider", "new newer renew"},
      {"abcabc abcab bcabc", "cab cab cab"},
      toy_docs(6000, 3),
  };
  for (const auto& docs : corpora) {
    for (std::size_t target : {265u, 300u, 420u}) {
      Vocab v = train_vocab(docs, target);
      EXPECT_EQ(v.merges(), reference_merges(docs, target)) << "target " << target;
      EXPECT_LE(v.size(), target);
    }
  }
}

TEST(TrainVocab, MergesNeverCrossWhitespace) {
  const auto docs = toy_docs(20000, 5);
  Vocab v = train_vocab(docs, 600);
  for (const MergeRule& m : v.merges()) {
    const std::string joined = m.left + m.right;
    // A space may only lead a token.
    for (std::size_t i = 1; i < joined.size(); ++i) {
      const bool here = joined[i] == ' ' || joined[i] == '\n';
      const bool before = joined[i - 1] == ' ' || joined[i - 1] == '\n';
      EXPECT_FALSE(here && !before) << joined;
    }
  }
}

TEST(TrainVocab, DeterministicAndDense) {
  const auto docs = toy_docs(30000, 8);
  Vocab a = train_vocab(docs, 700);
  Vocab b = train_vocab(docs, 700);
  EXPECT_EQ(serialize_vocab(a), serialize_vocab(b));
  EXPECT_LE(a.size(), 700u);
  EXPECT_GT(a.merges().size(), 300u);
  std::set<std::string> distinct;
  for (std::size_t id = 0; id < a.size(); ++id) distinct.insert(a.token_bytes(static_cast<TokenId>(id)));
  EXPECT_EQ(distinct.size(), a.size());
}

TEST(TrainVocab, StopsWhenNoPairRepeats) {
  const std::vector<std::string> docs = {"abcdefg"};
  Vocab v = train_vocab(docs, 1000);
  EXPECT_TRUE(v.merges().empty());
}

TEST(Encode, EmptyStringGivesNoTokens) {
  Vocab v;
  EXPECT_TRUE(encode(v, "").empty());
  EXPECT_EQ(decode(v, std::vector<TokenId>{}), "");
}

TEST(Encode, ToyVocabUsesDoubleAMerge) {
  const std::vector<std::string> docs = {"aaab aaab aaab"};
  Vocab v = train_vocab(docs, 261);
  ASSERT_EQ(v.merges().size(), 1u);
  const auto ids = encode(v, "aaab");
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_EQ(v.token_bytes(ids[0]), "aa");
  EXPECT_EQ(v.token_bytes(ids[1]), "a");
  EXPECT_EQ(v.token_bytes(ids[2]), "b");
}

TEST(Encode, NeverEmitsSpecials) {
  const auto docs = toy_docs(20000, 9);
  Vocab v = train_vocab(docs, 500);
  for (TokenId id : encode(v, "[CLS] [MASK] " + docs[0])) EXPECT_FALSE(Vocab::is_special(id));
}

TEST(Encode, RoundTripOnArbitraryUtf8) {
  const auto docs = toy_docs(20000, 10);
  Vocab v = train_vocab(docs, 500);
  EXPECT_EQ(decode(v, encode(v, "hello world")), "hello world");
  const std::string tricky = std::string("nul\0byte \xf0\x9f\x98\x80 emoji", 20);
  EXPECT_EQ(decode(v, encode(v, tricky)), tricky);
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const std::string s = random_utf8(rng, 30);
    ASSERT_EQ(decode(v, encode(v, s)), s);
  }
}

TEST(Encode, MatchesMergePriorityOrder) {
  // "abc" learns (b,c) before (a,b) when bc is more frequent.
  const std::vector<std::string> docs = {"bc bc bc abc abc"};
  Vocab v = train_vocab(docs, 262);
  ASSERT_GE(v.merges().size(), 1u);
  EXPECT_EQ(v.merges()[0], (MergeRule{"b", "c"}));
  const auto ids = encode(v, "abc");
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(v.token_bytes(ids[1]), "bc");
  EXPECT_EQ(decode(v, ids), "abc");
}

TEST(Decode, SpecialsRenderAsMarkers) {
  Vocab v;
  const std::vector<TokenId> ids = {Vocab::kCls, Vocab::byte_token('x'), Vocab::kSep, Vocab::kPad};
  EXPECT_EQ(decode(v, ids), "[CLS]x[SEP][PAD]");
}

TEST(Decode, OutOfRangeIdThrows) {
  Vocab v;
  const std::vector<TokenId> bad = {260};
  EXPECT_THROW(decode(v, bad), IndexError);
  const std::vector<TokenId> negative = {-1};
  EXPECT_THROW(decode(v, negative), IndexError);
}

TEST(VocabFile, SaveLoadRoundTrip) {
  const auto docs = toy_docs(20000, 12);
  Vocab v = train_vocab(docs, 450);
  const auto path = std::filesystem::temp_directory_path() / "rtdforge_vocab_roundtrip.txt";
  save_vocab(v, path);
  Vocab back = load_vocab(path);
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.target_size(), 450u);
  for (const std::string& d : docs) ASSERT_EQ(encode(back, d), encode(v, d));
  std::filesystem::remove(path);
}

TEST(VocabFile, HeaderFormat) {
  Vocab v(30522);
  const std::string text = serialize_vocab(v);
  EXPECT_EQ(text.rfind("bbpe-vocab v1 30522\n", 0), 0u);
  EXPECT_EQ(parse_vocab(text).target_size(), 30522u);
}

TEST(VocabFile, TruncationIsAnError) {
  const auto docs = toy_docs(20000, 13);
  const std::string text = serialize_vocab(train_vocab(docs, 400));
  for (std::size_t cut : {text.size() / 3, text.size() / 2, text.size() - 5}) {
    EXPECT_THROW(parse_vocab(text.substr(0, cut)), DataError) << cut;
  }
}

TEST(VocabFile, MalformedLinesReportLineNumbers) {
  try {
    parse_vocab("bbpe-vocab v1 300\n61 zz\n");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 2);
  }
  try {
    parse_vocab("bbpe-vocab v9 300\n");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 1);
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Corpus, DocumentsSplitOnBlankLines) {
  const auto docs = split_documents("one\ntwo\n\n\nthree\n   \nfour\n");
  ASSERT_EQ(docs.size(), 3u);
  EXPECT_EQ(docs[0], "one\ntwo");
  EXPECT_EQ(docs[1], "three");
  EXPECT_EQ(docs[2], "four");
}

TEST(Corpus, MissingFileIsDataError) {
  EXPECT_THROW(read_corpus("/nonexistent/rtdforge/corpus.txt"), DataError);
}

}  // namespace
}  // namespace rtdforge
