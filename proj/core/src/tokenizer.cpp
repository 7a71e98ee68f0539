#include "rtdforge/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "rtdforge/error.hpp"

namespace rtdforge {

namespace {

constexpr const char* kSpecialNames[] = {"[CLS]", "[SEP]", "[PAD]", "[MASK]"};
constexpr const char* kSpecialKeys[] = {"CLS", "SEP", "PAD", "MASK"};

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

std::string to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(kDigits[c >> 4]);
    out.push_back(kDigits[c & 0xf]);
  }
  return out;
}

std::optional<std::string> from_hex(std::string_view hex) {
  if (hex.empty() || hex.size() % 2 != 0) {
    return std::nullopt;
  }
  const auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  std::string out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    const int hi = nibble(hex[i]);
    const int lo = nibble(hex[i + 1]);
    if (hi < 0 || lo < 0) {
      return std::nullopt;
    }
    out.push_back(static_cast<char>((hi << 4) | lo));
  }
  return out;
}

std::vector<TokenId> byte_ids(std::string_view chunk) {
  std::vector<TokenId> ids;
  ids.reserve(chunk.size());
  for (unsigned char c : chunk) {
    ids.push_back(Vocab::byte_token(c));
  }
  return ids;
}

// Merges every non-overlapping occurrence of (a, b), scanning left to right.
bool merge_in_place(std::vector<TokenId>& symbols, TokenId a, TokenId b, TokenId merged) {
  bool changed = false;
  std::size_t write = 0;
  for (std::size_t read = 0; read < symbols.size();) {
    if (read + 1 < symbols.size() && symbols[read] == a && symbols[read + 1] == b) {
      symbols[write++] = merged;
      read += 2;
      changed = true;
    } else {
      symbols[write++] = symbols[read++];
    }
  }
  symbols.resize(write);
  return changed;
}

}  // namespace

Vocab::Vocab(std::size_t target_size) : target_size_(target_size) {
  id_to_token_.reserve(kBaseSize);
  for (const char* name : kSpecialNames) {
    id_to_token_.emplace_back(name);
  }
  for (int b = 0; b < 256; ++b) {
    std::string bytes(1, static_cast<char>(b));
    token_to_id_.emplace(bytes, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(std::move(bytes));
  }
}

const char* Vocab::special_name(TokenId id) {
  if (!is_special(id)) {
    throw IndexError("not a special token id: " + std::to_string(id));
  }
  return kSpecialNames[id];
}

const std::string& Vocab::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(id_to_token_.size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::find(std::string_view bytes) const {
  const auto it = token_to_id_.find(bytes);
  if (it == token_to_id_.end()) {
    return std::nullopt;
  }
  return it->second;
}

std::optional<Vocab::MergeTarget> Vocab::merge_of(TokenId left, TokenId right) const {
  const auto it = merge_lookup_.find(pair_key(left, right));
  if (it == merge_lookup_.end()) {
    return std::nullopt;
  }
  return it->second;
}

TokenId Vocab::add_merge(const MergeRule& rule) {
  const auto left = find(rule.left);
  const auto right = find(rule.right);
  if (!left || !right) {
    throw ValueError("merge references unknown token");
  }
  if (merge_lookup_.contains(pair_key(*left, *right))) {
    throw ValueError("duplicate merge rule");
  }
  std::string joined = rule.left + rule.right;
  TokenId result;
  if (const auto existing = find(joined)) {
    result = *existing;
  } else {
    result = static_cast<TokenId>(id_to_token_.size());
    token_to_id_.emplace(joined, result);
    id_to_token_.push_back(std::move(joined));
  }
  merge_lookup_.emplace(pair_key(*left, *right), MergeTarget{merges_.size(), result});
  merges_.push_back(rule);
  return result;
}

std::vector<std::string_view> split_chunks(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t start = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    const bool here = is_space(static_cast<unsigned char>(text[i]));
    const bool before = is_space(static_cast<unsigned char>(text[i - 1]));
    if (here && !before) {
      chunks.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  if (start < text.size()) {
    chunks.push_back(text.substr(start));
  }
  return chunks;
}

Vocab train_vocab(std::span<const std::string> documents, std::size_t target_size) {
  if (target_size < Vocab::kBaseSize) {
    throw ValueError("target vocabulary size " + std::to_string(target_size) +
                     " is below the " + std::to_string(Vocab::kBaseSize) +
                     " byte and special tokens");
  }
  const bool empty = std::all_of(documents.begin(), documents.end(),
                                 [](const std::string& d) { return d.empty(); });
  if (empty) {
    throw ValueError("cannot train a vocabulary on an empty corpus");
  }

  Vocab vocab(target_size);

  std::map<std::string_view, std::int64_t> chunk_counts;
  for (const std::string& doc : documents) {
    for (std::string_view chunk : split_chunks(doc)) {
      ++chunk_counts[chunk];
    }
  }

  struct Word {
    std::vector<TokenId> symbols;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    words.push_back(Word{byte_ids(chunk), count});
  }

  const auto key = [](TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  };
  using Candidate = std::tuple<std::int64_t, TokenId, TokenId>;
  // Highest count first; ties by (left bytes, right bytes) ascending.
  const auto better = [&vocab](const Candidate& x, const Candidate& y) {
    if (std::get<0>(x) != std::get<0>(y)) {
      return std::get<0>(x) > std::get<0>(y);
    }
    const std::string& xl = vocab.token_bytes(std::get<1>(x));
    const std::string& yl = vocab.token_bytes(std::get<1>(y));
    if (xl != yl) {
      return xl < yl;
    }
    return vocab.token_bytes(std::get<2>(x)) < vocab.token_bytes(std::get<2>(y));
  };
  std::set<Candidate, decltype(better)> queue(better);
  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> occurrences;

  const auto adjust = [&](TokenId a, TokenId b, std::int64_t delta) {
    std::int64_t& count = pair_counts[key(a, b)];
    if (count > 0) {
      queue.erase(Candidate{count, a, b});
    }
    count += delta;
    if (count > 0) {
      queue.insert(Candidate{count, a, b});
    }
  };

  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto& s = words[w].symbols;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      adjust(s[i], s[i + 1], words[w].count);
      occurrences[key(s[i], s[i + 1])].push_back(w);
    }
  }

  std::vector<std::size_t> touched;
  while (vocab.size() < target_size && !queue.empty()) {
    const auto [count, a, b] = *queue.begin();
    if (count < 2) {
      break;
    }
    // A pair can reappear after a merge whose result duplicates an existing
    // token; it then reuses the earlier rule.
    const auto known = vocab.merge_of(a, b);
    const TokenId merged =
        known ? known->result : vocab.add_merge(MergeRule{vocab.token_bytes(a), vocab.token_bytes(b)});

    touched = std::move(occurrences[key(a, b)]);
    occurrences.erase(key(a, b));
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    for (std::size_t w : touched) {
      Word& word = words[w];
      std::vector<TokenId> updated = word.symbols;
      if (!merge_in_place(updated, a, b, merged)) {
        continue;
      }
      for (std::size_t i = 0; i + 1 < word.symbols.size(); ++i) {
        adjust(word.symbols[i], word.symbols[i + 1], -word.count);
      }
      for (std::size_t i = 0; i + 1 < updated.size(); ++i) {
        adjust(updated[i], updated[i + 1], word.count);
        if (updated[i] == merged || updated[i + 1] == merged) {
          occurrences[key(updated[i], updated[i + 1])].push_back(w);
        }
      }
      word.symbols = std::move(updated);
    }
  }
  return vocab;
}

std::vector<TokenId> encode(const Vocab& vocab, std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  std::vector<TokenId> symbols;
  for (std::string_view chunk : split_chunks(text)) {
    symbols = byte_ids(chunk);
    for (;;) {
      std::optional<Vocab::MergeTarget> best;
      TokenId best_left = 0;
      TokenId best_right = 0;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        const auto target = vocab.merge_of(symbols[i], symbols[i + 1]);
        if (target && (!best || target->rank < best->rank)) {
          best = target;
          best_left = symbols[i];
          best_right = symbols[i + 1];
        }
      }
      if (!best) {
        break;
      }
      merge_in_place(symbols, best_left, best_right, best->result);
    }
    out.insert(out.end(), symbols.begin(), symbols.end());
  }
  return out;
}

std::string decode(const Vocab& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    out += vocab.token_bytes(id);
  }
  return out;
}

std::string serialize_vocab(const Vocab& vocab) {
  std::ostringstream out;
  out << "bbpe-vocab v1 " << vocab.target_size() << '\n';
  for (const MergeRule& rule : vocab.merges()) {
    out << to_hex(rule.left) << ' ' << to_hex(rule.right) << '\n';
  }
  out << "specials\n";
  for (std::size_t i = 0; i < Vocab::kSpecialCount; ++i) {
    out << kSpecialKeys[i] << ' ' << i << '\n';
  }
  out << "end\n";
  return out.str();
}

Vocab parse_vocab(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  const auto fail = [&](const std::string& what) -> DataError {
    return DataError("vocab line " + std::to_string(line_no) + ": " + what, line_no);
  };

  if (!std::getline(in, line)) {
    throw DataError("vocab file is empty", 0);
  }
  ++line_no;
  std::istringstream header(line);
  std::string magic;
  std::string version;
  std::size_t target = 0;
  if (!(header >> magic >> version) || magic != "bbpe-vocab") {
    throw fail("missing 'bbpe-vocab' header");
  }
  if (version != "v1") {
    throw fail("unsupported vocab version '" + version + "'");
  }
  if (!(header >> target)) {
    throw fail("header lacks target size");
  }

  Vocab vocab(target);
  bool in_specials = false;
  std::size_t specials_seen = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line == "end") {
      if (!in_specials || specials_seen != Vocab::kSpecialCount) {
        throw fail("incomplete special-token block");
      }
      return vocab;
    }
    if (line == "specials") {
      if (in_specials) {
        throw fail("duplicate specials block");
      }
      in_specials = true;
      continue;
    }
    std::istringstream fields(line);
    std::string first;
    std::string second;
    std::string extra;
    if (!(fields >> first >> second) || (fields >> extra)) {
      throw fail("expected two fields");
    }
    if (in_specials) {
      if (specials_seen >= Vocab::kSpecialCount || first != kSpecialKeys[specials_seen] ||
          second != std::to_string(specials_seen)) {
        throw fail("unexpected special token entry '" + line + "'");
      }
      ++specials_seen;
      continue;
    }
    const auto left = from_hex(first);
    const auto right = from_hex(second);
    if (!left || !right) {
      throw fail("malformed hex in merge rule");
    }
    try {
      vocab.add_merge(MergeRule{*left, *right});
    } catch (const ValueError& e) {
      throw fail(e.what());
    }
  }
  throw fail("truncated vocab file (missing 'end')");
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot write vocab file " + path.string());
  }
  out << serialize_vocab(vocab);
  if (!out) {
    throw DataError("failed writing vocab file " + path.string());
  }
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open vocab file " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_vocab(buffer.str());
}

std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  std::size_t pos = 0;
  bool pending_newline = false;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) {
      end = text.size();
    }
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') {
      line.remove_suffix(1);
    }
    const bool blank = std::all_of(line.begin(), line.end(),
                                   [](char c) { return is_space(static_cast<unsigned char>(c)); });
    if (blank) {
      if (!current.empty()) {
        docs.push_back(std::move(current));
        current.clear();
      }
      pending_newline = false;
    } else {
      if (pending_newline) {
        current.push_back('\n');
      }
      current.append(line);
      pending_newline = true;
    }
    pos = end + 1;
  }
  if (!current.empty()) {
    docs.push_back(std::move(current));
  }
  return docs;
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open corpus " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return split_documents(buffer.str());
}

}  // namespace rtdforge
