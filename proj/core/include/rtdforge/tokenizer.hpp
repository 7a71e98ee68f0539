#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rtdforge {

using TokenId = std::int32_t;

struct MergeRule {
  std::string left;   // raw bytes
  std::string right;  // raw bytes

  friend bool operator==(const MergeRule&, const MergeRule&) = default;
};

/// Byte-level BPE vocabulary.
///
/// Ids 0-3 are the special tokens, 4-259 the 256 single-byte tokens, and
/// every later id the result of a learned merge, in acquisition order.
class Vocab {
 public:
  static constexpr TokenId kCls = 0;
  static constexpr TokenId kSep = 1;
  static constexpr TokenId kPad = 2;
  static constexpr TokenId kMask = 3;
  static constexpr std::size_t kSpecialCount = 4;
  static constexpr std::size_t kBaseSize = kSpecialCount + 256;

  /// Specials plus the 256 byte tokens, no merges.
  explicit Vocab(std::size_t target_size = kBaseSize);

  std::size_t size() const noexcept { return id_to_token_.size(); }
  std::size_t target_size() const noexcept { return target_size_; }
  const std::vector<MergeRule>& merges() const noexcept { return merges_; }

  static bool is_special(TokenId id) noexcept {
    return id >= 0 && static_cast<std::size_t>(id) < kSpecialCount;
  }
  static TokenId byte_token(std::uint8_t byte) noexcept {
    return static_cast<TokenId>(kSpecialCount + byte);
  }
  static const char* special_name(TokenId id);

  /// Byte string of a token; the bracketed marker for specials.
  const std::string& token_bytes(TokenId id) const;
  std::optional<TokenId> find(std::string_view bytes) const;

  struct MergeTarget {
    std::size_t rank;
    TokenId result;
  };
  std::optional<MergeTarget> merge_of(TokenId left, TokenId right) const;

  /// Appends a merge rule; both sides must already be tokens. Returns the id
  /// the pair merges into (an existing id when the concatenation is known).
  TokenId add_merge(const MergeRule& rule);

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.target_size_ == b.target_size_ && a.merges_ == b.merges_ &&
           a.id_to_token_ == b.id_to_token_;
  }

 private:
  static std::uint64_t pair_key(TokenId a, TokenId b) noexcept {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  std::size_t target_size_;
  std::vector<std::string> id_to_token_;
  std::map<std::string, TokenId, std::less<>> token_to_id_;
  std::vector<MergeRule> merges_;
  std::unordered_map<std::uint64_t, MergeTarget> merge_lookup_;
};

/// Splits text into merge domains: a new chunk starts at each whitespace byte
/// that follows a non-whitespace byte, so merges never span two words.
std::vector<std::string_view> split_chunks(std::string_view text);

/// Greedy BPE: repeatedly merges the most frequent adjacent pair until the
/// vocabulary reaches `target_size` or no pair occurs at least twice. Ties go
/// to the lexicographically smallest (left bytes, right bytes) pair.
Vocab train_vocab(std::span<const std::string> documents, std::size_t target_size);

/// Byte mapping then merges in learned priority order. No specials inserted.
std::vector<TokenId> encode(const Vocab& vocab, std::string_view text);

/// Inverse of encode; specials render as "[CLS]", "[SEP]", "[PAD]", "[MASK]".
std::string decode(const Vocab& vocab, std::span<const TokenId> ids);

std::string serialize_vocab(const Vocab& vocab);
Vocab parse_vocab(std::string_view text);
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

/// Reads a UTF-8 corpus whose documents are separated by blank lines.
std::vector<std::string> read_corpus(const std::filesystem::path& path);
std::vector<std::string> split_documents(std::string_view text);

}  // namespace rtdforge
