#pragma once

// Byte-level byte-pair encoding.
//
// Token ids 0..255 are raw bytes, 256 is PAD, and every id from 257 upward is
// a merged token numbered in the order the merge was learned. Because every
// byte is a token, encoding is total: there is no unknown token.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace reqsentry {

using TokenId = std::uint32_t;

inline constexpr TokenId kByteTokens = 256;
inline constexpr TokenId kPadToken = 256;
inline constexpr TokenId kFirstMergedToken = 257;
inline constexpr std::size_t kDefaultVocabSize = 5000;

struct MergeRule {
  TokenId left = 0;
  TokenId right = 0;
  TokenId result = 0;
  std::uint32_t rank = 0;

  friend bool operator==(const MergeRule&, const MergeRule&) = default;
};

struct TokenSequence {
  std::vector<TokenId> tokens;
  // Token count before any truncation or padding.
  std::size_t original_length = 0;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<MergeRule>{}) {}

  // Validates rank/result numbering and that each merge only combines
  // existing tokens.
  explicit Vocabulary(std::vector<MergeRule> merges);

  const std::vector<MergeRule>& merges() const noexcept { return merges_; }
  std::size_t size() const noexcept { return kFirstMergedToken + merges_.size(); }

  // Bytes a token expands to; PAD expands to nothing.
  std::string_view bytes_of(TokenId id) const;

  // Rank of the merge combining (left, right), if any.
  std::optional<std::uint32_t> rank_of(TokenId left, TokenId right) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.merges_ == b.merges_;
  }

 private:
  std::vector<MergeRule> merges_;
  std::vector<std::string> expansions_;
  std::unordered_map<std::uint64_t, std::uint32_t> ranks_;
};

// Learns merges greedily: at every step the adjacent pair with the highest
// total count wins, ties going to the smaller (left, right). Pairs never span
// two documents. Training stops early once no pair occurs at least twice.
Vocabulary train_bbpe(std::span<const std::string> corpus, std::size_t target_vocab_size);

// Applies merges lowest rank first, leftmost occurrence first. When max_len is
// given the sequence is truncated to that many tokens, keeping the prefix.
TokenSequence encode(const Vocabulary& vocab, std::string_view input,
                     std::optional<std::size_t> max_len = std::nullopt);

std::string decode(const Vocabulary& vocab, std::span<const TokenId> tokens);
inline std::string decode(const Vocabulary& vocab, const TokenSequence& seq) {
  return decode(vocab, seq.tokens);
}

// Right-pads with PAD up to length (after truncating to it).
TokenSequence pad_to(TokenSequence seq, std::size_t length);

// Text format: "BBPE v1 <size>" then one "rank left right" line per merge.
void save_vocab(const Vocabulary& vocab, std::ostream& sink);
Vocabulary load_vocab(std::istream& source);

std::string vocab_to_string(const Vocabulary& vocab);
Vocabulary vocab_from_string(std::string_view text);

}  // namespace reqsentry
