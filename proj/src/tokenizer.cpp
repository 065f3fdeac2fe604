#include "reqsentry/tokenizer.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <queue>
#include <sstream>

#include "reqsentry/errors.hpp"

namespace reqsentry {
namespace {

constexpr std::uint64_t pair_key(TokenId left, TokenId right) {
  return (static_cast<std::uint64_t>(left) << 32) | right;
}

constexpr TokenId key_left(std::uint64_t key) { return static_cast<TokenId>(key >> 32); }
constexpr TokenId key_right(std::uint64_t key) { return static_cast<TokenId>(key & 0xffffffffu); }

constexpr TokenId kDead = 0xffffffffu;

struct Candidate {
  std::int64_t count;
  std::uint64_t key;
};

// Max-heap order: highest count, then smallest (left, right).
struct CandidateLess {
  bool operator()(const Candidate& a, const Candidate& b) const {
    if (a.count != b.count) return a.count < b.count;
    return a.key > b.key;
  }
};

// Incremental pair statistics over every document at once. Symbols live in
// flat arrays linked per document; merged-away symbols are marked dead.
class PairTrainer {
 public:
  PairTrainer(const std::vector<std::string>& docs, const std::vector<std::int64_t>& weights) {
    std::size_t total = 0;
    for (const auto& d : docs) total += d.size();
    tok_.reserve(total);
    prev_.reserve(total);
    next_.reserve(total);
    weight_.reserve(total);
    for (std::size_t d = 0; d < docs.size(); ++d) {
      const auto base = static_cast<std::int32_t>(tok_.size());
      const auto n = static_cast<std::int32_t>(docs[d].size());
      for (std::int32_t i = 0; i < n; ++i) {
        tok_.push_back(static_cast<unsigned char>(docs[d][static_cast<std::size_t>(i)]));
        prev_.push_back(i == 0 ? -1 : base + i - 1);
        next_.push_back(i + 1 == n ? -1 : base + i + 1);
        weight_.push_back(weights[d]);
      }
    }
    for (std::int32_t i = 0; i < static_cast<std::int32_t>(tok_.size()); ++i) {
      if (next_[i] >= 0) add(pair_key(tok_[i], tok_[next_[i]]), weight_[i], i);
    }
    for (const auto& [key, count] : counts_) {
      if (count >= 2) heap_.push({count, key});
    }
  }

  // Best pair with count >= 2, if any.
  std::optional<std::uint64_t> best() {
    while (!heap_.empty()) {
      const Candidate top = heap_.top();
      auto it = counts_.find(top.key);
      if (it != counts_.end() && it->second == top.count) return top.key;
      heap_.pop();
    }
    return std::nullopt;
  }

  void merge(std::uint64_t key, TokenId result) {
    const TokenId a = key_left(key);
    const TokenId b = key_right(key);
    auto positions = std::move(where_[key]);
    where_.erase(key);
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());

    for (const std::int32_t i : positions) {
      if (tok_[i] != a) continue;
      const std::int32_t j = next_[i];
      if (j < 0 || tok_[j] != b) continue;
      const std::int64_t w = weight_[i];
      const std::int32_t p = prev_[i];
      const std::int32_t n = next_[j];

      bump(key, -w);
      if (p >= 0) {
        bump(pair_key(tok_[p], a), -w);
        add(pair_key(tok_[p], result), w, p);
      }
      if (n >= 0) {
        bump(pair_key(b, tok_[n]), -w);
        add(pair_key(result, tok_[n]), w, i);
      }
      tok_[i] = result;
      tok_[j] = kDead;
      next_[i] = n;
      if (n >= 0) prev_[n] = i;
    }
  }

 private:
  void add(std::uint64_t key, std::int64_t w, std::int32_t pos) {
    where_[key].push_back(pos);
    bump(key, w);
  }

  void bump(std::uint64_t key, std::int64_t delta) {
    auto& c = counts_[key];
    c += delta;
    if (c <= 0) {
      counts_.erase(key);
    } else if (delta > 0 && c >= 2) {
      heap_.push({c, key});
    }
  }

  std::vector<TokenId> tok_;
  std::vector<std::int32_t> prev_;
  std::vector<std::int32_t> next_;
  std::vector<std::int64_t> weight_;
  std::unordered_map<std::uint64_t, std::int64_t> counts_;
  std::unordered_map<std::uint64_t, std::vector<std::int32_t>> where_;
  std::priority_queue<Candidate, std::vector<Candidate>, CandidateLess> heap_;
};

}  // namespace

Vocabulary::Vocabulary(std::vector<MergeRule> merges) : merges_(std::move(merges)) {
  expansions_.reserve(size());
  for (TokenId b = 0; b < kByteTokens; ++b) expansions_.emplace_back(1, static_cast<char>(b));
  expansions_.emplace_back();  // PAD
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const MergeRule& m = merges_[r];
    const auto expected = static_cast<TokenId>(kFirstMergedToken + r);
    if (m.rank != r || m.result != expected) {
      throw InvalidInput("merge " + std::to_string(r) + " has non-contiguous rank or result id");
    }
    if (m.left >= expected || m.right >= expected || m.left == kPadToken || m.right == kPadToken) {
      throw InvalidInput("merge " + std::to_string(r) + " references an unavailable token");
    }
    expansions_.push_back(expansions_[m.left] + expansions_[m.right]);
    ranks_.emplace(pair_key(m.left, m.right), m.rank);
  }
}

std::string_view Vocabulary::bytes_of(TokenId id) const {
  if (id >= size()) throw InvalidToken("token id " + std::to_string(id) + " out of range");
  return expansions_[id];
}

std::optional<std::uint32_t> Vocabulary::rank_of(TokenId left, TokenId right) const {
  auto it = ranks_.find(pair_key(left, right));
  if (it == ranks_.end()) return std::nullopt;
  return it->second;
}

Vocabulary train_bbpe(std::span<const std::string> corpus, std::size_t target_vocab_size) {
  if (target_vocab_size < kFirstMergedToken) {
    throw InvalidConfig("target vocabulary size must be at least 257");
  }
  if (corpus.empty()) throw InvalidInput("training corpus is empty");

  // Identical documents only need counting once.
  std::vector<std::string> docs;
  std::vector<std::int64_t> weights;
  std::unordered_map<std::string_view, std::size_t> seen;
  for (const auto& doc : corpus) {
    auto [it, inserted] = seen.emplace(doc, docs.size());
    if (inserted) {
      docs.push_back(doc);
      weights.push_back(1);
    } else {
      ++weights[it->second];
    }
  }

  PairTrainer trainer(docs, weights);
  std::vector<MergeRule> merges;
  const std::size_t budget = target_vocab_size - kFirstMergedToken;
  while (merges.size() < budget) {
    const auto key = trainer.best();
    if (!key) break;
    const auto rank = static_cast<std::uint32_t>(merges.size());
    const TokenId result = kFirstMergedToken + rank;
    merges.push_back({key_left(*key), key_right(*key), result, rank});
    trainer.merge(*key, result);
  }
  return Vocabulary(std::move(merges));
}

TokenSequence encode(const Vocabulary& vocab, std::string_view input,
                     std::optional<std::size_t> max_len) {
  std::vector<TokenId> tokens(input.begin(), input.end());
  for (auto& t : tokens) t = static_cast<unsigned char>(t);

  if (!vocab.merges().empty()) {
    std::vector<TokenId> scratch;
    scratch.reserve(tokens.size());
    while (tokens.size() >= 2) {
      std::uint32_t best = UINT32_MAX;
      for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        if (auto r = vocab.rank_of(tokens[i], tokens[i + 1]); r && *r < best) best = *r;
      }
      if (best == UINT32_MAX) break;
      // Merging the leftmost occurrence can only create pairs of higher rank,
      // so sweeping every occurrence left to right is equivalent.
      const MergeRule& m = vocab.merges()[best];
      scratch.clear();
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i + 1 < tokens.size() && tokens[i] == m.left && tokens[i + 1] == m.right) {
          scratch.push_back(m.result);
          ++i;
        } else {
          scratch.push_back(tokens[i]);
        }
      }
      tokens.swap(scratch);
    }
  }

  TokenSequence seq;
  seq.original_length = tokens.size();
  if (max_len && tokens.size() > *max_len) tokens.resize(*max_len);
  seq.tokens = std::move(tokens);
  return seq;
}

std::string decode(const Vocabulary& vocab, std::span<const TokenId> tokens) {
  std::string out;
  for (const TokenId t : tokens) out += vocab.bytes_of(t);
  return out;
}

TokenSequence pad_to(TokenSequence seq, std::size_t length) {
  seq.tokens.resize(length, kPadToken);
  return seq;
}

void save_vocab(const Vocabulary& vocab, std::ostream& sink) {
  sink << "BBPE v1 " << vocab.size() << '\n';
  for (const auto& m : vocab.merges()) {
    sink << m.rank << ' ' << m.left << ' ' << m.right << '\n';
  }
}

Vocabulary load_vocab(std::istream& source) {
  std::string line;
  if (!std::getline(source, line)) throw ParseError("missing vocabulary header", 1);
  std::size_t declared = 0;
  {
    std::istringstream header(line);
    std::string magic, version;
    if (!(header >> magic >> version >> declared) || magic != "BBPE" || version != "v1") {
      throw ParseError("bad vocabulary header: expected \"BBPE v1 <size>\"", 1);
    }
    std::string rest;
    if (header >> rest) throw ParseError("trailing text in vocabulary header", 1);
  }
  if (declared < kFirstMergedToken) throw ParseError("vocabulary size below 257", 1);

  std::vector<MergeRule> merges;
  std::size_t line_no = 1;
  while (std::getline(source, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream in(line);
    long long rank = -1, left = -1, right = -1;
    std::string rest;
    if (!(in >> rank >> left >> right) || (in >> rest)) {
      throw ParseError("malformed merge line", line_no);
    }
    const auto expected_rank = static_cast<long long>(merges.size());
    if (rank != expected_rank) {
      throw ParseError("merge rank " + std::to_string(rank) + " out of order (expected " +
                           std::to_string(expected_rank) + ")",
                       line_no);
    }
    const long long result = kFirstMergedToken + rank;
    if (left < 0 || right < 0 || left >= result || right >= result || left == kPadToken ||
        right == kPadToken) {
      throw ParseError("merge references an unavailable token", line_no);
    }
    merges.push_back({static_cast<TokenId>(left), static_cast<TokenId>(right),
                      static_cast<TokenId>(result), static_cast<std::uint32_t>(rank)});
  }
  if (kFirstMergedToken + merges.size() != declared) {
    throw ParseError("header declares size " + std::to_string(declared) + " but file has " +
                         std::to_string(kFirstMergedToken + merges.size()),
                     line_no);
  }
  return Vocabulary(std::move(merges));
}

std::string vocab_to_string(const Vocabulary& vocab) {
  std::ostringstream out;
  save_vocab(vocab, out);
  return out.str();
}

Vocabulary vocab_from_string(std::string_view text) {
  std::istringstream in{std::string(text)};
  return load_vocab(in);
}

}  // namespace reqsentry
