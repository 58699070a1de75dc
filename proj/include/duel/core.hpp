#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "duel/errors.hpp"

namespace duel {

using TokenId = std::int32_t;
using Position = std::int32_t;

/// Sorted ascending, no duplicates. The canonical set-of-positions
/// representation throughout the library.
using PositionSet = std::vector<Position>;

constexpr double kRowSumTol = 1e-9;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Positions are 0-based internally and 1-based in every report, dump and CLI
// string. All conversions go through these two helpers.
constexpr int display_position(Position p) { return p + 1; }
constexpr Position internal_position(int display) { return display - 1; }

/// Ordered list of distinct token symbols; token id = index. The mask
/// sentinel is V itself and never maps to a symbol.
struct Vocabulary {
  std::vector<std::string> symbols;

  static Vocabulary from_symbols(std::vector<std::string> syms) {
    if (syms.empty()) fail(Errc::BadVocabulary, "vocabulary must contain at least one symbol");
    auto sorted = syms;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      fail(Errc::BadVocabulary, "vocabulary symbols must be distinct");
    return Vocabulary{std::move(syms)};
  }

  int size() const { return static_cast<int>(symbols.size()); }
  TokenId mask_id() const { return static_cast<TokenId>(symbols.size()); }

  const std::string& symbol(TokenId id) const {
    if (id < 0 || id >= size()) fail(Errc::InvalidToken, "token id out of range: " + std::to_string(id));
    return symbols[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find(const std::string& symbol) const {
    for (std::size_t i = 0; i < symbols.size(); ++i)
      if (symbols[i] == symbol) return static_cast<TokenId>(i);
    return std::nullopt;
  }
};

/// A fully revealed sequence x in V^L.
struct CleanSequence {
  std::vector<TokenId> tokens;

  int length() const { return static_cast<int>(tokens.size()); }
  TokenId at(Position p) const { return tokens[static_cast<std::size_t>(p)]; }
  auto operator<=>(const CleanSequence&) const = default;
};

/// Partially masked state z over V union {mask}. Immutable value; reveal
/// returns a new sequence. Revealing is absorbing: an unmasked position can
/// never change again.
class MaskedSequence {
 public:
  MaskedSequence(std::vector<TokenId> entries, int vocab_size)
      : entries_(std::move(entries)), vocab_size_(vocab_size) {
    if (entries_.empty()) fail(Errc::LengthMismatch, "sequence length must be >= 1");
    for (TokenId t : entries_)
      if (t < 0 || t > vocab_size_)
        fail(Errc::InvalidToken, "entry outside vocabulary+mask range: " + std::to_string(t));
  }

  static MaskedSequence all_masked(int length, int vocab_size) {
    return MaskedSequence(std::vector<TokenId>(static_cast<std::size_t>(length),
                                               static_cast<TokenId>(vocab_size)),
                          vocab_size);
  }

  static MaskedSequence from_clean(const CleanSequence& x, int vocab_size) {
    return MaskedSequence(x.tokens, vocab_size);
  }

  int length() const { return static_cast<int>(entries_.size()); }
  int vocab_size() const { return vocab_size_; }
  TokenId mask_id() const { return static_cast<TokenId>(vocab_size_); }

  TokenId at(Position p) const { return entries_[static_cast<std::size_t>(p)]; }
  bool is_masked(Position p) const { return at(p) == mask_id(); }
  const std::vector<TokenId>& entries() const { return entries_; }

  PositionSet masked_positions() const {
    PositionSet out;
    for (Position p = 0; p < length(); ++p)
      if (is_masked(p)) out.push_back(p);
    return out;
  }

  bool fully_revealed() const {
    return std::none_of(entries_.begin(), entries_.end(),
                        [this](TokenId t) { return t == mask_id(); });
  }

  MaskedSequence reveal(Position p, TokenId v) const {
    if (p < 0 || p >= length()) fail(Errc::InvalidToken, "position out of range");
    if (!is_masked(p))
      fail(Errc::RevealUnmasked,
           "position " + std::to_string(display_position(p)) + " is already revealed");
    if (v < 0 || v >= vocab_size_)
      fail(Errc::InvalidToken, "token id " + std::to_string(v) + " is not a vocabulary token");
    std::vector<TokenId> next = entries_;
    next[static_cast<std::size_t>(p)] = v;
    return MaskedSequence(std::move(next), vocab_size_);
  }

  CleanSequence to_clean() const {
    if (!fully_revealed()) fail(Errc::InvalidToken, "sequence still has masked positions");
    return CleanSequence{entries_};
  }

  auto operator<=>(const MaskedSequence&) const = default;

 private:
  std::vector<TokenId> entries_;
  int vocab_size_;
};

inline PositionSet masked_positions(const MaskedSequence& z) { return z.masked_positions(); }

inline MaskedSequence reveal(const MaskedSequence& z, Position p, TokenId v) {
  return z.reveal(p, v);
}

/// The unmasking trajectory sigma: a tuple of disjoint non-empty position
/// sets covering [L].
struct OrderedPartition {
  std::vector<PositionSet> parts;

  int steps() const { return static_cast<int>(parts.size()); }

  int covered_length() const {
    std::size_t n = 0;
    for (const auto& part : parts) n += part.size();
    return static_cast<int>(n);
  }
};

enum class PartitionClause { Valid, EmptyPart, Overlap, Coverage };

struct PartitionVerdict {
  PartitionClause clause = PartitionClause::Valid;
  std::string detail;

  bool ok() const { return clause == PartitionClause::Valid; }
};

/// Accepts iff parts are non-empty, pairwise disjoint, and cover [L].
/// The verdict names the violated clause.
inline PartitionVerdict validate_partition(const std::vector<PositionSet>& parts, int length) {
  std::vector<char> seen(static_cast<std::size_t>(length), 0);
  int covered = 0;
  for (std::size_t t = 0; t < parts.size(); ++t) {
    if (parts[t].empty())
      return {PartitionClause::EmptyPart, "part " + std::to_string(t + 1) + " is empty"};
    for (Position p : parts[t]) {
      if (p < 0 || p >= length)
        return {PartitionClause::Coverage,
                "position " + std::to_string(display_position(p)) + " outside [1, " +
                    std::to_string(length) + "]"};
      if (seen[static_cast<std::size_t>(p)])
        return {PartitionClause::Overlap,
                "position " + std::to_string(display_position(p)) + " appears in two parts"};
      seen[static_cast<std::size_t>(p)] = 1;
      ++covered;
    }
  }
  if (covered != length)
    return {PartitionClause::Coverage, "parts cover " + std::to_string(covered) + " of " +
                                           std::to_string(length) + " positions"};
  return {};
}

inline PartitionVerdict validate_partition(const OrderedPartition& sigma, int length) {
  return validate_partition(sigma.parts, length);
}

/// L x V row-stochastic matrix P = softmax(x_theta(z)). Rows are stored as
/// log-probabilities; probabilities materialize only at the accessors. Rows
/// at positions that were revealed when the denoiser ran are one-hot on the
/// observed token, and the mask token has probability zero by construction
/// (it has no column).
class TokenProbabilityMatrix {
 public:
  TokenProbabilityMatrix(int length, int vocab_size)
      : length_(length),
        vocab_size_(vocab_size),
        log_rows_(static_cast<std::size_t>(length) * vocab_size, kNegInf),
        origin_mask_(static_cast<std::size_t>(length), false) {}

  int length() const { return length_; }
  int vocab_size() const { return vocab_size_; }

  double log_prob(Position p, TokenId v) const { return log_rows_[index(p, v)]; }
  double prob(Position p, TokenId v) const { return std::exp(log_rows_[index(p, v)]); }

  bool origin_masked(Position p) const { return origin_mask_[static_cast<std::size_t>(p)]; }
  bool support_miss() const { return support_miss_; }
  void flag_support_miss() { support_miss_ = true; }

  /// One-hot row for a position that was already revealed (SUBS carry-over).
  void set_onehot(Position p, TokenId v) {
    for (TokenId u = 0; u < vocab_size_; ++u) log_rows_[index(p, u)] = kNegInf;
    log_rows_[index(p, v)] = 0.0;
    origin_mask_[static_cast<std::size_t>(p)] = false;
  }

  /// Row for a masked position, given unnormalized logits; normalized with
  /// log-sum-exp so entries stay finite for any finite logits.
  void set_masked_row_from_logits(Position p, const std::vector<double>& logits) {
    double mx = kNegInf;
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (TokenId v = 0; v < vocab_size_; ++v)
      log_rows_[index(p, v)] = logits[static_cast<std::size_t>(v)] - lse;
    origin_mask_[static_cast<std::size_t>(p)] = true;
  }

  /// Row for a masked position, given probabilities that already sum to 1.
  void set_masked_row_from_probs(Position p, const std::vector<double>& probs) {
    for (TokenId v = 0; v < vocab_size_; ++v) {
      const double q = probs[static_cast<std::size_t>(v)];
      log_rows_[index(p, v)] = q > 0.0 ? std::log(q) : kNegInf;
    }
    origin_mask_[static_cast<std::size_t>(p)] = true;
  }

  double row_sum(Position p) const {
    double s = 0.0;
    for (TokenId v = 0; v < vocab_size_; ++v) s += prob(p, v);
    return s;
  }

  bool row_valid(Position p) const { return std::abs(row_sum(p) - 1.0) <= kRowSumTol; }

  struct TopTwo {
    TokenId first_token = 0;
    double first = 0.0;   // P^(1)
    double second = 0.0;  // P^(2); 0 when V == 1
  };

  /// Highest and second-highest probabilities in a row; ties between tokens
  /// broken by lowest token id.
  TopTwo top_two(Position p) const {
    TopTwo t;
    double best = -1.0, second = -1.0;
    TokenId best_tok = 0;
    for (TokenId v = 0; v < vocab_size_; ++v) {
      const double q = prob(p, v);
      if (q > best) {
        second = best;
        best = q;
        best_tok = v;
      } else if (q > second) {
        second = q;
      }
    }
    t.first_token = best_tok;
    t.first = best;
    t.second = vocab_size_ > 1 ? second : 0.0;
    return t;
  }

  auto operator<=>(const TokenProbabilityMatrix&) const = default;

 private:
  std::size_t index(Position p, TokenId v) const {
    return static_cast<std::size_t>(p) * vocab_size_ + static_cast<std::size_t>(v);
  }

  int length_;
  int vocab_size_;
  std::vector<double> log_rows_;
  std::vector<bool> origin_mask_;
  bool support_miss_ = false;
};

}  // namespace duel
