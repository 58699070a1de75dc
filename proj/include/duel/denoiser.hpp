#pragma once

#include <concepts>
#include <map>
#include <vector>

#include "duel/core.hpp"
#include "duel/errors.hpp"

namespace duel {

/// Anything that deterministically maps a masked sequence to a token
/// probability matrix over a fixed (L, V).
template <typename D>
concept DenoiserLike = requires(const D& d, const MaskedSequence& z) {
  { d.evaluate(z) } -> std::convertible_to<TokenProbabilityMatrix>;
  { d.length() } -> std::convertible_to<int>;
  { d.vocab_size() } -> std::convertible_to<int>;
};

/// Discrete-linear schedule: a draw with n masked positions carries weight
/// L/n, the Rao-Blackwellized per-position weight of the masked-diffusion
/// training loss.
struct NoiseSchedule {
  int length;

  double weight(int n_masked) const {
    if (n_masked < 1 || n_masked > length) fail(Errc::BadConfig, "masked count outside [1, L]");
    return static_cast<double>(length) / n_masked;
  }
};

/// Exact Bayes denoiser over an empirical joint: evaluate(z) rows at masked
/// positions are the true conditionals p(x_l = v | revealed tokens of z) of
/// the (lambda-smoothed) empirical distribution. With lambda = 0 a context
/// with zero support falls back to the uniform row and flags the matrix.
class TabularBayesDenoiser {
 public:
  TabularBayesDenoiser(std::map<CleanSequence, double> counts, double total_count, double lambda,
                       int length, int vocab_size)
      : counts_(std::move(counts)),
        total_(total_count),
        lambda_(lambda),
        length_(length),
        vocab_size_(vocab_size) {}

  int length() const { return length_; }
  int vocab_size() const { return vocab_size_; }
  double lambda() const { return lambda_; }
  const std::map<CleanSequence, double>& counts() const { return counts_; }
  double total_count() const { return total_; }

  /// Normalizer total + lambda * V^L.
  double mass() const { return total_ + lambda_ * std::pow(double(vocab_size_), length_); }

  double joint(const CleanSequence& x) const {
    const auto it = counts_.find(x);
    const double c = it == counts_.end() ? 0.0 : it->second;
    return (c + lambda_) / mass();
  }

  double log_joint(const CleanSequence& x) const {
    const double p = joint(x);
    return p > 0.0 ? std::log(p) : kNegInf;
  }

  TokenProbabilityMatrix evaluate(const MaskedSequence& z) const {
    if (z.length() != length_ || z.vocab_size() != vocab_size_)
      fail(Errc::LengthMismatch, "sequence does not match denoiser (L, V)");
    TokenProbabilityMatrix matrix(length_, vocab_size_);

    const PositionSet masked = z.masked_positions();
    for (Position p = 0; p < length_; ++p)
      if (!z.is_masked(p)) matrix.set_onehot(p, z.at(p));
    if (masked.empty()) return matrix;

    // Count mass of corpus sequences consistent with the revealed context,
    // split by the token at each masked position. The lambda smoothing term
    // contributes lambda * V^(m-1) per token without enumerating V^L.
    const int m = static_cast<int>(masked.size());
    std::vector<double> consistent(masked.size() * static_cast<std::size_t>(vocab_size_), 0.0);
    double consistent_total = 0.0;
    for (const auto& [seq, count] : counts_) {
      bool match = true;
      for (Position p = 0; p < length_; ++p) {
        if (!z.is_masked(p) && seq.at(p) != z.at(p)) {
          match = false;
          break;
        }
      }
      if (!match) continue;
      consistent_total += count;
      for (std::size_t i = 0; i < masked.size(); ++i)
        consistent[i * vocab_size_ + static_cast<std::size_t>(seq.at(masked[i]))] += count;
    }

    const double prior_row = lambda_ * std::pow(double(vocab_size_), m - 1);
    const double denom = consistent_total + prior_row * vocab_size_;
    std::vector<double> row(static_cast<std::size_t>(vocab_size_));
    for (std::size_t i = 0; i < masked.size(); ++i) {
      if (denom > 0.0) {
        for (TokenId v = 0; v < vocab_size_; ++v)
          row[static_cast<std::size_t>(v)] =
              (consistent[i * vocab_size_ + static_cast<std::size_t>(v)] + prior_row) / denom;
      } else {
        // lambda = 0 and no support: uniform fallback, flagged.
        for (TokenId v = 0; v < vocab_size_; ++v)
          row[static_cast<std::size_t>(v)] = 1.0 / vocab_size_;
        matrix.flag_support_miss();
      }
      matrix.set_masked_row_from_probs(masked[i], row);
    }
    return matrix;
  }

 private:
  std::map<CleanSequence, double> counts_;
  double total_;
  double lambda_;
  int length_;
  int vocab_size_;
};

/// Empirical joint (count + lambda) / (total + lambda * V^L) over a fixed-L
/// corpus.
inline TabularBayesDenoiser fit_tabular(const std::vector<CleanSequence>& corpus, double lambda,
                                        int vocab_size) {
  if (corpus.empty()) fail(Errc::EmptyCorpus, "cannot fit a tabular denoiser on an empty corpus");
  if (lambda < 0.0) fail(Errc::BadConfig, "smoothing lambda must be >= 0");
  const int length = corpus.front().length();
  std::map<CleanSequence, double> counts;
  for (const auto& x : corpus) {
    if (x.length() != length)
      fail(Errc::LengthMismatch, "corpus sequences must share one length");
    for (TokenId t : x.tokens)
      if (t < 0 || t >= vocab_size) fail(Errc::InvalidToken, "corpus token outside vocabulary");
    counts[x] += 1.0;
  }
  return TabularBayesDenoiser(std::move(counts), static_cast<double>(corpus.size()), lambda,
                              length, vocab_size);
}

}  // namespace duel
