#pragma once

#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "duel/core.hpp"
#include "duel/denoiser.hpp"
#include "duel/errors.hpp"
#include "duel/rng.hpp"
#include "duel/rules.hpp"

namespace duel {

/// Enumeration guard for the exhaustive operations; super-exponential beyond
/// this. Overridable per call.
constexpr int kDefaultEnumCap = 6;

/// One generation or evaluation trajectory: the realized ordered partition,
/// per-step (position, log p) pairs, the number of denoiser evaluations, and
/// the total log-likelihood.
struct TrajectoryRecord {
  OrderedPartition partition;
  std::vector<std::vector<std::pair<Position, double>>> step_logprobs;
  int nfe = 0;
  double total_loglik = 0.0;
  bool support_miss = false;
};

/// Generation (Algorithm "sample"): start fully masked, repeatedly evaluate,
/// select positions with the rule, and draw each selected token independently
/// from its row. Tokens are drawn by inverse CDF in token-id order with one
/// uniform per position, consumed in position order, so a fixed
/// (seed, sequence_index) reproduces bit-identically.
template <DenoiserLike D>
std::pair<CleanSequence, TrajectoryRecord> duel_sample(const D& denoiser, const RuleSpec& rule,
                                                       std::uint64_t seed,
                                                       std::uint64_t sequence_index = 0) {
  MaskedSequence z = MaskedSequence::all_masked(denoiser.length(), denoiser.vocab_size());
  RuleState state;
  TrajectoryRecord record;
  int step = 0;
  while (!z.fully_revealed()) {
    const TokenProbabilityMatrix P = denoiser.evaluate(z);
    auto [positions, next_state] = select(rule, z, P, state);
    state = std::move(next_state);
    ++record.nfe;

    PhiloxStream draws(seed, sequence_index, static_cast<std::uint64_t>(step));
    std::vector<std::pair<Position, double>> step_log;
    for (Position p : positions) {
      const double u = draws.next_uniform();
      double cum = 0.0;
      TokenId chosen = -1;
      for (TokenId v = 0; v < denoiser.vocab_size(); ++v) {
        const double q = P.prob(p, v);
        cum += q;
        if (u < cum) {
          chosen = v;
          break;
        }
      }
      if (chosen < 0) {  // u fell into rounding slack past the last positive entry
        for (TokenId v = denoiser.vocab_size() - 1; v >= 0; --v)
          if (P.prob(p, v) > 0.0) {
            chosen = v;
            break;
          }
      }
      step_log.emplace_back(p, P.log_prob(p, chosen));
      z = z.reveal(p, chosen);
    }
    record.partition.parts.push_back(positions);
    record.step_logprobs.push_back(std::move(step_log));
    ++step;
  }
  for (const auto& step_entries : record.step_logprobs)
    for (const auto& [p, lp] : step_entries) record.total_loglik += lp;
  return {z.to_clean(), std::move(record)};
}

/// Exact likelihood (Algorithm "likelihood"): simulate the same trajectory
/// the rule would generate, but reveal the TRUE tokens of x and accumulate
/// their log-probabilities. The realized partition is the unique one
/// consistent with the policy, so the sum is the exact log p under the
/// induced distribution. A zero-probability token yields -inf with a
/// support-miss flag rather than an error.
template <DenoiserLike D>
TrajectoryRecord duel_exact_loglik(const D& denoiser, const RuleSpec& rule,
                                   const CleanSequence& x) {
  if (x.length() != denoiser.length()) fail(Errc::LengthMismatch, "sequence length != denoiser L");
  MaskedSequence z = MaskedSequence::all_masked(denoiser.length(), denoiser.vocab_size());
  RuleState state;
  TrajectoryRecord record;
  while (!z.fully_revealed()) {
    const TokenProbabilityMatrix P = denoiser.evaluate(z);
    if (P.support_miss()) record.support_miss = true;
    auto [positions, next_state] = select(rule, z, P, state);
    state = std::move(next_state);
    ++record.nfe;

    std::vector<std::pair<Position, double>> step_log;
    for (Position p : positions) {
      const double lp = P.log_prob(p, x.at(p));
      if (lp == kNegInf) record.support_miss = true;
      step_log.emplace_back(p, lp);
      z = z.reveal(p, x.at(p));
    }
    record.partition.parts.push_back(positions);
    record.step_logprobs.push_back(std::move(step_log));
  }
  for (const auto& step_entries : record.step_logprobs)
    for (const auto& [p, lp] : step_entries) record.total_loglik += lp;
  return record;
}

namespace detail {

/// Sum of true-token log-probs along one sequential permutation.
template <DenoiserLike D>
double permutation_path_loglik(const D& denoiser, const CleanSequence& x,
                               const std::vector<Position>& order) {
  MaskedSequence z = MaskedSequence::all_masked(denoiser.length(), denoiser.vocab_size());
  double total = 0.0;
  for (Position p : order) {
    const TokenProbabilityMatrix P = denoiser.evaluate(z);
    total += P.log_prob(p, x.at(p));
    z = z.reveal(p, x.at(p));
  }
  return total;
}

inline void check_enum_cap(int length, int cap) {
  if (length > cap)
    fail(Errc::EnumerationCap, "L = " + std::to_string(length) + " exceeds enumeration cap " +
                                   std::to_string(cap));
}

}  // namespace detail

/// Exhaustive any-order NLL: the average over all L! sequential orders of the
/// path negative log-likelihood. This is the quantity the Monte Carlo ELBO
/// loss estimates.
template <DenoiserLike D>
double aoarm_elbo_exhaustive(const D& denoiser, const CleanSequence& x,
                             int enum_cap = kDefaultEnumCap) {
  detail::check_enum_cap(x.length(), enum_cap);
  std::vector<Position> order(static_cast<std::size_t>(x.length()));
  std::iota(order.begin(), order.end(), 0);
  double sum_nll = 0.0;
  long count = 0;
  do {
    sum_nll -= detail::permutation_path_loglik(denoiser, x, order);
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  return sum_nll / static_cast<double>(count);
}

/// Exact log-likelihood under the uniform sequential policy: the quantity the
/// ELBO lower-bounds. log sum over permutations of exp(path) minus log L!.
template <DenoiserLike D>
double uniform_policy_exact_loglik(const D& denoiser, const CleanSequence& x,
                                   int enum_cap = kDefaultEnumCap) {
  detail::check_enum_cap(x.length(), enum_cap);
  std::vector<Position> order(static_cast<std::size_t>(x.length()));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> paths;
  do {
    paths.push_back(detail::permutation_path_loglik(denoiser, x, order));
  } while (std::next_permutation(order.begin(), order.end()));

  double mx = kNegInf;
  for (double v : paths) mx = std::max(mx, v);
  if (mx == kNegInf) return kNegInf;
  double sum = 0.0;
  for (double v : paths) sum += std::exp(v - mx);
  return mx + std::log(sum) - std::log(static_cast<double>(paths.size()));
}

/// Forward masking: mask a uniformly random size-n subset of positions.
inline MaskedSequence forward_mask(const CleanSequence& x, int n, std::uint64_t seed,
                                   int vocab_size) {
  const int length = x.length();
  if (n < 0 || n > length) fail(Errc::BadConfig, "mask count must satisfy 0 <= n <= L");
  PhiloxStream rng(seed, 0x4d61);
  std::vector<Position> order(static_cast<std::size_t>(length));
  std::iota(order.begin(), order.end(), 0);
  std::vector<TokenId> entries = x.tokens;
  for (int i = 0; i < n; ++i) {
    const int j = i + static_cast<int>(rng.next_below(static_cast<std::uint32_t>(length - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    entries[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
        static_cast<TokenId>(vocab_size);
  }
  return MaskedSequence(std::move(entries), vocab_size);
}

}  // namespace duel
