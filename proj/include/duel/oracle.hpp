#pragma once

#include <cstdint>
#include <map>
#include <numeric>
#include <variant>
#include <vector>

#include "duel/core.hpp"
#include "duel/denoiser.hpp"
#include "duel/engine.hpp"
#include "duel/errors.hpp"
#include "duel/rng.hpp"
#include "duel/rules.hpp"

namespace duel {

/// Enumerated distribution over V^L sequences.
struct DistributionTable {
  std::map<CleanSequence, double> entries;

  double total() const {
    double s = 0.0;
    for (const auto& [seq, p] : entries) s += p;
    return s;
  }

  double probability(const CleanSequence& x) const {
    const auto it = entries.find(x);
    return it == entries.end() ? 0.0 : it->second;
  }

  double tv_distance(const DistributionTable& other) const {
    double tv = 0.0;
    for (const auto& [seq, p] : entries) tv += std::abs(p - other.probability(seq));
    for (const auto& [seq, q] : other.entries)
      if (!entries.count(seq)) tv += q;
    return 0.5 * tv;
  }
};

/// All ordered set partitions of [L]; grows as the ordered Bell numbers
/// 1, 3, 13, 75, 541, 4683, ...
inline std::vector<OrderedPartition> enumerate_ordered_partitions(int length,
                                                                  int cap = kDefaultEnumCap) {
  detail::check_enum_cap(length, cap);
  std::vector<OrderedPartition> out;
  std::vector<PositionSet> parts;
  std::vector<Position> remaining(static_cast<std::size_t>(length));
  std::iota(remaining.begin(), remaining.end(), 0);

  // Choose every non-empty subset of the remaining positions as the next
  // part, recurse on the rest.
  auto recurse = [&](auto&& self, const std::vector<Position>& rest) -> void {
    if (rest.empty()) {
      out.push_back(OrderedPartition{parts});
      return;
    }
    const std::uint32_t subsets = 1u << rest.size();
    for (std::uint32_t bits = 1; bits < subsets; ++bits) {
      PositionSet part;
      std::vector<Position> next;
      for (std::size_t i = 0; i < rest.size(); ++i)
        ((bits >> i) & 1u ? part : next).push_back(rest[i]);
      parts.push_back(std::move(part));
      self(self, next);
      parts.pop_back();
    }
  };
  recurse(recurse, remaining);
  return out;
}

/// Position-selection policy for the brute-force marginal: either the Dirac
/// policy of a deterministic rule, or uniform random sequential unmasking.
struct UniformSequentialPolicy {};
using BruteforcePolicy = std::variant<RuleSpec, UniformSequentialPolicy>;

struct MarginalResult {
  double log_marginal = kNegInf;
  /// Summands with nonzero policy weight (the trajectories the policy
  /// permits). A deterministic rule permits exactly one; their token
  /// probabilities may still vanish off-support.
  long policy_consistent_terms = 0;
};

/// Evaluates the induced-distribution sum term by term over every ordered
/// partition: each term is the product of policy probabilities and token
/// probabilities along the trajectory.
template <DenoiserLike D>
MarginalResult marginal_bruteforce(const D& denoiser, const BruteforcePolicy& policy,
                                   const CleanSequence& x, int cap = kDefaultEnumCap) {
  const int length = x.length();
  const auto partitions = enumerate_ordered_partitions(length, cap);
  const bool uniform = std::holds_alternative<UniformSequentialPolicy>(policy);

  std::vector<double> term_logs;
  MarginalResult result;
  for (const auto& sigma : partitions) {
    MaskedSequence z = MaskedSequence::all_masked(length, denoiser.vocab_size());
    RuleState state;
    double log_term = 0.0;
    double log_policy_weight = 0.0;
    bool permitted = true;
    for (const PositionSet& part : sigma.parts) {
      const TokenProbabilityMatrix P = denoiser.evaluate(z);
      if (uniform) {
        // pi_unif reveals one uniformly chosen masked position per step.
        if (part.size() != 1) {
          permitted = false;
          break;
        }
        log_policy_weight -= std::log(static_cast<double>(z.masked_positions().size()));
      } else {
        const auto& rule = std::get<RuleSpec>(policy);
        auto [selected, next_state] = select(rule, z, P, state);
        state = std::move(next_state);
        if (selected != part) {
          permitted = false;
          break;
        }
      }
      for (Position p : part) {
        log_term += P.log_prob(p, x.at(p));
        z = z.reveal(p, x.at(p));
      }
    }
    if (!permitted) continue;
    ++result.policy_consistent_terms;
    term_logs.push_back(log_policy_weight + log_term);
  }

  double mx = kNegInf;
  for (double v : term_logs) mx = std::max(mx, v);
  if (mx == kNegInf) return result;
  double sum = 0.0;
  for (double v : term_logs) sum += std::exp(v - mx);
  result.log_marginal = mx + std::log(sum);
  return result;
}

/// exp(duel_exact_loglik(x)) for every x in V^L.
template <DenoiserLike D>
DistributionTable induced_distribution(const D& denoiser, const RuleSpec& rule,
                                       long state_cap = 4096) {
  const int length = denoiser.length();
  const int V = denoiser.vocab_size();
  double states = std::pow(static_cast<double>(V), length);
  if (states > static_cast<double>(state_cap))
    fail(Errc::EnumerationCap, "V^L exceeds the enumeration cap");

  DistributionTable table;
  CleanSequence x{std::vector<TokenId>(static_cast<std::size_t>(length), 0)};
  const long total = static_cast<long>(states);
  for (long index = 0; index < total; ++index) {
    long rest = index;
    for (int p = 0; p < length; ++p) {
      x.tokens[static_cast<std::size_t>(p)] = static_cast<TokenId>(rest % V);
      rest /= V;
    }
    const TrajectoryRecord record = duel_exact_loglik(denoiser, rule, x);
    table.entries[x] = std::exp(record.total_loglik);
  }
  return table;
}

/// Simulates the forward masking process (mask one uniformly chosen unmasked
/// position per step) and records the REVERSED order, i.e. the unmasking
/// order it proposes. Under the true process every permutation has mass 1/L!.
inline std::map<std::vector<Position>, long> masking_order_histogram(int length, long num_trials,
                                                                     std::uint64_t seed) {
  if (length > 5) fail(Errc::EnumerationCap, "histogram over permutations requires L <= 5");
  std::map<std::vector<Position>, long> histogram;
  std::vector<Position> unmasked;
  std::vector<Position> masking_order;
  for (long trial = 0; trial < num_trials; ++trial) {
    unmasked.resize(static_cast<std::size_t>(length));
    std::iota(unmasked.begin(), unmasked.end(), 0);
    masking_order.clear();
    PhiloxStream rng(seed, static_cast<std::uint64_t>(trial));
    while (!unmasked.empty()) {
      const std::size_t i = rng.next_below(static_cast<std::uint32_t>(unmasked.size()));
      masking_order.push_back(unmasked[i]);
      unmasked.erase(unmasked.begin() + static_cast<long>(i));
    }
    std::reverse(masking_order.begin(), masking_order.end());
    ++histogram[masking_order];
  }
  return histogram;
}

struct BlockSearchResult {
  struct Block {
    int index = 0;                     // 0-based block index
    std::vector<Position> best_perm;   // within-block unmasking order
    double nll = 0.0;
  };
  double total_nll = 0.0;
  std::vector<Block> blocks;
};

/// Per-block oracle: with preceding blocks fully revealed (true tokens) and
/// later blocks masked, evaluate all L'! sequential orders inside each block
/// and keep the minimum NLL. total = sum over blocks of the minima.
template <DenoiserLike D>
BlockSearchResult oracle_block_search(const D& denoiser, const CleanSequence& x, int block_size) {
  const int length = x.length();
  if (block_size < 1 || length % block_size != 0)
    fail(Errc::BlockMismatch, "block size must divide the sequence length");
  if (block_size > 5) fail(Errc::EnumerationCap, "oracle search requires L' <= 5");

  const int V = denoiser.vocab_size();
  BlockSearchResult result;
  for (int b = 0; b * block_size < length; ++b) {
    const Position lo = b * block_size;
    // Context: blocks before b revealed, everything from lo on masked.
    std::vector<TokenId> base = x.tokens;
    for (Position p = lo; p < length; ++p) base[static_cast<std::size_t>(p)] = static_cast<TokenId>(V);

    std::vector<Position> order(static_cast<std::size_t>(block_size));
    std::iota(order.begin(), order.end(), lo);
    BlockSearchResult::Block best;
    best.index = b;
    best.nll = std::numeric_limits<double>::infinity();
    do {
      MaskedSequence z(base, V);
      double nll = 0.0;
      for (Position p : order) {
        const TokenProbabilityMatrix P = denoiser.evaluate(z);
        nll -= P.log_prob(p, x.at(p));
        z = z.reveal(p, x.at(p));
      }
      if (nll < best.nll) {
        best.nll = nll;
        best.best_perm = order;
      }
    } while (std::next_permutation(order.begin(), order.end()));
    result.total_nll += best.nll;
    result.blocks.push_back(std::move(best));
  }
  return result;
}

}  // namespace duel
