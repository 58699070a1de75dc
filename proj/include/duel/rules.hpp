#pragma once

#include <charconv>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "duel/core.hpp"
#include "duel/errors.hpp"

namespace duel {

enum class RuleKind {
  LeftToRight,
  GreedyConfidence,
  ProbMargin,
  ConfThreshold,
  Klass,
  FixedOrder,
  BlockRestrict,
};

/// Immutable description of a deterministic unmasking rule. Block restriction
/// wraps an inner rule, applied within blocks of block_size positions while
/// blocks are processed autoregressively.
struct RuleSpec {
  RuleKind kind = RuleKind::LeftToRight;
  int k = 1;                               // top-k variants
  double mu = 0.0;                         // confidence threshold
  double nu = 0.0;                         // KLASS stability bound
  std::vector<Position> order;             // FixedOrder (0-based permutation)
  int block_size = 0;                      // BlockRestrict
  std::shared_ptr<const RuleSpec> inner;   // BlockRestrict

  static RuleSpec left_to_right(int k = 1) { return with_k(RuleKind::LeftToRight, k); }
  static RuleSpec greedy(int k = 1) { return with_k(RuleKind::GreedyConfidence, k); }
  static RuleSpec margin(int k = 1) { return with_k(RuleKind::ProbMargin, k); }

  static RuleSpec threshold(double mu) {
    if (!(mu > 0.0 && mu <= 1.0)) fail(Errc::BadRuleSpec, "thresh requires 0 < mu <= 1");
    RuleSpec r;
    r.kind = RuleKind::ConfThreshold;
    r.mu = mu;
    return r;
  }

  static RuleSpec klass(double mu, double nu) {
    if (!(mu > 0.0 && mu <= 1.0)) fail(Errc::BadRuleSpec, "klass requires 0 < mu <= 1");
    if (nu < 0.0) fail(Errc::BadRuleSpec, "klass requires nu >= 0");
    RuleSpec r;
    r.kind = RuleKind::Klass;
    r.mu = mu;
    r.nu = nu;
    return r;
  }

  static RuleSpec fixed_order(std::vector<Position> permutation) {
    PositionSet sorted = permutation;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted[i] != static_cast<Position>(i))
        fail(Errc::BadRuleSpec, "fixed order must be a permutation of 1..L");
    RuleSpec r;
    r.kind = RuleKind::FixedOrder;
    r.order = std::move(permutation);
    return r;
  }

  static RuleSpec block_restrict(int block_size, RuleSpec inner) {
    if (block_size < 1) fail(Errc::BadRuleSpec, "block size must be >= 1");
    if (inner.kind == RuleKind::BlockRestrict)
      fail(Errc::BadRuleSpec, "block restriction cannot nest");
    RuleSpec r;
    r.kind = RuleKind::BlockRestrict;
    r.block_size = block_size;
    r.inner = std::make_shared<const RuleSpec>(std::move(inner));
    return r;
  }

  const RuleSpec& effective() const { return kind == RuleKind::BlockRestrict ? *inner : *this; }

 private:
  static RuleSpec with_k(RuleKind kind, int k) {
    if (k < 1) fail(Errc::BadRuleSpec, "k must be >= 1");
    RuleSpec r;
    r.kind = kind;
    r.k = k;
    return r;
  }
};

/// Trajectory state threaded through select(): the previous step's matrix
/// (KLASS stability test) and the current block cursor (block restriction).
struct RuleState {
  std::optional<TokenProbabilityMatrix> previous_matrix;
  int block_cursor = 0;
};

namespace detail {

inline double parse_number(const std::string& s, const char* what) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(s, &used);
  } catch (const std::exception&) {
    fail(Errc::BadRuleSpec, std::string("expected a number for ") + what + ", got '" + s + "'");
  }
  if (used != s.size())
    fail(Errc::BadRuleSpec, std::string("trailing characters in ") + what + ": '" + s + "'");
  return value;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

// key=value arguments after the rule name, e.g. "k=4" or "mu=0.9,nu=0.01".
inline void parse_args(const std::string& args, const std::vector<std::string>& allowed,
                       std::vector<std::pair<std::string, std::string>>& out) {
  if (args.empty()) return;
  for (const std::string& kv : split(args, ',')) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      fail(Errc::BadRuleSpec, "expected key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      fail(Errc::BadRuleSpec, "unknown parameter '" + key + "'");
    out.emplace_back(key, kv.substr(eq + 1));
  }
}

}  // namespace detail

/// Rule spec grammar: `l2r:k=1`, `greedy:k=4`, `margin:k=2`, `thresh:mu=0.7`,
/// `klass:mu=0.9,nu=0.01`, `block:4:greedy:k=1`, `fixed:3,1,2,4` (1-based).
inline RuleSpec parse_rule(const std::string& text) {
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);

  if (name == "block") {
    const auto second = rest.find(':');
    if (second == std::string::npos)
      fail(Errc::BadRuleSpec, "block needs a size and an inner rule: block:<L'>:<rule>");
    const double size = detail::parse_number(rest.substr(0, second), "block size");
    return RuleSpec::block_restrict(static_cast<int>(size), parse_rule(rest.substr(second + 1)));
  }
  if (name == "fixed") {
    if (rest.empty()) fail(Errc::BadRuleSpec, "fixed needs a permutation: fixed:3,1,2,4");
    std::vector<Position> order;
    for (const std::string& item : detail::split(rest, ','))
      order.push_back(internal_position(static_cast<int>(detail::parse_number(item, "position"))));
    return RuleSpec::fixed_order(std::move(order));
  }

  std::vector<std::pair<std::string, std::string>> args;
  if (name == "l2r" || name == "greedy" || name == "margin") {
    detail::parse_args(rest, {"k"}, args);
    int k = 1;
    for (const auto& [key, value] : args) k = static_cast<int>(detail::parse_number(value, "k"));
    if (name == "l2r") return RuleSpec::left_to_right(k);
    if (name == "greedy") return RuleSpec::greedy(k);
    return RuleSpec::margin(k);
  }
  if (name == "thresh") {
    detail::parse_args(rest, {"mu"}, args);
    double mu = -1.0;
    for (const auto& [key, value] : args) mu = detail::parse_number(value, "mu");
    if (mu < 0.0) fail(Errc::BadRuleSpec, "thresh requires mu=<value>");
    return RuleSpec::threshold(mu);
  }
  if (name == "klass") {
    detail::parse_args(rest, {"mu", "nu"}, args);
    double mu = -1.0, nu = -1.0;
    for (const auto& [key, value] : args)
      (key == "mu" ? mu : nu) = detail::parse_number(value, key.c_str());
    if (mu < 0.0 || nu < 0.0) fail(Errc::BadRuleSpec, "klass requires mu=<value>,nu=<value>");
    return RuleSpec::klass(mu, nu);
  }
  fail(Errc::BadRuleSpec, "unknown rule '" + name + "'");
}

namespace detail {

/// Shortest round-trip decimal, so formatted specs re-parse to the same rule.
inline std::string shortest(double v) {
  char buf[32];
  const auto result = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, result.ptr);
}

}  // namespace detail

inline std::string format_rule(const RuleSpec& rule) {
  std::ostringstream out;
  switch (rule.kind) {
    case RuleKind::LeftToRight: out << "l2r:k=" << rule.k; break;
    case RuleKind::GreedyConfidence: out << "greedy:k=" << rule.k; break;
    case RuleKind::ProbMargin: out << "margin:k=" << rule.k; break;
    case RuleKind::ConfThreshold: out << "thresh:mu=" << detail::shortest(rule.mu); break;
    case RuleKind::Klass:
      out << "klass:mu=" << detail::shortest(rule.mu) << ",nu=" << detail::shortest(rule.nu);
      break;
    case RuleKind::FixedOrder: {
      out << "fixed:";
      for (std::size_t i = 0; i < rule.order.size(); ++i)
        out << (i ? "," : "") << display_position(rule.order[i]);
      break;
    }
    case RuleKind::BlockRestrict:
      out << "block:" << rule.block_size << ":" << format_rule(*rule.inner);
      break;
  }
  return out.str();
}

namespace detail {

/// KL(prev_row || row) in nats, from stored log-probabilities.
inline double row_kl(const TokenProbabilityMatrix& prev, const TokenProbabilityMatrix& cur,
                     Position p) {
  double kl = 0.0;
  for (TokenId v = 0; v < cur.vocab_size(); ++v) {
    const double lp = prev.log_prob(p, v);
    if (lp == kNegInf) continue;  // 0 * log(0/q) = 0
    kl += std::exp(lp) * (lp - cur.log_prob(p, v));
  }
  return kl;
}

inline Position most_confident(const TokenProbabilityMatrix& P, const PositionSet& candidates) {
  Position best = candidates.front();
  double best_p = -1.0;
  for (Position p : candidates) {
    const double conf = P.top_two(p).first;
    if (conf > best_p) {
      best_p = conf;
      best = p;
    }
  }
  return best;
}

/// Top-k candidates by score, ties broken by lowest position index. k is
/// clipped to the candidate count.
inline PositionSet top_k_by(const PositionSet& candidates, const std::vector<double>& scores,
                            int k) {
  std::vector<std::size_t> idx(candidates.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), candidates.size());
  PositionSet out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(candidates[idx[i]]);
  std::sort(out.begin(), out.end());
  return out;
}

inline PositionSet select_from_candidates(const RuleSpec& rule, const TokenProbabilityMatrix& P,
                                          const RuleState& state, const PositionSet& candidates) {
  switch (rule.kind) {
    case RuleKind::LeftToRight: {
      const std::size_t take =
          std::min<std::size_t>(static_cast<std::size_t>(rule.k), candidates.size());
      return PositionSet(candidates.begin(), candidates.begin() + static_cast<long>(take));
    }
    case RuleKind::GreedyConfidence: {
      std::vector<double> scores;
      scores.reserve(candidates.size());
      for (Position p : candidates) scores.push_back(P.top_two(p).first);
      return top_k_by(candidates, scores, rule.k);
    }
    case RuleKind::ProbMargin: {
      std::vector<double> scores;
      scores.reserve(candidates.size());
      for (Position p : candidates) {
        const auto t = P.top_two(p);
        scores.push_back(t.first - t.second);
      }
      return top_k_by(candidates, scores, rule.k);
    }
    case RuleKind::ConfThreshold: {
      PositionSet out;
      for (Position p : candidates)
        if (P.top_two(p).first >= rule.mu) out.push_back(p);
      if (out.empty()) out.push_back(most_confident(P, candidates));
      return out;
    }
    case RuleKind::Klass: {
      // First step has no previous prediction, so the stability criterion
      // cannot fire; fall back to the most confident position.
      if (!state.previous_matrix) return {most_confident(P, candidates)};
      PositionSet out;
      for (Position p : candidates)
        if (P.top_two(p).first >= rule.mu && row_kl(*state.previous_matrix, P, p) <= rule.nu)
          out.push_back(p);
      if (out.empty()) out.push_back(most_confident(P, candidates));
      return out;
    }
    case RuleKind::FixedOrder: {
      for (Position p : rule.order)
        if (std::binary_search(candidates.begin(), candidates.end(), p)) return {p};
      return {candidates.front()};  // unreachable for a valid permutation
    }
    case RuleKind::BlockRestrict:
      fail(Errc::BadRuleSpec, "block restriction cannot nest");
  }
  fail(Errc::BadRuleSpec, "unknown rule kind");
}

}  // namespace detail

/// One deterministic position-selection step: returns a non-empty subset of
/// masked positions and the successor trajectory state. Ties break toward
/// the lowest position index everywhere.
inline std::pair<PositionSet, RuleState> select(const RuleSpec& rule, const MaskedSequence& z,
                                                const TokenProbabilityMatrix& P,
                                                const RuleState& state) {
  const PositionSet masked = z.masked_positions();
  if (masked.empty()) fail(Errc::NoMaskedPositions, "select() requires a masked position");

  RuleState next = state;
  PositionSet chosen;
  if (rule.kind == RuleKind::BlockRestrict) {
    if (z.length() % rule.block_size != 0)
      fail(Errc::BlockMismatch, "block size must divide the sequence length");
    // Blocks are processed autoregressively: the cursor sits on the first
    // block that still has masked positions and never moves backwards.
    int cursor = state.block_cursor;
    PositionSet in_block;
    for (; cursor * rule.block_size < z.length(); ++cursor) {
      const Position lo = cursor * rule.block_size;
      const Position hi = lo + rule.block_size;
      in_block.clear();
      for (Position p : masked)
        if (p >= lo && p < hi) in_block.push_back(p);
      if (!in_block.empty()) break;
    }
    next.block_cursor = cursor;
    chosen = detail::select_from_candidates(*rule.inner, P, state, in_block);
  } else {
    chosen = detail::select_from_candidates(rule, P, state, masked);
  }

  if (rule.effective().kind == RuleKind::Klass) next.previous_matrix = P;
  return {std::move(chosen), std::move(next)};
}

/// The Dirac policy induced by a rule: probability 1 on exactly the subset
/// select() returns, 0 on every other subset.
inline double induced_policy_probability(const RuleSpec& rule, const PositionSet& sigma_t,
                                         const MaskedSequence& z, const TokenProbabilityMatrix& P,
                                         const RuleState& state) {
  if (sigma_t.empty()) return 0.0;
  return select(rule, z, P, state).first == sigma_t ? 1.0 : 0.0;
}

}  // namespace duel
