#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "duel/core.hpp"
#include "duel/denoiser.hpp"
#include "duel/engine.hpp"
#include "duel/errors.hpp"
#include "duel/oracle.hpp"
#include "duel/rules.hpp"
#include "duel/trainable.hpp"

namespace duel {

/// PPL = exp(NLL / token count), per-token over a corpus.
inline double perplexity(double total_nll, long token_count) {
  if (token_count < 1) fail(Errc::BadConfig, "token count must be >= 1");
  return std::exp(total_nll / static_cast<double>(token_count));
}

/// Perplexity-gap arithmetic: Delta = PPL - PPL_arm for each estimator, and
/// the percentage of the ELBO gap eliminated by exact evaluation.
struct GapReport {
  double ppl_elbo = 0.0;
  double ppl_duel = 0.0;
  double ppl_arm = 0.0;
  double delta_elbo = 0.0;
  double delta_duel = 0.0;
  double gap_closed_pct = 0.0;
  bool ill_defined = false;  // Delta_elbo <= 0
};

inline GapReport gap_closed_report(double ppl_elbo, double ppl_duel, double ppl_arm) {
  GapReport g;
  g.ppl_elbo = ppl_elbo;
  g.ppl_duel = ppl_duel;
  g.ppl_arm = ppl_arm;
  g.delta_elbo = ppl_elbo - ppl_arm;
  g.delta_duel = ppl_duel - ppl_arm;
  if (g.delta_elbo <= 0.0) {
    g.ill_defined = true;
    return g;
  }
  g.gap_closed_pct = 100.0 * (g.delta_elbo - g.delta_duel) / g.delta_elbo;
  return g;
}

inline double gap_closed(double ppl_elbo, double ppl_duel, double ppl_arm) {
  const GapReport g = gap_closed_report(ppl_elbo, ppl_duel, ppl_arm);
  if (g.ill_defined)
    fail(Errc::IllDefined, "gap closed requires the ELBO perplexity gap to be positive");
  return g.gap_closed_pct;
}

/// Scores samples under the reference model's exact left-to-right chain rule
/// and returns exp(mean per-token NLL).
template <DenoiserLike R>
double generative_perplexity(const std::vector<CleanSequence>& samples, const R& reference) {
  if (samples.empty()) fail(Errc::EmptyCorpus, "no samples to score");
  const RuleSpec l2r = RuleSpec::left_to_right(1);
  double total_nll = 0.0;
  long tokens = 0;
  for (const CleanSequence& x : samples) {
    total_nll -= duel_exact_loglik(reference, l2r, x).total_loglik;
    tokens += x.length();
  }
  return perplexity(total_nll, tokens);
}

/// Shannon entropy (nats) of the empirical unigram token distribution over
/// all generated tokens. An intentionally simple diversity diagnostic.
inline double token_entropy(const std::vector<CleanSequence>& samples) {
  std::map<TokenId, long> counts;
  long total = 0;
  for (const CleanSequence& x : samples)
    for (TokenId t : x.tokens) {
      ++counts[t];
      ++total;
    }
  if (total == 0) fail(Errc::EmptyCorpus, "entropy requires at least one token");
  double h = 0.0;
  for (const auto& [tok, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

enum class EvalMethod { Duel, ElboMc, ElboExhaustive, ArmExact, Oracle };

inline const char* method_name(EvalMethod m) {
  switch (m) {
    case EvalMethod::Duel: return "duel";
    case EvalMethod::ElboMc: return "elbo-mc";
    case EvalMethod::ElboExhaustive: return "elbo-exhaustive";
    case EvalMethod::ArmExact: return "arm-exact";
    case EvalMethod::Oracle: return "oracle";
  }
  return "unknown";
}

inline EvalMethod parse_method(const std::string& name) {
  if (name == "duel") return EvalMethod::Duel;
  if (name == "elbo-mc") return EvalMethod::ElboMc;
  if (name == "elbo-exhaustive") return EvalMethod::ElboExhaustive;
  if (name == "arm-exact") return EvalMethod::ArmExact;
  if (name == "oracle") return EvalMethod::Oracle;
  fail(Errc::BadConfig, "unknown method '" + name + "'");
}

struct SequenceRecord {
  int index = 0;
  double nll = 0.0;
  int length = 0;
  double nfe = 0.0;
  bool support_miss = false;
};

/// Corpus-level evaluation result: per-sequence records plus aggregates and
/// full provenance (method, rule, seed, resolved config).
struct EvaluationReport {
  EvalMethod method = EvalMethod::Duel;
  std::string rule;  // rule spec string, empty when not applicable
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;  // resolved run configuration

  std::vector<SequenceRecord> sequences;
  double total_nll = 0.0;
  long token_count = 0;
  double ppl = 0.0;
  double mean_nfe = 0.0;

  std::optional<double> nfe_target;
  std::optional<double> gap_closed_pct;

  void aggregate() {
    total_nll = 0.0;
    token_count = 0;
    double nfe_sum = 0.0;
    for (const SequenceRecord& r : sequences) {
      total_nll += r.nll;
      token_count += r.length;
      nfe_sum += r.nfe;
    }
    ppl = perplexity(total_nll, token_count);
    mean_nfe = sequences.empty() ? 0.0 : nfe_sum / static_cast<double>(sequences.size());
  }
};

struct EvalOptions {
  EvalMethod method = EvalMethod::Duel;
  RuleSpec rule;              // Duel
  int mc_samples = 1;         // ElboMc
  int block_size = 0;         // Oracle
  int enum_cap = kDefaultEnumCap;
  std::uint64_t seed = 0;
  bool parallel = false;
};

namespace detail {

template <DenoiserLike D>
SequenceRecord evaluate_one(const D& denoiser, const CleanSequence& x, int index,
                            const EvalOptions& opt) {
  SequenceRecord rec;
  rec.index = index;
  rec.length = x.length();
  switch (opt.method) {
    case EvalMethod::Duel:
    case EvalMethod::ArmExact: {
      const RuleSpec& rule =
          opt.method == EvalMethod::Duel ? opt.rule : RuleSpec::left_to_right(1);
      const TrajectoryRecord t = duel_exact_loglik(denoiser, rule, x);
      rec.nll = -t.total_loglik;
      rec.nfe = t.nfe;
      rec.support_miss = t.support_miss;
      break;
    }
    case EvalMethod::ElboMc: {
      double sum = 0.0;
      for (int k = 0; k < opt.mc_samples; ++k)
        sum += elbo_loss_mc(denoiser, x,
                            derive_seed(opt.seed, static_cast<std::uint64_t>(index),
                                        static_cast<std::uint64_t>(k)));
      rec.nll = sum / opt.mc_samples;
      rec.nfe = opt.mc_samples;
      break;
    }
    case EvalMethod::ElboExhaustive: {
      rec.nll = aoarm_elbo_exhaustive(denoiser, x, opt.enum_cap);
      double evals = x.length();  // L! * L denoiser calls
      for (int i = 2; i <= x.length(); ++i) evals *= i;
      rec.nfe = evals;
      break;
    }
    case EvalMethod::Oracle: {
      const BlockSearchResult r = oracle_block_search(denoiser, x, opt.block_size);
      rec.nll = r.total_nll;
      double perms = 1.0;
      for (int i = 2; i <= opt.block_size; ++i) perms *= i;
      rec.nfe = static_cast<double>(x.length()) / opt.block_size * perms * opt.block_size;
      break;
    }
  }
  return rec;
}

}  // namespace detail

/// Evaluates every corpus sequence under one method. With opt.parallel the
/// sequences are scored on several threads; records are merged by index and
/// all randomness is counter-based, so the report is identical either way.
template <DenoiserLike D>
EvaluationReport evaluate_corpus(const D& denoiser, const std::vector<CleanSequence>& corpus,
                                 const EvalOptions& opt) {
  if (corpus.empty()) fail(Errc::EmptyCorpus, "no sequences to evaluate");
  EvaluationReport report;
  report.method = opt.method;
  report.seed = opt.seed;
  if (opt.method == EvalMethod::Duel) report.rule = format_rule(opt.rule);
  if (opt.method == EvalMethod::ArmExact) report.rule = format_rule(RuleSpec::left_to_right(1));
  report.sequences.resize(corpus.size());

  const auto evaluate_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i)
      report.sequences[i] =
          detail::evaluate_one(denoiser, corpus[i], static_cast<int>(i), opt);
  };

  if (opt.parallel && corpus.size() > 1) {
    const unsigned hw = std::max(2u, std::thread::hardware_concurrency());
    const std::size_t workers = std::min<std::size_t>(hw, corpus.size());
    std::vector<std::thread> pool;
    const std::size_t chunk = (corpus.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(corpus.size(), begin + chunk);
      if (begin < end) pool.emplace_back(evaluate_range, begin, end);
    }
    for (std::thread& t : pool) t.join();
  } else {
    evaluate_range(0, corpus.size());
  }

  report.aggregate();
  return report;
}

/// One evaluation per sweep setting: k values for the fixed-k families,
/// mu values for the confidence threshold. Fixed-k settings get a target
/// NFE of ceil(L/k); adaptive settings report realized NFE only.
template <DenoiserLike D>
std::vector<EvaluationReport> nfe_sweep(const D& denoiser, RuleKind family,
                                        const std::vector<double>& values,
                                        const std::vector<CleanSequence>& corpus,
                                        const EvalOptions& base, int block_size = 0) {
  std::vector<EvaluationReport> out;
  for (double value : values) {
    RuleSpec rule;
    std::optional<double> target;
    switch (family) {
      case RuleKind::LeftToRight: rule = RuleSpec::left_to_right(static_cast<int>(value)); break;
      case RuleKind::GreedyConfidence: rule = RuleSpec::greedy(static_cast<int>(value)); break;
      case RuleKind::ProbMargin: rule = RuleSpec::margin(static_cast<int>(value)); break;
      case RuleKind::ConfThreshold: rule = RuleSpec::threshold(value); break;
      default: fail(Errc::BadRuleSpec, "sweep supports l2r, greedy, margin, thresh");
    }
    if (family != RuleKind::ConfThreshold) {
      const int k = static_cast<int>(value);
      const int span = block_size > 0 ? block_size : denoiser.length();
      const int per_block = (span + k - 1) / k;
      target = block_size > 0
                   ? static_cast<double>(denoiser.length() / block_size) * per_block
                   : static_cast<double>(per_block);
    }
    if (block_size > 0) rule = RuleSpec::block_restrict(block_size, rule);

    EvalOptions opt = base;
    opt.method = EvalMethod::Duel;
    opt.rule = rule;
    EvaluationReport report = evaluate_corpus(denoiser, corpus, opt);
    report.nfe_target = target;
    out.push_back(std::move(report));
  }
  return out;
}

}  // namespace duel
