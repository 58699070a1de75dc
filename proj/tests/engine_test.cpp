#include <gtest/gtest.h>

#include <cmath>

#include "duel/engine.hpp"
#include "duel/trainable.hpp"
#include "test_util.hpp"

using namespace duel;
using testutil::masked;
using testutil::seq;

namespace {

TabularBayesDenoiser aa_bb() { return fit_tabular({seq({0, 0}), seq({1, 1})}, 0.0, 2); }

TEST(DuelSample, StaysOnTheSupportOfTheExactDenoiser) {
  const auto d = aa_bb();
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto [x, record] = duel_sample(d, RuleSpec::greedy(1), s);
    const bool is_aa = x == seq({0, 0});
    const bool is_bb = x == seq({1, 1});
    EXPECT_TRUE(is_aa || is_bb) << "sampled off-support sequence";
  }
}

TEST(DuelSample, LengthOneIsASingleStep) {
  const auto d = fit_tabular({seq({0}), seq({1})}, 0.0, 2);
  const auto [x, record] = duel_sample(d, RuleSpec::left_to_right(1), 7);
  EXPECT_EQ(record.nfe, 1);
  EXPECT_EQ(record.partition.steps(), 1);
}

TEST(DuelSample, FullParallelIsOneStepFromMarginals) {
  const auto d = aa_bb();
  const auto [x, record] = duel_sample(d, RuleSpec::left_to_right(2), 3);
  EXPECT_EQ(record.nfe, 1);
  ASSERT_EQ(record.partition.steps(), 1);
  EXPECT_EQ(record.partition.parts[0], (PositionSet{0, 1}));
}

TEST(DuelSample, DeterministicPerSeedAndStream) {
  const auto d = fit_tabular({seq({0, 1, 0}), seq({1, 0, 1}), seq({0, 0, 1})}, 0.5, 2);
  const auto a = duel_sample(d, RuleSpec::greedy(1), 11, 4);
  const auto b = duel_sample(d, RuleSpec::greedy(1), 11, 4);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second.partition.parts, b.second.partition.parts);
  EXPECT_EQ(a.second.total_loglik, b.second.total_loglik);
}

TEST(DuelSample, RecordIsInternallyConsistent) {
  const auto d = fit_tabular({seq({0, 1, 0}), seq({1, 0, 1})}, 0.3, 2);
  const auto [x, record] = duel_sample(d, RuleSpec::threshold(0.6), 5);
  EXPECT_TRUE(validate_partition(record.partition, 3).ok());
  EXPECT_EQ(record.nfe, record.partition.steps());
  double sum = 0.0;
  for (const auto& step : record.step_logprobs)
    for (const auto& [p, lp] : step) sum += lp;
  EXPECT_DOUBLE_EQ(sum, record.total_loglik);
}

TEST(DuelExactLoglik, SequentialRecoversTheJoint) {
  const auto d = aa_bb();
  for (const RuleSpec& rule : {RuleSpec::left_to_right(1), RuleSpec::greedy(1),
                               RuleSpec::margin(1), RuleSpec::fixed_order({1, 0})}) {
    const auto record = duel_exact_loglik(d, rule, seq({0, 0}));
    EXPECT_DOUBLE_EQ(record.total_loglik, std::log(0.5)) << format_rule(rule);
    EXPECT_FALSE(record.support_miss);
  }
}

TEST(DuelExactLoglik, LengthOneIsTheFirstRow) {
  const auto d = fit_tabular({seq({0}), seq({0}), seq({1})}, 0.0, 2);
  const auto record = duel_exact_loglik(d, RuleSpec::greedy(1), seq({0}));
  EXPECT_DOUBLE_EQ(record.total_loglik, std::log(2.0 / 3.0));
  EXPECT_EQ(record.nfe, 1);
}

// One-step parallel decoding multiplies the all-mask marginals: the
// parallel-independence approximation, distinct from the sequential value.
TEST(DuelExactLoglik, FullParallelUsesFactorizedMarginals) {
  const auto d = aa_bb();
  const auto record = duel_exact_loglik(d, RuleSpec::left_to_right(2), seq({0, 0}));
  EXPECT_DOUBLE_EQ(record.total_loglik, std::log(0.25));
  EXPECT_EQ(record.nfe, 1);
}

TEST(DuelExactLoglik, OffSupportGivesNegInfWithFlag) {
  const auto d = aa_bb();
  const auto record = duel_exact_loglik(d, RuleSpec::left_to_right(1), seq({0, 1}));
  EXPECT_EQ(record.total_loglik, kNegInf);
  EXPECT_TRUE(record.support_miss);
}

TEST(DuelExactLoglik, NfeIsCeilLOverKWithoutBlocks) {
  const auto corpus = std::vector<CleanSequence>{seq({0, 1, 0, 1, 1, 0, 0, 1})};
  const auto d = fit_tabular(corpus, 1.0, 2);
  for (int k : {1, 2, 3, 4, 8}) {
    const auto record = duel_exact_loglik(d, RuleSpec::greedy(k), corpus.front());
    EXPECT_EQ(record.nfe, (8 + k - 1) / k) << "k=" << k;
  }
}

TEST(DuelExactLoglik, TrajectoryMatchesSampleTrajectoryOnSampledSequence) {
  // Evaluation follows generation: evaluating the sequence a sampler produced
  // realizes the same partition when the rule is context-deterministic.
  const auto d = fit_tabular({seq({0, 1, 0}), seq({1, 0, 1}), seq({1, 1, 0})}, 0.2, 2);
  const RuleSpec rule = RuleSpec::greedy(1);
  const auto [x, sampled] = duel_sample(d, rule, 21);
  const auto evaluated = duel_exact_loglik(d, rule, x);
  EXPECT_EQ(evaluated.partition.parts, sampled.partition.parts);
}

TEST(AoarmElbo, TwoPermutationAverageIsLnTwo) {
  EXPECT_NEAR(aoarm_elbo_exhaustive(aa_bb(), seq({0, 0})), std::log(2.0), 1e-12);
}

TEST(AoarmElbo, LengthOne) {
  const auto d = fit_tabular({seq({0}), seq({1}), seq({1})}, 0.0, 2);
  EXPECT_DOUBLE_EQ(aoarm_elbo_exhaustive(d, seq({1})), -std::log(2.0 / 3.0));
}

TEST(AoarmElbo, PerfectDenoiserGivesZero) {
  const auto d = fit_tabular({seq({0, 1, 1})}, 0.0, 2);
  EXPECT_DOUBLE_EQ(aoarm_elbo_exhaustive(d, seq({0, 1, 1})), 0.0);
}

TEST(AoarmElbo, EnumerationCapEnforced) {
  const auto d = fit_tabular({seq({0, 1, 0, 1, 1, 0, 0, 1})}, 1.0, 2);
  try {
    aoarm_elbo_exhaustive(d, seq({0, 1, 0, 1, 1, 0, 0, 1}));
    FAIL() << "expected EnumerationCap";
  } catch (const DuelError& e) {
    EXPECT_EQ(e.code(), Errc::EnumerationCap);
  }
}

TEST(UniformPolicyLoglik, TwoOrdersEachContributeHalf) {
  EXPECT_NEAR(uniform_policy_exact_loglik(aa_bb(), seq({0, 0})), std::log(0.5), 1e-12);
}

TEST(UniformPolicyLoglik, JensenBoundTightForExactDenoiser) {
  // An exact Bayes denoiser is order-consistent: every permutation path
  // recovers the same joint, so the ELBO is tight.
  const auto d = fit_tabular({seq({0, 1, 1}), seq({1, 0, 0}), seq({0, 0, 1})}, 0.4, 2);
  for (TokenId a = 0; a < 2; ++a)
    for (TokenId b = 0; b < 2; ++b)
      for (TokenId c = 0; c < 2; ++c) {
        const CleanSequence x = seq({a, b, c});
        EXPECT_NEAR(-aoarm_elbo_exhaustive(d, x), uniform_policy_exact_loglik(d, x), 1e-9);
      }
}

TEST(UniformPolicyLoglik, JensenBoundStrictForInexactDenoiser) {
  // A network's conditionals need not cohere into one joint; paths differ and
  // Jensen becomes strict.
  const TrainableDenoiser d(3, 2, 6, 0.1, 2024);
  bool strict = false;
  for (TokenId a = 0; a < 2; ++a)
    for (TokenId b = 0; b < 2; ++b)
      for (TokenId c = 0; c < 2; ++c) {
        const CleanSequence x = seq({a, b, c});
        const double lower = -aoarm_elbo_exhaustive(d, x);
        const double exact = uniform_policy_exact_loglik(d, x);
        EXPECT_LE(lower, exact + 1e-12);
        if (exact - lower > 1e-9) strict = true;
      }
  EXPECT_TRUE(strict) << "Jensen gap should be strict somewhere for an order-sensitive network";
}

TEST(ForwardMask, ZeroMasksNothingFullMasksAll) {
  const CleanSequence x = seq({0, 1, 1});
  const auto untouched = forward_mask(x, 0, 5, 2);
  EXPECT_TRUE(untouched.fully_revealed());
  EXPECT_EQ(untouched.to_clean(), x);
  const auto all = forward_mask(x, 3, 5, 2);
  EXPECT_EQ(all.masked_positions().size(), 3u);
}

TEST(ForwardMask, UniformOverPositions) {
  const CleanSequence x = seq({0, 1, 1});
  const long trials = 100000;
  long hits[3] = {0, 0, 0};
  for (long t = 0; t < trials; ++t) {
    const auto z = forward_mask(x, 1, derive_seed(31337, static_cast<std::uint64_t>(t)), 2);
    const auto m = z.masked_positions();
    ASSERT_EQ(m.size(), 1u);
    ++hits[m.front()];
  }
  const double p = 1.0 / 3.0;
  const double se = std::sqrt(p * (1 - p) / static_cast<double>(trials));
  for (long h : hits)
    EXPECT_NEAR(static_cast<double>(h) / trials, p, 3 * se);
}

TEST(ForwardMask, DeterministicPerSeed) {
  const CleanSequence x = seq({0, 1, 0, 1});
  EXPECT_EQ(forward_mask(x, 2, 99, 2).entries(), forward_mask(x, 2, 99, 2).entries());
}

}  // namespace
