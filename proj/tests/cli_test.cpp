#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "duel/denoiser.hpp"
#include "duel/verify.hpp"
#include "test_util.hpp"

using namespace duel;
using testutil::seq;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("duel_cli_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void write(const std::string& name, const std::string& content) const {
    std::ofstream out(path(name), std::ios::binary);
    out << content;
  }

  std::string slurp(const std::string& name) const {
    std::ifstream in(path(name), std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  }

  RunResult run(const std::string& args, const std::string& env = "") const {
    const std::string log = path("cli_log.txt");
    const std::string cmd = env + (env.empty() ? "" : " ") + DUEL_CLI_PATH + " " + args + " > " +
                            log + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WEXITSTATUS(status);
    std::ifstream in(log, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    r.output = buf.str();
    return r;
  }

  // Shared tiny pipeline: corpus -> vocab -> tabular model.
  void make_pipeline() {
    write("corpus.txt", "ab\nba\nab\naa\n");
    ASSERT_EQ(run("build-vocab --corpus " + path("corpus.txt") + " --out " + path("vocab.json"))
                  .exit_code,
              0);
    ASSERT_EQ(run("train --corpus " + path("corpus.txt") + " --vocab " + path("vocab.json") +
                  " --kind tabular --lambda 0 --out " + path("model.json"))
                  .exit_code,
              0);
  }

  std::filesystem::path dir_;
};

TEST_F(CliTest, BuildVocabCharMode) {
  write("corpus.txt", "ab\nba\n");
  const auto r =
      run("build-vocab --corpus " + path("corpus.txt") + " --out " + path("vocab.json"));
  EXPECT_EQ(r.exit_code, 0);
  const std::string vocab = slurp("vocab.json");
  EXPECT_NE(vocab.find("\"a\""), std::string::npos);
  EXPECT_NE(vocab.find("\"b\""), std::string::npos);
}

TEST_F(CliTest, EmptyCorpusIsDataError) {
  write("empty.txt", "");
  const auto r = run("build-vocab --corpus " + path("empty.txt"));
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("EmptyCorpus"), std::string::npos);
}

TEST_F(CliTest, NonUniformLengthNamesTheLine) {
  write("ragged.txt", "ab\nabc\n");
  const auto r = run("build-vocab --corpus " + path("ragged.txt"));
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("NonUniformLength"), std::string::npos);
  EXPECT_NE(r.output.find("line 2"), std::string::npos);
}

TEST_F(CliTest, ArmExactPerplexityIsExpEmpiricalEntropyRate) {
  make_pipeline();
  const auto r = run("eval --corpus " + path("corpus.txt") + " --vocab " + path("vocab.json") +
                     " --model " + path("model.json") +
                     " --method arm-exact --out " + path("report.json"));
  ASSERT_EQ(r.exit_code, 0);
  // Empirical joint {ab: 1/2, ba: 1/4, aa: 1/4}: per-sequence NLL averages to
  // the joint entropy, so corpus PPL = exp(H / L).
  const double entropy = 0.5 * std::log(2.0) + 0.5 * std::log(4.0);
  const std::string report = slurp("report.json");
  ASSERT_NE(report.find("\"perplexity\""), std::string::npos);
  const double got = [&] {
    const auto pos = report.find("\"perplexity\": ");
    return std::stod(report.substr(pos + 14));
  }();
  EXPECT_NEAR(got, std::exp(entropy / 2.0), 1e-9);
}

TEST_F(CliTest, SequentialDuelMatchesArmExact) {
  make_pipeline();
  ASSERT_EQ(run("eval --corpus " + path("corpus.txt") + " --vocab " + path("vocab.json") +
                " --model " + path("model.json") + " --method duel --rule l2r:k=1 --out " +
                path("duel.csv") + " --format csv")
                .exit_code,
            0);
  ASSERT_EQ(run("eval --corpus " + path("corpus.txt") + " --vocab " + path("vocab.json") +
                " --model " + path("model.json") + " --method arm-exact --out " +
                path("arm.csv") + " --format csv")
                .exit_code,
            0);
  // Identical numbers; only the method column may differ.
  const auto after_method = [](const std::string& csv) {
    const auto row = csv.substr(csv.find('\n') + 1);
    return row.substr(row.find(','));
  };
  EXPECT_EQ(after_method(slurp("duel.csv")), after_method(slurp("arm.csv")));
}

TEST_F(CliTest, ElboMcWithZeroSamplesIsUsageError) {
  make_pipeline();
  const auto r = run("eval --corpus " + path("corpus.txt") + " --vocab " + path("vocab.json") +
                     " --model " + path("model.json") + " --method elbo-mc --mc-samples 0");
  EXPECT_EQ(r.exit_code, 1);
}

TEST_F(CliTest, RuleWithNonDuelMethodIsUsageError) {
  make_pipeline();
  const auto r = run("eval --corpus " + path("corpus.txt") + " --vocab " + path("vocab.json") +
                     " --model " + path("model.json") + " --method arm-exact --rule greedy:k=1");
  EXPECT_EQ(r.exit_code, 1);
}

TEST_F(CliTest, MismatchedModelAndCorpusIsDataError) {
  make_pipeline();
  write("long.txt", "aba\nbab\n");
  const auto r = run("eval --corpus " + path("long.txt") + " --vocab " + path("vocab.json") +
                     " --model " + path("model.json") + " --method arm-exact");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("LengthMismatch"), std::string::npos);
}

TEST_F(CliTest, ReportsAreByteIdenticalAcrossRuns) {
  make_pipeline();
  const std::string base = "eval --corpus " + path("corpus.txt") + " --vocab " +
                           path("vocab.json") + " --model " + path("model.json") +
                           " --method duel --rule greedy:k=1 --seed 99 --out ";
  ASSERT_EQ(run(base + path("r1.json")).exit_code, 0);
  ASSERT_EQ(run(base + path("r2.json")).exit_code, 0);
  const std::string a = slurp("r1.json");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp("r2.json"));
}

TEST_F(CliTest, ParallelEvaluationIsByteIdenticalToSerial) {
  make_pipeline();
  const std::string base = "eval --corpus " + path("corpus.txt") + " --vocab " +
                           path("vocab.json") + " --model " + path("model.json") +
                           " --method duel --rule margin:k=1 --seed 3 ";
  ASSERT_EQ(run(base + "--out " + path("serial.json")).exit_code, 0);
  ASSERT_EQ(run(base + "--parallel --out " + path("parallel.json")).exit_code, 0);
  // The parallel flag is recorded in the embedded config, so compare the
  // numeric payloads instead of whole files.
  std::string a = slurp("serial.json"), b = slurp("parallel.json");
  const auto strip = [](std::string s) {
    const auto pos = s.find("\"parallel\"");
    s.erase(pos, s.find('\n', pos) - pos);
    return s;
  };
  EXPECT_EQ(strip(a), strip(b));
}

TEST_F(CliTest, TrainMlpIsDeterministicPerSeed) {
  make_pipeline();
  const std::string base = "train --corpus " + path("corpus.txt") + " --vocab " +
                           path("vocab.json") +
                           " --kind mlp --hidden 6 --lr 0.1 --steps 50 --seed 11 --out ";
  ASSERT_EQ(run(base + path("m1.json")).exit_code, 0);
  ASSERT_EQ(run(base + path("m2.json")).exit_code, 0);
  EXPECT_EQ(slurp("m1.json"), slurp("m2.json"));
}

TEST_F(CliTest, SampleIsDeterministicAndDecodesText) {
  make_pipeline();
  const std::string base = "sample --model " + path("model.json") + " --vocab " +
                           path("vocab.json") +
                           " --rule greedy:k=1 --mc-samples 4 --seed 21 --out ";
  ASSERT_EQ(run(base + path("s1.json")).exit_code, 0);
  ASSERT_EQ(run(base + path("s2.json")).exit_code, 0);
  EXPECT_EQ(slurp("s1.json"), slurp("s2.json"));
  EXPECT_NE(slurp("s1.json").find("\"text\""), std::string::npos);
  EXPECT_NE(slurp("s1.json").find("\"token_entropy\""), std::string::npos);
}

TEST_F(CliTest, OracleSearchEmitsBlocksSchema) {
  make_pipeline();
  const auto r = run("oracle-search --corpus " + path("corpus.txt") + " --vocab " +
                     path("vocab.json") + " --model " + path("model.json") + " --block 2 --out " +
                     path("oracle.json"));
  ASSERT_EQ(r.exit_code, 0);
  const std::string out = slurp("oracle.json");
  EXPECT_NE(out.find("\"blocks\""), std::string::npos);
  EXPECT_NE(out.find("\"best_perm\""), std::string::npos);
  EXPECT_NE(out.find("\"perplexity\""), std::string::npos);
}

TEST_F(CliTest, CompareRulesCsvHasFixedColumns) {
  make_pipeline();
  const auto r = run("compare-rules --corpus " + path("corpus.txt") + " --vocab " +
                     path("vocab.json") + " --model " + path("model.json") +
                     " --rule greedy --k 1,2 --format csv --out " + path("sweep.csv"));
  ASSERT_EQ(r.exit_code, 0);
  const std::string csv = slurp("sweep.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "method,rule,k,mu,nu,nfe_target,nfe_realized,nll,ppl,gap_closed");
  EXPECT_NE(csv.find("greedy:k=2"), std::string::npos);
}

TEST_F(CliTest, VerifyPassesAndPrintsPerCheckLines) {
  const auto r = run("verify");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.output.find("PASS  collapse-exact-likelihood"), std::string::npos);
  EXPECT_NE(r.output.find("max_err"), std::string::npos);
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos);
}

TEST_F(CliTest, VerifyDegeneratesGracefullyAtCapOne) {
  const auto r = run("verify", "DUEL_ENUM_CAP=1");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.output.find("skipped"), std::string::npos);
}

TEST_F(CliTest, UnknownMethodIsUsageError) {
  make_pipeline();
  const auto r = run("eval --corpus " + path("corpus.txt") + " --vocab " + path("vocab.json") +
                     " --model " + path("model.json") + " --method nonsense");
  EXPECT_EQ(r.exit_code, 1);
}

// Negative control for the progress check: a selector that returns an empty
// set must fail with a named diagnostic.
TEST(VerifyProgress, FaultyRuleIsCaughtWithDiagnostics) {
  const auto d = fit_tabular({seq({0, 1}), seq({1, 0})}, 0.5, 2);
  std::vector<std::pair<std::string, verify::Selector>> selectors;
  selectors.emplace_back("faulty-empty",
                         [](const MaskedSequence&, const TokenProbabilityMatrix&, RuleState&) {
                           return PositionSet{};
                         });
  const auto result = verify::check_progress(d, selectors);
  EXPECT_FALSE(result.pass);
  EXPECT_NE(result.detail.find("faulty-empty"), std::string::npos);
  EXPECT_NE(result.detail.find("empty"), std::string::npos);

  // And a selector that re-selects revealed positions is caught too.
  selectors.clear();
  selectors.emplace_back("faulty-stuck",
                         [](const MaskedSequence& z, const TokenProbabilityMatrix&, RuleState&) {
                           return PositionSet{0};
                         });
  const auto stuck = verify::check_progress(d, selectors);
  EXPECT_FALSE(stuck.pass);
  EXPECT_NE(stuck.detail.find("faulty-stuck"), std::string::npos);
}

}  // namespace
