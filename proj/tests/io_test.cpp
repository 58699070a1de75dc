#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "duel/io.hpp"
#include "test_util.hpp"

using namespace duel;
using testutil::seq;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("duel_io_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void write(const std::string& name, const std::string& content) const {
    std::ofstream out(path(name), std::ios::binary);
    out << content;
  }

  std::filesystem::path dir_;
};

TEST(Base64, RoundTripsArbitraryBytes) {
  std::vector<std::uint8_t> data;
  for (int i = 0; i < 300; ++i) data.push_back(static_cast<std::uint8_t>((i * 7 + 13) & 0xFF));
  for (std::size_t take : {0u, 1u, 2u, 3u, 299u, 300u}) {
    const std::vector<std::uint8_t> slice(data.begin(), data.begin() + take);
    EXPECT_EQ(base64::decode(base64::encode(slice)), slice);
  }
  EXPECT_EQ(base64::encode({'M', 'a', 'n'}), "TWFu");  // RFC 4648 vector
}

TEST(DoublePacking, LittleEndianRoundTrip) {
  const std::vector<double> values = {0.0, -0.0, 1.0, -1.5, 3.141592653589793, 1e-300, -1e300};
  EXPECT_EQ(unpack_doubles(pack_doubles(values)), values);
  const auto bytes = pack_doubles({1.0});
  EXPECT_EQ(bytes.size(), 8u);
  EXPECT_EQ(bytes[7], 0x3F);  // IEEE-754 1.0 big byte last => little-endian
  EXPECT_EQ(bytes[6], 0xF0);
}

class IoFiles : public TempDir {};

TEST_F(IoFiles, VocabularyRoundTrip) {
  const auto vocab = Vocabulary::from_symbols({"a", "b", "c"});
  save_vocab(path("vocab.json"), vocab);
  const auto loaded = load_vocab(path("vocab.json"));
  EXPECT_EQ(loaded.symbols, vocab.symbols);
}

TEST_F(IoFiles, BuildVocabSortsSymbols) {
  write("corpus.txt", "ba\nab\nbb\n");
  const auto vocab = build_vocab(path("corpus.txt"), TokenizeMode::Char);
  EXPECT_EQ(vocab.symbols, (std::vector<std::string>{"a", "b"}));
}

TEST_F(IoFiles, BuildVocabWhitespaceMode) {
  write("corpus.txt", "the cat\ncat the\n");
  const auto vocab = build_vocab(path("corpus.txt"), TokenizeMode::Whitespace);
  EXPECT_EQ(vocab.symbols, (std::vector<std::string>{"cat", "the"}));
}

TEST_F(IoFiles, EmptyCorpusRejected) {
  write("corpus.txt", "");
  try {
    build_vocab(path("corpus.txt"), TokenizeMode::Char);
    FAIL() << "expected EmptyCorpus";
  } catch (const DuelError& e) {
    EXPECT_EQ(e.code(), Errc::EmptyCorpus);
  }
}

TEST_F(IoFiles, NonUniformLengthNamesTheOffendingLine) {
  write("corpus.txt", "ab\nabc\nab\n");
  try {
    build_vocab(path("corpus.txt"), TokenizeMode::Char);
    FAIL() << "expected NonUniformLength";
  } catch (const DuelError& e) {
    EXPECT_EQ(e.code(), Errc::NonUniformLength);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST_F(IoFiles, LoadCorpusMapsSymbolsToIds) {
  write("corpus.txt", "ab\nba\n");
  const auto vocab = build_vocab(path("corpus.txt"), TokenizeMode::Char);
  const auto corpus = load_corpus(path("corpus.txt"), vocab, TokenizeMode::Char);
  ASSERT_EQ(corpus.size(), 2u);
  EXPECT_EQ(corpus[0], seq({0, 1}));
  EXPECT_EQ(corpus[1], seq({1, 0}));
}

TEST_F(IoFiles, LoadCorpusRejectsUnknownSymbols) {
  write("corpus.txt", "ab\ncb\n");
  const auto vocab = Vocabulary::from_symbols({"a", "b"});
  try {
    load_corpus(path("corpus.txt"), vocab, TokenizeMode::Char);
    FAIL() << "expected InvalidToken";
  } catch (const DuelError& e) {
    EXPECT_EQ(e.code(), Errc::InvalidToken);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST_F(IoFiles, TabularModelRoundTripsExactly) {
  const auto d = fit_tabular({seq({0, 1}), seq({1, 0}), seq({0, 1})}, 0.25, 2);
  save_model(path("model.json"), d);
  const Model loaded = load_model(path("model.json"));
  const auto& t = std::get<TabularBayesDenoiser>(loaded);
  EXPECT_EQ(t.length(), 2);
  EXPECT_EQ(t.vocab_size(), 2);
  EXPECT_DOUBLE_EQ(t.lambda(), 0.25);
  EXPECT_EQ(t.counts(), d.counts());
  EXPECT_DOUBLE_EQ(t.joint(seq({0, 1})), d.joint(seq({0, 1})));
}

TEST_F(IoFiles, TrainableModelRoundTripsBitExactly) {
  const TrainableDenoiser net(3, 2, 5, 0.05, 99);
  save_model(path("mlp.json"), net);
  const Model loaded = load_model(path("mlp.json"));
  const auto& m = std::get<TrainableDenoiser>(loaded);
  EXPECT_EQ(m.params(), net.params());
  EXPECT_EQ(m.hidden(), 5);
  EXPECT_DOUBLE_EQ(m.learning_rate(), 0.05);
}

TEST_F(IoFiles, BadModelFileRejected) {
  write("bad.json", "{\"kind\": \"mystery\"}");
  try {
    load_model(path("bad.json"));
    FAIL() << "expected BadModel";
  } catch (const DuelError& e) {
    EXPECT_EQ(e.code(), Errc::BadModel);
  }
  write("worse.json", "not json");
  EXPECT_THROW(load_model(path("worse.json")), DuelError);
}

TEST(HumanDump, MaskRendersAsMaskToken) {
  const auto vocab = Vocabulary::from_symbols({"a", "b"});
  const auto z = MaskedSequence({0, 2, 1}, 2);
  EXPECT_EQ(sequence_to_string(z, vocab), "a <mask> b");
}

TEST(TrajectoryJson, PositionsAreOneBased) {
  const auto d = fit_tabular({seq({0, 0}), seq({1, 1})}, 0.0, 2);
  const auto record = duel_exact_loglik(d, RuleSpec::left_to_right(2), seq({0, 0}));
  const Json j = trajectory_to_json(record);
  EXPECT_EQ(j["partition"][0][0], 1);
  EXPECT_EQ(j["partition"][0][1], 2);
  EXPECT_EQ(j["nfe"], 1);
  EXPECT_DOUBLE_EQ(j["loglik"].get<double>(), record.total_loglik);
  EXPECT_EQ(j["logprobs"][0].size(), 2u);
}

TEST(BlockSearchJson, SchemaFields) {
  const auto d = fit_tabular({seq({0, 0}), seq({1, 1})}, 0.5, 2);
  const Json j = block_search_to_json(oracle_block_search(d, seq({0, 0}), 2));
  EXPECT_TRUE(j.contains("nll"));
  ASSERT_EQ(j["blocks"].size(), 1u);
  EXPECT_EQ(j["blocks"][0]["index"], 0);
  EXPECT_GE(j["blocks"][0]["best_perm"][0].get<int>(), 1);
}

TEST(ReportEmission, CsvColumnsFixedOrder) {
  EXPECT_EQ(report_csv_header(), "method,rule,k,mu,nu,nfe_target,nfe_realized,nll,ppl,gap_closed");
  const auto d = fit_tabular({seq({0, 0}), seq({1, 1})}, 0.0, 2);
  EvalOptions opt;
  opt.method = EvalMethod::Duel;
  opt.rule = RuleSpec::greedy(2);
  EvaluationReport report = evaluate_corpus(d, {seq({0, 0})}, opt);
  report.nfe_target = 1.0;
  const std::string row = report_csv_row(report);
  EXPECT_EQ(row.substr(0, row.find(',')), "duel");
  EXPECT_NE(row.find("greedy:k=2"), std::string::npos);
  // k lands in column 3
  std::size_t commas = 0, pos = 0;
  while (commas < 2) pos = row.find(',', pos) + 1, ++commas;
  EXPECT_EQ(row[pos], '2');
}

TEST(ReportEmission, JsonEmbedsConfigSeedAndReservedField) {
  const auto d = fit_tabular({seq({0, 0}), seq({1, 1})}, 0.0, 2);
  EvalOptions opt;
  opt.method = EvalMethod::ArmExact;
  opt.seed = 1234;
  EvaluationReport report = evaluate_corpus(d, {seq({0, 0})}, opt);
  report.config["corpus"] = "toy.txt";
  const Json j = report_to_json(report);
  EXPECT_EQ(j["seed"], 1234);
  EXPECT_EQ(j["config"]["corpus"], "toy.txt");
  EXPECT_TRUE(j.contains("external_metrics"));
  EXPECT_TRUE(j["external_metrics"].is_null());
  EXPECT_EQ(j["method"], "arm-exact");
}

TEST(ReportEmission, DumpIsDeterministic) {
  const auto d = fit_tabular({seq({0, 1}), seq({1, 0})}, 0.3, 2);
  EvalOptions opt;
  opt.method = EvalMethod::Duel;
  opt.rule = RuleSpec::threshold(0.6);
  const auto a = report_to_json(evaluate_corpus(d, {seq({0, 1})}, opt)).dump(2);
  const auto b = report_to_json(evaluate_corpus(d, {seq({0, 1})}, opt)).dump(2);
  EXPECT_EQ(a, b);
}

}  // namespace
