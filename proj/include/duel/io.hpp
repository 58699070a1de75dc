#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "duel/core.hpp"
#include "duel/denoiser.hpp"
#include "duel/engine.hpp"
#include "duel/errors.hpp"
#include "duel/metrics.hpp"
#include "duel/oracle.hpp"
#include "duel/trainable.hpp"

namespace duel {

using Json = nlohmann::ordered_json;

/// Shortest round-trip decimal for doubles; stable across runs so emitted
/// reports are byte-identical for identical inputs.
inline std::string format_double(double v) {
  char buf[32];
  const auto result = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, result.ptr);
}

namespace base64 {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string encode(const std::vector<std::uint8_t>& data) {
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < data.size(); i += 3) {
    std::uint32_t chunk = static_cast<std::uint32_t>(data[i]) << 16;
    if (i + 1 < data.size()) chunk |= static_cast<std::uint32_t>(data[i + 1]) << 8;
    if (i + 2 < data.size()) chunk |= data[i + 2];
    out.push_back(kAlphabet[(chunk >> 18) & 0x3F]);
    out.push_back(kAlphabet[(chunk >> 12) & 0x3F]);
    out.push_back(i + 1 < data.size() ? kAlphabet[(chunk >> 6) & 0x3F] : '=');
    out.push_back(i + 2 < data.size() ? kAlphabet[chunk & 0x3F] : '=');
  }
  return out;
}

inline std::vector<std::uint8_t> decode(const std::string& text) {
  auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  std::uint32_t chunk = 0;
  int have = 0;
  for (char c : text) {
    if (c == '=') break;
    const int v = value_of(c);
    if (v < 0) fail(Errc::BadModel, "invalid base64 payload");
    chunk = (chunk << 6) | static_cast<std::uint32_t>(v);
    have += 6;
    if (have >= 8) {
      have -= 8;
      out.push_back(static_cast<std::uint8_t>((chunk >> have) & 0xFF));
    }
  }
  return out;
}

}  // namespace base64

/// Little-endian packing of a double vector, independent of host endianness.
inline std::vector<std::uint8_t> pack_doubles(const std::vector<double>& values) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(values.size() * 8);
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
  }
  return bytes;
}

inline std::vector<double> unpack_doubles(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % 8 != 0) fail(Errc::BadModel, "parameter payload is not 8-byte aligned");
  std::vector<double> values(bytes.size() / 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b) bits = (bits << 8) | bytes[i * 8 + static_cast<std::size_t>(b)];
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

// ---------------------------------------------------------------------------
// Vocabulary and corpus
// ---------------------------------------------------------------------------

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::BadConfig, "cannot open for writing: " + path);
  out << content;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::BadConfig, "cannot open: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

inline Json vocab_to_json(const Vocabulary& vocab) {
  Json j;
  j["symbols"] = vocab.symbols;
  return j;
}

inline Vocabulary vocab_from_json(const Json& j) {
  if (!j.contains("symbols") || !j["symbols"].is_array())
    fail(Errc::BadVocabulary, "vocabulary file must contain a \"symbols\" array");
  return Vocabulary::from_symbols(j["symbols"].get<std::vector<std::string>>());
}

inline void save_vocab(const std::string& path, const Vocabulary& vocab) {
  write_text_file(path, vocab_to_json(vocab).dump(2) + "\n");
}

inline Vocabulary load_vocab(const std::string& path) {
  return vocab_from_json(Json::parse(read_text_file(path)));
}

enum class TokenizeMode { Char, Whitespace };

inline TokenizeMode parse_tokenize_mode(const std::string& name) {
  if (name == "char") return TokenizeMode::Char;
  if (name == "whitespace") return TokenizeMode::Whitespace;
  fail(Errc::BadConfig, "tokenize mode must be 'char' or 'whitespace'");
}

/// Splits a line into symbols: UTF-8 code points (char mode) or
/// whitespace-separated words.
inline std::vector<std::string> tokenize_line(const std::string& line, TokenizeMode mode) {
  std::vector<std::string> out;
  if (mode == TokenizeMode::Whitespace) {
    std::istringstream in(line);
    std::string word;
    while (in >> word) out.push_back(word);
    return out;
  }
  for (std::size_t i = 0; i < line.size();) {
    const auto byte = static_cast<unsigned char>(line[i]);
    std::size_t width = 1;
    if ((byte & 0xE0) == 0xC0) width = 2;
    else if ((byte & 0xF0) == 0xE0) width = 3;
    else if ((byte & 0xF8) == 0xF0) width = 4;
    width = std::min(width, line.size() - i);
    out.push_back(line.substr(i, width));
    i += width;
  }
  return out;
}

/// Lines of a one-sequence-per-line corpus file, tokenized. A trailing final
/// newline is tolerated; interior blank lines are length-0 sequences and will
/// fail the uniform-length check downstream.
inline std::vector<std::vector<std::string>> tokenize_corpus_file(const std::string& path,
                                                                  TokenizeMode mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::BadConfig, "cannot open corpus: " + path);
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(tokenize_line(line, mode));
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) fail(Errc::EmptyCorpus, "corpus has no sequences: " + path);
  return lines;
}

/// Deterministic vocabulary over a corpus file: distinct symbols, sorted.
/// Rejects non-uniform sequence lengths, naming the first offending line.
inline Vocabulary build_vocab(const std::string& corpus_path, TokenizeMode mode) {
  const auto lines = tokenize_corpus_file(corpus_path, mode);
  const std::size_t length = lines.front().size();
  std::vector<std::string> symbols;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].size() != length)
      fail(Errc::NonUniformLength,
           "line " + std::to_string(i + 1) + " has " + std::to_string(lines[i].size()) +
               " tokens, expected " + std::to_string(length));
    for (const std::string& s : lines[i]) symbols.push_back(s);
  }
  std::sort(symbols.begin(), symbols.end());
  symbols.erase(std::unique(symbols.begin(), symbols.end()), symbols.end());
  return Vocabulary::from_symbols(std::move(symbols));
}

inline std::vector<CleanSequence> load_corpus(const std::string& path, const Vocabulary& vocab,
                                              TokenizeMode mode) {
  const auto lines = tokenize_corpus_file(path, mode);
  const std::size_t length = lines.front().size();
  std::vector<CleanSequence> corpus;
  corpus.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].size() != length)
      fail(Errc::NonUniformLength,
           "line " + std::to_string(i + 1) + " has " + std::to_string(lines[i].size()) +
               " tokens, expected " + std::to_string(length));
    CleanSequence seq;
    for (const std::string& s : lines[i]) {
      const auto id = vocab.find(s);
      if (!id)
        fail(Errc::InvalidToken,
             "line " + std::to_string(i + 1) + ": symbol '" + s + "' not in vocabulary");
      seq.tokens.push_back(*id);
    }
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

/// Human-readable dump; masked entries render as "<mask>".
inline std::string sequence_to_string(const MaskedSequence& z, const Vocabulary& vocab,
                                      const std::string& sep = " ") {
  std::string out;
  for (Position p = 0; p < z.length(); ++p) {
    if (p) out += sep;
    out += z.is_masked(p) ? "<mask>" : vocab.symbol(z.at(p));
  }
  return out;
}

inline std::string sequence_to_string(const CleanSequence& x, const Vocabulary& vocab,
                                      const std::string& sep = " ") {
  return sequence_to_string(MaskedSequence::from_clean(x, vocab.size()), vocab, sep);
}

// ---------------------------------------------------------------------------
// Model persistence: JSON header + payload
// ---------------------------------------------------------------------------

using Model = std::variant<TabularBayesDenoiser, TrainableDenoiser>;

inline Json model_to_json(const TabularBayesDenoiser& d) {
  Json j;
  j["kind"] = "tabular";
  j["L"] = d.length();
  j["V"] = d.vocab_size();
  j["lambda"] = d.lambda();
  j["total"] = d.total_count();
  Json pairs = Json::array();
  for (const auto& [seq, count] : d.counts()) pairs.push_back(Json::array({seq.tokens, count}));
  j["joint"] = std::move(pairs);
  return j;
}

inline Json model_to_json(const TrainableDenoiser& d) {
  Json j;
  j["kind"] = "mlp";
  j["L"] = d.length();
  j["V"] = d.vocab_size();
  j["H"] = d.hidden();
  j["eta"] = d.learning_rate();
  j["params"] = base64::encode(pack_doubles(d.params()));
  return j;
}

inline Json model_to_json(const Model& model) {
  return std::visit([](const auto& d) { return model_to_json(d); }, model);
}

inline Model model_from_json(const Json& j) {
  const std::string kind = j.value("kind", "");
  if (kind == "tabular") {
    std::map<CleanSequence, double> counts;
    for (const auto& pair : j.at("joint"))
      counts[CleanSequence{pair.at(0).get<std::vector<TokenId>>()}] = pair.at(1).get<double>();
    return TabularBayesDenoiser(std::move(counts), j.at("total").get<double>(),
                                j.at("lambda").get<double>(), j.at("L").get<int>(),
                                j.at("V").get<int>());
  }
  if (kind == "mlp") {
    return TrainableDenoiser(j.at("L").get<int>(), j.at("V").get<int>(), j.at("H").get<int>(),
                             j.at("eta").get<double>(),
                             unpack_doubles(base64::decode(j.at("params").get<std::string>())));
  }
  fail(Errc::BadModel, "unknown model kind '" + kind + "'");
}

inline void save_model(const std::string& path, const Model& model) {
  write_text_file(path, model_to_json(model).dump(2) + "\n");
}

inline Model load_model(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::BadModel, std::string("cannot parse model file: ") + e.what());
  }
  return model_from_json(j);
}

inline int model_length(const Model& m) {
  return std::visit([](const auto& d) { return d.length(); }, m);
}

inline int model_vocab_size(const Model& m) {
  return std::visit([](const auto& d) { return d.vocab_size(); }, m);
}

// ---------------------------------------------------------------------------
// Records and reports (positions 1-based in all emitted JSON)
// ---------------------------------------------------------------------------

inline Json trajectory_to_json(const TrajectoryRecord& record) {
  Json j;
  Json partition = Json::array();
  for (const PositionSet& part : record.partition.parts) {
    Json p = Json::array();
    for (Position pos : part) p.push_back(display_position(pos));
    partition.push_back(std::move(p));
  }
  j["partition"] = std::move(partition);
  Json logprobs = Json::array();
  for (const auto& step : record.step_logprobs) {
    Json s = Json::array();
    for (const auto& [pos, lp] : step) s.push_back(Json::array({display_position(pos), lp}));
    logprobs.push_back(std::move(s));
  }
  j["logprobs"] = std::move(logprobs);
  j["nfe"] = record.nfe;
  j["loglik"] = record.total_loglik;
  if (record.support_miss) j["support_miss"] = true;
  return j;
}

inline Json block_search_to_json(const BlockSearchResult& result) {
  Json j;
  j["nll"] = result.total_nll;
  Json blocks = Json::array();
  for (const auto& block : result.blocks) {
    Json b;
    b["index"] = block.index;
    Json perm = Json::array();
    for (Position p : block.best_perm) perm.push_back(display_position(p));
    b["best_perm"] = std::move(perm);
    b["nll"] = block.nll;
    blocks.push_back(std::move(b));
  }
  j["blocks"] = std::move(blocks);
  return j;
}

inline Json report_to_json(const EvaluationReport& report) {
  Json j;
  j["method"] = method_name(report.method);
  j["rule"] = report.rule;
  j["seed"] = report.seed;
  Json config = Json::object();
  for (const auto& [key, value] : report.config) config[key] = value;
  j["config"] = std::move(config);
  Json seqs = Json::array();
  for (const SequenceRecord& r : report.sequences) {
    Json s;
    s["index"] = r.index;
    s["nll"] = r.nll;
    s["length"] = r.length;
    s["nfe"] = r.nfe;
    if (r.support_miss) s["support_miss"] = true;
    seqs.push_back(std::move(s));
  }
  j["sequences"] = std::move(seqs);
  Json agg;
  agg["total_nll"] = report.total_nll;
  agg["token_count"] = report.token_count;
  agg["perplexity"] = report.ppl;
  agg["mean_nfe"] = report.mean_nfe;
  if (report.nfe_target) agg["nfe_target"] = *report.nfe_target;
  if (report.gap_closed_pct) agg["gap_closed"] = *report.gap_closed_pct;
  j["aggregate"] = std::move(agg);
  j["external_metrics"] = nullptr;  // reserved for attachments (e.g. MAUVE)
  return j;
}

inline std::string report_csv_header() {
  return "method,rule,k,mu,nu,nfe_target,nfe_realized,nll,ppl,gap_closed";
}

inline std::string report_csv_row(const EvaluationReport& report) {
  std::string k, mu, nu;
  if (!report.rule.empty()) {
    const RuleSpec rule = parse_rule(report.rule);
    const RuleSpec& eff = rule.effective();
    switch (eff.kind) {
      case RuleKind::LeftToRight:
      case RuleKind::GreedyConfidence:
      case RuleKind::ProbMargin: k = std::to_string(eff.k); break;
      case RuleKind::ConfThreshold: mu = format_double(eff.mu); break;
      case RuleKind::Klass:
        mu = format_double(eff.mu);
        nu = format_double(eff.nu);
        break;
      default: break;
    }
  }
  std::string row = std::string(method_name(report.method)) + "," + report.rule + "," + k + "," +
                    mu + "," + nu + ",";
  row += report.nfe_target ? format_double(*report.nfe_target) : "";
  row += "," + format_double(report.mean_nfe);
  row += "," + format_double(report.total_nll);
  row += "," + format_double(report.ppl);
  row += ",";
  if (report.gap_closed_pct) row += format_double(*report.gap_closed_pct);
  return row;
}

inline std::string reports_to_csv(const std::vector<EvaluationReport>& reports) {
  std::string out = report_csv_header() + "\n";
  for (const EvaluationReport& r : reports) out += report_csv_row(r) + "\n";
  return out;
}

}  // namespace duel
