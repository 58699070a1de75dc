// Command-line surface: corpus ingestion, vocab/model persistence,
// evaluation drivers, the verification suite, and report emission.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "duel/duel.hpp"

namespace {

using namespace duel;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerify = 3;

bool is_usage_error(Errc code) {
  switch (code) {
    case Errc::BadConfig:
    case Errc::BadRuleSpec:
    case Errc::IllDefined:
      return true;
    default:
      return false;
  }
}

struct CommonFlags {
  std::string corpus;
  std::string vocab;
  std::string model;
  std::string method = "duel";
  std::string rule;
  std::string k_list;
  std::string mu_list;
  double nu = -1.0;
  int block = 0;
  int mc_samples = 1;
  std::uint64_t seed = 0;
  std::string out;
  std::string format = "json";
  bool parallel = false;
  std::string mode = "char";
  // train-only hyperparameters
  std::string kind = "tabular";
  double lambda = 0.0;
  int hidden = 16;
  double lr = 0.1;
  int steps = 1000;
};

void add_io_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--out", f.out, "Output file (stdout when omitted)");
  cmd->add_option("--format", f.format, "Output format: json or csv")
      ->check(CLI::IsMember({"json", "csv"}));
  cmd->add_option("--seed", f.seed, "RNG seed (always recorded in reports)");
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      fail(Errc::BadConfig, std::string("expected a number in ") + what + ": '" + item + "'");
    }
  }
  if (out.empty()) fail(Errc::BadConfig, std::string(what) + " must not be empty");
  return out;
}

/// Resolves --rule plus the --k/--mu/--nu shorthand overrides into one spec.
RuleSpec resolve_rule(const CommonFlags& f) {
  if (f.rule.empty()) fail(Errc::BadConfig, "method 'duel' requires --rule");
  const RuleSpec parsed = parse_rule(f.rule);
  const bool wrapped = parsed.kind == RuleKind::BlockRestrict;
  RuleSpec target = wrapped ? *parsed.inner : parsed;

  if (!f.k_list.empty()) {
    const auto ks = parse_list(f.k_list, "--k");
    if (ks.size() != 1) fail(Errc::BadConfig, "eval takes a single --k (lists are for compare-rules)");
    switch (target.kind) {
      case RuleKind::LeftToRight:
      case RuleKind::GreedyConfidence:
      case RuleKind::ProbMargin: target.k = static_cast<int>(ks[0]); break;
      default: fail(Errc::BadConfig, "--k applies to l2r, greedy and margin rules only");
    }
    if (target.k < 1) fail(Errc::BadRuleSpec, "k must be >= 1");
  }
  if (!f.mu_list.empty()) {
    const auto mus = parse_list(f.mu_list, "--mu");
    if (mus.size() != 1) fail(Errc::BadConfig, "eval takes a single --mu");
    if (target.kind != RuleKind::ConfThreshold && target.kind != RuleKind::Klass)
      fail(Errc::BadConfig, "--mu applies to thresh and klass rules only");
    if (!(mus[0] > 0.0 && mus[0] <= 1.0)) fail(Errc::BadRuleSpec, "mu must satisfy 0 < mu <= 1");
    target.mu = mus[0];
  }
  if (f.nu >= 0.0) {
    if (target.kind != RuleKind::Klass) fail(Errc::BadConfig, "--nu applies to klass rules only");
    target.nu = f.nu;
  }
  if (wrapped) return RuleSpec::block_restrict(parsed.block_size, std::move(target));
  if (f.block > 0) return RuleSpec::block_restrict(f.block, std::move(target));
  return target;
}

Model load_model_checked(const CommonFlags& f, const Vocabulary* vocab) {
  if (f.model.empty()) fail(Errc::BadConfig, "missing --model");
  Model model = load_model(f.model);
  if (vocab && model_vocab_size(model) != vocab->size())
    fail(Errc::BadModel, "model vocabulary size " + std::to_string(model_vocab_size(model)) +
                             " != vocab file size " + std::to_string(vocab->size()));
  return model;
}

std::vector<CleanSequence> load_corpus_checked(const CommonFlags& f, const Vocabulary& vocab,
                                               const Model* model) {
  if (f.corpus.empty()) fail(Errc::BadConfig, "missing --corpus");
  auto corpus = load_corpus(f.corpus, vocab, parse_tokenize_mode(f.mode));
  if (model && !corpus.empty() && corpus.front().length() != model_length(*model))
    fail(Errc::LengthMismatch, "corpus L = " + std::to_string(corpus.front().length()) +
                                   " does not match model L = " +
                                   std::to_string(model_length(*model)));
  return corpus;
}

void emit(const CommonFlags& f, const std::string& content) {
  if (f.out.empty())
    std::cout << content;
  else
    write_text_file(f.out, content);
}

std::map<std::string, std::string> resolved_config(const CommonFlags& f,
                                                   const std::string& command) {
  std::map<std::string, std::string> config;
  config["command"] = command;
  if (!f.corpus.empty()) config["corpus"] = f.corpus;
  if (!f.vocab.empty()) config["vocab"] = f.vocab;
  if (!f.model.empty()) config["model"] = f.model;
  config["method"] = f.method;
  if (!f.rule.empty()) config["rule"] = f.rule;
  if (!f.k_list.empty()) config["k"] = f.k_list;
  if (!f.mu_list.empty()) config["mu"] = f.mu_list;
  if (f.nu >= 0.0) config["nu"] = format_double(f.nu);
  if (f.block > 0) config["block"] = std::to_string(f.block);
  config["mc_samples"] = std::to_string(f.mc_samples);
  config["seed"] = std::to_string(f.seed);
  config["format"] = f.format;
  config["parallel"] = f.parallel ? "true" : "false";
  return config;
}

int cmd_build_vocab(const CommonFlags& f) {
  if (f.corpus.empty()) fail(Errc::BadConfig, "missing --corpus");
  const Vocabulary vocab = build_vocab(f.corpus, parse_tokenize_mode(f.mode));
  if (f.out.empty())
    std::cout << vocab_to_json(vocab).dump(2) << "\n";
  else
    save_vocab(f.out, vocab);
  return kExitOk;
}

int cmd_train(const CommonFlags& f) {
  if (f.vocab.empty()) fail(Errc::BadConfig, "missing --vocab");
  const Vocabulary vocab = load_vocab(f.vocab);
  const auto corpus = load_corpus_checked(f, vocab, nullptr);
  Model model = [&]() -> Model {
    if (f.kind == "tabular") return fit_tabular(corpus, f.lambda, vocab.size());
    if (f.kind == "mlp") {
      TrainableDenoiser net(corpus.front().length(), vocab.size(), f.hidden, f.lr, f.seed);
      return train(net, corpus, f.steps, f.lr, f.seed);
    }
    fail(Errc::BadConfig, "--kind must be 'tabular' or 'mlp'");
  }();
  if (f.out.empty())
    std::cout << model_to_json(model).dump(2) << "\n";
  else
    save_model(f.out, model);
  return kExitOk;
}

int cmd_eval(const CommonFlags& f) {
  if (f.vocab.empty()) fail(Errc::BadConfig, "missing --vocab");
  const Vocabulary vocab = load_vocab(f.vocab);
  const Model model = load_model_checked(f, &vocab);
  const auto corpus = load_corpus_checked(f, vocab, &model);

  EvalOptions opt;
  opt.method = parse_method(f.method);
  opt.seed = f.seed;
  opt.parallel = f.parallel;
  switch (opt.method) {
    case EvalMethod::Duel: opt.rule = resolve_rule(f); break;
    case EvalMethod::ElboMc:
      if (f.mc_samples < 1) fail(Errc::BadConfig, "--mc-samples must be >= 1 for elbo-mc");
      opt.mc_samples = f.mc_samples;
      break;
    case EvalMethod::Oracle:
      if (f.block < 1) fail(Errc::BadConfig, "method 'oracle' requires --block");
      opt.block_size = f.block;
      break;
    case EvalMethod::ElboExhaustive:
    case EvalMethod::ArmExact: break;
  }
  if (opt.method != EvalMethod::Duel && !f.rule.empty())
    fail(Errc::BadConfig, "--rule is only meaningful with method 'duel'");

  EvaluationReport report = std::visit(
      [&](const auto& d) { return evaluate_corpus(d, corpus, opt); }, model);
  report.config = resolved_config(f, "eval");
  emit(f, f.format == "csv" ? reports_to_csv({report}) : report_to_json(report).dump(2) + "\n");
  return kExitOk;
}

int cmd_sample(const CommonFlags& f) {
  const Model model = load_model_checked(f, nullptr);
  const RuleSpec rule = resolve_rule(f);
  if (f.mc_samples < 1) fail(Errc::BadConfig, "--mc-samples must be >= 1");
  std::optional<Vocabulary> vocab;
  if (!f.vocab.empty()) vocab = load_vocab(f.vocab);

  Json out;
  out["rule"] = format_rule(rule);
  out["seed"] = f.seed;
  out["config"] = Json::object();
  for (const auto& [key, value] : resolved_config(f, "sample")) out["config"][key] = value;
  Json samples = Json::array();
  std::vector<CleanSequence> drawn;
  double nfe_sum = 0.0;
  for (int i = 0; i < f.mc_samples; ++i) {
    const auto [x, record] = std::visit(
        [&](const auto& d) { return duel_sample(d, rule, f.seed, static_cast<std::uint64_t>(i)); },
        model);
    Json item;
    item["tokens"] = x.tokens;
    if (vocab) item["text"] = sequence_to_string(x, *vocab);
    item["nfe"] = record.nfe;
    item["loglik"] = record.total_loglik;
    samples.push_back(std::move(item));
    drawn.push_back(x);
    nfe_sum += record.nfe;
  }
  out["samples"] = std::move(samples);
  out["mean_nfe"] = nfe_sum / f.mc_samples;
  out["token_entropy"] = token_entropy(drawn);
  out["entropy_estimator"] = "unigram";
  emit(f, out.dump(2) + "\n");
  return kExitOk;
}

int cmd_oracle_search(const CommonFlags& f) {
  if (f.vocab.empty()) fail(Errc::BadConfig, "missing --vocab");
  if (f.block < 1) fail(Errc::BadConfig, "oracle-search requires --block");
  const Vocabulary vocab = load_vocab(f.vocab);
  const Model model = load_model_checked(f, &vocab);
  const auto corpus = load_corpus_checked(f, vocab, &model);

  Json out;
  out["config"] = Json::object();
  for (const auto& [key, value] : resolved_config(f, "oracle-search")) out["config"][key] = value;
  Json per_seq = Json::array();
  double total_nll = 0.0;
  long tokens = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const BlockSearchResult result = std::visit(
        [&](const auto& d) { return oracle_block_search(d, corpus[i], f.block); }, model);
    Json item = block_search_to_json(result);
    item["index"] = static_cast<int>(i);
    per_seq.push_back(std::move(item));
    total_nll += result.total_nll;
    tokens += corpus[i].length();
  }
  out["sequences"] = std::move(per_seq);
  out["total_nll"] = total_nll;
  out["perplexity"] = perplexity(total_nll, tokens);
  emit(f, out.dump(2) + "\n");
  return kExitOk;
}

int cmd_compare_rules(const CommonFlags& f) {
  if (f.vocab.empty()) fail(Errc::BadConfig, "missing --vocab");
  const Vocabulary vocab = load_vocab(f.vocab);
  const Model model = load_model_checked(f, &vocab);
  const auto corpus = load_corpus_checked(f, vocab, &model);

  const std::string family_name = f.rule.empty() ? "greedy" : f.rule;
  RuleKind family;
  std::vector<double> values;
  if (family_name == "l2r" || family_name == "greedy" || family_name == "margin") {
    family = family_name == "l2r"   ? RuleKind::LeftToRight
             : family_name == "greedy" ? RuleKind::GreedyConfidence
                                       : RuleKind::ProbMargin;
    values = parse_list(f.k_list.empty() ? "1,2,4" : f.k_list, "--k");
  } else if (family_name == "thresh") {
    family = RuleKind::ConfThreshold;
    if (f.mu_list.empty()) fail(Errc::BadConfig, "thresh sweep requires --mu values");
    values = parse_list(f.mu_list, "--mu");
  } else {
    fail(Errc::BadConfig, "compare-rules families: l2r, greedy, margin, thresh");
  }

  EvalOptions base;
  base.seed = f.seed;
  base.parallel = f.parallel;
  std::vector<EvaluationReport> reports = std::visit(
      [&](const auto& d) { return nfe_sweep(d, family, values, corpus, base, f.block); }, model);
  for (auto& report : reports) report.config = resolved_config(f, "compare-rules");

  if (f.format == "csv") {
    emit(f, reports_to_csv(reports));
  } else {
    Json out = Json::array();
    for (const auto& report : reports) out.push_back(report_to_json(report));
    emit(f, out.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_verify(const CommonFlags& f) {
  verify::VerifyConfig config;
  config.seed = f.seed == 0 ? 2026 : f.seed;
  if (const char* cap = std::getenv("DUEL_ENUM_CAP")) {
    try {
      config.max_len = std::max(1, std::stoi(cap));
    } catch (const std::exception&) {
      fail(Errc::BadConfig, "DUEL_ENUM_CAP must be an integer");
    }
  }
  const auto results = verify::run_verification(config);
  const std::string text = verify::format_results(results);
  std::cout << text;
  if (!f.out.empty()) write_text_file(f.out, text);
  const bool all_pass =
      std::all_of(results.begin(), results.end(), [](const auto& r) { return r.pass; });
  return all_pass ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale laboratory for masked diffusion samplers with exact likelihood"};
  app.require_subcommand(1);
  CommonFlags f;

  CLI::App* build = app.add_subcommand("build-vocab", "Build a vocabulary from a text corpus");
  build->add_option("--corpus", f.corpus, "Text corpus, one sequence per line")->required();
  build->add_option("--mode", f.mode, "Tokenization: char or whitespace")
      ->check(CLI::IsMember({"char", "whitespace"}));
  add_io_flags(build, f);

  CLI::App* train_cmd = app.add_subcommand("train", "Fit a tabular or MLP denoiser");
  train_cmd->add_option("--corpus", f.corpus, "Training corpus")->required();
  train_cmd->add_option("--vocab", f.vocab, "Vocabulary JSON")->required();
  train_cmd->add_option("--mode", f.mode, "Tokenization: char or whitespace");
  train_cmd->add_option("--kind", f.kind, "Denoiser kind: tabular or mlp")
      ->check(CLI::IsMember({"tabular", "mlp"}));
  train_cmd->add_option("--lambda", f.lambda, "Tabular smoothing (lambda >= 0)");
  train_cmd->add_option("--hidden", f.hidden, "MLP hidden width");
  train_cmd->add_option("--lr", f.lr, "MLP learning rate");
  train_cmd->add_option("--steps", f.steps, "MLP SGD steps");
  add_io_flags(train_cmd, f);

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a corpus under a model");
  eval->add_option("--corpus", f.corpus, "Evaluation corpus")->required();
  eval->add_option("--vocab", f.vocab, "Vocabulary JSON")->required();
  eval->add_option("--model", f.model, "Model JSON")->required();
  eval->add_option("--mode", f.mode, "Tokenization: char or whitespace");
  eval->add_option("--method", f.method,
                   "duel | elbo-mc | elbo-exhaustive | arm-exact | oracle");
  eval->add_option("--rule", f.rule, "Rule spec, e.g. greedy:k=1 or block:4:margin:k=2");
  eval->add_option("--k", f.k_list, "Override k of the rule");
  eval->add_option("--mu", f.mu_list, "Override mu of the rule");
  eval->add_option("--nu", f.nu, "Override nu of the rule");
  eval->add_option("--block", f.block, "Block size (oracle method or block restriction)");
  eval->add_option("--mc-samples", f.mc_samples, "Monte Carlo samples for elbo-mc");
  eval->add_flag("--parallel", f.parallel, "Evaluate sequences on several threads");
  add_io_flags(eval, f);

  CLI::App* sample = app.add_subcommand("sample", "Draw sequences from a model + rule");
  sample->add_option("--model", f.model, "Model JSON")->required();
  sample->add_option("--rule", f.rule, "Rule spec")->required();
  sample->add_option("--vocab", f.vocab, "Vocabulary JSON (adds human-readable text)");
  sample->add_option("--k", f.k_list, "Override k of the rule");
  sample->add_option("--mu", f.mu_list, "Override mu of the rule");
  sample->add_option("--nu", f.nu, "Override nu of the rule");
  sample->add_option("--block", f.block, "Wrap the rule in a block restriction");
  sample->add_option("--mc-samples", f.mc_samples, "Number of sequences to draw");
  add_io_flags(sample, f);

  CLI::App* oracle = app.add_subcommand("oracle-search", "Per-block optimal-order search");
  oracle->add_option("--corpus", f.corpus, "Evaluation corpus")->required();
  oracle->add_option("--vocab", f.vocab, "Vocabulary JSON")->required();
  oracle->add_option("--model", f.model, "Model JSON")->required();
  oracle->add_option("--mode", f.mode, "Tokenization: char or whitespace");
  oracle->add_option("--block", f.block, "Block size L'")->required();
  add_io_flags(oracle, f);

  CLI::App* compare = app.add_subcommand("compare-rules", "NFE sweep across one rule family");
  compare->add_option("--corpus", f.corpus, "Evaluation corpus")->required();
  compare->add_option("--vocab", f.vocab, "Vocabulary JSON")->required();
  compare->add_option("--model", f.model, "Model JSON")->required();
  compare->add_option("--mode", f.mode, "Tokenization: char or whitespace");
  compare->add_option("--rule", f.rule, "Family: l2r, greedy, margin or thresh");
  compare->add_option("--k", f.k_list, "Comma-separated k values (fixed-k families)");
  compare->add_option("--mu", f.mu_list, "Comma-separated mu values (thresh family)");
  compare->add_option("--block", f.block, "Apply a block restriction to each setting");
  compare->add_flag("--parallel", f.parallel, "Evaluate sequences on several threads");
  add_io_flags(compare, f);

  CLI::App* verify_cmd =
      app.add_subcommand("verify", "Run the brute-force theorem checks (DUEL_ENUM_CAP caps L)");
  add_io_flags(verify_cmd, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (build->parsed()) return cmd_build_vocab(f);
    if (train_cmd->parsed()) return cmd_train(f);
    if (eval->parsed()) return cmd_eval(f);
    if (sample->parsed()) return cmd_sample(f);
    if (oracle->parsed()) return cmd_oracle_search(f);
    if (compare->parsed()) return cmd_compare_rules(f);
    if (verify_cmd->parsed()) return cmd_verify(f);
  } catch (const DuelError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_usage_error(e.code()) ? kExitUsage : kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
