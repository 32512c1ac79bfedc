#pragma once

// Sub-command front end: synth-data, train, generate, evaluate, ablate.
// Every option lives on the root command so a single flat key=value
// configuration file serves all sub-commands; flags override the file.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mtn/checkpoint.hpp"
#include "mtn/data.hpp"
#include "mtn/decoding.hpp"
#include "mtn/metrics.hpp"
#include "mtn/model.hpp"
#include "mtn/training.hpp"

namespace mtn {

class CliError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 0;

  // model
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t rounds = 2;
  std::size_t ff_multiplier = 4;
  double dropout = 0.4;
  std::string pointer_sources = "summary,query";
  std::string features = "visual";

  // training
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::size_t warmup = 400;
  double label_smoothing = 0.1;
  double alpha = 1.0;
  double beta = 1.0;
  double lr_factor = 0.3;

  // synthetic corpus
  std::size_t n_train = 2000;
  std::size_t n_val = 200;
  std::size_t n_test = 200;
  std::size_t vocab_size = 100;
  std::string answer_mode = "mixed";

  // decoding
  std::size_t beam_size = 5;
  double length_penalty = 1.0;
  std::size_t max_len = 20;

  // paths
  std::string train_file, val_file, input_file, responses_file, references_file, out, log_file;
  std::vector<std::string> checkpoints;

  ModelConfig model_config(std::size_t vocab) const {
    ModelConfig c;
    c.d = d;
    c.heads = heads;
    c.rounds = rounds;
    c.ff_multiplier = ff_multiplier;
    c.dropout = dropout;
    c.pointers = PointerSources::parse(pointer_sources);
    c.features = FeatureModes::parse(features);
    c.vocab_size = vocab;
    c.validate();
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.warmup_steps = warmup;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.label_smoothing = label_smoothing;
    t.alpha = alpha;
    t.beta = beta;
    t.lr_factor = lr_factor;
    t.seed = seed;
    t.validate();
    return t;
  }

  /// Checks every setting that does not depend on the data.
  void validate() const {
    PointerSources::parse(pointer_sources);
    FeatureModes::parse(features);
    parse_answer_mode(answer_mode);
    train_config();
    beam_options();
    if (d == 0 || heads == 0 || d % heads != 0)
      throw std::invalid_argument("d (" + std::to_string(d) + ") must be a positive multiple of heads (" +
                                  std::to_string(heads) + ")");
  }

  BeamOptions beam_options() const {
    BeamOptions b;
    b.beam_size = beam_size;
    b.length_penalty = length_penalty;
    b.max_len = max_len;
    b.validate();
    return b;
  }
};

namespace cli_detail {

inline std::string require(const std::string &value, const char *flag) {
  if (value.empty()) throw CliError(std::string("missing required option ") + flag);
  return value;
}

inline std::vector<DialogExample> load_split(const std::string &path, const FeatureModes &features) {
  auto corpus = load_dialogs(path);
  for (auto &ex : corpus) {
    if (features.visual && !ex.visual) throw DataError(path + ": " + ex.dialog_id + " has no visual features");
    if (features.audio && !ex.audio) throw DataError(path + ": " + ex.dialog_id + " has no audio features");
  }
  return corpus;
}

struct TrainedModel {
  LoadedModel model;
  TrainResult result;
};

inline TrainedModel train_model(const RunConfig &rc, std::span<const DialogExample> train_raw,
                                std::span<const DialogExample> val_raw, std::ostream *log_stream) {
  Vocab vocab = build_vocab(train_raw);
  auto config = rc.model_config(vocab.size());
  auto tc = rc.train_config();
  auto train_set = encode_corpus(train_raw, vocab);
  auto val_set = encode_corpus(val_raw, vocab);
  MTNParams params = init_params(config, rc.seed);
  if (log_stream) *log_stream << kEpochLogHeader << '\n';
  auto result = train(params, config, train_set, val_set, tc, [&](const EpochLog &e) {
    if (log_stream) *log_stream << format_epoch_log(e) << '\n' << std::flush;
  });
  LoadedModel m{config, std::move(vocab), result.best.clone()};
  return {std::move(m), std::move(result)};
}

inline std::vector<GeneratedResponse> generate_all(std::span<const LoadedModel *const> models,
                                                   std::span<const DialogExample> corpus, const BeamOptions &opt) {
  std::vector<GeneratedResponse> out;
  out.reserve(corpus.size());
  for (auto &ex : corpus) out.push_back(generate_response(models, ex, opt));
  return out;
}

inline std::string pair_key(const std::string &dialog_id, int turn) { return dialog_id + "#" + std::to_string(turn); }

/// Pairs each response with every reference answer sharing its dialog id and turn.
inline std::vector<EvalPair> align_pairs(std::span<const GeneratedResponse> responses,
                                         std::span<const DialogExample> references) {
  std::map<std::string, std::vector<Words>> refs;
  for (auto &ex : references) refs[pair_key(ex.dialog_id, ex.turn)].push_back(tokenize(ex.answer));
  std::vector<EvalPair> pairs;
  for (auto &r : responses) {
    auto it = refs.find(pair_key(r.dialog_id, r.turn));
    if (it == refs.end())
      throw DataError("no reference for dialog " + r.dialog_id + " turn " + std::to_string(r.turn));
    pairs.push_back({tokenize(r.text()), it->second});
  }
  return pairs;
}

inline std::vector<GeneratedResponse> load_responses(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open responses file " + path.string());
  std::vector<GeneratedResponse> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      GeneratedResponse r;
      r.dialog_id = j.at("dialog_id").get<std::string>();
      r.turn = j.at("turn").get<int>();
      r.tokens = tokenize(j.at("response").get<std::string>());
      r.truncated = j.value("truncated", false);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception &e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_text(const std::filesystem::path &path, const std::string &text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CliError("cannot open " + path.string() + " for writing");
  os << text;
}

} // namespace cli_detail

// ---------------------------------------------------------------------------
// Commands

/// Writes train/val/test dialog files plus feature files under rc.out.
inline int cmd_synth_data(const RunConfig &rc, std::ostream &out) {
  const std::filesystem::path dir = cli_detail::require(rc.out, "--out");
  const auto features = FeatureModes::parse(rc.features);
  const std::pair<const char *, std::size_t> splits[] = {{"train", rc.n_train}, {"val", rc.n_val}, {"test", rc.n_test}};
  for (std::size_t k = 0; k < 3; ++k) {
    auto [name, n] = splits[k];
    if (n == 0) continue;
    SynthOptions opt;
    opt.seed = derive_seed(rc.seed, 0x5e1d, k);
    opt.n_examples = n;
    opt.vocab_size = rc.vocab_size;
    opt.mode = parse_answer_mode(rc.answer_mode);
    opt.visual = features.visual;
    opt.audio = features.audio;
    opt.id_prefix = name;
    auto corpus = synth_copy_corpus(opt);
    save_corpus(dir / (std::string(name) + ".jsonl"), corpus);
    out << name << ": " << corpus.size() << " examples -> " << (dir / (std::string(name) + ".jsonl")).string() << '\n';
  }
  return 0;
}

/// Trains on rc.train_file, selects by rc.val_file, writes the checkpoint to
/// rc.out and the epoch log next to it (or to rc.log_file).
inline int cmd_train(const RunConfig &rc, std::ostream &out) {
  const std::filesystem::path ckpt = cli_detail::require(rc.out, "--out");
  const auto features = FeatureModes::parse(rc.features);
  auto train_raw = cli_detail::load_split(cli_detail::require(rc.train_file, "--train"), features);
  std::vector<DialogExample> val_raw;
  if (!rc.val_file.empty()) val_raw = cli_detail::load_split(rc.val_file, features);
  const std::filesystem::path log_path =
      rc.log_file.empty() ? std::filesystem::path(ckpt.string() + ".log") : std::filesystem::path(rc.log_file);
  if (log_path.has_parent_path()) std::filesystem::create_directories(log_path.parent_path());
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw CliError("cannot open " + log_path.string() + " for writing");
  auto trained = cli_detail::train_model(rc, train_raw, val_raw, &log);
  if (ckpt.has_parent_path()) std::filesystem::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, trained.model.config, trained.model.vocab, trained.model.params);
  out << "best epoch " << trained.result.best_epoch << " val_loss " << trained.result.best_val_loss << " -> "
      << ckpt.string() << '\n';
  return 0;
}

/// Beam-search responses for rc.input_file; several checkpoints are ensembled.
inline int cmd_generate(const RunConfig &rc, std::ostream &out) {
  if (rc.checkpoints.empty()) throw CliError("missing required option --checkpoints");
  const std::filesystem::path out_path = cli_detail::require(rc.out, "--out");
  std::vector<LoadedModel> models;
  for (auto &c : rc.checkpoints) models.push_back(LoadedModel::from(load_checkpoint(c)));
  std::vector<const LoadedModel *> ptrs;
  for (auto &m : models) ptrs.push_back(&m);
  auto corpus = load_dialogs(cli_detail::require(rc.input_file, "--input"));
  auto responses = cli_detail::generate_all(ptrs, corpus, rc.beam_options());
  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  save_responses(out_path, responses);
  std::size_t truncated = 0;
  for (auto &r : responses) truncated += r.truncated;
  out << responses.size() << " responses (" << truncated << " truncated) -> " << out_path.string() << '\n';
  return 0;
}

/// Scores a responses file against a dialog file's answers. Prints the
/// aligned report; with --out also writes it as JSON.
inline int cmd_evaluate(const RunConfig &rc, std::ostream &out) {
  auto responses = cli_detail::load_responses(cli_detail::require(rc.responses_file, "--responses"));
  auto refs = load_dialogs(cli_detail::require(rc.references_file, "--references"), false);
  auto pairs = cli_detail::align_pairs(responses, refs);
  auto report = evaluate_corpus(pairs);
  out << report.to_text();
  if (!rc.out.empty()) cli_detail::write_text(rc.out, report.to_json().dump(2) + "\n");
  return 0;
}

struct AblationVariant {
  const char *label;
  const char *sources;
};

/// Pointer-source variants in table order.
inline constexpr AblationVariant kAblationVariants[] = {
    {"Summary+Query", "summary,query"}, {"History+Query", "history,query"},
    {"Summary+History+Query", "summary,history,query"},
    {"Summary", "summary"},             {"Query", "query"},
    {"History", "history"},             {"None", "none"}};

inline constexpr const char *kAblationColumns[] = {"BLEU1", "BLEU2", "BLEU3", "BLEU4", "METEOR", "ROUGE-L", "CIDEr"};

struct AblationRow {
  std::string label;
  MetricReport report;
  double accuracy = 0.0; // teacher-forced, on the evaluation split
  std::size_t best_epoch = 0;
};

inline std::string format_ablation_table(std::span<const AblationRow> rows) {
  std::ostringstream os;
  char buf[64];
  os << std::left << std::setw(24) << "Pointer Source";
  for (auto *c : kAblationColumns) os << std::setw(9) << c;
  os << '\n';
  for (auto &r : rows) {
    os << std::setw(24) << r.label;
    auto cell = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.4f", v);
      os << std::setw(9) << buf;
    };
    for (double b : r.report.bleu) cell(b);
    os << std::setw(9) << "n/a"; // METEOR is not computed
    cell(r.report.rouge_l);
    cell(r.report.cider);
    os << '\n';
  }
  return os.str();
}

/// Trains every pointer-source variant from the same seed, decodes the
/// evaluation split, and tabulates the metrics.
inline std::vector<AblationRow> run_ablation(const RunConfig &rc, std::span<const DialogExample> train_raw,
                                             std::span<const DialogExample> val_raw,
                                             std::span<const DialogExample> eval_raw,
                                             const std::filesystem::path &dir, std::ostream &progress) {
  std::vector<AblationRow> rows;
  for (auto &v : kAblationVariants) {
    RunConfig vrc = rc;
    vrc.pointer_sources = v.sources;
    std::ostringstream log;
    auto trained = cli_detail::train_model(vrc, train_raw, val_raw, &log);
    std::string slug = v.sources;
    std::replace(slug.begin(), slug.end(), ',', '+');
    if (!dir.empty()) {
      save_checkpoint(dir / (slug + ".ckpt"), trained.model.config, trained.model.vocab, trained.model.params);
      cli_detail::write_text(dir / (slug + ".log"), log.str());
    }
    const LoadedModel *ptr = &trained.model;
    auto responses = cli_detail::generate_all(std::span(&ptr, 1), eval_raw, vrc.beam_options());
    if (!dir.empty()) save_responses(dir / (slug + ".responses.jsonl"), responses);
    AblationRow row{v.label, evaluate_corpus(cli_detail::align_pairs(responses, eval_raw)), 0.0,
                    trained.result.best_epoch};
    auto encoded = encode_corpus(eval_raw, trained.model.vocab);
    row.accuracy = teacher_forced_accuracy(trained.model.params, trained.model.config, encoded);
    progress << v.label << ": BLEU1 " << row.report.bleu[0] << " accuracy " << row.accuracy << '\n';
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Ablation over the seven pointer-source variants. Evaluates on
/// rc.input_file (the validation split when absent) and writes the table
/// and per-variant artefacts under rc.out.
inline int cmd_ablate(const RunConfig &rc, std::ostream &out) {
  const std::filesystem::path dir = cli_detail::require(rc.out, "--out");
  const auto features = FeatureModes::parse(rc.features);
  auto train_raw = cli_detail::load_split(cli_detail::require(rc.train_file, "--train"), features);
  auto val_raw = cli_detail::load_split(cli_detail::require(rc.val_file, "--val"), features);
  auto eval_raw = rc.input_file.empty() ? val_raw : cli_detail::load_split(rc.input_file, features);
  std::filesystem::create_directories(dir);
  std::ostringstream progress;
  auto rows = run_ablation(rc, train_raw, val_raw, eval_raw, dir, progress);
  auto table = format_ablation_table(rows);
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (auto &r : rows) {
    auto m = r.report.to_json();
    m["METEOR"] = nullptr;
    j.push_back({{"variant", r.label}, {"metrics", m}, {"accuracy", r.accuracy}, {"best_epoch", r.best_epoch}});
  }
  cli_detail::write_text(dir / "ablation.txt", table);
  cli_detail::write_text(dir / "ablation.json", j.dump(2) + "\n");
  out << table;
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv, runs the chosen sub-command, and returns the exit status.
/// Failures print one diagnostic line to `err` and return nonzero.
inline int run_cli(int argc, const char *const *argv, std::ostream &out = std::cout, std::ostream &err = std::cerr) {
  RunConfig rc;
  CLI::App app{"Multimodal transformer with multi-source pointer generation"};
  app.set_config("--config", "", "Key=value configuration file; flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Show help for all sub-commands");

  app.add_option("--seed", rc.seed, "Seed for every random stream");
  app.add_option("--d", rc.d, "Model width");
  app.add_option("--heads", rc.heads, "Attention heads");
  app.add_option("--rounds", rc.rounds, "Attention rounds (N)");
  app.add_option("--ff-multiplier", rc.ff_multiplier, "Feed-forward inner width as a multiple of d");
  app.add_option("--dropout", rc.dropout, "Dropout rate");
  app.add_option("--pointer-sources", rc.pointer_sources, "Comma list from {summary,query,history} or none");
  app.add_option("--features", rc.features, "Comma list from {visual,audio} or none");
  app.add_option("--epochs", rc.epochs, "Training epochs");
  app.add_option("--batch-size", rc.batch_size, "Examples per update");
  app.add_option("--warmup", rc.warmup, "Warm-up steps of the learning-rate schedule");
  app.add_option("--label-smoothing", rc.label_smoothing, "Label smoothing on the generation loss");
  app.add_option("--alpha", rc.alpha, "Weight of the visual query auto-encoder loss");
  app.add_option("--beta", rc.beta, "Weight of the audio query auto-encoder loss");
  app.add_option("--lr-factor", rc.lr_factor, "Multiplier on the learning-rate schedule");
  app.add_option("--n-train", rc.n_train, "Synthetic training examples");
  app.add_option("--n-val", rc.n_val, "Synthetic validation examples");
  app.add_option("--n-test", rc.n_test, "Synthetic test examples");
  app.add_option("--vocab-size", rc.vocab_size, "Synthetic vocabulary size including reserved tokens");
  app.add_option("--answer-mode", rc.answer_mode, "Synthetic answers: summary, query or mixed");
  app.add_option("--beam-size", rc.beam_size, "Beam width");
  app.add_option("--length-penalty", rc.length_penalty, "Exponent of the length normaliser");
  app.add_option("--max-len", rc.max_len, "Longest generated response");
  app.add_option("--train", rc.train_file, "Training dialog file");
  app.add_option("--val", rc.val_file, "Validation dialog file");
  app.add_option("--input", rc.input_file, "Dialog file to decode");
  app.add_option("--responses", rc.responses_file, "Generated responses file");
  app.add_option("--references", rc.references_file, "Dialog file holding reference answers");
  app.add_option("--checkpoints", rc.checkpoints, "Checkpoint(s); several are ensembled")->delimiter(',');
  app.add_option("--log", rc.log_file, "Epoch log path (default: <checkpoint>.log)");
  app.add_option("--out", rc.out, "Output path or directory");

  std::map<std::string, int (*)(const RunConfig &, std::ostream &)> commands{
      {"synth-data", cmd_synth_data}, {"train", cmd_train},   {"generate", cmd_generate},
      {"evaluate", cmd_evaluate},     {"ablate", cmd_ablate}};
  const std::map<std::string, std::string> help{
      {"synth-data", "Write a synthetic copy-task corpus"},
      {"train", "Train a model and write its checkpoint"},
      {"generate", "Decode responses with one or more checkpoints"},
      {"evaluate", "Score responses against references"},
      {"ablate", "Train and score the seven pointer-source variants"}};
  for (auto &[name, _] : commands) app.add_subcommand(name, help.at(name))->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp &e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError &e) {
    err << "mtn: " << e.what() << '\n';
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }

  try {
    rc.validate();
    for (auto &[name, fn] : commands)
      if (app.got_subcommand(name)) return fn(rc, out);
  } catch (const std::exception &e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "mtn: error: " << msg << '\n';
    return 1;
  }
  return 1;
}

} // namespace mtn
