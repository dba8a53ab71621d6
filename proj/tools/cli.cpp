#include "fvlm/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <memory>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "fvlm/checkpoint.hpp"
#include "fvlm/corpus.hpp"
#include "fvlm/error.hpp"
#include "fvlm/eval.hpp"
#include "fvlm/io.hpp"
#include "fvlm/rescoring.hpp"
#include "fvlm/train.hpp"

namespace fvlm::cli {
namespace {

struct Settings {
  std::string config;
  std::size_t threads = 1;

  std::string corpus;
  std::string out;
  std::string vocab;
  std::size_t max_size = 10000;
  std::size_t min_count = 1;

  std::string arch;
  std::string train;
  std::string valid;
  std::string extractor;
  std::string predictor;
  LmConfig lm;
  /// 0 means "take it from the extractor or predictor".
  std::size_t fv_dim = 0;
  TrainConfig tc;
  std::size_t float_width = 8;
  bool log_steps = false;

  std::string model;
  std::vector<std::string> models;
  std::vector<std::string> names;
  std::string prefix;
  std::string input;
  std::size_t max_len = 50;

  std::string history_lengths = "0,1,2,3,5";
  std::size_t bleu_max_len = 0;
  std::string csv;

  std::string nbest;
  std::string references;
  std::string selection;
  std::string audit;
  double lm_scale = 1.0;
  std::string weights;
  std::string interpolation = "log-linear";
  bool grid_search = false;
};

struct Parser {
  std::unique_ptr<CLI::App> app;
  std::map<std::string, CLI::App*> commands;
};

std::string key_of(const std::string& flag) {
  std::string key = flag.substr(flag.find_first_not_of('-'));
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

std::string long_flag(const CLI::Option* opt) {
  const auto& names = opt->get_lnames();
  return names.empty() ? std::string() : "--" + names.front();
}

void add_model_shape(CLI::App* cmd, Settings& s) {
  cmd->add_option("--embed-dim", s.lm.embed_dim, "Word embedding width")->capture_default_str();
  cmd->add_option("--hidden-dim", s.lm.hidden_dim, "LSTM hidden width")->capture_default_str();
  cmd->add_option("--num-layers", s.lm.num_layers, "LSTM layers (total, for every architecture)")
      ->capture_default_str();
  cmd->add_option("--mt-shared-layers", s.lm.mt_shared_layers, "Multi-task trunk layers")
      ->capture_default_str();
  cmd->add_option("--mt-branch-layers", s.lm.mt_branch_layers,
                  "Multi-task layers per branch (word and future vector)")
      ->capture_default_str();
  cmd->add_option("--lambda-mt", s.lm.lambda_mt, "Weight of the future-vector MSE in the multi-task loss")
      ->capture_default_str();
  cmd->add_option("--fv-dim", s.fv_dim,
                  "Future-vector width; 0 takes it from the extractor or predictor")
      ->capture_default_str();
}

void add_schedule(CLI::App* cmd, Settings& s) {
  cmd->add_option("--lr", s.tc.learning_rate, "Initial SGD learning rate")->capture_default_str();
  cmd->add_option("--clip", s.tc.clip_norm, "Global gradient-norm clipping threshold")->capture_default_str();
  cmd->add_option("--epochs", s.tc.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--seed", s.tc.seed, "Seed for initialization and shuffling (FVLM_SEED overrides the config file)")
      ->capture_default_str();
  cmd->add_option("--valid-fraction", s.tc.valid_fraction,
                  "Share of the training corpus held out when --valid is absent")
      ->capture_default_str();
  cmd->add_option("--lr-decay", s.tc.lr_decay, "Learning-rate multiplier after stalled epochs")
      ->capture_default_str();
  cmd->add_option("--patience", s.tc.patience, "Stalled epochs before the learning rate decays")
      ->capture_default_str();
  cmd->add_option("--shuffle", s.tc.shuffle, "Shuffle sentences every epoch (true/false)")
      ->capture_default_str();
  cmd->add_option("--sum-loss", s.tc.sum_over_positions,
                  "Step on the summed rather than the mean sentence loss (true/false)")
      ->capture_default_str();
}

Parser make_parser(Settings& s) {
  Parser p;
  p.app = std::make_unique<CLI::App>("Future-vector enhanced LSTM language models", "fvlm");
  p.app->require_subcommand(1);
  p.app->set_help_all_flag("--help-all", "Help for every subcommand");

  auto add = [&](const std::string& name, const std::string& description) {
    CLI::App* cmd = p.app->add_subcommand(name, description);
    cmd->add_option("--config", s.config, "Config file of key = value lines");
    p.commands[name] = cmd;
    return cmd;
  };

  CLI::App* cmd = add("build-vocab", "Build a vocabulary from a one-sentence-per-line corpus");
  cmd->add_option("--corpus", s.corpus, "Training text")->required();
  cmd->add_option("--out", s.out, "Vocabulary file to write")->required();
  cmd->add_option("--max-size", s.max_size, "Vocabulary size including <s>, </s>, <unk>")
      ->capture_default_str();
  cmd->add_option("--min-count", s.min_count, "Drop words seen fewer times")->capture_default_str();

  cmd = add("train", "Train one architecture and write a checkpoint");
  cmd->add_option("--arch", s.arch, "baseline | reversed | fv-predictor | enhanced | mt")->required();
  cmd->add_option("--train", s.train, "Training text")->required();
  cmd->add_option("--valid", s.valid, "Validation text");
  cmd->add_option("--vocab", s.vocab, "Vocabulary file")->required();
  cmd->add_option("--out", s.out, "Checkpoint to write")->required();
  cmd->add_option("--extractor", s.extractor, "Reversed-LM checkpoint (fv-predictor, mt)");
  cmd->add_option("--predictor", s.predictor, "FV-predictor checkpoint (enhanced)");
  add_model_shape(cmd, s);
  add_schedule(cmd, s);
  cmd->add_option("--float-width", s.float_width, "Checkpoint float width in bytes (4 or 8)")
      ->capture_default_str();
  cmd->add_flag("--log-steps", s.log_steps, "Log the loss of every training sentence");

  cmd = add("extract-fv", "Write the future vectors of every position of a corpus");
  cmd->add_option("--extractor", s.extractor, "Reversed-LM checkpoint")->required();
  cmd->add_option("--vocab", s.vocab, "Vocabulary file")->required();
  cmd->add_option("--corpus", s.corpus, "Text to process")->required();
  cmd->add_option("--out", s.out, "Output file")->required();

  cmd = add("generate", "Greedy continuation of prefixes");
  cmd->add_option("--model", s.model, "Language-model checkpoint")->required();
  cmd->add_option("--vocab", s.vocab, "Vocabulary file")->required();
  cmd->add_option("--prefix", s.prefix, "Prefix words (may be empty)");
  cmd->add_option("--input", s.input, "File of prefixes, one per line");
  cmd->add_option("--max-len", s.max_len, "Maximum generated tokens")->capture_default_str();
  cmd->add_option("--out", s.out, "Output file (default: standard output)");

  cmd = add("eval-ppl", "Perplexity of one or more models on a corpus");
  cmd->add_option("--model", s.models, "Language-model checkpoint (repeatable)")->required();
  cmd->add_option("--vocab", s.vocab, "Vocabulary file")->required();
  cmd->add_option("--corpus", s.corpus, "Test text")->required();
  cmd->add_option("--threads", s.threads, "Worker threads")->capture_default_str();

  cmd = add("eval-bleu", "Sequence prediction: greedy continuation scored by BLEU per history length");
  cmd->add_option("--model", s.models, "Language-model checkpoint (repeatable)")->required();
  cmd->add_option("--name", s.names, "Display name per model (default: file stem)");
  cmd->add_option("--vocab", s.vocab, "Vocabulary file")->required();
  cmd->add_option("--corpus", s.corpus, "Test text")->required();
  cmd->add_option("--history-lengths", s.history_lengths, "Comma-separated history lengths")
      ->capture_default_str();
  cmd->add_option("--max-len", s.bleu_max_len, "Generation cap; 0 means 2 x reference length + 5")
      ->capture_default_str();
  cmd->add_option("--csv", s.csv, "Also write model,metric,history_length,value rows here");
  cmd->add_option("--threads", s.threads, "Worker threads")->capture_default_str();

  cmd = add("rescore", "Rescore n-best lists with interpolated language models");
  cmd->add_option("--nbest", s.nbest, "N-best file (utt<TAB>acoustic<TAB>text)")->required();
  cmd->add_option("--model", s.models, "Language-model checkpoint (repeatable)")->required();
  cmd->add_option("--vocab", s.vocab, "Vocabulary file")->required();
  cmd->add_option("--lm-scale", s.lm_scale, "LM weight against the acoustic score")->capture_default_str();
  cmd->add_option("--weights", s.weights, "Comma-separated interpolation weights (default: equal)");
  cmd->add_option("--interpolation", s.interpolation, "log-linear | linear")->capture_default_str();
  cmd->add_option("--out", s.out, "Selected hypotheses (default: standard output)");
  cmd->add_option("--audit", s.audit, "Per-hypothesis, per-model score table");
  cmd->add_option("--threads", s.threads, "Worker threads")->capture_default_str();

  cmd = add("eval-wer", "Word error rate of a selection, or a rescoring report over model subsets");
  cmd->add_option("--references", s.references, "Reference file (utt<TAB>text)")->required();
  cmd->add_option("--nbest", s.nbest, "N-best file, for oracle bounds and model rescoring");
  cmd->add_option("--selection", s.selection, "Selected hypotheses written by rescore");
  cmd->add_option("--model", s.models, "Language-model checkpoint (repeatable)");
  cmd->add_option("--name", s.names, "Display name per model (default: file stem)");
  cmd->add_option("--vocab", s.vocab, "Vocabulary file (with --model)");
  cmd->add_option("--lm-scale", s.lm_scale, "LM weight against the acoustic score")->capture_default_str();
  cmd->add_option("--interpolation", s.interpolation, "log-linear | linear")->capture_default_str();
  cmd->add_flag("--grid-search", s.grid_search, "Pick the lm scale in 0.5..2.0 with the lowest WER");
  cmd->add_option("--threads", s.threads, "Worker threads")->capture_default_str();

  return p;
}

// --- Helpers ----------------------------------------------------------------

std::string one_line(std::string text) {
  std::replace(text.begin(), text.end(), '\n', ' ');
  std::replace(text.begin(), text.end(), '\r', ' ');
  return text;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) {
    std::istringstream in(item);
    T value{};
    in >> value;
    if (!in || !in.eof()) throw ConfigError(std::string("bad ") + what + " entry '" + item + "'");
    out.push_back(value);
  }
  if (out.empty()) throw ConfigError(std::string(what) + " is empty");
  return out;
}

Interpolation parse_interpolation(const std::string& name) {
  if (name == "log-linear") return Interpolation::log_linear;
  if (name == "linear") return Interpolation::linear;
  throw ConfigError("unknown interpolation '" + name + "' (expected log-linear or linear)");
}

std::string stem(const std::string& path) { return std::filesystem::path(path).stem().string(); }

std::vector<std::string> display_names(const Settings& s) {
  if (s.names.empty()) {
    std::vector<std::string> out;
    for (const auto& m : s.models) out.push_back(stem(m));
    return out;
  }
  if (s.names.size() != s.models.size()) {
    throw ConfigError(std::to_string(s.names.size()) + " names for " + std::to_string(s.models.size()) +
                      " models");
  }
  return s.names;
}

void warn_vocab(const Checkpoint& c, const Vocabulary& vocab, const std::string& path,
                std::ostream& err) {
  if (auto warning = vocab_mismatch(c, vocab)) err << "warning: " << path << ": " << *warning << '\n';
}

LanguageModel load_lm(const std::string& path, const Vocabulary& vocab, std::ostream& err) {
  Checkpoint c = load_checkpoint(path);
  warn_vocab(c, vocab, path, err);
  LanguageModel model = to_language_model(std::move(c.model));
  if (vocab_size(model) != vocab.size()) {
    throw ConfigError(path + " has vocabulary size " + std::to_string(vocab_size(model)) +
                      " but the vocabulary file has " + std::to_string(vocab.size()) + " words");
  }
  return model;
}

std::vector<LanguageModel> load_lms(const Settings& s, const Vocabulary& vocab, std::ostream& err) {
  std::vector<LanguageModel> models;
  for (const auto& path : s.models) models.push_back(load_lm(path, vocab, err));
  return models;
}

std::vector<const LanguageModel*> pointers(const std::vector<LanguageModel>& models) {
  std::vector<const LanguageModel*> out;
  for (const auto& m : models) out.push_back(&m);
  return out;
}

void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
  } else {
    write_file_atomic(path, text);
  }
}

std::string fmt(double value) {
  std::ostringstream s;
  s << std::setprecision(10) << value;
  return s.str();
}

NBestFile load_nbest_logged(const std::string& path, std::ostream& err) {
  NBestFile file = load_nbest(path);
  for (const auto& issue : file.issues) {
    err << "warning: " << path << ":" << issue.line << ": " << issue.message << '\n';
  }
  return file;
}

// --- Commands ---------------------------------------------------------------

void build_vocab(const Settings& s, std::ostream& err) {
  const Vocabulary vocab = Vocabulary::build(s.corpus, s.max_size, s.min_count);
  vocab.save(s.out);
  err << "wrote " << s.out << " words=" << vocab.size() << '\n';
}

void train(const Settings& s, std::ostream& err) {
  const ArchKind kind = parse_arch(s.arch);
  if (kind == ArchKind::enhanced && s.predictor.empty()) {
    throw ConfigError(
        "--arch enhanced needs the FV-predictor checkpoint (--predictor); train it first with "
        "--arch fv-predictor");
  }
  if (kind == ArchKind::fv_predictor && s.extractor.empty()) {
    throw ConfigError(
        "--arch fv-predictor needs the reversed extractor checkpoint (--extractor); train it first "
        "with --arch reversed");
  }
  const Vocabulary vocab = Vocabulary::load(s.vocab);
  Corpus train_set = read_corpus(vocab, s.train);
  Corpus valid_set;
  if (!s.valid.empty()) {
    valid_set = read_corpus(vocab, s.valid);
  } else {
    std::tie(train_set, valid_set) = split_validation(train_set, s.tc.valid_fraction);
  }
  err << "train sentences=" << train_set.size() << " valid sentences=" << valid_set.size() << '\n';

  LmConfig config = s.lm;
  config.fv_dim = s.fv_dim ? s.fv_dim : s.lm.hidden_dim;
  auto take_fv_dim = [&](std::size_t width, const char* source) {
    if (s.fv_dim && s.fv_dim != width) {
      throw ConfigError("--fv-dim " + std::to_string(s.fv_dim) + " does not match the " + source +
                        " width " + std::to_string(width));
    }
    config.fv_dim = width;
  };

  TrainHooks hooks;
  hooks.on_epoch = [&err](const EpochLog& e) {
    err << "epoch=" << e.epoch << " ce=" << fmt(e.ce) << " mse=" << fmt(e.mse) << " ppl=" << fmt(e.ppl)
        << " total=" << fmt(e.total) << " valid=" << fmt(e.valid_metric) << " lr=" << fmt(e.learning_rate)
        << " improved=" << (e.improved ? 1 : 0) << '\n';
  };
  if (s.log_steps) {
    hooks.on_step = [&err](const StepLog& st) {
      err << "step epoch=" << st.epoch << " sentence=" << st.sentence << " ce=" << fmt(st.loss.ce)
          << " mse=" << fmt(st.loss.mse) << " total=" << fmt(st.loss.total) << '\n';
    };
  }
  if (s.float_width != 4 && s.float_width != 8) throw ConfigError("--float-width must be 4 or 8");
  const FloatWidth width = s.float_width == 4 ? FloatWidth::f32 : FloatWidth::f64;

  auto load_extractor = [&]() {
    if (s.extractor.empty()) {
      throw ConfigError("--arch " + s.arch +
                        " needs the reversed extractor checkpoint (--extractor); train it first with "
                        "--arch reversed");
    }
    Checkpoint c = load_checkpoint(s.extractor, ArchKind::reversed);
    warn_vocab(c, vocab, s.extractor, err);
    return std::get<BaselineLm>(std::move(c.model));
  };

  AnyModel model;
  switch (kind) {
    case ArchKind::baseline:
    case ArchKind::reversed:
      config.validate(kind);
      model = train_lm(train_set, valid_set, vocab.size(), config, s.tc,
                       kind == ArchKind::reversed ? Direction::reversed : Direction::forward, hooks);
      break;
    case ArchKind::fv_predictor: {
      const BaselineLm extractor = load_extractor();
      take_fv_dim(extractor.stack.output_dim(), "extractor");
      config.validate(kind);
      model = train_fv_predictor(train_set, valid_set, extractor, config, s.tc, hooks);
      break;
    }
    case ArchKind::enhanced: {
      Checkpoint c = load_checkpoint(s.predictor, ArchKind::fv_predictor);
      warn_vocab(c, vocab, s.predictor, err);
      const FvPredictor predictor = std::get<FvPredictor>(std::move(c.model));
      take_fv_dim(predictor.fv_dim(), "predictor");
      config.validate(kind);
      model = train_enhanced(train_set, valid_set, predictor, config, s.tc, hooks);
      break;
    }
    case ArchKind::multitask: {
      std::optional<BaselineLm> extractor;
      if (config.lambda_mt > 0.0 || !s.extractor.empty()) {
        extractor = load_extractor();
        take_fv_dim(extractor->stack.output_dim(), "extractor");
      }
      config.validate(kind);
      model = train_mt(train_set, valid_set, vocab.size(), extractor ? &*extractor : nullptr, config,
                       s.tc, hooks);
      break;
    }
  }
  save_checkpoint(model, vocab.hash(), s.out, width);
  err << "wrote " << s.out << '\n';
}

void extract_fv(const Settings& s, std::ostream& err) {
  const Vocabulary vocab = Vocabulary::load(s.vocab);
  Checkpoint c = load_checkpoint(s.extractor, ArchKind::reversed);
  warn_vocab(c, vocab, s.extractor, err);
  const BaselineLm extractor = std::get<BaselineLm>(std::move(c.model));
  const Corpus corpus = read_corpus(vocab, s.corpus);
  std::ostringstream text;
  text << std::setprecision(17);
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const auto z = extract_future_vectors(extractor, corpus[k]);
    for (std::size_t t = 0; t < z.size(); ++t) {
      text << k << '\t' << t << '\t';
      for (std::size_t j = 0; j < z[t].size(); ++j) text << (j ? " " : "") << z[t][j];
      text << '\n';
    }
  }
  write_file_atomic(s.out, text.str());
  err << "wrote " << s.out << " sentences=" << corpus.size() << '\n';
}

void generate(const Settings& s, std::ostream& out, std::ostream& err) {
  const Vocabulary vocab = Vocabulary::load(s.vocab);
  const LanguageModel model = load_lm(s.model, vocab, err);
  std::vector<std::string> prefixes;
  if (!s.input.empty()) {
    prefixes = read_lines(s.input);
  } else {
    prefixes.push_back(s.prefix);
  }
  std::string text;
  for (const auto& prefix : prefixes) {
    TokenSequence seq = encode(vocab, prefix);
    seq.ids.pop_back();
    const auto continuation = greedy_continue(model, seq.ids, s.max_len);
    std::string line = join_words(vocab, std::vector<TokenId>(seq.ids.begin() + 1, seq.ids.end()));
    const std::string tail = join_words(vocab, continuation);
    if (!line.empty() && !tail.empty()) line += ' ';
    text += line + tail + '\n';
  }
  emit(s.out, text, out);
}

void eval_ppl(const Settings& s, std::ostream& out, std::ostream& err) {
  const Vocabulary vocab = Vocabulary::load(s.vocab);
  const Corpus corpus = read_corpus(vocab, s.corpus);
  for (const auto& path : s.models) {
    const LanguageModel model = load_lm(path, vocab, err);
    const auto r = perplexity(model, corpus, s.threads);
    out << "model=" << path << " ppl=" << fmt(r.perplexity) << " ce=" << fmt(r.cross_entropy)
        << " positions=" << r.positions << " clamped=" << r.clamped << '\n';
  }
}

void eval_bleu(const Settings& s, std::ostream& out, std::ostream& err) {
  const Vocabulary vocab = Vocabulary::load(s.vocab);
  const Corpus corpus = read_corpus(vocab, s.corpus);
  SeqPredOptions options;
  options.history_lengths = parse_list<std::size_t>(s.history_lengths, "--history-lengths");
  options.max_len = s.bleu_max_len;
  options.threads = s.threads;
  const auto names = display_names(s);
  std::vector<std::pair<std::string, SeqPredReport>> rows;
  std::string csv;
  for (std::size_t k = 0; k < s.models.size(); ++k) {
    const LanguageModel model = load_lm(s.models[k], vocab, err);
    rows.emplace_back(names[k], sequence_prediction_eval(model, corpus, options));
    for (const auto& h : rows.back().second.by_history) {
      if (h.skipped) {
        err << "model=" << names[k] << " history=" << h.history_length << " skipped=" << h.skipped << '\n';
      }
    }
    csv += format_seqpred_csv(names[k], rows.back().second);
  }
  out << format_seqpred_table(rows);
  if (s.csv.empty()) {
    out << '\n' << csv;
  } else {
    write_file_atomic(s.csv, csv);
  }
}

RescoreConfig rescore_config(const Settings& s) {
  RescoreConfig config;
  config.lm_scale = s.lm_scale;
  config.interpolation = parse_interpolation(s.interpolation);
  if (!s.weights.empty()) config.weights = parse_list<double>(s.weights, "--weights");
  return config;
}

void rescore_cmd(const Settings& s, std::ostream& out, std::ostream& err) {
  const Vocabulary vocab = Vocabulary::load(s.vocab);
  const NBestFile file = load_nbest_logged(s.nbest, err);
  const auto models = load_lms(s, vocab, err);
  const RescoreConfig config = rescore_config(s);
  config.resolved_weights(models.size());
  const ScoreTable table = score_nbest(file.lists, pointers(models), vocab, s.threads);
  const auto selections = select_hypotheses(file.lists, table, config);
  std::vector<NBestList> chosen;
  for (std::size_t u = 0; u < file.lists.size(); ++u) {
    for (std::size_t r = 0; r < table.oov[u].size(); ++r) {
      if (table.oov[u][r]) {
        err << "oov utterance=" << file.lists[u].utterance_id << " rank=" << r << " count=" << table.oov[u][r]
            << '\n';
      }
    }
    chosen.push_back({file.lists[u].utterance_id, {file.lists[u].entries[selections[u].chosen]}});
  }
  emit(s.out, format_nbest(chosen), out);
  if (!s.audit.empty()) {
    write_file_atomic(s.audit, format_audit(file.lists, table, selections, display_names(s)));
  }
}

std::string wer_line(const std::string& label, const EditCounts& c) {
  std::ostringstream line;
  line << label << " wer=" << std::fixed << std::setprecision(4) << 100.0 * c.rate()
       << " substitutions=" << c.substitutions << " insertions=" << c.insertions
       << " deletions=" << c.deletions << " reference_words=" << c.reference_length << '\n';
  return line.str();
}

void eval_wer(const Settings& s, std::ostream& out, std::ostream& err) {
  const auto references = load_references(s.references);
  if (s.selection.empty() && s.models.empty()) {
    throw ConfigError("eval-wer needs --selection or at least one --model");
  }
  std::optional<NBestFile> nbest;
  if (!s.nbest.empty()) nbest = load_nbest_logged(s.nbest, err);

  if (!s.selection.empty()) {
    const NBestFile selected = load_nbest_logged(s.selection, err);
    EditCounts total;
    for (const auto& list : selected.lists) {
      if (list.entries.size() != 1) {
        throw FormatError(s.selection + ": utterance '" + list.utterance_id + "' has " +
                          std::to_string(list.entries.size()) + " lines, expected 1");
      }
      const auto it = references.find(list.utterance_id);
      if (it == references.end()) {
        throw ValidationError("no reference transcript for utterance '" + list.utterance_id + "'");
      }
      total += wer(split_whitespace(list.entries.front().text), split_whitespace(it->second));
    }
    out << wer_line("selection", total);
    if (nbest) {
      const auto bounds =
          evaluate_selection(nbest->lists, references, std::vector<std::size_t>(nbest->lists.size(), 0));
      out << wer_line("oracle", bounds.oracle) << wer_line("anti-oracle", bounds.anti_oracle);
    }
  }

  if (!s.models.empty()) {
    if (!nbest) throw ConfigError("eval-wer with --model needs --nbest");
    if (s.vocab.empty()) throw ConfigError("eval-wer with --model needs --vocab");
    const Vocabulary vocab = Vocabulary::load(s.vocab);
    const auto models = load_lms(s, vocab, err);
    const ScoreTable table = score_nbest(nbest->lists, pointers(models), vocab, s.threads);
    RescoreConfig config;
    config.lm_scale = s.lm_scale;
    config.interpolation = parse_interpolation(s.interpolation);
    if (s.grid_search) {
      config.lm_scale = grid_search_lm_scale(nbest->lists, references, table, config);
      err << "grid-search lm_scale=" << fmt(config.lm_scale) << '\n';
    }
    const auto rows = evaluate_rescoring(nbest->lists, references, table, display_names(s),
                                         all_model_subsets(models.size()), config.lm_scale,
                                         config.interpolation);
    out << format_wer_table(rows);
  }
}

// --- Driver -----------------------------------------------------------------

const char* kind_of_error(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ValidationError*>(&e)) return "validation";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
  if (dynamic_cast<const TrainingError*>(&e)) return "training";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  return "internal";
}

std::set<std::string> known_keys(const Parser& p) {
  std::set<std::string> keys;
  for (const auto& [name, cmd] : p.commands) {
    for (const auto* opt : cmd->get_options()) {
      const std::string flag = long_flag(opt);
      if (!flag.empty() && flag != "--help" && flag != "--help-all" && flag != "--config") keys.insert(key_of(flag));
    }
  }
  return keys;
}

// Value of --config in the raw arguments, if any.
std::string config_path(const std::vector<std::string>& args) {
  for (std::size_t k = 0; k < args.size(); ++k) {
    if (args[k] == "--config" && k + 1 < args.size()) return args[k + 1];
    if (args[k].rfind("--config=", 0) == 0) return args[k].substr(9);
  }
  return {};
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
    return a == flag || a.rfind(flag + "=", 0) == 0;
  });
}

}  // namespace

std::map<std::string, std::string> parse_config(std::istream& in) {
  std::map<std::string, std::string> values;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line.erase(0, line.find_first_not_of(" \t\r"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    key.erase(key.find_last_not_of(" \t") + 1);
    value.erase(0, value.find_first_not_of(" \t"));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    std::replace(key.begin(), key.end(), '-', '_');
    if (!values.emplace(key, value).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key + "' repeated");
    }
  }
  return values;
}

std::vector<CommandInfo> describe_commands() {
  Settings s;
  Parser p = make_parser(s);
  std::vector<CommandInfo> out;
  for (const auto* cmd : p.app->get_subcommands({})) {
    CommandInfo info{cmd->get_name(), cmd->get_description(), {}};
    for (const auto* opt : cmd->get_options()) {
      const std::string flag = long_flag(opt);
      if (flag.empty() || flag == "--help" || flag == "--help-all") continue;
      info.options.push_back({flag, opt->get_description(), opt->get_required()});
    }
    out.push_back(std::move(info));
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Settings s;
  Parser p = make_parser(s);
  try {
    std::vector<std::string> argv = args;
    std::map<std::string, std::string> sources;

    // Config-file values and FVLM_SEED become ordinary flags placed ahead of
    // the user's own, and only for flags the user did not pass.
    const std::string cfg_path = config_path(args);
    const auto sub = std::find_if(args.begin(), args.end(), [&](const std::string& a) {
      return p.commands.count(a) != 0;
    });
    if (sub != args.end()) {
      CLI::App* cmd = p.commands.at(*sub);
      std::vector<std::string> injected;
      if (!cfg_path.empty()) {
        std::ifstream in(cfg_path);
        if (!in) throw IoError("cannot read config file " + cfg_path);
        const auto values = parse_config(in);
        const auto keys = known_keys(p);
        for (const auto& [key, value] : values) {
          if (!keys.count(key)) throw ConfigError("unknown config key '" + key + "' in " + cfg_path);
          std::string flag = "--" + key;
          std::replace(flag.begin(), flag.end(), '_', '-');
          CLI::Option* opt = nullptr;
          for (auto* o : cmd->get_options()) {
            if (long_flag(o) == flag) opt = o;
          }
          if (!opt || given_on_command_line(args, flag)) continue;
          if (opt->get_type_size_max() > 1 || opt->get_expected_max() > 1) {
            for (const auto& item : split_list(value)) injected.push_back(flag + "=" + item);
          } else {
            injected.push_back(flag + "=" + value);
          }
          sources[flag] = "file";
        }
      }
      if (const char* env = std::getenv("FVLM_SEED"); env && *env && !given_on_command_line(args, "--seed")) {
        bool has_seed = false;
        for (auto* o : cmd->get_options()) has_seed = has_seed || long_flag(o) == "--seed";
        if (has_seed) {
          injected.erase(std::remove_if(injected.begin(), injected.end(),
                                        [](const std::string& a) { return a.rfind("--seed=", 0) == 0; }),
                         injected.end());
          injected.push_back(std::string("--seed=") + env);
          sources["--seed"] = "env";
        }
      }
      argv.insert(argv.begin() + (sub - args.begin()) + 1, injected.begin(), injected.end());
    }

    std::vector<std::string> reversed(argv.rbegin(), argv.rend());
    try {
      p.app->parse(reversed);
    } catch (const CLI::CallForHelp&) {
      out << p.app->help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << p.app->help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      // Subcommand --help lands here too; print that subcommand's help.
      for (const auto& [name, cmd] : p.commands) {
        if (cmd->parsed() && cmd->get_help_ptr() && cmd->get_help_ptr()->count()) {
          out << cmd->help();
          return 0;
        }
      }
      err << "error: usage: " << one_line(e.what()) << '\n';
      return 1;
    }

    const CLI::App* cmd = p.app->get_subcommands().front();
    for (const auto* opt : cmd->get_options()) {
      const std::string flag = long_flag(opt);
      if (flag.empty() || flag == "--help" || flag == "--help-all") continue;
      std::string value;
      if (opt->count()) {
        for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
      } else {
        value = opt->get_default_str();
      }
      std::string source = sources.count(flag) ? sources[flag] : (opt->count() ? "flag" : "default");
      err << "config " << key_of(flag) << "=" << value << " source=" << source << '\n';
    }

    const std::string name = cmd->get_name();
    if (name == "build-vocab") build_vocab(s, err);
    else if (name == "train") train(s, err);
    else if (name == "extract-fv") extract_fv(s, err);
    else if (name == "generate") generate(s, out, err);
    else if (name == "eval-ppl") eval_ppl(s, out, err);
    else if (name == "eval-bleu") eval_bleu(s, out, err);
    else if (name == "rescore") rescore_cmd(s, out, err);
    else if (name == "eval-wer") eval_wer(s, out, err);
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << kind_of_error(e) << ": " << one_line(e.what()) << '\n';
    return 1;
  }
}

}  // namespace fvlm::cli
