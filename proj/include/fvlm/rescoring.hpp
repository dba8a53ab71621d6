#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fvlm/corpus.hpp"
#include "fvlm/models.hpp"

namespace fvlm {

struct NBestEntry {
  std::string utterance_id;
  /// Natural-log acoustic score.
  double acoustic_score = 0.0;
  std::optional<double> original_lm_score;
  std::string text;
};

/// Hypotheses of one utterance in decoder order (index = rank).
struct NBestList {
  std::string utterance_id;
  std::vector<NBestEntry> entries;
};

struct ParseIssue {
  std::size_t line = 0;
  std::string message;
};

struct NBestFile {
  std::vector<NBestList> lists;
  std::vector<ParseIssue> issues;
};

/// Lines are "utt<TAB>acoustic<TAB>text" or
/// "utt<TAB>acoustic<TAB>lm<TAB>text". Entries are grouped by utterance in
/// first-seen order; malformed lines land in issues with their line number.
NBestFile parse_nbest(std::istream& in);
/// Throws FormatError when no line parses.
NBestFile load_nbest(const std::filesystem::path& path);
std::string format_nbest(const std::vector<NBestList>& lists);

/// "utt<TAB>reference text" lines.
std::map<std::string, std::string> load_references(const std::filesystem::path& path);
std::map<std::string, std::string> parse_references(std::istream& in);

enum class Interpolation {
  /// Weighted sum of log-probabilities.
  log_linear,
  /// log of the weighted sum of probabilities.
  linear,
};

struct RescoreConfig {
  double lm_scale = 1.0;
  /// Empty means equal weights.
  std::vector<double> weights;
  Interpolation interpolation = Interpolation::log_linear;

  /// Weights for model_count models; throws ConfigError unless they are
  /// non-negative and sum to 1 within 1e-9.
  std::vector<double> resolved_weights(std::size_t model_count) const;
};

/// LM log-probabilities of every hypothesis under every model:
/// scores[list][entry][model].
struct ScoreTable {
  std::vector<std::vector<std::vector<double>>> scores;
  /// Hypothesis words mapped to <unk>, per [list][entry].
  std::vector<std::vector<std::size_t>> oov;
};

/// Throws ConfigError when models disagree on vocabulary size with vocab.
ScoreTable score_nbest(const std::vector<NBestList>& lists,
                       const std::vector<const LanguageModel*>& models, const Vocabulary& vocab,
                       std::size_t threads = 1);

struct HypothesisScore {
  double combined_lm = 0.0;
  double total = 0.0;
};

struct UtteranceSelection {
  std::string utterance_id;
  std::size_t chosen = 0;
  std::vector<HypothesisScore> hypotheses;
};

/// Interpolated LM score of one hypothesis.
double combine_lm_scores(const std::vector<double>& model_scores, const std::vector<double>& weights,
                         Interpolation mode);

/// total = acoustic + lm_scale * combined; argmax per utterance, ties to
/// the earliest rank.
std::vector<UtteranceSelection> select_hypotheses(const std::vector<NBestList>& lists,
                                                  const ScoreTable& table,
                                                  const RescoreConfig& config);

std::vector<UtteranceSelection> rescore(const std::vector<NBestList>& lists,
                                        const std::vector<const LanguageModel*>& models,
                                        const Vocabulary& vocab, const RescoreConfig& config,
                                        std::size_t threads = 1);

// --- WER --------------------------------------------------------------------

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t reference_length = 0;

  std::size_t errors() const { return substitutions + insertions + deletions; }
  /// errors / reference_length; throws ValidationError when the reference is empty.
  double rate() const;
  EditCounts& operator+=(const EditCounts& other);
};

/// Unit-cost Levenshtein distance between token lists.
std::size_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b);

/// Minimum-edit alignment of hypothesis against reference.
EditCounts align(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference);

/// As align, but rejects an empty reference.
EditCounts wer(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference);

struct WerSummary {
  EditCounts selected;
  EditCounts oracle;
  EditCounts anti_oracle;
};

/// Corpus WER of the chosen hypotheses plus the best and worst achievable
/// within each list. Throws ValidationError naming an utterance without a
/// reference.
WerSummary evaluate_selection(const std::vector<NBestList>& lists,
                              const std::map<std::string, std::string>& references,
                              const std::vector<std::size_t>& chosen);

struct RescoringRow {
  std::string label;
  /// Indices into the model list, equally weighted.
  std::vector<std::size_t> models;
  WerSummary wer;
};

/// One row per model subset. Subsets use equal weights.
std::vector<RescoringRow> evaluate_rescoring(const std::vector<NBestList>& lists,
                                             const std::map<std::string, std::string>& references,
                                             const ScoreTable& table,
                                             const std::vector<std::string>& model_names,
                                             const std::vector<std::vector<std::size_t>>& subsets,
                                             double lm_scale,
                                             Interpolation mode = Interpolation::log_linear);

/// Every single model, then every combination of two or more, in index order.
std::vector<std::vector<std::size_t>> all_model_subsets(std::size_t model_count);

/// Scale in [lo, hi] (steps of `step`) with the lowest selection WER; ties
/// go to the smaller scale.
double grid_search_lm_scale(const std::vector<NBestList>& lists,
                            const std::map<std::string, std::string>& references,
                            const ScoreTable& table, const RescoreConfig& config, double lo = 0.5,
                            double hi = 2.0, double step = 0.1);

std::string format_wer_table(const std::vector<RescoringRow>& rows);

/// Tab-separated audit, one row per (utterance, hypothesis, model), with a
/// header line.
std::string format_audit(const std::vector<NBestList>& lists, const ScoreTable& table,
                         const std::vector<UtteranceSelection>& selections,
                         const std::vector<std::string>& model_names);

}  // namespace fvlm
