#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "fvlm/corpus.hpp"
#include "fvlm/error.hpp"
#include "fvlm/models.hpp"

namespace fvlm {

struct PerplexityReport {
  double perplexity = 0.0;
  /// Mean CE over every predicted position.
  double cross_entropy = 0.0;
  std::size_t positions = 0;
  std::size_t clamped = 0;
};

/// exp of the mean per-token CE over the corpus. Throws ValidationError on an
/// empty corpus.
PerplexityReport perplexity(const LanguageModel& model, const Corpus& corpus,
                            std::size_t threads = 1);

inline constexpr std::size_t kBleuOrder = 4;

struct BleuReport {
  double score = 0.0;
  /// Modified precisions after smoothing.
  std::array<double, kBleuOrder> precisions{};
  std::array<std::size_t, kBleuOrder> matches{};
  std::array<std::size_t, kBleuOrder> totals{};
  double brevity_penalty = 0.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

/// Corpus BLEU-4. Orders with no clipped match use (0 + 1) / (total + 1);
/// brevity penalty exp(1 - r/c) when c < r. An empty hypothesis corpus
/// scores 0.
template <class Token>
BleuReport bleu(const std::vector<std::vector<Token>>& hypotheses,
                const std::vector<std::vector<Token>>& references) {
  if (hypotheses.empty()) throw ValidationError("bleu: no hypotheses");
  if (hypotheses.size() != references.size()) {
    throw ValidationError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses for " +
                          std::to_string(references.size()) + " references");
  }
  BleuReport report;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    report.hypothesis_length += hyp.size();
    report.reference_length += ref.size();
    for (std::size_t n = 1; n <= kBleuOrder; ++n) {
      std::map<std::vector<Token>, std::size_t> ref_counts;
      for (std::size_t k = 0; k + n <= ref.size(); ++k) {
        ++ref_counts[std::vector<Token>(ref.begin() + k, ref.begin() + k + n)];
      }
      std::map<std::vector<Token>, std::size_t> hyp_counts;
      for (std::size_t k = 0; k + n <= hyp.size(); ++k) {
        ++hyp_counts[std::vector<Token>(hyp.begin() + k, hyp.begin() + k + n)];
        ++report.totals[n - 1];
      }
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) report.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  if (report.reference_length == 0) throw ValidationError("bleu: references are all empty");
  if (report.hypothesis_length == 0) return report;

  double log_sum = 0.0;
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    const double m = static_cast<double>(report.matches[n]);
    const double t = static_cast<double>(report.totals[n]);
    report.precisions[n] = report.matches[n] == 0 ? 1.0 / (t + 1.0) : m / t;
    log_sum += std::log(report.precisions[n]);
  }
  const double c = static_cast<double>(report.hypothesis_length);
  const double r = static_cast<double>(report.reference_length);
  report.brevity_penalty = c < r ? std::exp(1.0 - r / c) : 1.0;
  report.score = report.brevity_penalty * std::exp(log_sum / static_cast<double>(kBleuOrder));
  return report;
}

inline const std::vector<std::size_t> kDefaultHistoryLengths = {0, 1, 2, 3, 5};

struct HistoryResult {
  std::size_t history_length = 0;
  BleuReport bleu;
  std::size_t sentences = 0;
  /// Sentences with no interior token left to predict after the history.
  std::size_t skipped = 0;
};

struct SeqPredReport {
  std::vector<HistoryResult> by_history;
  PerplexityReport perplexity;
};

struct SeqPredOptions {
  std::vector<std::size_t> history_lengths = kDefaultHistoryLengths;
  /// Generation cap; 0 means 2 * reference length + 5 per sentence.
  std::size_t max_len = 0;
  std::size_t threads = 1;
};

/// For each sentence and history length L: feed <s> plus the first L interior
/// tokens, continue greedily, and score the continuation against the
/// remaining interior tokens with corpus BLEU.
SeqPredReport sequence_prediction_eval(const LanguageModel& model, const Corpus& test,
                                       const SeqPredOptions& options = {});

/// Aligned plain-text table, one row per model.
std::string format_seqpred_table(const std::vector<std::pair<std::string, SeqPredReport>>& rows);

/// "model,metric,history_length,value" rows (no header). PPL rows leave the
/// history length empty.
std::string format_seqpred_csv(const std::string& model_name, const SeqPredReport& report);

}  // namespace fvlm
