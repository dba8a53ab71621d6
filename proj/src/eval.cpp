#include "fvlm/eval.hpp"

#include <cstdio>
#include <iomanip>
#include <sstream>

#include "fvlm/parallel.hpp"

namespace fvlm {

PerplexityReport perplexity(const LanguageModel& model, const Corpus& corpus, std::size_t threads) {
  if (corpus.empty()) throw ValidationError("perplexity: empty corpus");
  struct Partial {
    double ce_sum = 0.0;
    std::size_t positions = 0;
    std::size_t clamped = 0;
  };
  const auto parts = parallel_map(corpus.size(), threads, [&](std::size_t k) {
    const auto& seq = corpus[k];
    Partial p;
    const auto probs = forward_probabilities(model, seq);
    p.positions = probs.size();
    p.ce_sum = ce_loss(probs, targets_of(seq), &p.clamped) * static_cast<double>(p.positions);
    return p;
  });
  PerplexityReport report;
  double ce_sum = 0.0;
  for (const auto& p : parts) {
    ce_sum += p.ce_sum;
    report.positions += p.positions;
    report.clamped += p.clamped;
  }
  report.cross_entropy = ce_sum / static_cast<double>(report.positions);
  report.perplexity = std::exp(report.cross_entropy);
  return report;
}

SeqPredReport sequence_prediction_eval(const LanguageModel& model, const Corpus& test,
                                       const SeqPredOptions& options) {
  if (test.empty()) throw ValidationError("sequence prediction: empty test corpus");
  SeqPredReport report;
  report.perplexity = perplexity(model, test, options.threads);

  for (std::size_t length : options.history_lengths) {
    std::vector<std::size_t> used;
    for (std::size_t k = 0; k < test.size(); ++k) {
      if (test[k].interior_size() > length) used.push_back(k);
    }
    HistoryResult result;
    result.history_length = length;
    result.sentences = used.size();
    result.skipped = test.size() - used.size();
    if (used.empty()) {
      report.by_history.push_back(result);
      continue;
    }
    struct Pair {
      std::vector<TokenId> hypothesis;
      std::vector<TokenId> reference;
    };
    auto pairs = parallel_map(used.size(), options.threads, [&](std::size_t j) {
      const auto& ids = test[used[j]].ids;
      // ids = <s> w_1 .. w_K </s>; the history is <s> w_1 .. w_L.
      std::vector<TokenId> history(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(length + 1));
      Pair p;
      p.reference.assign(ids.begin() + static_cast<std::ptrdiff_t>(length + 1), ids.end() - 1);
      const std::size_t cap = options.max_len ? options.max_len : 2 * p.reference.size() + 5;
      p.hypothesis = greedy_continue(model, history, cap);
      return p;
    });
    std::vector<std::vector<TokenId>> hyps, refs;
    hyps.reserve(pairs.size());
    refs.reserve(pairs.size());
    for (auto& p : pairs) {
      hyps.push_back(std::move(p.hypothesis));
      refs.push_back(std::move(p.reference));
    }
    result.bleu = bleu(hyps, refs);
    report.by_history.push_back(result);
  }
  return report;
}

std::string format_seqpred_table(const std::vector<std::pair<std::string, SeqPredReport>>& rows) {
  std::ostringstream out;
  std::size_t name_width = 5;
  for (const auto& [name, r] : rows) name_width = std::max(name_width, name.size());
  out << std::left << std::setw(static_cast<int>(name_width)) << "model" << "  "
      << std::right << std::setw(10) << "PPL";
  if (!rows.empty()) {
    for (const auto& h : rows.front().second.by_history) {
      out << "  " << std::setw(7) << ("BLEU@" + std::to_string(h.history_length));
    }
  }
  out << '\n';
  for (const auto& [name, r] : rows) {
    out << std::left << std::setw(static_cast<int>(name_width)) << name << "  " << std::right
        << std::setw(10) << std::fixed << std::setprecision(2) << r.perplexity.perplexity;
    for (const auto& h : r.by_history) {
      out << "  " << std::setw(7) << std::setprecision(3) << h.bleu.score;
    }
    out << '\n';
  }
  return out.str();
}

std::string format_seqpred_csv(const std::string& model_name, const SeqPredReport& report) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << model_name << ",ppl,," << report.perplexity.perplexity << '\n';
  for (const auto& h : report.by_history) {
    out << model_name << ",bleu," << h.history_length << ',' << h.bleu.score << '\n';
  }
  return out.str();
}

}  // namespace fvlm
