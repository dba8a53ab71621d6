#include "fvlm/rescoring.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "fvlm/error.hpp"
#include "fvlm/parallel.hpp"

namespace fvlm {
namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::optional<double> parse_real(std::string_view text) {
  while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
  if (text.empty()) return std::nullopt;
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  return value;
}

std::string_view strip_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

double log_sum_weighted(const std::vector<double>& scores, const std::vector<double>& weights) {
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (weights[k] > 0.0) peak = std::max(peak, scores[k]);
  }
  if (!std::isfinite(peak)) return peak;
  double sum = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (weights[k] > 0.0) sum += weights[k] * std::exp(scores[k] - peak);
  }
  return peak + std::log(sum);
}

const std::string& reference_for(const std::map<std::string, std::string>& references,
                                 const std::string& id) {
  const auto it = references.find(id);
  if (it == references.end()) throw ValidationError("no reference transcript for utterance '" + id + "'");
  return it->second;
}

}  // namespace

NBestFile parse_nbest(std::istream& in) {
  NBestFile file;
  std::unordered_map<std::string, std::size_t> index;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string_view line = strip_cr(raw);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    const auto fields = split_tabs(line);
    if (fields.size() < 3) {
      file.issues.push_back({line_no, "expected at least 3 tab-separated fields, found " +
                                          std::to_string(fields.size())});
      continue;
    }
    NBestEntry entry;
    entry.utterance_id = std::string(fields[0]);
    if (entry.utterance_id.empty()) {
      file.issues.push_back({line_no, "empty utterance id"});
      continue;
    }
    const auto acoustic = parse_real(fields[1]);
    if (!acoustic || !std::isfinite(*acoustic)) {
      file.issues.push_back({line_no, "acoustic score '" + std::string(fields[1]) + "' is not a finite number"});
      continue;
    }
    entry.acoustic_score = *acoustic;
    if (fields.size() == 3) {
      entry.text = std::string(fields[2]);
    } else if (fields.size() == 4) {
      const auto lm = parse_real(fields[2]);
      if (!lm) {
        file.issues.push_back({line_no, "LM score '" + std::string(fields[2]) + "' is not a number"});
        continue;
      }
      entry.original_lm_score = *lm;
      entry.text = std::string(fields[3]);
    } else {
      file.issues.push_back({line_no, "expected 3 or 4 tab-separated fields, found " +
                                          std::to_string(fields.size())});
      continue;
    }
    auto [it, inserted] = index.emplace(entry.utterance_id, file.lists.size());
    if (inserted) file.lists.push_back({entry.utterance_id, {}});
    file.lists[it->second].entries.push_back(std::move(entry));
  }
  return file;
}

NBestFile load_nbest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open n-best file " + path.string());
  NBestFile file = parse_nbest(in);
  if (file.lists.empty()) {
    std::string message = "no parsable n-best entries in " + path.string();
    if (!file.issues.empty()) {
      message += " (line " + std::to_string(file.issues.front().line) + ": " +
                 file.issues.front().message + ")";
    }
    throw FormatError(message);
  }
  return file;
}

std::string format_nbest(const std::vector<NBestList>& lists) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (const auto& list : lists) {
    for (const auto& e : list.entries) {
      out << e.utterance_id << '\t' << e.acoustic_score << '\t';
      if (e.original_lm_score) out << *e.original_lm_score << '\t';
      out << e.text << '\n';
    }
  }
  return out.str();
}

std::map<std::string, std::string> parse_references(std::istream& in) {
  std::map<std::string, std::string> refs;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string_view line = strip_cr(raw);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos || tab == 0) {
      throw FormatError("reference line " + std::to_string(line_no) + ": expected 'id<TAB>text'");
    }
    std::string id(line.substr(0, tab));
    if (!refs.emplace(id, std::string(line.substr(tab + 1))).second) {
      throw FormatError("reference line " + std::to_string(line_no) + ": duplicate utterance '" + id + "'");
    }
  }
  return refs;
}

std::map<std::string, std::string> load_references(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open reference file " + path.string());
  return parse_references(in);
}

std::vector<double> RescoreConfig::resolved_weights(std::size_t model_count) const {
  if (model_count == 0) throw ConfigError("rescoring needs at least one language model");
  if (!(lm_scale >= 0.0) || !std::isfinite(lm_scale)) {
    throw ConfigError("lm_scale must be a non-negative finite number");
  }
  if (weights.empty()) return std::vector<double>(model_count, 1.0 / static_cast<double>(model_count));
  if (weights.size() != model_count) {
    throw ConfigError(std::to_string(weights.size()) + " interpolation weights for " +
                      std::to_string(model_count) + " models");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("interpolation weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    std::ostringstream msg;
    msg << std::setprecision(17) << "interpolation weights sum to " << sum << ", expected 1";
    throw ConfigError(msg.str());
  }
  return weights;
}

ScoreTable score_nbest(const std::vector<NBestList>& lists,
                       const std::vector<const LanguageModel*>& models, const Vocabulary& vocab,
                       std::size_t threads) {
  if (models.empty()) throw ConfigError("rescoring needs at least one language model");
  for (std::size_t k = 0; k < models.size(); ++k) {
    if (vocab_size(*models[k]) != vocab.size()) {
      throw ConfigError("model " + std::to_string(k) + " has vocabulary size " +
                        std::to_string(vocab_size(*models[k])) + " but the vocabulary has " +
                        std::to_string(vocab.size()) + " words");
    }
  }
  struct Scored {
    std::vector<std::vector<double>> scores;
    std::vector<std::size_t> oov;
  };
  auto per_list = parallel_map(lists.size(), threads, [&](std::size_t u) {
    Scored s;
    for (const auto& entry : lists[u].entries) {
      std::size_t oov = 0;
      for (const auto& w : split_whitespace(entry.text)) {
        if (!vocab.contains(w)) ++oov;
      }
      const TokenSequence seq = encode(vocab, entry.text);
      std::vector<double> row;
      row.reserve(models.size());
      for (const auto* model : models) row.push_back(score_sequence(*model, seq));
      s.scores.push_back(std::move(row));
      s.oov.push_back(oov);
    }
    return s;
  });
  ScoreTable table;
  for (auto& s : per_list) {
    table.scores.push_back(std::move(s.scores));
    table.oov.push_back(std::move(s.oov));
  }
  return table;
}

double combine_lm_scores(const std::vector<double>& model_scores, const std::vector<double>& weights,
                         Interpolation mode) {
  if (model_scores.size() != weights.size()) {
    throw ShapeError("combine_lm_scores: " + std::to_string(model_scores.size()) + " scores, " +
                     std::to_string(weights.size()) + " weights");
  }
  if (mode == Interpolation::linear) return log_sum_weighted(model_scores, weights);
  double total = 0.0;
  for (std::size_t k = 0; k < model_scores.size(); ++k) total += weights[k] * model_scores[k];
  return total;
}

std::vector<UtteranceSelection> select_hypotheses(const std::vector<NBestList>& lists,
                                                  const ScoreTable& table,
                                                  const RescoreConfig& config) {
  if (table.scores.size() != lists.size()) {
    throw ShapeError("score table covers " + std::to_string(table.scores.size()) + " lists, expected " +
                     std::to_string(lists.size()));
  }
  const std::size_t model_count = lists.empty() || table.scores.front().empty()
                                      ? config.weights.size()
                                      : table.scores.front().front().size();
  const auto weights = config.resolved_weights(std::max<std::size_t>(model_count, 1));
  std::vector<UtteranceSelection> out;
  out.reserve(lists.size());
  for (std::size_t u = 0; u < lists.size(); ++u) {
    const auto& list = lists[u];
    if (list.entries.empty()) throw ValidationError("utterance '" + list.utterance_id + "' has no hypotheses");
    if (table.scores[u].size() != list.entries.size()) {
      throw ShapeError("score table row count mismatch for utterance '" + list.utterance_id + "'");
    }
    UtteranceSelection sel;
    sel.utterance_id = list.utterance_id;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < list.entries.size(); ++r) {
      HypothesisScore h;
      h.combined_lm = combine_lm_scores(table.scores[u][r], weights, config.interpolation);
      h.total = list.entries[r].acoustic_score + config.lm_scale * h.combined_lm;
      if (r == 0 || h.total > best) {
        best = h.total;
        sel.chosen = r;
      }
      sel.hypotheses.push_back(h);
    }
    out.push_back(std::move(sel));
  }
  return out;
}

std::vector<UtteranceSelection> rescore(const std::vector<NBestList>& lists,
                                        const std::vector<const LanguageModel*>& models,
                                        const Vocabulary& vocab, const RescoreConfig& config,
                                        std::size_t threads) {
  config.resolved_weights(models.size());
  return select_hypotheses(lists, score_nbest(lists, models, vocab, threads), config);
}

double EditCounts::rate() const {
  if (reference_length == 0) throw ValidationError("WER is undefined for an empty reference");
  return static_cast<double>(errors()) / static_cast<double>(reference_length);
}

EditCounts& EditCounts::operator+=(const EditCounts& other) {
  substitutions += other.substitutions;
  insertions += other.insertions;
  deletions += other.deletions;
  reference_length += other.reference_length;
  return *this;
}

std::size_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

EditCounts align(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference) {
  const std::size_t n = reference.size();
  const std::size_t m = hypothesis.size();
  // cost[i][j]: reference prefix i against hypothesis prefix j.
  std::vector<std::vector<std::size_t>> cost(n + 1, std::vector<std::size_t>(m + 1));
  for (std::size_t i = 0; i <= n; ++i) cost[i][0] = i;
  for (std::size_t j = 0; j <= m; ++j) cost[0][j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = cost[i - 1][j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      cost[i][j] = std::min({sub, cost[i - 1][j] + 1, cost[i][j - 1] + 1});
    }
  }
  EditCounts counts;
  counts.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = reference[i - 1] == hypothesis[j - 1];
      if (cost[i][j] == cost[i - 1][j - 1] + (same ? 0 : 1)) {
        if (!same) ++counts.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && cost[i][j] == cost[i - 1][j] + 1) {
      ++counts.deletions;
      --i;
    } else {
      ++counts.insertions;
      --j;
    }
  }
  return counts;
}

EditCounts wer(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference) {
  if (reference.empty()) throw ValidationError("WER is undefined for an empty reference");
  return align(hypothesis, reference);
}

WerSummary evaluate_selection(const std::vector<NBestList>& lists,
                              const std::map<std::string, std::string>& references,
                              const std::vector<std::size_t>& chosen) {
  if (chosen.size() != lists.size()) {
    throw ShapeError(std::to_string(chosen.size()) + " selections for " + std::to_string(lists.size()) +
                     " utterances");
  }
  WerSummary summary;
  for (std::size_t u = 0; u < lists.size(); ++u) {
    const auto& list = lists[u];
    const auto ref = split_whitespace(reference_for(references, list.utterance_id));
    if (ref.empty()) throw ValidationError("empty reference for utterance '" + list.utterance_id + "'");
    if (chosen[u] >= list.entries.size()) {
      throw ShapeError("selection out of range for utterance '" + list.utterance_id + "'");
    }
    std::optional<EditCounts> best, worst;
    for (std::size_t r = 0; r < list.entries.size(); ++r) {
      const EditCounts c = align(split_whitespace(list.entries[r].text), ref);
      if (r == chosen[u]) summary.selected += c;
      if (!best || c.errors() < best->errors()) best = c;
      if (!worst || c.errors() > worst->errors()) worst = c;
    }
    summary.oracle += *best;
    summary.anti_oracle += *worst;
  }
  return summary;
}

std::vector<std::vector<std::size_t>> all_model_subsets(std::size_t model_count) {
  if (model_count == 0 || model_count > 16) throw ConfigError("model subsets need 1 to 16 models");
  std::vector<std::vector<std::size_t>> subsets;
  for (std::size_t k = 0; k < model_count; ++k) subsets.push_back({k});
  for (std::size_t size = 2; size <= model_count; ++size) {
    for (std::size_t mask = 1; mask < (std::size_t{1} << model_count); ++mask) {
      if (static_cast<std::size_t>(__builtin_popcountll(mask)) != size) continue;
      std::vector<std::size_t> s;
      for (std::size_t k = 0; k < model_count; ++k) {
        if (mask & (std::size_t{1} << k)) s.push_back(k);
      }
      subsets.push_back(std::move(s));
    }
  }
  return subsets;
}

namespace {

ScoreTable project(const ScoreTable& table, const std::vector<std::size_t>& models) {
  ScoreTable out;
  out.oov = table.oov;
  out.scores.reserve(table.scores.size());
  for (const auto& list : table.scores) {
    std::vector<std::vector<double>> rows;
    rows.reserve(list.size());
    for (const auto& row : list) {
      std::vector<double> picked;
      for (std::size_t k : models) {
        if (k >= row.size()) throw ShapeError("model index " + std::to_string(k) + " out of range");
        picked.push_back(row[k]);
      }
      rows.push_back(std::move(picked));
    }
    out.scores.push_back(std::move(rows));
  }
  return out;
}

std::vector<std::size_t> chosen_indices(const std::vector<UtteranceSelection>& selections) {
  std::vector<std::size_t> chosen;
  chosen.reserve(selections.size());
  for (const auto& s : selections) chosen.push_back(s.chosen);
  return chosen;
}

}  // namespace

std::vector<RescoringRow> evaluate_rescoring(const std::vector<NBestList>& lists,
                                             const std::map<std::string, std::string>& references,
                                             const ScoreTable& table,
                                             const std::vector<std::string>& model_names,
                                             const std::vector<std::vector<std::size_t>>& subsets,
                                             double lm_scale, Interpolation mode) {
  std::vector<RescoringRow> rows;
  for (const auto& subset : subsets) {
    if (subset.empty()) throw ConfigError("empty model subset");
    RescoringRow row;
    row.models = subset;
    for (std::size_t k = 0; k < subset.size(); ++k) {
      if (subset[k] >= model_names.size()) throw ConfigError("model subset index out of range");
      row.label += (k ? "+" : "") + model_names[subset[k]];
    }
    RescoreConfig config;
    config.lm_scale = lm_scale;
    config.interpolation = mode;
    const auto selections = select_hypotheses(lists, project(table, subset), config);
    row.wer = evaluate_selection(lists, references, chosen_indices(selections));
    rows.push_back(std::move(row));
  }
  return rows;
}

double grid_search_lm_scale(const std::vector<NBestList>& lists,
                            const std::map<std::string, std::string>& references,
                            const ScoreTable& table, const RescoreConfig& config, double lo,
                            double hi, double step) {
  if (!(step > 0.0) || !(lo >= 0.0) || hi < lo) throw ConfigError("invalid lm_scale grid");
  double best_scale = lo;
  std::size_t best_errors = std::numeric_limits<std::size_t>::max();
  const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
  for (std::size_t k = 0; k <= count; ++k) {
    RescoreConfig trial = config;
    trial.lm_scale = lo + static_cast<double>(k) * step;
    const auto summary =
        evaluate_selection(lists, references, chosen_indices(select_hypotheses(lists, table, trial)));
    if (summary.selected.errors() < best_errors) {
      best_errors = summary.selected.errors();
      best_scale = trial.lm_scale;
    }
  }
  return best_scale;
}

std::string format_wer_table(const std::vector<RescoringRow>& rows) {
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "models" << std::right << "  " << std::setw(8)
      << "WER(%)" << "  " << std::setw(8) << "oracle" << "  " << std::setw(8) << "anti" << "  "
      << std::setw(6) << "S" << std::setw(6) << "I" << std::setw(6) << "D" << '\n';
  out << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.label << std::right << "  " << std::setw(8)
        << 100.0 * r.wer.selected.rate() << "  " << std::setw(8) << 100.0 * r.wer.oracle.rate() << "  "
        << std::setw(8) << 100.0 * r.wer.anti_oracle.rate() << "  " << std::setw(6)
        << r.wer.selected.substitutions << std::setw(6) << r.wer.selected.insertions << std::setw(6)
        << r.wer.selected.deletions << '\n';
  }
  return out.str();
}

std::string format_audit(const std::vector<NBestList>& lists, const ScoreTable& table,
                         const std::vector<UtteranceSelection>& selections,
                         const std::vector<std::string>& model_names) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "utterance\trank\tmodel\tlm_score\toov\tacoustic\tcombined\ttotal\tchosen\n";
  for (std::size_t u = 0; u < lists.size(); ++u) {
    for (std::size_t r = 0; r < lists[u].entries.size(); ++r) {
      const auto& h = selections.at(u).hypotheses.at(r);
      for (std::size_t k = 0; k < table.scores[u][r].size(); ++k) {
        out << lists[u].utterance_id << '\t' << r << '\t'
            << (k < model_names.size() ? model_names[k] : std::to_string(k)) << '\t'
            << table.scores[u][r][k] << '\t' << table.oov[u][r] << '\t'
            << lists[u].entries[r].acoustic_score << '\t' << h.combined_lm << '\t' << h.total << '\t'
            << (selections[u].chosen == r ? 1 : 0) << '\n';
      }
    }
  }
  return out.str();
}

}  // namespace fvlm
