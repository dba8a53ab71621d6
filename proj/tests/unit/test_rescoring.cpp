#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "data.hpp"
#include "doctest.h"
#include "edit_oracle.hpp"
#include "fvlm/error.hpp"
#include "fvlm/rescoring.hpp"

using namespace fvlm;

namespace {

NBestFile parse(const std::string& text) {
  std::istringstream in(text);
  return parse_nbest(in);
}

// One utterance per row of scores; a single model with the given LM scores.
std::pair<std::vector<NBestList>, ScoreTable> table_of(
    const std::vector<std::vector<double>>& acoustic,
    const std::vector<std::vector<std::vector<double>>>& lm) {
  std::vector<NBestList> lists;
  ScoreTable table;
  for (std::size_t u = 0; u < acoustic.size(); ++u) {
    NBestList list{"u" + std::to_string(u), {}};
    for (std::size_t r = 0; r < acoustic[u].size(); ++r) {
      list.entries.push_back({list.utterance_id, acoustic[u][r], std::nullopt, "w" + std::to_string(r)});
    }
    lists.push_back(std::move(list));
    table.scores.push_back(lm[u]);
    table.oov.emplace_back(acoustic[u].size(), 0);
  }
  return {lists, table};
}

std::vector<std::string> random_words(std::mt19937_64& rng, std::size_t max_len) {
  static const std::vector<std::string> pool = {"x", "y", "z"};
  std::vector<std::string> out(rng() % (max_len + 1));
  for (auto& w : out) w = pool[rng() % pool.size()];
  return out;
}

}  // namespace

TEST_SUITE("rescoring") {

TEST_CASE("n-best lines are grouped by utterance in order") {
  const auto file = parse(
      "u1\t-10.5\ta b c\n"
      "u2\t-3\tx\n"
      "u1\t-11\ta b\n"
      "u2\t-4\ty z\n"
      "u1\t-12\t-7.5\ta\n"
      "u2\t-5\tx x\n");
  REQUIRE(file.lists.size() == 2);
  CHECK(file.lists[0].entries.size() == 3);
  CHECK(file.lists[1].entries.size() == 3);
  CHECK(file.lists[0].entries[2].original_lm_score == -7.5);
  CHECK(file.lists[0].entries[2].text == "a");
  CHECK(file.lists[1].entries[1].acoustic_score == -4.0);
  CHECK(file.issues.empty());
}

TEST_CASE("malformed lines are reported with their line number") {
  const auto file = parse("u1\t-1\ta\nu1\tloud\tb\nu1 -2 c\n\nu1\t-inf\td\nu1\t-3\ta b\r\n");
  CHECK(file.lists.at(0).entries.size() == 2);
  CHECK(file.lists[0].entries[1].text == "a b");
  REQUIRE(file.issues.size() == 3);
  CHECK(file.issues[0].line == 2);
  CHECK(file.issues[1].line == 3);
  CHECK(file.issues[2].line == 5);
}

TEST_CASE("an n-best file without entries is a format error") {
  const auto dir = std::filesystem::temp_directory_path() / "fvlm_unit_rescoring";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "bad.nbest") << "garbage\n";
  CHECK_THROWS_AS(load_nbest(dir / "bad.nbest"), FormatError);
  CHECK_THROWS_AS(load_nbest(dir / "missing.nbest"), IoError);
}

TEST_CASE("format and parse round trip") {
  const auto data = testing::make_nbest({"a b c", "d e", "f"}, {"q", "r"}, 4, 3);
  const std::string text = format_nbest(data.lists);
  const auto back = parse(text);
  CHECK(back.issues.empty());
  CHECK(format_nbest(back.lists) == text);
  REQUIRE(back.lists.size() == data.lists.size());
  for (std::size_t u = 0; u < back.lists.size(); ++u) {
    for (std::size_t r = 0; r < back.lists[u].entries.size(); ++r) {
      CHECK(back.lists[u].entries[r].acoustic_score == data.lists[u].entries[r].acoustic_score);
      CHECK(back.lists[u].entries[r].text == data.lists[u].entries[r].text);
    }
  }
}

TEST_CASE("reference parsing") {
  std::istringstream in("u1\ta b c\nu2\t\n");
  const auto refs = parse_references(in);
  CHECK(refs.at("u1") == "a b c");
  CHECK(refs.at("u2").empty());
  std::istringstream dup("u1\ta\nu1\tb\n");
  CHECK_THROWS_AS(parse_references(dup), FormatError);
}

TEST_CASE("weights are validated") {
  RescoreConfig c;
  CHECK(c.resolved_weights(4) == std::vector<double>{0.25, 0.25, 0.25, 0.25});
  c.weights = {0.7, 0.2};
  CHECK_THROWS_AS(c.resolved_weights(2), ConfigError);
  c.weights = {1.2, -0.2};
  CHECK_THROWS_AS(c.resolved_weights(2), ConfigError);
  c.weights = {0.5, 0.5};
  CHECK_THROWS_AS(c.resolved_weights(3), ConfigError);
  c.weights = {};
  c.lm_scale = -1.0;
  CHECK_THROWS_AS(c.resolved_weights(1), ConfigError);
}

TEST_CASE("interpolation of scores") {
  CHECK(combine_lm_scores({-4.2}, {1.0}, Interpolation::log_linear) == -4.2);
  CHECK(std::abs(combine_lm_scores({-4.2}, {1.0}, Interpolation::linear) + 4.2) <= 1e-12);
  CHECK(std::abs(combine_lm_scores({-3.3, -3.3, -3.3}, {1.0 / 3, 1.0 / 3, 1.0 / 3}, Interpolation::log_linear) + 3.3) <= 1e-12);
  CHECK(std::abs(combine_lm_scores({-3.3, -3.3}, {0.5, 0.5}, Interpolation::linear) + 3.3) <= 1e-12);
  CHECK(combine_lm_scores({-1.0, -3.0}, {0.5, 0.5}, Interpolation::log_linear) == -2.0);
  const double linear = combine_lm_scores({-1.0, -3.0}, {0.5, 0.5}, Interpolation::linear);
  CHECK(std::abs(linear - std::log(0.5 * std::exp(-1.0) + 0.5 * std::exp(-3.0))) <= 1e-12);
  // Very negative scores stay finite.
  CHECK(std::isfinite(combine_lm_scores({-2000.0, -2001.0}, {0.5, 0.5}, Interpolation::linear)));
}

TEST_CASE("hand-built two-model table") {
  // Model A prefers hypothesis 0 (-1 vs -5); model B prefers hypothesis 1
  // (-4 vs -2). Equal weights: means -2.5 and -3.5, so hypothesis 0 wins.
  auto [lists, table] = table_of({{0.0, 0.0}}, {{{-1.0, -4.0}, {-5.0, -2.0}}});
  RescoreConfig c;
  CHECK(select_hypotheses(lists, table, c)[0].chosen == 0);
  // Raising B's dislike of hypothesis 0 flips the means to -4.5 and -3.5.
  table.scores[0][0][1] = -8.0;
  CHECK(select_hypotheses(lists, table, c)[0].chosen == 1);
  // Weighting A alone restores hypothesis 0.
  c.weights = {1.0, 0.0};
  CHECK(select_hypotheses(lists, table, c)[0].chosen == 0);
}

TEST_CASE("lm_scale 0 selects the acoustic argmax") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 3.0);
  std::vector<std::vector<double>> ac(30);
  std::vector<std::vector<std::vector<double>>> lm(30);
  for (std::size_t u = 0; u < 30; ++u) {
    for (int r = 0; r < 6; ++r) {
      ac[u].push_back(g(rng));
      lm[u].push_back({g(rng)});
    }
  }
  auto [lists, table] = table_of(ac, lm);
  RescoreConfig c;
  c.lm_scale = 0.0;
  const auto sel = select_hypotheses(lists, table, c);
  for (std::size_t u = 0; u < 30; ++u) {
    const auto best = std::max_element(ac[u].begin(), ac[u].end()) - ac[u].begin();
    CHECK(sel[u].chosen == static_cast<std::size_t>(best));
  }
}

TEST_CASE("selection ignores a constant acoustic shift and ties go to the earliest rank") {
  auto [lists, table] = table_of({{-5.0, -3.0, -4.0}}, {{{-2.0}, {-4.0}, {-2.0}}});
  RescoreConfig c;
  const auto before = select_hypotheses(lists, table, c)[0].chosen;
  for (auto& e : lists[0].entries) e.acoustic_score += 1234.5;
  CHECK(select_hypotheses(lists, table, c)[0].chosen == before);

  auto [tied, tied_table] = table_of({{-1.0, -1.0, -1.0}}, {{{-2.0}, {-2.0}, {-2.0}}});
  CHECK(select_hypotheses(tied, tied_table, c)[0].chosen == 0);
}

TEST_CASE("wer examples") {
  const auto id = wer(split_whitespace("a b c"), split_whitespace("a b c"));
  CHECK(id.errors() == 0);
  CHECK(id.rate() == 0.0);
  const auto sub = wer(split_whitespace("a b c"), split_whitespace("a x c"));
  CHECK(sub.substitutions == 1);
  CHECK(sub.insertions == 0);
  CHECK(sub.deletions == 0);
  CHECK(sub.rate() == doctest::Approx(1.0 / 3.0));
  const auto ins = wer(split_whitespace("a b c d"), split_whitespace("a b c"));
  CHECK(ins.insertions == 1);
  const auto del = wer(split_whitespace("a c"), split_whitespace("a b c"));
  CHECK(del.deletions == 1);
  CHECK(wer({}, split_whitespace("a b")).deletions == 2);
  CHECK_THROWS_AS(wer(split_whitespace("a"), {}), ValidationError);
}

TEST_CASE("edit distance matches exhaustive search") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_words(rng, 6), b = random_words(rng, 6);
    CHECK(edit_distance(a, b) == testing::brute_force_distance(a, b));
    const auto counts = align(a, b);
    CHECK(counts.errors() == edit_distance(a, b));
    CHECK(counts.reference_length == b.size());
  }
}

TEST_CASE("edit distance is symmetric and obeys the triangle inequality") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_words(rng, 8), b = random_words(rng, 8), c = random_words(rng, 8);
    CHECK(edit_distance(a, b) == edit_distance(b, a));
    CHECK(edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c));
  }
}

TEST_CASE("selection WER sits between oracle and anti-oracle") {
  std::vector<std::string> refs;
  for (int k = 0; k < 20; ++k) refs.push_back("w" + std::to_string(k) + " common words here " + std::to_string(k % 3));
  const auto data = testing::make_nbest(refs, {"uh", "the", "a"}, 6, 11);
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> chosen;
    for (const auto& l : data.lists) chosen.push_back(rng() % l.entries.size());
    const auto s = evaluate_selection(data.lists, data.references, chosen);
    CHECK(s.oracle.errors() <= s.selected.errors());
    CHECK(s.selected.errors() <= s.anti_oracle.errors());
  }
  // The reference is in every list, so the oracle is perfect.
  const auto s = evaluate_selection(data.lists, data.references, std::vector<std::size_t>(data.lists.size(), 0));
  CHECK(s.oracle.errors() == 0);
}

TEST_CASE("a missing reference names the utterance") {
  const auto data = testing::make_nbest({"a b"}, {"c"}, 2, 1);
  try {
    evaluate_selection(data.lists, {}, {0});
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("utt0") != std::string::npos);
  }
}

TEST_CASE("model subsets list singles before combinations") {
  const auto s = all_model_subsets(3);
  const std::vector<std::vector<std::size_t>> expected = {{0}, {1}, {2}, {0, 1}, {0, 2}, {1, 2}, {0, 1, 2}};
  CHECK(s == expected);
}

TEST_CASE("scoring hypotheses with a model counts unknown words") {
  const Vocabulary v = Vocabulary::from_words({"a", "b"});
  LmConfig cfg;
  cfg.embed_dim = cfg.hidden_dim = cfg.fv_dim = 3;
  cfg.num_layers = 1;
  const LanguageModel m = BaselineLm(v.size(), cfg);
  const auto file = parse("u\t-1\ta b\nu\t-2\ta zz qq\n");
  const auto table = score_nbest(file.lists, {&m}, v);
  CHECK(table.oov[0] == std::vector<std::size_t>{0, 2});
  CHECK(table.scores[0][0][0] == doctest::Approx(-3.0 * std::log(5.0)));
  CHECK(table.scores[0][1][0] == doctest::Approx(-4.0 * std::log(5.0)));
  const LanguageModel bigger = BaselineLm(v.size() + 1, cfg);
  CHECK_THROWS_AS(score_nbest(file.lists, {&bigger}, v), ConfigError);
  // Duplicating the model changes no selection.
  RescoreConfig c;
  const auto one = rescore(file.lists, {&m}, v, c);
  const auto two = rescore(file.lists, {&m, &m}, v, c);
  CHECK(one[0].chosen == two[0].chosen);
  CHECK(one[0].hypotheses[1].combined_lm == two[0].hypotheses[1].combined_lm);
}

TEST_CASE("grid search picks the best scale, smallest on ties") {
  // Hypothesis 0 is acoustically better but wrong; the LM favors the
  // correct hypothesis 1 by 2 nats against an acoustic gap of 1.5.
  std::vector<NBestList> lists = {{"u", {{"u", -1.0, std::nullopt, "a x"}, {"u", -2.5, std::nullopt, "a b"}}}};
  ScoreTable table{{{{-4.0}, {-2.0}}}, {{0, 0}}};
  const std::map<std::string, std::string> refs = {{"u", "a b"}};
  const double scale = grid_search_lm_scale(lists, refs, table, RescoreConfig{});
  CHECK(scale == doctest::Approx(0.8));
}

TEST_CASE("audit and WER table formats") {
  const auto data = testing::make_nbest({"a b c", "d e"}, {"z"}, 3, 2);
  ScoreTable table;
  for (const auto& l : data.lists) {
    table.scores.emplace_back(l.entries.size(), std::vector<double>{-1.0, -2.0});
    table.oov.emplace_back(l.entries.size(), 0);
  }
  const auto sel = select_hypotheses(data.lists, table, RescoreConfig{});
  const std::string audit = format_audit(data.lists, table, sel, {"lstm", "fv"});
  CHECK(audit.rfind("utterance\trank\tmodel\tlm_score\toov\tacoustic\tcombined\ttotal\tchosen\n", 0) == 0);
  CHECK(std::count(audit.begin(), audit.end(), '\n') == 1 + 2 * 6);
  const auto rows = evaluate_rescoring(data.lists, data.references, table, {"lstm", "fv"},
                                       all_model_subsets(2), 1.0);
  const std::string text = format_wer_table(rows);
  CHECK(text.find("lstm+fv") != std::string::npos);
  CHECK(text.find("WER(%)") != std::string::npos);
}

}  // TEST_SUITE
