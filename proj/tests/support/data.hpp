#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fvlm/corpus.hpp"
#include "fvlm/rescoring.hpp"

namespace fvlm::testing {

/// <s>, `interior` ids drawn uniformly from the non-reserved range, </s>.
inline TokenSequence random_sequence(std::mt19937_64& rng, std::size_t vocab_size,
                                     std::size_t interior) {
  std::uniform_int_distribution<TokenId> pick(3, static_cast<TokenId>(vocab_size - 1));
  TokenSequence seq;
  seq.ids.push_back(kBos);
  for (std::size_t k = 0; k < interior; ++k) seq.ids.push_back(pick(rng));
  seq.ids.push_back(kEos);
  return seq;
}

/// Ten distinct sentences of 24 words over a small vocabulary.
inline std::vector<std::string> toy_lines() {
  return {
      "the old man walked to the river and sat on a stone while the sun went down over the quiet hills far away",
      "a young girl found a small dog near the market and carried it home through the rain before the evening bell rang",
      "the farmer planted corn in the north field because the spring was warm and the soil was soft after the long winter",
      "my brother fixed the broken clock on the wall with a tiny screw he had kept in a tin box for many years",
      "the children sang a song about the moon while their teacher played an old piano in the corner of the bright room",
      "a tired soldier wrote a letter to his mother telling her that the war would end before the first snow of winter",
      "the baker opened his shop early every morning so the workers could buy warm bread on their way to the busy harbor",
      "she painted the little boat blue and green and gave it the name of the island where her grandfather had been born",
      "the wind blew the door open and the candles went out so we told stories in the dark until the storm passed by",
      "an old sailor taught the boy how to tie knots and read the stars so he would never lose his way at sea",
  };
}

/// Words of toy_lines() in first-occurrence order.
inline Vocabulary toy_vocabulary() { return Vocabulary::build_from_lines(toy_lines(), 10000); }

inline Corpus toy_corpus(const Vocabulary& vocab) { return encode_corpus(vocab, toy_lines()); }

// ---------------------------------------------------------------------------
// Grammar-driven corpus with Zipfian word choice and lexical preferences, so
// that longer histories carry more information about what follows.

struct SyntheticCorpusOptions {
  std::size_t sentences = 5000;
  std::size_t nouns = 4000;
  std::size_t verbs = 2000;
  std::size_t adjectives = 1500;
  std::size_t adverbs = 500;
  std::size_t names = 500;
  /// Probability of drawing from a word's preferred partners.
  double preference = 0.75;
  std::uint64_t seed = 2024;
};

class SyntheticCorpus {
 public:
  explicit SyntheticCorpus(const SyntheticCorpusOptions& options)
      : options_(options), rng_(options.seed) {
    nouns_ = make_words(options.nouns);
    verbs_ = make_words(options.verbs);
    adjectives_ = make_words(options.adjectives);
    adverbs_ = make_words(options.adverbs);
    names_ = make_words(options.names);
    noun_zipf_ = zipf(nouns_.size());
    verb_zipf_ = zipf(verbs_.size());
    adj_zipf_ = zipf(adjectives_.size());
    adv_zipf_ = zipf(adverbs_.size());
    name_zipf_ = zipf(names_.size());
    noun_verbs_ = preferences(nouns_.size(), verb_zipf_, 3);
    verb_objects_ = preferences(verbs_.size(), noun_zipf_, 4);
    verb_preps_ = preferences(verbs_.size(), small(prepositions().size()), 1);
    noun_adjs_ = preferences(nouns_.size(), adj_zipf_, 2);
  }

  std::vector<std::string> generate(std::size_t count) {
    std::vector<std::string> lines;
    lines.reserve(count);
    for (std::size_t k = 0; k < count; ++k) lines.push_back(sentence());
    return lines;
  }

  std::vector<std::string> generate() { return generate(options_.sentences); }

 private:
  static const std::vector<std::string>& determiners() {
    static const std::vector<std::string> words = {"the", "a", "its", "their", "this", "some", "every", "that"};
    return words;
  }
  static const std::vector<std::string>& prepositions() {
    static const std::vector<std::string> words = {"of", "in", "for", "on", "with", "to", "at", "by", "from", "about"};
    return words;
  }
  static const std::vector<std::string>& auxiliaries() {
    static const std::vector<std::string> words = {"will", "would", "could", "has", "had", "may"};
    return words;
  }
  static const std::vector<std::string>& pronouns() {
    static const std::vector<std::string> words = {"he", "she", "it", "they", "we"};
    return words;
  }
  static const std::vector<std::string>& conjunctions() {
    static const std::vector<std::string> words = {"and", "but", "while", "because"};
    return words;
  }

  std::vector<std::string> make_words(std::size_t count) {
    static const std::vector<std::string> onsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                    "s", "t", "v", "z", "br", "st", "tr", "gl", "pl", "sh"};
    static const std::vector<std::string> vowels = {"a", "e", "i", "o", "u", "ai", "ou", "ea"};
    static const std::vector<std::string> codas = {"", "n", "r", "s", "t", "l", "nd", "rk"};
    std::vector<std::string> out;
    while (out.size() < count) {
      std::string w;
      const std::size_t syllables = 1 + rng_() % 3;
      for (std::size_t s = 0; s < syllables; ++s) {
        w += onsets[rng_() % onsets.size()];
        w += vowels[rng_() % vowels.size()];
      }
      w += codas[rng_() % codas.size()];
      if (used_.insert(w).second) out.push_back(w);
    }
    return out;
  }

  static std::discrete_distribution<std::size_t> zipf(std::size_t n) {
    std::vector<double> weights(n);
    for (std::size_t r = 0; r < n; ++r) weights[r] = 1.0 / std::pow(static_cast<double>(r + 1), 0.9);
    return {weights.begin(), weights.end()};
  }

  static std::discrete_distribution<std::size_t> small(std::size_t n) { return zipf(n); }

  std::vector<std::vector<std::size_t>> preferences(std::size_t owners,
                                                    std::discrete_distribution<std::size_t> dist,
                                                    std::size_t per_owner) {
    std::vector<std::vector<std::size_t>> out(owners);
    for (auto& prefs : out) {
      for (std::size_t k = 0; k < per_owner; ++k) prefs.push_back(dist(rng_));
    }
    return out;
  }

  bool chance(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }

  template <class T>
  const T& any(const std::vector<T>& items) {
    return items[rng_() % items.size()];
  }

  std::size_t noun_phrase(std::vector<std::string>& out, std::size_t depth,
                          const std::vector<std::size_t>* preferred) {
    std::size_t noun = 0;
    if (preferred && chance(options_.preference)) {
      noun = any(*preferred);
    } else {
      noun = noun_zipf_(rng_);
    }
    out.push_back(any(determiners()));
    if (chance(0.5)) {
      out.push_back(chance(options_.preference) ? adjectives_[any(noun_adjs_[noun])]
                                                : adjectives_[adj_zipf_(rng_)]);
    }
    out.push_back(nouns_[noun]);
    if (depth < 2 && chance(0.4)) {
      out.push_back(any(prepositions()));
      noun_phrase(out, depth + 1, nullptr);
    }
    return noun;
  }

  void clause(std::vector<std::string>& out, std::size_t depth) {
    std::size_t verb = 0;
    const double subject = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    if (subject < 0.15) {
      out.push_back(any(pronouns()));
      verb = verb_zipf_(rng_);
    } else if (subject < 0.25) {
      out.push_back(names_[name_zipf_(rng_)]);
      verb = verb_zipf_(rng_);
    } else {
      const std::size_t noun = noun_phrase(out, 1, nullptr);
      verb = chance(options_.preference) ? any(noun_verbs_[noun]) : verb_zipf_(rng_);
    }
    if (chance(0.3)) out.push_back(any(auxiliaries()));
    out.push_back(verbs_[verb]);
    if (chance(0.25)) out.push_back(prepositions()[verb_preps_[verb][0]]);
    noun_phrase(out, depth, &verb_objects_[verb]);
    if (chance(0.3)) out.push_back(adverbs_[adv_zipf_(rng_)]);
    if (depth == 0 && chance(0.75)) {
      out.push_back(chance(0.7) ? conjunctions().front() : any(conjunctions()));
      clause(out, depth + 1);
    }
  }

  std::string sentence() {
    std::vector<std::string> words;
    clause(words, 0);
    std::string line;
    for (const auto& w : words) {
      if (!line.empty()) line += ' ';
      line += w;
    }
    return line;
  }

  SyntheticCorpusOptions options_;
  std::mt19937_64 rng_;
  std::set<std::string> used_;
  std::vector<std::string> nouns_, verbs_, adjectives_, adverbs_, names_;
  std::discrete_distribution<std::size_t> noun_zipf_, verb_zipf_, adj_zipf_, adv_zipf_, name_zipf_;
  std::vector<std::vector<std::size_t>> noun_verbs_, verb_objects_, verb_preps_, noun_adjs_;
};

// ---------------------------------------------------------------------------
// N-best lists built around known references.

struct SyntheticNBest {
  std::vector<NBestList> lists;
  std::map<std::string, std::string> references;
};

/// Each list holds `depth` hypotheses: the reference plus corrupted copies
/// (substitutions from `confusions`, insertions, deletions). Acoustic scores
/// penalize edits and add Gaussian noise, so the acoustic argmax is often
/// wrong. The reference sits at a random rank.
inline SyntheticNBest make_nbest(const std::vector<std::string>& references,
                                 const std::vector<std::string>& confusions, std::size_t depth,
                                 std::uint64_t seed, double noise = 2.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, noise);
  SyntheticNBest out;
  for (std::size_t u = 0; u < references.size(); ++u) {
    const std::string id = "utt" + std::to_string(u);
    const auto ref = split_whitespace(references[u]);
    out.references[id] = references[u];
    NBestList list{id, {}};
    std::set<std::string> seen = {references[u]};
    std::vector<std::pair<std::string, std::size_t>> hyps = {{references[u], 0}};
    std::size_t attempts = 0;
    while (hyps.size() < depth && attempts++ < 1000) {
      auto words = ref;
      const std::size_t edits = 1 + rng() % 3;
      for (std::size_t e = 0; e < edits; ++e) {
        const auto op = rng() % 3;
        if (op == 0 && !words.empty()) {
          words[rng() % words.size()] = confusions[rng() % confusions.size()];
        } else if (op == 1) {
          words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng() % (words.size() + 1)),
                       confusions[rng() % confusions.size()]);
        } else if (words.size() > 1) {
          words.erase(words.begin() + static_cast<std::ptrdiff_t>(rng() % words.size()));
        }
      }
      std::string text;
      for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
      if (text.empty() || !seen.insert(text).second) continue;
      hyps.emplace_back(text, edit_distance(words, ref));
    }
    std::shuffle(hyps.begin(), hyps.end(), rng);
    for (const auto& [text, errors] : hyps) {
      NBestEntry e;
      e.utterance_id = id;
      e.acoustic_score = -1.0 * static_cast<double>(errors) - 10.0 + gauss(rng);
      e.text = text;
      list.entries.push_back(std::move(e));
    }
    out.lists.push_back(std::move(list));
  }
  return out;
}

}  // namespace fvlm::testing
