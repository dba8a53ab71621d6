#include "fvlm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "fvlm/error.hpp"
#include "fvlm/io.hpp"

namespace fvlm {

namespace {

bool is_reserved(std::string_view word) {
  return word == kBosWord || word == kEosWord || word == kUnkWord;
}

bool is_space(char ch) {
  return ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v';
}

}  // namespace

Vocabulary::Vocabulary() {
  insert(std::string(kBosWord));
  insert(std::string(kEosWord));
  insert(std::string(kUnkWord));
}

void Vocabulary::insert(const std::string& word) {
  auto [it, inserted] = index_.emplace(word, static_cast<TokenId>(words_.size()));
  if (!inserted) throw ValidationError("Vocabulary: duplicate word '" + word + "'");
  words_.push_back(word);
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary vocab;
  for (const auto& w : words) {
    if (is_reserved(w)) throw ValidationError("Vocabulary: reserved token '" + w + "' in word list");
    if (w.empty()) throw ValidationError("Vocabulary: empty word");
    vocab.insert(w);
  }
  return vocab;
}

Vocabulary Vocabulary::build_from_lines(const std::vector<std::string>& lines,
                                        std::size_t max_size, std::size_t min_count) {
  struct Entry {
    std::string word;
    std::size_t count = 0;
    std::size_t first_seen = 0;
  };
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<Entry> entries;
  std::size_t tokens = 0;
  for (const auto& line : lines) {
    for (auto& w : split_whitespace(line)) {
      ++tokens;
      if (is_reserved(w)) continue;
      auto [it, inserted] = slot.emplace(w, entries.size());
      if (inserted) entries.push_back({w, 0, entries.size()});
      ++entries[it->second].count;
    }
  }
  if (tokens == 0) throw ValidationError("build_vocab: corpus contains no tokens");

  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.count > b.count; });
  Vocabulary vocab;
  for (const auto& e : entries) {
    if (vocab.size() >= max_size) break;
    if (e.count < min_count) continue;
    vocab.insert(e.word);
  }
  return vocab;
}

Vocabulary Vocabulary::build(const std::filesystem::path& corpus_path, std::size_t max_size,
                             std::size_t min_count) {
  return build_from_lines(read_lines(corpus_path), max_size, min_count);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  if (lines.size() < 3 || lines[0] != kBosWord || lines[1] != kEosWord || lines[2] != kUnkWord) {
    throw FormatError("vocabulary file " + path.string() +
                      ": first three lines must be <s>, </s>, <unk>");
  }
  return from_words(std::vector<std::string>(lines.begin() + 3, lines.end()));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::string text;
  for (const auto& w : words_) {
    text += w;
    text += '\n';
  }
  write_file_atomic(path, text);
}

bool Vocabulary::contains(std::string_view word) const {
  return index_.find(std::string(word)) != index_.end();
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(words_.size()));
  }
  return words_[id];
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& w : words_) {
    for (unsigned char ch : w) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    h ^= static_cast<unsigned char>('\n');
    h *= 1099511628211ULL;
  }
  return h;
}

void validate(const TokenSequence& seq, std::size_t vocab_size) {
  if (seq.ids.size() < 2) {
    throw ValidationError("token sequence shorter than <s> </s>");
  }
  if (seq.ids.front() != kBos || seq.ids.back() != kEos) {
    throw ValidationError("token sequence must start with <s> and end with </s>");
  }
  for (std::size_t k = 0; k < seq.ids.size(); ++k) {
    const TokenId id = seq.ids[k];
    if (id >= vocab_size) {
      throw ValidationError("token id " + std::to_string(id) + " at position " +
                            std::to_string(k) + " outside vocabulary of size " +
                            std::to_string(vocab_size));
    }
    if (k > 0 && k + 1 < seq.ids.size() && (id == kBos || id == kEos)) {
      throw ValidationError("sentence marker inside token sequence at position " +
                            std::to_string(k));
    }
  }
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t k = 0;
  while (k < text.size()) {
    while (k < text.size() && is_space(text[k])) ++k;
    const std::size_t start = k;
    while (k < text.size() && !is_space(text[k])) ++k;
    if (k > start) out.emplace_back(text.substr(start, k - start));
  }
  return out;
}

TokenSequence encode(const Vocabulary& vocab, std::string_view sentence) {
  TokenSequence seq;
  seq.ids.push_back(kBos);
  for (const auto& w : split_whitespace(sentence)) {
    // Literal markers in text are not allowed to split the sequence.
    const TokenId id = vocab.id(w);
    seq.ids.push_back(id == kBos || id == kEos ? kUnk : id);
  }
  seq.ids.push_back(kEos);
  return seq;
}

std::string join_words(const Vocabulary& vocab, const std::vector<TokenId>& ids) {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

std::string decode(const Vocabulary& vocab, const TokenSequence& seq) {
  if (seq.ids.size() < 2) return {};
  return join_words(vocab, std::vector<TokenId>(seq.ids.begin() + 1, seq.ids.end() - 1));
}

TokenSequence reverse_sequence(const TokenSequence& seq) {
  TokenSequence out = seq;
  if (out.ids.size() > 2) std::reverse(out.ids.begin() + 1, out.ids.end() - 1);
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (in.bad()) throw IoError("error reading file " + path.string());
  return lines;
}

Corpus encode_corpus(const Vocabulary& vocab, const std::vector<std::string>& lines) {
  Corpus corpus;
  corpus.reserve(lines.size());
  for (const auto& line : lines) {
    if (split_whitespace(line).empty()) continue;
    corpus.push_back(encode(vocab, line));
  }
  return corpus;
}

Corpus read_corpus(const Vocabulary& vocab, const std::filesystem::path& path) {
  return encode_corpus(vocab, read_lines(path));
}

std::size_t predicted_positions(const Corpus& corpus) {
  return std::accumulate(corpus.begin(), corpus.end(), std::size_t{0},
                         [](std::size_t acc, const TokenSequence& s) {
                           return acc + (s.ids.empty() ? 0 : s.ids.size() - 1);
                         });
}

}  // namespace fvlm
