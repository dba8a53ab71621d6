#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fvlm {

using TokenId = std::uint32_t;

inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kUnk = 2;

inline constexpr std::string_view kBosWord = "<s>";
inline constexpr std::string_view kEosWord = "</s>";
inline constexpr std::string_view kUnkWord = "<unk>";

/// Word <-> id map. Ids are contiguous; 0, 1, 2 are <s>, </s>, <unk>.
class Vocabulary {
 public:
  /// Only the three reserved tokens.
  Vocabulary();

  /// Reserved tokens followed by words (which must not repeat or contain
  /// reserved tokens).
  static Vocabulary from_words(const std::vector<std::string>& words);

  /// Reserved tokens plus the most frequent words of a one-sentence-per-line
  /// corpus. max_size counts the reserved tokens. Words seen fewer than
  /// min_count times are dropped; frequency ties keep first-occurrence order.
  static Vocabulary build(const std::filesystem::path& corpus_path, std::size_t max_size,
                          std::size_t min_count = 1);
  static Vocabulary build_from_lines(const std::vector<std::string>& lines,
                                     std::size_t max_size, std::size_t min_count = 1);

  /// One word per line, line number = id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return words_.size(); }
  bool contains(std::string_view word) const;
  /// <unk> for unknown words.
  TokenId id(std::string_view word) const;
  const std::string& word(TokenId id) const;
  const std::vector<std::string>& words() const { return words_; }

  /// FNV-1a over the newline-joined word list.
  std::uint64_t hash() const;

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  void insert(const std::string& word);

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

/// <s> w_1 ... w_K </s>
struct TokenSequence {
  std::vector<TokenId> ids;

  std::size_t size() const { return ids.size(); }
  /// Number of tokens strictly between the markers.
  std::size_t interior_size() const { return ids.size() < 2 ? 0 : ids.size() - 2; }
  bool operator==(const TokenSequence&) const = default;
};

using Corpus = std::vector<TokenSequence>;

/// Throws ValidationError unless seq is <s> ... </s> with no inner markers
/// and all ids below vocab_size.
void validate(const TokenSequence& seq, std::size_t vocab_size);

std::vector<std::string> split_whitespace(std::string_view text);

/// Whitespace tokenization, OOV -> <unk>, wrapped in <s> ... </s>.
TokenSequence encode(const Vocabulary& vocab, std::string_view sentence);

/// Interior words joined by single spaces.
std::string decode(const Vocabulary& vocab, const TokenSequence& seq);
std::string join_words(const Vocabulary& vocab, const std::vector<TokenId>& ids);

/// Reverses the interior; the markers stay at the ends.
TokenSequence reverse_sequence(const TokenSequence& seq);

/// Lines of a UTF-8 text file. Throws IoError naming the path.
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Encodes every line. Blank lines are skipped.
Corpus encode_corpus(const Vocabulary& vocab, const std::vector<std::string>& lines);
Corpus read_corpus(const Vocabulary& vocab, const std::filesystem::path& path);

/// Total number of predicted positions (tokens after <s>).
std::size_t predicted_positions(const Corpus& corpus);

}  // namespace fvlm
