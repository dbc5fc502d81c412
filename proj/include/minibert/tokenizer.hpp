#pragma once

// WordPiece-style subword vocabulary and BERT input encoding.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace minibert {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kClsId = 2;
inline constexpr std::int32_t kSepId = 3;
inline constexpr std::int32_t kMaskId = 4;
inline constexpr std::int32_t kNumSpecialTokens = 5;

inline constexpr std::string_view kContinuationPrefix = "##";

class Vocab {
 public:
  // The first five tokens must be [PAD] [UNK] [CLS] [SEP] [MASK]; tokens
  // must be unique and non-empty.
  static Vocab FromTokens(std::vector<std::string> tokens);

  // One token per line, line order = id. Leading lines starting with '#'
  // form a comment header; the first token line is always [PAD].
  static Vocab Load(const std::string& path);
  void Save(const std::string& path) const;

  std::size_t size() const { return id_to_token_.size(); }
  // -1 when absent.
  std::int32_t IdOf(std::string_view token) const;
  const std::string& Token(std::int32_t id) const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  static bool IsSpecial(std::int32_t id) { return id >= 0 && id < kNumSpecialTokens; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::int32_t> token_to_id_;
};

// Lowercases ASCII and splits on whitespace; every ASCII punctuation
// character becomes a word of its own.
std::vector<std::string> PreTokenize(std::string_view text);

// Splits a UTF-8 string into code points (invalid bytes stand alone).
std::vector<std::string> Utf8Chars(std::string_view text);

// Frequency-driven pair merging over the pre-tokenized corpus, seeded with
// every observed character in word-initial and "##" continuation form,
// until the vocabulary reaches target_size or no pair remains. The
// character inventory is always kept, so the result can exceed target_size
// when the corpus alphabet alone does.
Vocab BuildVocab(std::span<const std::string> corpus, std::size_t target_size);

// Sentence-level tokenization before pair layout.
struct TokenizedText {
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> word_index;  // word number of each piece
};

// Greedy longest-match-first segmentation of each pre-token. A word that
// cannot be fully segmented becomes a single [UNK].
TokenizedText Tokenize(const Vocab& vocab, std::string_view text);

struct WordSpan {
  std::size_t begin;
  std::size_t end;  // exclusive
  bool operator==(const WordSpan&) const = default;
};

struct TokenizedPair {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segments;
  std::vector<std::uint8_t> attn_mask;
  std::vector<WordSpan> word_boundaries;

  std::size_t size() const { return ids.size(); }
};

// [CLS] A [SEP] (B [SEP])? [PAD]... padded to exactly max_len. Overlong
// input is truncated from the end of the longer sentence (B on ties).
TokenizedPair EncodePair(const Vocab& vocab, const TokenizedText& a,
                         const TokenizedText* b, std::size_t max_len);
TokenizedPair EncodePair(const Vocab& vocab, std::string_view a,
                         std::optional<std::string_view> b, std::size_t max_len);

// Joins pieces back into text: "##" pieces attach to the previous piece,
// other pieces are space separated, [CLS]/[SEP]/[PAD] are dropped.
std::string Decode(const Vocab& vocab, std::span<const std::int32_t> ids);

}  // namespace minibert
