#include "minibert/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "minibert/error.hpp"

namespace minibert {
namespace {

constexpr std::size_t kMaxCharsPerWord = 100;

const std::vector<std::string>& SpecialTokens() {
  static const std::vector<std::string> specials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return specials;
}

bool IsAsciiSpace(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool IsAsciiPunct(unsigned char c) {
  return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) ||
         (c >= 123 && c <= 126);
}

std::size_t Utf8Length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

std::vector<std::string> InitialSymbols(const std::string& word) {
  auto chars = Utf8Chars(word);
  for (std::size_t i = 1; i < chars.size(); ++i) chars[i] = std::string(kContinuationPrefix) + chars[i];
  return chars;
}

std::string MergeSymbols(const std::string& left, const std::string& right) {
  // right always carries the continuation prefix
  return left + right.substr(kContinuationPrefix.size());
}

}  // namespace

std::vector<std::string> Utf8Chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = Utf8Length(static_cast<unsigned char>(text[i]));
    if (i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> PreTokenize(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (IsAsciiSpace(c)) {
      flush();
    } else if (IsAsciiPunct(c)) {
      flush();
      words.emplace_back(1, ch);
    } else if (c >= 'A' && c <= 'Z') {
      current.push_back(static_cast<char>(c - 'A' + 'a'));
    } else {
      current.push_back(ch);
    }
  }
  flush();
  return words;
}

// ---------------------------------------------------------------------------
// Vocab

Vocab Vocab::FromTokens(std::vector<std::string> tokens) {
  const auto& specials = SpecialTokens();
  if (tokens.size() < specials.size() ||
      !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    Fail(ErrorKind::kParse, "vocabulary must start with [PAD] [UNK] [CLS] [SEP] [MASK]");
  }
  Vocab v;
  v.token_to_id_.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].empty()) Fail(ErrorKind::kParse, "empty token at id " + std::to_string(i));
    if (!v.token_to_id_.emplace(tokens[i], static_cast<std::int32_t>(i)).second) {
      Fail(ErrorKind::kParse, "duplicate token '" + tokens[i] + "' at id " + std::to_string(i));
    }
  }
  v.id_to_token_ = std::move(tokens);
  return v;
}

Vocab Vocab::Load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot open vocabulary file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  bool in_header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (in_header && !line.empty() && line[0] == '#') continue;
    in_header = false;
    tokens.push_back(line);
  }
  while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  return FromTokens(std::move(tokens));
}

void Vocab::Save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write vocabulary file: " + path);
  out << "# minibert vocabulary: one token per line, id = line index after this header\n";
  out << "# size " << id_to_token_.size() << "\n";
  for (const auto& t : id_to_token_) out << t << '\n';
  if (!out) Fail(ErrorKind::kIo, "failed writing vocabulary file: " + path);
}

std::int32_t Vocab::IdOf(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? -1 : it->second;
}

const std::string& Vocab::Token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    Fail(ErrorKind::kContract, "token id " + std::to_string(id) + " outside vocabulary of " +
                                   std::to_string(id_to_token_.size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------------------
// Vocabulary construction

Vocab BuildVocab(std::span<const std::string> corpus, std::size_t target_size) {
  std::map<std::string, std::uint64_t> word_counts;
  for (const auto& line : corpus) {
    for (auto& w : PreTokenize(line)) ++word_counts[w];
  }
  if (word_counts.empty()) Fail(ErrorKind::kInvalidArgument, "cannot build a vocabulary from an empty corpus");

  std::set<std::string> alphabet;
  std::set<std::string> base;
  std::vector<std::vector<std::string>> words;
  std::vector<std::uint64_t> counts;
  for (const auto& [w, c] : word_counts) {
    auto symbols = InitialSymbols(w);
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      base.insert(symbols[i]);
      alphabet.insert(i == 0 ? symbols[i] : symbols[i].substr(kContinuationPrefix.size()));
    }
    words.push_back(std::move(symbols));
    counts.push_back(c);
  }
  if (target_size < static_cast<std::size_t>(kNumSpecialTokens) + alphabet.size()) {
    Fail(ErrorKind::kInvalidArgument,
         "target vocabulary size " + std::to_string(target_size) + " is below 5 specials + " +
             std::to_string(alphabet.size()) + " corpus characters");
  }

  std::vector<std::string> tokens = SpecialTokens();
  std::set<std::string> present(tokens.begin(), tokens.end());
  for (const auto& s : base) {
    if (present.insert(s).second) tokens.push_back(s);
  }

  while (tokens.size() < target_size) {
    std::map<std::pair<std::string, std::string>, std::uint64_t> pairs;
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& sym = words[w];
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) pairs[{sym[i], sym[i + 1]}] += counts[w];
    }
    if (pairs.empty()) break;
    // Highest count wins; std::map order breaks ties lexicographically.
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto [left, right] = best->first;
    const std::string merged = MergeSymbols(left, right);
    for (auto& sym : words) {
      std::vector<std::string> next;
      next.reserve(sym.size());
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == left && sym[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(sym[i]);
        }
      }
      sym = std::move(next);
    }
    if (present.insert(merged).second) tokens.push_back(merged);
  }
  return Vocab::FromTokens(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Encoding

namespace {

void SegmentWord(const Vocab& vocab, const std::string& word, std::vector<std::int32_t>& out) {
  const auto chars = Utf8Chars(word);
  if (chars.size() > kMaxCharsPerWord) {
    out.push_back(kUnkId);
    return;
  }
  // Byte offsets of code point boundaries.
  std::vector<std::size_t> offsets{0};
  for (const auto& c : chars) offsets.push_back(offsets.back() + c.size());

  std::vector<std::int32_t> pieces;
  std::size_t start = 0;
  while (start < chars.size()) {
    std::int32_t found = -1;
    std::size_t end = chars.size();
    for (; end > start; --end) {
      std::string piece = word.substr(offsets[start], offsets[end] - offsets[start]);
      if (start > 0) piece = std::string(kContinuationPrefix) + piece;
      found = vocab.IdOf(piece);
      if (found >= kNumSpecialTokens) break;
      found = -1;
    }
    if (found < 0) {
      out.push_back(kUnkId);
      return;
    }
    pieces.push_back(found);
    start = end;
  }
  out.insert(out.end(), pieces.begin(), pieces.end());
}

}  // namespace

TokenizedText Tokenize(const Vocab& vocab, std::string_view text) {
  TokenizedText t;
  const auto words = PreTokenize(text);
  for (std::size_t w = 0; w < words.size(); ++w) {
    SegmentWord(vocab, words[w], t.ids);
    t.word_index.resize(t.ids.size(), w);
  }
  return t;
}

TokenizedPair EncodePair(const Vocab& /*vocab*/, const TokenizedText& a, const TokenizedText* b,
                         std::size_t max_len) {
  if (max_len < 3) Fail(ErrorKind::kInvalidArgument, "max_len must be at least 3");
  const std::size_t specials = b ? 3 : 2;
  const std::size_t budget = max_len - specials;
  std::size_t len_a = a.ids.size();
  std::size_t len_b = b ? b->ids.size() : 0;
  while (len_a + len_b > budget) {
    if (len_a > len_b) {
      --len_a;
    } else {
      --len_b;
    }
  }

  TokenizedPair p;
  p.ids.reserve(max_len);
  auto append_sentence = [&](const TokenizedText& s, std::size_t len, std::int32_t segment) {
    std::size_t group_start = p.ids.size();
    for (std::size_t i = 0; i < len; ++i) {
      if (i > 0 && s.word_index[i] != s.word_index[i - 1]) {
        p.word_boundaries.push_back({group_start, p.ids.size()});
        group_start = p.ids.size();
      }
      p.ids.push_back(s.ids[i]);
      p.segments.push_back(segment);
    }
    if (len > 0) p.word_boundaries.push_back({group_start, p.ids.size()});
    p.ids.push_back(kSepId);
    p.segments.push_back(segment);
  };

  p.ids.push_back(kClsId);
  p.segments.push_back(0);
  append_sentence(a, len_a, 0);
  if (b) append_sentence(*b, len_b, 1);
  p.attn_mask.assign(p.ids.size(), 1);
  p.ids.resize(max_len, kPadId);
  p.segments.resize(max_len, 0);
  p.attn_mask.resize(max_len, 0);
  return p;
}

TokenizedPair EncodePair(const Vocab& vocab, std::string_view a, std::optional<std::string_view> b,
                         std::size_t max_len) {
  const TokenizedText ta = Tokenize(vocab, a);
  if (!b) return EncodePair(vocab, ta, nullptr, max_len);
  const TokenizedText tb = Tokenize(vocab, *b);
  return EncodePair(vocab, ta, &tb, max_len);
}

std::string Decode(const Vocab& vocab, std::span<const std::int32_t> ids) {
  std::string out;
  for (std::int32_t id : ids) {
    if (id == kPadId || id == kClsId || id == kSepId) continue;
    const std::string& tok = vocab.Token(id);
    if (tok.rfind(kContinuationPrefix, 0) == 0 && !Vocab::IsSpecial(id)) {
      out += tok.substr(kContinuationPrefix.size());
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

}  // namespace minibert
