#include "neolab/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <unordered_set>

namespace neolab {

namespace {

constexpr std::array<std::string_view, 7> kGlyphs = {"’", "‘", "“", "”",
                                                     "—", "–", "…"};

const std::vector<std::string_view>& alphabet_storage() {
  static const std::vector<std::string_view> chars = [] {
    static std::vector<std::string> owned;
    for (char c = 0x21; c <= 0x7E; ++c) owned.emplace_back(1, c);
    owned.emplace_back("\n");
    std::vector<std::string_view> out(owned.begin(), owned.end());
    out.insert(out.end(), kGlyphs.begin(), kGlyphs.end());
    return out;
  }();
  return chars;
}

const std::unordered_set<std::string_view>& alphabet_set() {
  static const std::unordered_set<std::string_view> set(alphabet_storage().begin(),
                                                        alphabet_storage().end());
  return set;
}

bool is_apostrophe(std::string_view cp) { return cp == "'" || cp == "’"; }

bool is_word_char(std::string_view cp) {
  if (cp.size() != 1) return false;
  const char c = cp[0];
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '~' ||
         c == '_';
}

bool is_continuable(std::string_view cp) { return is_word_char(cp) || is_apostrophe(cp); }

bool no_space_before(std::string_view cp) {
  static const std::unordered_set<std::string_view> set = {
      ".", ",", "?", "!", ":", ";", ")", "]", "}", "'", "’", "”", "-", "\n", "…"};
  return set.contains(cp);
}

bool no_space_after(std::string_view cp) {
  static const std::unordered_set<std::string_view> set = {"(", "[", "{", "“", "‘",
                                                           "-", "\n"};
  return set.contains(cp);
}

std::size_t cp_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 0;
}

// Returns the code point starting at `pos` (as a UTF-8 slice) or throws.
std::string_view code_point_at(std::string_view text, std::size_t pos) {
  const std::size_t len = cp_length(static_cast<unsigned char>(text[pos]));
  if (len == 0 || pos + len > text.size()) {
    throw TokenizerError("invalid UTF-8 at byte " + std::to_string(pos));
  }
  return text.substr(pos, len);
}

std::vector<std::string_view> code_points(std::string_view text) {
  std::vector<std::string_view> out;
  for (std::size_t pos = 0; pos < text.size();) {
    auto cp = code_point_at(text, pos);
    out.push_back(cp);
    pos += cp.size();
  }
  return out;
}

std::string_view last_code_point(std::string_view s) {
  std::size_t pos = s.size();
  while (pos > 0) {
    --pos;
    if ((static_cast<unsigned char>(s[pos]) & 0xC0) != 0x80) break;
  }
  return s.substr(pos);
}

struct Piece {
  std::string_view text;
  std::size_t spaces_before = 0;
};

std::vector<Piece> scan(std::string_view text, std::size_t& trailing_spaces) {
  std::vector<Piece> pieces;
  std::size_t spaces = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text[pos] == ' ') {
      ++spaces;
      ++pos;
      continue;
    }
    auto cp = code_point_at(text, pos);
    if (!alphabet_set().contains(cp)) {
      throw TokenizerError("character '" + std::string(cp) + "' at byte " + std::to_string(pos) +
                           " is outside the tokenizer alphabet");
    }
    std::size_t end = pos + cp.size();
    if (is_word_char(cp)) {
      while (end < text.size()) {
        auto next = code_point_at(text, end);
        if (is_word_char(next)) {
          end += next.size();
          continue;
        }
        if (is_apostrophe(next) && end + next.size() < text.size()) {
          auto after = code_point_at(text, end + next.size());
          if (is_word_char(after)) {
            end += next.size() + after.size();
            continue;
          }
        }
        break;
      }
    }
    pieces.push_back(Piece{text.substr(pos, end - pos), spaces});
    spaces = 0;
    pos = end;
  }
  trailing_spaces = spaces;
  return pieces;
}

std::size_t default_spaces(bool first, std::string_view prev_last, std::string_view first_cp) {
  if (first) return 0;
  if (no_space_before(first_cp) || no_space_after(prev_last)) return 0;
  return 1;
}

}  // namespace

std::span<const std::string_view> tokenizer_alphabet() { return alphabet_storage(); }

bool is_word_piece(std::string_view piece) {
  if (piece.empty()) return false;
  std::size_t trailing = 0;
  std::vector<Piece> pieces;
  try {
    pieces = scan(piece, trailing);
  } catch (const TokenizerError&) {
    return false;
  }
  return pieces.size() == 1 && trailing == 0 && pieces[0].spaces_before == 0 &&
         is_word_char(code_point_at(piece, 0));
}

std::vector<std::string> split_pieces(std::string_view text) {
  std::size_t trailing = 0;
  auto pieces = scan(text, trailing);
  std::vector<std::string> out;
  out.reserve(pieces.size());
  for (const auto& p : pieces) out.emplace_back(p.text);
  return out;
}

Vocabulary Vocabulary::build(std::span<const std::string> lexicon) {
  Vocabulary v;
  for (auto s : {kPad, kBos, kEos, kSpace, kNoSpace}) v.push(std::string(s));
  for (auto cp : alphabet_storage()) v.push(std::string(cp));
  for (auto cp : alphabet_storage()) {
    if (is_continuable(cp)) v.push("##" + std::string(cp));
  }
  v.lexicon_begin_ = v.tokens_.size();
  for (const auto& word : lexicon) {
    if (v.index_.contains(word)) continue;
    if (!is_word_piece(word)) {
      throw TokenizerError("lexicon entry '" + word + "' is not a single word piece");
    }
    v.push(word);
  }
  v.base_size_ = v.tokens_.size();
  return v;
}

Vocabulary Vocabulary::restore(std::vector<std::string> tokens, std::size_t base_size) {
  Vocabulary v;
  if (base_size > tokens.size()) throw TokenizerError("restore: base size exceeds token count");
  for (auto& t : tokens) v.push(std::move(t));
  v.base_size_ = base_size;
  // Lexicon entries start right after the last continuation token.
  std::size_t lex = 0;
  for (std::size_t i = 0; i < base_size; ++i) {
    if (v.tokens_[i].rfind("##", 0) == 0 && v.tokens_[i].size() > 2) lex = i + 1;
  }
  v.lexicon_begin_ = lex;
  return v;
}

TokenId Vocabulary::push(std::string surface) {
  if (index_.contains(surface)) throw TokenizerError("duplicate token '" + surface + "'");
  const auto id = static_cast<TokenId>(tokens_.size());
  index_.emplace(surface, id);
  tokens_.push_back(std::move(surface));
  return id;
}

TokenId Vocabulary::add_neologism(const std::string& surface) {
  if (index_.contains(surface)) {
    throw TokenizerError("neologism '" + surface + "' is already in the vocabulary");
  }
  if (!is_word_piece(surface)) {
    throw TokenizerError("neologism '" + surface + "' is not a single word piece");
  }
  return push(surface);
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw TokenizerError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view surface) const {
  auto it = index_.find(std::string(surface));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view surface) const {
  auto found = find(surface);
  if (!found) throw TokenizerError("unknown token '" + std::string(surface) + "'");
  return *found;
}

bool Vocabulary::is_continuation(TokenId id) const {
  const auto& t = token(id);
  return !is_special(id) && static_cast<std::size_t>(id) < lexicon_begin_ && t.size() > 2 &&
         t.rfind("##", 0) == 0;
}

std::vector<TokenId> Vocabulary::neologism_ids() const {
  std::vector<TokenId> out;
  for (std::size_t i = base_size_; i < tokens_.size(); ++i) out.push_back(static_cast<TokenId>(i));
  return out;
}

bool Vocabulary::in_lexicon(std::string_view word) const {
  auto found = find(word);
  return found && static_cast<std::size_t>(*found) >= lexicon_begin_ &&
         static_cast<std::size_t>(*found) < base_size_;
}

std::vector<TokenId> tokenize(const Vocabulary& vocab, std::string_view text) {
  std::size_t trailing = 0;
  auto pieces = scan(text, trailing);
  std::vector<TokenId> ids;
  ids.reserve(pieces.size() + 4);
  std::string_view prev_last;
  bool first = true;
  for (const auto& piece : pieces) {
    auto cps = code_points(piece.text);
    const std::size_t def = default_spaces(first, prev_last, cps.front());
    if (piece.spaces_before < def) {
      ids.push_back(vocab.no_space());
    } else {
      for (std::size_t i = def; i < piece.spaces_before; ++i) ids.push_back(vocab.space());
    }
    if (auto whole = vocab.find(piece.text); whole && !vocab.is_special(*whole)) {
      ids.push_back(*whole);
    } else {
      ids.push_back(vocab.id(cps.front()));
      for (std::size_t i = 1; i < cps.size(); ++i) ids.push_back(vocab.id("##" + std::string(cps[i])));
    }
    prev_last = cps.back();
    first = false;
  }
  for (std::size_t i = 0; i < trailing; ++i) ids.push_back(vocab.space());
  return ids;
}

std::string detokenize(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::string out;
  std::size_t extra = 0;
  bool suppress = false;
  bool first = true;
  std::string prev_last;
  for (TokenId id : ids) {
    if (id == vocab.space()) {
      ++extra;
      continue;
    }
    if (id == vocab.no_space()) {
      suppress = true;
      continue;
    }
    if (vocab.is_special(id)) continue;
    const auto& surface = vocab.token(id);
    if (vocab.is_continuation(id)) {
      auto cp = std::string_view(surface).substr(2);
      out.append(extra, ' ');
      extra = 0;
      out.append(cp);
      prev_last = std::string(cp);
      first = false;
      continue;
    }
    auto first_cp = code_point_at(surface, 0);
    std::size_t def = default_spaces(first, prev_last, first_cp);
    if (suppress) def = 0;
    out.append(def + extra, ' ');
    out.append(surface);
    prev_last = std::string(last_code_point(surface));
    extra = 0;
    suppress = false;
    first = false;
  }
  out.append(extra, ' ');
  return out;
}

}  // namespace neolab
