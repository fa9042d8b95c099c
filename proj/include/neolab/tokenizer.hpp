#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace neolab {

using TokenId = std::int32_t;

class TokenizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Token inventory of the toy model.
///
/// Layout of the base vocabulary, in id order:
///   specials  <pad> <bos> <eos> <sp> <nosp>
///   one token per alphabet character (word-initial form)
///   "##c" continuation tokens for every word character
///   lexicon words
/// Neologisms are appended after the base vocabulary.
///
/// Text is split into pieces: maximal runs of word characters (letters,
/// digits, '~', '_', plus apostrophes between word characters) and single
/// punctuation characters. A piece found in the vocabulary maps to one id;
/// any other piece is spelled with its first character followed by
/// continuation tokens. Spaces are implicit: one space precedes each piece
/// except after an opening bracket/dash/newline or before closing
/// punctuation. <sp> adds a literal space, <nosp> drops the implicit one, so
/// decoding is lossless for every string over the alphabet.
class Vocabulary {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";
  static constexpr std::string_view kSpace = "<sp>";
  static constexpr std::string_view kNoSpace = "<nosp>";

  /// Builds the base vocabulary. Words already covered (single characters)
  /// and duplicates are skipped; a word that is not a single piece throws.
  static Vocabulary build(std::span<const std::string> lexicon);

  /// Restores a vocabulary from a saved token list.
  static Vocabulary restore(std::vector<std::string> tokens, std::size_t base_size);

  TokenId add_neologism(const std::string& surface);

  std::size_t size() const { return tokens_.size(); }
  std::size_t base_size() const { return base_size_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const;

  std::optional<TokenId> find(std::string_view surface) const;
  TokenId id(std::string_view surface) const;

  TokenId pad() const { return 0; }
  TokenId bos() const { return 1; }
  TokenId eos() const { return 2; }
  TokenId space() const { return 3; }
  TokenId no_space() const { return 4; }

  bool is_special(TokenId id) const { return id >= 0 && id < 5; }
  bool is_continuation(TokenId id) const;
  bool is_neologism(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) >= base_size_; }
  std::vector<TokenId> neologism_ids() const;

  /// True when `word` is one lexicon entry (multi-character word piece).
  bool in_lexicon(std::string_view word) const;

 private:
  TokenId push(std::string surface);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t base_size_ = 0;
  std::size_t lexicon_begin_ = 0;
};

/// Characters the tokenizer accepts besides ' ' (UTF-8 encoded).
std::span<const std::string_view> tokenizer_alphabet();

/// Splits text into word/punctuation pieces (whitespace dropped).
std::vector<std::string> split_pieces(std::string_view text);
bool is_word_piece(std::string_view piece);

std::vector<TokenId> tokenize(const Vocabulary& vocab, std::string_view text);
std::string detokenize(const Vocabulary& vocab, std::span<const TokenId> ids);

}  // namespace neolab
