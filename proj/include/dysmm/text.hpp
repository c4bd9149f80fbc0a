#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace dysmm {

/// Character tokens 'a'..'z' map to 0..25.
inline constexpr int kAlphabetSize = 26;
/// Reserved id used only for batch padding; the embedding table has 27 rows.
inline constexpr int kPadToken = 26;
inline constexpr int kEmbeddingRows = 27;

struct TokenSequence {
  std::vector<int> tokens;

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Lower-cases and drops every character outside a-z. Throws InvariantError
/// when nothing alphabetic remains.
std::string normalize_word(std::string_view raw);

/// Throws InvariantError when `word` is empty or not already normalized.
TokenSequence tokenize(std::string_view word);

std::string detokenize(const TokenSequence& seq);

}  // namespace dysmm
