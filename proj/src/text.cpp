#include "dysmm/text.hpp"

#include "dysmm/error.hpp"

namespace dysmm {

std::string normalize_word(std::string_view raw) {
  std::string out;
  for (char ch : raw) {
    if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
    if (ch >= 'a' && ch <= 'z') out.push_back(ch);
  }
  if (out.empty()) throw InvariantError("word '" + std::string(raw) + "' has no alphabetic characters");
  return out;
}

TokenSequence tokenize(std::string_view word) {
  if (word.empty()) throw InvariantError("tokenize: empty word");
  TokenSequence seq;
  seq.tokens.reserve(word.size());
  for (char ch : word) {
    if (ch < 'a' || ch > 'z') throw InvariantError("tokenize: '" + std::string(word) + "' is not normalized");
    seq.tokens.push_back(ch - 'a');
  }
  return seq;
}

std::string detokenize(const TokenSequence& seq) {
  std::string out;
  for (int t : seq.tokens) {
    if (t < 0 || t >= kAlphabetSize) throw InvariantError("detokenize: token " + std::to_string(t) + " out of range");
    out.push_back(static_cast<char>('a' + t));
  }
  return out;
}

}  // namespace dysmm
