#include <gtest/gtest.h>

#include <map>
#include <set>

#include "dysmm/error.hpp"
#include "dysmm/harness.hpp"
#include "dysmm/text.hpp"

using namespace dysmm;

TEST(NormalizeWord, FoldsCase) { EXPECT_EQ(normalize_word("Alpha"), "alpha"); }

TEST(NormalizeWord, DropsNonLetters) { EXPECT_EQ(normalize_word("mother-in-law"), "motherinlaw"); }

TEST(NormalizeWord, RejectsDigitsOnly) {
  EXPECT_THROW(normalize_word("123"), InvariantError);
  EXPECT_THROW(normalize_word(""), InvariantError);
}

TEST(Tokenize, MapsLettersFromZero) {
  EXPECT_EQ(tokenize("one").tokens, (std::vector<int>{14, 13, 4}));
  EXPECT_EQ(tokenize("a").tokens, (std::vector<int>{0}));
  EXPECT_EQ(tokenize("z").tokens, (std::vector<int>{25}));
}

TEST(Tokenize, RejectsUnnormalizedInput) {
  EXPECT_THROW(tokenize("One"), InvariantError);
  EXPECT_THROW(tokenize("a b"), InvariantError);
  EXPECT_THROW(tokenize(""), InvariantError);
}

TEST(Tokenize, RoundTripAndInjectiveOnAllShortWords) {
  // Every word of length <= 3 over a-z: 26 + 676 + 17576 strings.
  std::set<std::vector<int>> seen;
  std::string w;
  for (int len = 1; len <= 3; ++len) {
    w.assign(len, 'a');
    while (true) {
      auto seq = tokenize(w);
      ASSERT_EQ(detokenize(seq), w);
      for (int t : seq.tokens) ASSERT_TRUE(t >= 0 && t < kAlphabetSize);
      ASSERT_TRUE(seen.insert(seq.tokens).second);
      int i = len - 1;
      while (i >= 0 && w[i] == 'z') w[i--] = 'a';
      if (i < 0) break;
      ++w[i];
    }
  }
  EXPECT_EQ(seen.size(), 26u + 676u + 17576u);
}

TEST(Tokenize, RoundTripOverCorpusVocabulary) {
  const Manifest layout = ua_speech_layout();
  std::map<std::string, std::string> texts;
  for (const auto& r : layout.records()) texts[r.word_id] = r.word_text;
  ASSERT_EQ(texts.size(), 455u);
  std::map<std::vector<int>, std::string> seen;
  for (const auto& [id, raw] : texts) {
    const std::string w = normalize_word(raw);
    const auto seq = tokenize(w);
    EXPECT_EQ(detokenize(seq), w);
    auto [it, fresh] = seen.emplace(seq.tokens, w);
    EXPECT_TRUE(fresh || it->second == w) << id;
  }
}
