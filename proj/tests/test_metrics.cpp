#include <gtest/gtest.h>

#include "lexrl/metrics.hpp"
#include "lexrl/random.hpp"
#include "oracles.hpp"

using namespace lexrl;

namespace {

std::string random_sentence(Rng& rng, std::size_t min_len, std::size_t max_len, std::size_t vocab) {
  const std::size_t n = min_len + uniform_index(rng, max_len - min_len + 1);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + std::string("w") + std::to_string(uniform_index(rng, vocab));
  return s;
}

std::string random_text(Rng& rng, std::size_t max_len) {
  static const std::vector<std::string> alphabet = {"a", "b", "c", "\xC3\xB1", "\xC3\xBC", "\xE2\x82\xAC", " ",
                                                    "\xF0\x9F\x98\x80"};
  std::string s;
  const auto n = uniform_index(rng, max_len + 1);
  for (std::uint64_t i = 0; i < n; ++i) s += alphabet[uniform_index(rng, alphabet.size())];
  return s;
}

}  // namespace

TEST(Bleu, IdentityScoresOne) {
  for (const char* s : {"a", "a b", "a b c", "the cat sat on the mat", "x x x x x"}) EXPECT_DOUBLE_EQ(sentence_bleu(s, s), 1.0);
}

TEST(Bleu, NoSharedUnigramScoresZero) { EXPECT_EQ(sentence_bleu("perro gato", "casa sol luna"), 0.0); }

TEST(Bleu, EmptyHypothesisScoresZeroAndEmptyReferenceThrows) {
  EXPECT_EQ(sentence_bleu("", "a b"), 0.0);
  EXPECT_EQ(sentence_bleu("  \t", "a b"), 0.0);
  EXPECT_THROW(sentence_bleu("a", "  "), std::invalid_argument);
}

TEST(Bleu, WorkedExampleMatchesHandComputation) {
  // c = 3, r = 4: p1 = 3/3, p2 = (2+1)/(2+1), p3 = (1+1)/(1+1), p4 neutral.
  const double expected = std::exp(1.0 - 4.0 / 3.0);
  EXPECT_NEAR(sentence_bleu("the cat sat", "the cat sat down"), expected, 1e-15);
  EXPECT_NEAR(sentence_bleu("the cat sat", "the cat sat down"), oracle::bleu("the cat sat", "the cat sat down"), 1e-12);
}

TEST(Bleu, ClippingCountsEachReferenceOccurrenceOnce) {
  // unigram p1 = 2/7 for the classic "the the the ..." case, orders >= 2 smoothed
  const std::string h = "the the the the the the the", r = "the cat is on the mat";
  const double p1 = 2.0 / 7, p2 = 1.0 / 7, p3 = 1.0 / 6, p4 = 1.0 / 5;
  EXPECT_NEAR(sentence_bleu(h, r), std::pow(p1 * p2 * p3 * p4, 0.25), 1e-14);
}

TEST(Bleu, UnsmoothedCollapsesWithoutHigherOrderMatches) {
  BleuConfig cfg;
  cfg.smoothing = BleuSmoothing::None;
  EXPECT_EQ(sentence_bleu("a c b d", "a b c d", cfg), 0.0);
  EXPECT_GT(sentence_bleu("a c b d", "a b c d"), 0.0);
  EXPECT_THROW(sentence_bleu("a", "a", BleuConfig{0, BleuSmoothing::None}), std::invalid_argument);
}

TEST(Bleu, MatchesBruteForceOracleOnRandomPairs) {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto h = random_sentence(rng, 1, 20, 10), r = random_sentence(rng, 1, 20, 10);
    ASSERT_NEAR(sentence_bleu(h, r), oracle::bleu(h, r), 1e-12) << h << " | " << r;
    BleuConfig plain{2, BleuSmoothing::None};
    ASSERT_NEAR(sentence_bleu(h, r, plain), oracle::bleu(h, r, 2, false), 1e-12);
  }
}

TEST(Bleu, BoundedAndInvariantUnderTokenRenaming) {
  Rng rng(8);
  for (int i = 0; i < 300; ++i) {
    const auto h = random_sentence(rng, 1, 12, 6), r = random_sentence(rng, 1, 12, 6);
    const double b = sentence_bleu(h, r);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 1.0);
    auto rename = [](std::string s) {
      for (char& c : s)
        if (c == 'w') c = 'z';
      return s + " ";
    };
    EXPECT_EQ(sentence_bleu(rename(h), rename(r)), b);
  }
}

TEST(Cer, Examples) {
  EXPECT_EQ(character_error_rate("abc", "abc"), 0.0);
  EXPECT_DOUBLE_EQ(character_error_rate("abc", "axc"), 1.0 / 3.0);
  EXPECT_EQ(character_error_rate("", "abc"), 1.0);
  EXPECT_DOUBLE_EQ(character_error_rate("a\xC3\xB1o", "ano"), 1.0 / 3.0);
  EXPECT_THROW(character_error_rate("a", ""), std::invalid_argument);
}

TEST(Cer, MatchesDynamicProgrammingOracleExactly) {
  Rng rng(77);
  for (int i = 0; i < 1000; ++i) {
    const auto h = random_text(rng, 15);
    auto r = random_text(rng, 15);
    if (r.empty()) r = "a";
    const double c = character_error_rate(h, r);
    ASSERT_EQ(c, oracle::cer(h, r)) << h << " | " << r;
    EXPECT_LE(c, double(std::max(oracle::scalars(h).size(), oracle::scalars(r).size())) / oracle::scalars(r).size());
  }
}

TEST(Reward, MissingAnswerIsZeroAndBothKindsAreBounded) {
  Episode ep;
  EXPECT_EQ(reward(ep, "a b", RewardKind::Bleu), 0.0);
  EXPECT_EQ(reward(ep, "a b", RewardKind::Character), 0.0);
  ep.answer = "a b";
  EXPECT_EQ(reward(ep, "a b", RewardKind::Bleu), 1.0);
  EXPECT_EQ(reward(ep, "a b", RewardKind::Character), 1.0);
  ep.answer = "zzzzzzzzzzzzzzzzzz";
  EXPECT_EQ(reward(ep, "a b", RewardKind::Character), 0.0);
  EXPECT_THROW(reward(ep, " ", RewardKind::Bleu), std::invalid_argument);
}

TEST(Reward, KindNamesRoundTrip) {
  for (auto k : {RewardKind::Bleu, RewardKind::Character}) EXPECT_EQ(parse_reward_kind(to_string(k)), k);
  EXPECT_THROW(parse_reward_kind("chrf"), std::invalid_argument);
}

TEST(CorpusBleu, IsTheMeanOfSentenceScores) {
  EXPECT_DOUBLE_EQ(corpus_avg_bleu({{"a b", "a b"}, {"x", "a b"}}), 0.5);
  EXPECT_DOUBLE_EQ(corpus_avg_bleu({{"a b c", "a b d"}}), sentence_bleu("a b c", "a b d"));
  EXPECT_EQ(corpus_avg_bleu({{"", "a"}, {"a", "a"}}), 0.5);
  EXPECT_THROW(corpus_avg_bleu({}), std::invalid_argument);
}
