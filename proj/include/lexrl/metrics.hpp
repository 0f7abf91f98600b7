#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lexrl/protocol.hpp"
#include "lexrl/text.hpp"

namespace lexrl {

enum class BleuSmoothing { None, AddOneHigherOrders };
enum class RewardKind { Bleu, Character };

struct BleuConfig {
  std::size_t max_order = 4;
  BleuSmoothing smoothing = BleuSmoothing::AddOneHigherOrders;
};

inline std::string to_string(RewardKind k) { return k == RewardKind::Bleu ? "bleu" : "character"; }

inline RewardKind parse_reward_kind(std::string_view s) {
  if (s == "bleu") return RewardKind::Bleu;
  if (s == "character") return RewardKind::Character;
  throw std::invalid_argument("unknown reward kind '" + std::string(s) + "'");
}

namespace detail {

using Ngram = std::vector<std::string_view>;

inline std::map<Ngram, std::size_t> count_ngrams(const std::vector<std::string>& words, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    Ngram g(words.begin() + static_cast<std::ptrdiff_t>(i), words.begin() + static_cast<std::ptrdiff_t>(i + n));
    ++counts[g];
  }
  return counts;
}

}  // namespace detail

/// Sentence-level BLEU in [0, 1] over whitespace tokens.
///
/// Modified precisions use clipped counts. With AddOneHigherOrders, orders
/// n >= 2 add one to matches and candidates when the hypothesis has at
/// least n tokens. An order with no candidate n-grams (hypothesis shorter
/// than n) contributes a neutral factor, so BLEU(x, x) = 1 for every
/// non-empty x. Weights stay 1/N.
inline double sentence_bleu(std::string_view hypothesis, std::string_view reference, const BleuConfig& cfg = {}) {
  if (cfg.max_order < 1) throw std::invalid_argument("BLEU max_order must be >= 1");
  const auto ref = split_words(reference);
  if (ref.empty()) throw std::invalid_argument("sentence_bleu: empty reference");
  const auto hyp = split_words(hypothesis);
  if (hyp.empty()) return 0.0;

  double log_sum = 0.0;
  for (std::size_t n = 1; n <= cfg.max_order; ++n) {
    if (hyp.size() < n) continue;
    const auto hyp_counts = detail::count_ngrams(hyp, n);
    const auto ref_counts = detail::count_ngrams(ref, n);
    double matched = 0.0;
    for (const auto& [gram, c] : hyp_counts) {
      const auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += static_cast<double>(std::min(c, it->second));
    }
    double candidates = static_cast<double>(hyp.size() - n + 1);
    if (n >= 2 && cfg.smoothing == BleuSmoothing::AddOneHigherOrders) {
      matched += 1.0;
      candidates += 1.0;
    }
    if (matched == 0.0) return 0.0;
    log_sum += std::log(matched / candidates) / static_cast<double>(cfg.max_order);
  }
  const double c = static_cast<double>(hyp.size());
  const double r = static_cast<double>(ref.size());
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum);
}

/// Unit-cost Levenshtein distance over Unicode scalar values.
inline std::size_t edit_distance(std::u32string_view a, std::u32string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double character_error_rate(std::string_view hypothesis, std::string_view reference) {
  const auto ref = utf8_to_scalars(reference);
  if (ref.empty()) throw std::invalid_argument("character_error_rate: empty reference");
  const auto hyp = utf8_to_scalars(hypothesis);
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

/// Reward of an answer string; a missing answer scores 0.
inline double answer_reward(const std::optional<std::string>& answer, std::string_view reference,
                            RewardKind kind, const BleuConfig& cfg = {}) {
  if (trim(reference).empty()) throw std::invalid_argument("reward: empty reference");
  if (!answer) return 0.0;
  if (kind == RewardKind::Bleu) return sentence_bleu(*answer, reference, cfg);
  return std::max(0.0, 1.0 - character_error_rate(*answer, reference));
}

inline double reward(const Episode& episode, std::string_view reference, RewardKind kind,
                     const BleuConfig& cfg = {}) {
  return answer_reward(episode.answer, reference, kind, cfg);
}

/// Mean sentence BLEU, summed in input order.
inline double corpus_avg_bleu(const std::vector<std::pair<std::string, std::string>>& pairs,
                              const BleuConfig& cfg = {}) {
  if (pairs.empty()) throw std::invalid_argument("corpus_avg_bleu: no pairs");
  double sum = 0.0;
  for (const auto& [hyp, ref] : pairs) sum += sentence_bleu(hyp, ref, cfg);
  return sum / static_cast<double>(pairs.size());
}

}  // namespace lexrl
