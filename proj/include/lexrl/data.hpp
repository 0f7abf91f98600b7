#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lexrl/dictionary.hpp"
#include "lexrl/random.hpp"
#include "lexrl/text.hpp"

namespace lexrl {

struct ParallelPair {
  std::string source;
  std::string target;
  std::size_t id = 0;

  bool operator==(const ParallelPair&) const = default;
};

inline std::vector<ParallelPair> parse_corpus(std::istream& in) {
  std::vector<ParallelPair> out;
  detail::read_tsv_pairs(in, false, [&](std::string src, std::string tgt, std::size_t) {
    out.push_back({std::move(src), std::move(tgt), out.size()});
  });
  return out;
}

inline std::vector<ParallelPair> load_corpus(const std::filesystem::path& path) {
  auto in = detail::open_for_read(path);
  return parse_corpus(in);
}

inline void write_corpus(std::ostream& out, const std::vector<ParallelPair>& pairs) {
  for (const auto& p : pairs) out << p.source << '\t' << p.target << '\n';
}

/// Synthetic stand-in for a low-resource language pair.
struct ToyLanguageSpec {
  std::size_t lexicon_size = 300;
  std::size_t min_sentence_words = 3;
  std::size_t max_sentence_words = 5;
  double dict_coverage = 0.9;
  double corpus_coverage = 0.6;
  std::size_t suffix_rule_count = 3;
  std::size_t min_word_chars = 3;
  std::size_t max_word_chars = 8;
  std::size_t train_size = 4000;
  std::size_t test_size = 200;
  std::uint64_t seed = 1;

  void validate() const {
    if (lexicon_size < 1) throw std::invalid_argument("lexicon_size must be >= 1");
    if (min_sentence_words < 1 || min_sentence_words > max_sentence_words) {
      throw std::invalid_argument("invalid sentence length range");
    }
    if (!(dict_coverage >= 0.0 && dict_coverage <= 1.0)) throw std::invalid_argument("dict_coverage outside [0,1]");
    if (!(corpus_coverage >= 0.0 && corpus_coverage <= 1.0)) {
      throw std::invalid_argument("corpus_coverage outside [0,1]");
    }
    if (suffix_rule_count < 1) throw std::invalid_argument("suffix_rule_count must be >= 1");
    if (min_word_chars < 3 || min_word_chars > max_word_chars) throw std::invalid_argument("invalid word length range");
    if (covered_count() == 0 && train_size > 0) {
      throw std::invalid_argument("corpus_coverage leaves no words for the training corpus");
    }
    if (train_size == 0 || test_size == 0) throw std::invalid_argument("train_size and test_size must be positive");
  }

  std::size_t covered_count() const {
    return static_cast<std::size_t>(std::llround(corpus_coverage * static_cast<double>(lexicon_size)));
  }
  std::size_t dict_count() const {
    return static_cast<std::size_t>(std::llround(dict_coverage * static_cast<double>(lexicon_size)));
  }
};

inline nlohmann::json to_json(const ToyLanguageSpec& s) {
  return {{"lexicon_size", s.lexicon_size},     {"min_sentence_words", s.min_sentence_words},
          {"max_sentence_words", s.max_sentence_words}, {"dict_coverage", s.dict_coverage},
          {"corpus_coverage", s.corpus_coverage}, {"suffix_rule_count", s.suffix_rule_count},
          {"min_word_chars", s.min_word_chars}, {"max_word_chars", s.max_word_chars},
          {"train_size", s.train_size},         {"test_size", s.test_size},
          {"seed", s.seed}};
}

struct ToyLexeme {
  std::string source;
  std::string target_stem;
  bool in_corpus = false;
  bool in_dictionary = false;
};

struct ToyLanguage {
  ToyLanguageSpec spec;
  std::vector<ToyLexeme> lexicon;
  std::vector<std::string> suffixes;  // word at position p takes suffixes[p % size]
  std::vector<ParallelPair> train;
  std::vector<ParallelPair> test;
  std::vector<DictionaryEntry> dictionary;  // bare stems, lexicon order
};

namespace detail {

inline std::string pseudo_word(Rng& rng, std::size_t min_chars, std::size_t max_chars) {
  static constexpr std::string_view kConsonants = "bcdfghjklmnprstvwyz";
  static constexpr std::string_view kVowels = "aeiou";
  const std::size_t len = min_chars + uniform_index(rng, max_chars - min_chars + 1);
  std::string w;
  bool vowel = uniform_index(rng, 2) == 0;
  while (w.size() < len) {
    const auto& pool = vowel ? kVowels : kConsonants;
    w += pool[uniform_index(rng, pool.size())];
    vowel = !vowel;
  }
  return w;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  return idx;
}

}  // namespace detail

/// Target word for lexeme `w` at sentence position `p`.
inline std::string toy_target_word(const ToyLanguage& lang, std::size_t lexeme, std::size_t position) {
  return lang.lexicon[lexeme].target_stem + lang.suffixes[position % lang.suffixes.size()];
}

/// Random bijective lexicon with positional suffixes. Training sentences use
/// only the corpus-covered lexemes; test sentences draw from the whole
/// lexicon, so held-out words are recoverable only through the dictionary.
inline ToyLanguage generate_toy_language(const ToyLanguageSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  ToyLanguage lang;
  lang.spec = spec;

  std::unordered_set<std::string> used;
  auto fresh = [&](std::size_t lo, std::size_t hi) {
    for (int attempt = 0; attempt < 100000; ++attempt) {
      std::string w = detail::pseudo_word(rng, lo, hi);
      if (used.insert(w).second) return w;
    }
    throw std::invalid_argument("word length range too narrow for the requested lexicon");
  };
  lang.lexicon.resize(spec.lexicon_size);
  for (auto& lx : lang.lexicon) lx.source = fresh(spec.min_word_chars, spec.max_word_chars);
  for (auto& lx : lang.lexicon) lx.target_stem = fresh(spec.min_word_chars, spec.max_word_chars);

  std::unordered_set<std::string> suffix_set;
  while (lang.suffixes.size() < spec.suffix_rule_count) {
    std::string s = detail::pseudo_word(rng, 1, 2);
    if (suffix_set.insert(s).second) lang.suffixes.push_back(std::move(s));
  }

  const auto corpus_order = detail::shuffled_indices(spec.lexicon_size, rng);
  std::vector<std::size_t> covered(corpus_order.begin(),
                                   corpus_order.begin() + static_cast<std::ptrdiff_t>(spec.covered_count()));
  for (std::size_t i : covered) lang.lexicon[i].in_corpus = true;
  const auto dict_order = detail::shuffled_indices(spec.lexicon_size, rng);
  for (std::size_t k = 0; k < spec.dict_count(); ++k) lang.lexicon[dict_order[k]].in_dictionary = true;
  for (const auto& lx : lang.lexicon) {
    if (lx.in_dictionary) lang.dictionary.push_back({lx.source, lx.target_stem, lang.dictionary.size()});
  }

  auto sentence = [&](const std::vector<std::size_t>& pool, std::size_t id) {
    const std::size_t len =
        spec.min_sentence_words + uniform_index(rng, spec.max_sentence_words - spec.min_sentence_words + 1);
    ParallelPair p;
    p.id = id;
    for (std::size_t pos = 0; pos < len; ++pos) {
      const std::size_t w = pool[uniform_index(rng, pool.size())];
      if (pos > 0) {
        p.source += ' ';
        p.target += ' ';
      }
      p.source += lang.lexicon[w].source;
      p.target += toy_target_word(lang, w, pos);
    }
    return p;
  };
  std::vector<std::size_t> everything(spec.lexicon_size);
  std::iota(everything.begin(), everything.end(), std::size_t{0});
  for (std::size_t i = 0; i < spec.train_size; ++i) lang.train.push_back(sentence(covered, i));
  for (std::size_t i = 0; i < spec.test_size; ++i) lang.test.push_back(sentence(everything, i));
  return lang;
}

/// Indices of `test` pairs with at least one source word that never occurs
/// in a `train` source.
inline std::vector<std::size_t> held_out_word_subset(const std::vector<ParallelPair>& train,
                                                     const std::vector<ParallelPair>& test) {
  std::unordered_set<std::string> seen;
  for (const auto& p : train)
    for (auto& w : split_words(p.source)) seen.insert(normalize_key(w));
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (const auto& w : split_words(test[i].source)) {
      if (!seen.contains(normalize_key(w))) {
        out.push_back(i);
        break;
      }
    }
  }
  return out;
}

}  // namespace lexrl
