#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lexrl/text.hpp"

namespace lexrl {

/// Raised for malformed TSV input; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DictionaryEntry {
  std::string source_text;
  std::string target_text;
  std::size_t ordinal = 0;

  bool operator==(const DictionaryEntry&) const = default;
};

namespace detail {

/// Splits `source<TAB>target` TSV lines. CRLF is accepted, blank lines are
/// skipped, and lines starting with '#' are comments when `allow_comments`.
template <typename Visit>
void read_tsv_pairs(std::istream& in, bool allow_comments, Visit&& visit) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (allow_comments && line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw ParseError(lineno, "expected exactly two tab-separated fields");
    }
    std::string src = trim(std::string_view(line).substr(0, tab));
    std::string tgt = trim(std::string_view(line).substr(tab + 1));
    if (src.empty() || tgt.empty()) throw ParseError(lineno, "empty field");
    visit(std::move(src), std::move(tgt), lineno);
  }
  if (in.bad()) throw IoError("read failure");
}

inline std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

}  // namespace detail

inline std::vector<DictionaryEntry> parse_raw_dictionary(std::istream& in) {
  std::vector<DictionaryEntry> out;
  detail::read_tsv_pairs(in, true, [&](std::string src, std::string tgt, std::size_t) {
    out.push_back({std::move(src), std::move(tgt), out.size()});
  });
  return out;
}

inline std::vector<DictionaryEntry> load_raw(const std::filesystem::path& path) {
  auto in = detail::open_for_read(path);
  return parse_raw_dictionary(in);
}

/// Immutable filtered lexicon with an exact-match index on normalized
/// headwords. Safe for concurrent lookups.
class Dictionary {
 public:
  static constexpr std::size_t kDefaultMaxSourceWords = 5;
  static constexpr std::size_t kDefaultMaxMatches = 5;

  Dictionary() = default;

  /// Keeps entries whose normalized source has at most `max_source_words`
  /// words, preserving order and ordinals.
  static Dictionary filtered(const std::vector<DictionaryEntry>& raw,
                             std::size_t max_source_words = kDefaultMaxSourceWords) {
    if (max_source_words < 1) throw std::invalid_argument("max_source_words must be >= 1");
    Dictionary d;
    d.max_source_words_ = max_source_words;
    for (const auto& e : raw) {
      std::string key = normalize_key(e.source_text);
      if (key.empty()) continue;
      if (split_words(key).size() > max_source_words) continue;
      d.index_[key].push_back(d.entries_.size());
      d.entries_.push_back(e);
    }
    // Entries arrive in file order, but callers may hand us a permuted list.
    for (auto& [key, slots] : d.index_) {
      std::stable_sort(slots.begin(), slots.end(), [&](std::size_t a, std::size_t b) {
        return d.entries_[a].ordinal < d.entries_[b].ordinal;
      });
    }
    return d;
  }

  /// Up to `max_matches` entries whose normalized headword equals the
  /// normalized query, ordinal ascending. Empty means an unsuccessful call.
  std::vector<DictionaryEntry> lookup(std::string_view query,
                                      std::size_t max_matches = kDefaultMaxMatches) const {
    std::vector<DictionaryEntry> out;
    const auto it = index_.find(normalize_key(query));
    if (it == index_.end()) return out;
    const std::size_t n = std::min(max_matches, it->second.size());
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(entries_[it->second[i]]);
    return out;
  }

  bool contains(std::string_view query) const { return index_.contains(normalize_key(query)); }

  const std::vector<DictionaryEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t max_source_words() const noexcept { return max_source_words_; }

  bool operator==(const Dictionary& other) const {
    return max_source_words_ == other.max_source_words_ && entries_ == other.entries_;
  }

 private:
  std::vector<DictionaryEntry> entries_;
  std::unordered_map<std::string, std::vector<std::size_t>> index_;
  std::size_t max_source_words_ = kDefaultMaxSourceWords;
};

inline Dictionary filter_entries(const std::vector<DictionaryEntry>& raw,
                                 std::size_t max_source_words = Dictionary::kDefaultMaxSourceWords) {
  return Dictionary::filtered(raw, max_source_words);
}

inline Dictionary load_dictionary(const std::filesystem::path& path,
                                  std::size_t max_source_words = Dictionary::kDefaultMaxSourceWords) {
  return filter_entries(load_raw(path), max_source_words);
}

inline void write_entries(std::ostream& out, const std::vector<DictionaryEntry>& entries) {
  for (const auto& e : entries) out << e.source_text << '\t' << e.target_text << '\n';
}

}  // namespace lexrl
