#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lexrl/tags.hpp"

namespace lexrl {

using SymbolId = std::int32_t;

/// Byte-level symbols 0..255, then the six tags, padding and end-of-sequence.
class Vocabulary {
 public:
  static constexpr SymbolId kByteCount = 256;

  explicit Vocabulary(TagSet tags = {}) : tags_(std::move(tags)) {
    for (const std::string* t : tags_.all()) {
      if (t->empty()) throw std::invalid_argument("empty tag string");
      tag_strings_.push_back(*t);
    }
  }

  const TagSet& tags() const noexcept { return tags_; }
  std::size_t size() const noexcept { return kByteCount + tag_strings_.size() + 2; }
  SymbolId pad_id() const noexcept { return static_cast<SymbolId>(kByteCount + tag_strings_.size()); }
  SymbolId eos_id() const noexcept { return pad_id() + 1; }

  SymbolId tool_open_id() const noexcept { return kByteCount + 0; }
  SymbolId tool_close_id() const noexcept { return kByteCount + 1; }
  SymbolId matches_open_id() const noexcept { return kByteCount + 2; }
  SymbolId matches_close_id() const noexcept { return kByteCount + 3; }
  SymbolId answer_open_id() const noexcept { return kByteCount + 4; }
  SymbolId answer_close_id() const noexcept { return kByteCount + 5; }

  /// Greedy left-to-right: a tag string starting at the cursor becomes its
  /// reserved symbol, anything else one byte symbol.
  std::vector<SymbolId> encode(std::string_view text) const {
    std::vector<SymbolId> out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
      bool matched = false;
      if (text[i] == '<') {
        for (std::size_t k = 0; k < tag_strings_.size(); ++k) {
          if (text.substr(i).starts_with(tag_strings_[k])) {
            out.push_back(static_cast<SymbolId>(kByteCount + k));
            i += tag_strings_[k].size();
            matched = true;
            break;
          }
        }
      }
      if (!matched) {
        out.push_back(static_cast<SymbolId>(static_cast<unsigned char>(text[i])));
        ++i;
      }
    }
    return out;
  }

  std::string decode(std::span<const SymbolId> ids) const {
    std::string out;
    for (SymbolId id : ids) out += symbol_text(id);
    return out;
  }

  /// Padding and end-of-sequence decode to nothing.
  std::string symbol_text(SymbolId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) {
      throw std::out_of_range("symbol id " + std::to_string(id) + " outside vocabulary");
    }
    if (id < kByteCount) return std::string(1, static_cast<char>(id));
    const auto k = static_cast<std::size_t>(id - kByteCount);
    if (k < tag_strings_.size()) return tag_strings_[k];
    return {};
  }

  /// FNV-1a over the reserved strings and table size; stamped into checkpoints.
  std::uint64_t hash() const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](unsigned char c) {
      h ^= c;
      h *= 0x100000001b3ULL;
    };
    for (const auto& t : tag_strings_) {
      for (char c : t) mix(static_cast<unsigned char>(c));
      mix(0);
    }
    for (int shift = 0; shift < 64; shift += 8) mix(static_cast<unsigned char>(size() >> shift));
    return h;
  }

 private:
  TagSet tags_;
  std::vector<std::string> tag_strings_;
};

}  // namespace lexrl
