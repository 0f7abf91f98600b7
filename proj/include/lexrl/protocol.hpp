#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lexrl/dictionary.hpp"
#include "lexrl/policy.hpp"
#include "lexrl/random.hpp"
#include "lexrl/tags.hpp"
#include "lexrl/text.hpp"
#include "lexrl/vocabulary.hpp"

namespace lexrl {

/// Instruction prompt; `{}` is replaced by the source sentence.
inline constexpr std::string_view kPromptTemplate =
    "Translate the following Spanish text into Wayuunaiki. Begin by identifying any words or "
    "phrases you're unsure how to translate. Then, you may look up those words using the "
    "dictionary tool by wrapping the Spanish word in <spa_to_wayuu> and </spa_to_wayuu>, and "
    "doing that for every unknown word. The dictionary will return matches enclosed in "
    "<matches> and </matches>. You can use the dictionary as many times as necessary.\n"
    "Once you have all the information you need, provide the final translation enclosed in "
    "<answer> and </answer>. For example: <answer> xxx </answer>.\n"
    "Spanish text: {}";

inline constexpr std::string_view kNoResults = "NO RESULTS";
inline constexpr std::size_t kDefaultToolBudget = 4;

/// Substitutes the source verbatim (no escaping).
inline std::string build_prompt(std::string_view source_text) {
  if (trim(source_text).empty()) throw std::invalid_argument("build_prompt: empty source text");
  const auto slot = kPromptTemplate.find("{}");
  std::string out(kPromptTemplate.substr(0, slot));
  out += source_text;
  out += kPromptTemplate.substr(slot + 2);
  return out;
}

struct PendingToolCall {
  std::string query;
  std::size_t begin = 0;  // offset of tool_open
  std::size_t end = 0;    // one past tool_close
};

/// Earliest well-formed tool_open...tool_close pair (no tool_open inside).
/// Stray closes and dangling opens are ignored.
inline std::optional<PendingToolCall> scan_pending_tool_call(std::string_view text,
                                                            const TagSet& tags = {}) {
  std::size_t from = 0;
  while (true) {
    const auto close = text.find(tags.tool_close, from);
    if (close == std::string_view::npos) return std::nullopt;
    const auto open = text.substr(0, close).rfind(tags.tool_open);
    if (open != std::string_view::npos && open >= from) {
      const auto body = open + tags.tool_open.size();
      PendingToolCall call;
      call.query = trim(text.substr(body, close - body));
      call.begin = open;
      call.end = close + tags.tool_close.size();
      return call;
    }
    from = close + tags.tool_close.size();
  }
}

/// `<matches> a: x; b: y </matches>`, or the NO RESULTS sentinel.
inline std::string render_matches(std::span<const DictionaryEntry> matches, const TagSet& tags = {}) {
  std::string out = tags.matches_open + " ";
  if (matches.empty()) {
    out += kNoResults;
  } else {
    for (std::size_t i = 0; i < matches.size(); ++i) {
      if (i > 0) out += "; ";
      out += matches[i].source_text;
      out += ": ";
      out += matches[i].target_text;
    }
  }
  out += " ";
  out += tags.matches_close;
  return out;
}

/// Trimmed content of the first answer_open...answer_close pair.
inline std::optional<std::string> extract_answer(std::string_view text, const TagSet& tags = {}) {
  const auto open = text.find(tags.answer_open);
  if (open == std::string_view::npos) return std::nullopt;
  const auto body = open + tags.answer_open.size();
  const auto close = text.find(tags.answer_close, body);
  if (close == std::string_view::npos) return std::nullopt;
  return trim(text.substr(body, close - body));
}

enum class SegmentKind { ModelGenerated, ToolInjected };

struct Segment {
  SegmentKind kind = SegmentKind::ModelGenerated;
  std::vector<SymbolId> token_ids;
  std::string text;

  bool operator==(const Segment&) const = default;
};

struct ToolCall {
  std::string query;
  std::size_t match_count = 0;

  bool operator==(const ToolCall&) const = default;
};

struct Episode {
  std::string source_text;
  std::string prompt_text;
  std::size_t prompt_token_count = 0;
  std::vector<Segment> segments;
  std::vector<ToolCall> tool_calls;  // serviced calls only
  std::optional<std::string> answer;
  bool truncated = false;
  std::size_t budget = 0;

  bool operator==(const Episode&) const = default;
};

inline std::string model_text(const Episode& ep) {
  std::string out;
  for (const auto& s : ep.segments)
    if (s.kind == SegmentKind::ModelGenerated) out += s.text;
  return out;
}

/// Everything after the prompt, model and tool text interleaved.
inline std::string transcript_text(const Episode& ep) {
  std::string out;
  for (const auto& s : ep.segments) out += s.text;
  return out;
}

/// Full symbol sequence (kept prompt tail + segments) with a per-symbol flag
/// that is true only for model-generated completion symbols.
struct EpisodeSymbols {
  std::vector<SymbolId> symbols;
  std::vector<bool> trainable;
};

inline EpisodeSymbols episode_symbols(const Vocabulary& vocab, const Episode& ep) {
  EpisodeSymbols out;
  const auto prompt = vocab.encode(ep.prompt_text);
  if (ep.prompt_token_count > prompt.size()) throw std::invalid_argument("episode prompt_token_count too large");
  out.symbols.assign(prompt.end() - static_cast<std::ptrdiff_t>(ep.prompt_token_count), prompt.end());
  out.trainable.assign(out.symbols.size(), false);
  for (const auto& s : ep.segments) {
    out.symbols.insert(out.symbols.end(), s.token_ids.begin(), s.token_ids.end());
    out.trainable.insert(out.trainable.end(), s.token_ids.size(), s.kind == SegmentKind::ModelGenerated);
  }
  return out;
}

namespace detail {
inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
}  // namespace detail

/// Alternates sampling with dictionary servicing until an answer closes,
/// the policy emits end-of-sequence, `gen.max_new_tokens` model symbols
/// have been drawn, or the context is full. Calls beyond `budget`, or any call when `dict` is null, stay in the
/// transcript unserviced.
inline Episode run_tool_loop(const Policy& policy, std::string_view source_text, const Dictionary* dict,
                             std::size_t budget, const GenerationConfig& gen, Rng& rng) {
  gen.validate();
  const Vocabulary& vocab = policy.vocabulary();
  const TagSet& tags = vocab.tags();
  const std::size_t ctx = policy.context_length();

  Episode ep;
  ep.source_text = std::string(source_text);
  ep.prompt_text = build_prompt(source_text);
  ep.budget = budget;
  const auto prompt = fit_prompt(policy, vocab.encode(ep.prompt_text));
  ep.prompt_token_count = prompt.size();
  auto session = policy.open(prompt);

  Segment current;
  std::size_t scan_from = 0;
  std::size_t generated = 0;
  std::size_t remaining = budget;
  std::string all_model_text;

  while (true) {
    if (generated >= gen.max_new_tokens || session->length() >= ctx) {
      ep.truncated = true;
      break;
    }
    const SymbolId s = next_symbol(*session, gen, rng);
    session->feed(s);
    ++generated;
    const std::string piece = vocab.symbol_text(s);
    current.token_ids.push_back(s);
    current.text += piece;
    all_model_text += piece;
    if (s == vocab.eos_id()) break;

    if (detail::ends_with(current.text, tags.answer_close) && extract_answer(all_model_text, tags)) break;
    if (!detail::ends_with(current.text, tags.tool_close)) continue;

    const auto call = scan_pending_tool_call(std::string_view(current.text).substr(scan_from), tags);
    if (!call) continue;
    scan_from += call->end;
    if (dict == nullptr || remaining == 0) continue;

    const auto matches = dict->lookup(call->query, Dictionary::kDefaultMaxMatches);
    Segment injected{SegmentKind::ToolInjected, {}, render_matches(matches, tags)};
    injected.token_ids = vocab.encode(injected.text);
    if (session->length() + injected.token_ids.size() > ctx) {
      ep.truncated = true;
      break;
    }
    session->feed(std::span<const SymbolId>(injected.token_ids));
    ep.segments.push_back(std::move(current));
    ep.segments.push_back(std::move(injected));
    ep.tool_calls.push_back({call->query, matches.size()});
    --remaining;
    current = Segment{};
    scan_from = 0;
  }
  if (!current.token_ids.empty()) ep.segments.push_back(std::move(current));
  ep.answer = extract_answer(all_model_text, tags);
  return ep;
}

// Transcript dump: one JSON object per line. Symbol ids are authoritative;
// texts are rebuilt from them on load so arbitrary byte output survives.

inline nlohmann::json episode_to_json(const Episode& ep) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : ep.segments) {
    segs.push_back({{"kind", s.kind == SegmentKind::ModelGenerated ? "model" : "tool"},
                    {"token_ids", s.token_ids},
                    {"text", s.text}});
  }
  nlohmann::json calls = nlohmann::json::array();
  for (const auto& c : ep.tool_calls) calls.push_back({{"query", c.query}, {"match_count", c.match_count}});
  return {{"source_text", ep.source_text},
          {"prompt_text", ep.prompt_text},
          {"prompt_token_count", ep.prompt_token_count},
          {"segments", std::move(segs)},
          {"tool_calls", std::move(calls)},
          {"answer", ep.answer ? nlohmann::json(*ep.answer) : nlohmann::json(nullptr)},
          {"truncated", ep.truncated},
          {"budget", ep.budget}};
}

inline std::string episode_to_json_line(const Episode& ep) {
  return episode_to_json(ep).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

inline Episode episode_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
  Episode ep;
  ep.source_text = j.at("source_text").get<std::string>();
  ep.prompt_text = j.at("prompt_text").get<std::string>();
  ep.prompt_token_count = j.at("prompt_token_count").get<std::size_t>();
  for (const auto& s : j.at("segments")) {
    Segment seg;
    const auto kind = s.at("kind").get<std::string>();
    if (kind == "model") {
      seg.kind = SegmentKind::ModelGenerated;
    } else if (kind == "tool") {
      seg.kind = SegmentKind::ToolInjected;
    } else {
      throw std::invalid_argument("unknown segment kind '" + kind + "'");
    }
    seg.token_ids = s.at("token_ids").get<std::vector<SymbolId>>();
    seg.text = vocab.decode(seg.token_ids);
    ep.segments.push_back(std::move(seg));
  }
  // Queries come from the rebuilt model text: the stored strings lose any
  // bytes that are not valid UTF-8.
  const auto& calls = j.at("tool_calls");
  std::size_t next = 0;
  for (std::size_t k = 0; k < ep.segments.size(); ++k) {
    if (ep.segments[k].kind != SegmentKind::ToolInjected) continue;
    if (k == 0 || ep.segments[k - 1].kind != SegmentKind::ModelGenerated || next >= calls.size()) {
      throw std::invalid_argument("tool segment without a preceding call");
    }
    std::string_view rest = ep.segments[k - 1].text;
    std::optional<PendingToolCall> last;
    while (auto c = scan_pending_tool_call(rest, vocab.tags())) {
      last = c;
      rest = rest.substr(c->end);
    }
    if (!last) throw std::invalid_argument("tool segment without a preceding call");
    ep.tool_calls.push_back({last->query, calls[next++].at("match_count").get<std::size_t>()});
  }
  if (next != calls.size()) throw std::invalid_argument("tool_calls do not match tool segments");
  ep.answer = extract_answer(model_text(ep), vocab.tags());
  ep.truncated = j.at("truncated").get<bool>();
  ep.budget = j.at("budget").get<std::size_t>();
  return ep;
}

}  // namespace lexrl
