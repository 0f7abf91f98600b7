#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lexrl/data.hpp"
#include "lexrl/dictionary.hpp"
#include "lexrl/metrics.hpp"
#include "lexrl/protocol.hpp"
#include "lexrl/rollout.hpp"
#include "lexrl/stats.hpp"
#include "lexrl/text.hpp"

namespace lexrl {

struct EvalConfig {
  std::size_t tool_budget = kDefaultToolBudget;
  /// Evaluation decodes greedily by default.
  GenerationConfig generation{1.0, 512, true};
  BleuConfig bleu;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct EvalReport {
  double avg_bleu = 0.0;
  double answers_with_tools_pct = 0.0;
  double avg_tool_calls = 0.0;
  double successful_tool_calls_pct = 0.0;
  std::int64_t successful_queries = 0;
  std::int64_t successful_queries_max = 0;
  double dict_only_mean_bleu = 0.0;
  double model_mean_bleu = 0.0;
  double t_statistic = 0.0;
  double p_value = 1.0;
  double model_better_pct = 0.0;
  std::int64_t n_samples = 0;
  bool t_test_degenerate = false;

  bool operator==(const EvalReport&) const = default;
};

/// Sum over samples of min(budget, distinct normalized source words with a
/// dictionary entry).
inline std::int64_t successful_queries_bound(const std::vector<ParallelPair>& pairs, const Dictionary& dict,
                                             std::size_t budget) {
  std::int64_t total = 0;
  for (const auto& p : pairs) {
    std::set<std::string> present;
    for (const auto& w : split_words(p.source)) {
      if (dict.contains(w)) present.insert(normalize_key(w));
    }
    total += static_cast<std::int64_t>(std::min(budget, present.size()));
  }
  return total;
}

/// Distinct normalized queries that returned matches and name a word of
/// the episode's own source. Never exceeds the sample's share of the bound.
inline std::size_t successful_queries_of(const Episode& ep) {
  std::set<std::string> words;
  for (const auto& w : split_words(ep.source_text)) words.insert(normalize_key(w));
  std::set<std::string> hits;
  for (const auto& c : ep.tool_calls) {
    if (c.match_count == 0) continue;
    const auto key = normalize_key(c.query);
    if (words.count(key)) hits.insert(key);
  }
  return hits.size();
}

/// Best BLEU reachable by answering with a single returned match.
inline double dict_only_best_bleu(const Episode& ep, std::string_view reference, const Dictionary& dict,
                                  const BleuConfig& cfg = {}) {
  double best = 0.0;
  for (const auto& c : ep.tool_calls) {
    if (c.match_count == 0) continue;
    for (const auto& m : dict.lookup(c.query, c.match_count)) {
      best = std::max(best, sentence_bleu(m.target_text, reference, cfg));
    }
  }
  return best;
}

/// Aggregates a report from finished episodes. Pure and order-stable, so a
/// replayed transcript reproduces the original report bit for bit.
inline EvalReport compute_report(const std::vector<Episode>& episodes, const std::vector<ParallelPair>& pairs,
                                 const Dictionary* dict, std::size_t budget, const BleuConfig& bleu = {}) {
  if (episodes.empty()) throw std::invalid_argument("compute_report: no episodes");
  if (episodes.size() != pairs.size()) throw std::invalid_argument("compute_report: episode/pair count mismatch");
  const std::size_t n = episodes.size();
  EvalReport r;
  r.n_samples = static_cast<std::int64_t>(n);

  std::vector<double> model(n), dict_only(n, 0.0);
  std::size_t with_tools = 0, calls = 0, successful_calls = 0, better = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Episode& ep = episodes[i];
    model[i] = reward(ep, pairs[i].target, RewardKind::Bleu, bleu);
    if (!ep.tool_calls.empty()) ++with_tools;
    calls += ep.tool_calls.size();
    for (const auto& c : ep.tool_calls) successful_calls += c.match_count > 0 ? 1 : 0;
    if (dict) {
      dict_only[i] = dict_only_best_bleu(ep, pairs[i].target, *dict, bleu);
      r.successful_queries += static_cast<std::int64_t>(successful_queries_of(ep));
    }
    if (model[i] > dict_only[i]) ++better;
  }
  const double dn = static_cast<double>(n);
  double model_sum = 0.0, dict_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    model_sum += model[i];
    dict_sum += dict_only[i];
  }
  r.avg_bleu = model_sum / dn;
  r.model_mean_bleu = r.avg_bleu;
  r.dict_only_mean_bleu = dict_sum / dn;
  r.answers_with_tools_pct = 100.0 * static_cast<double>(with_tools) / dn;
  r.avg_tool_calls = with_tools ? static_cast<double>(calls) / static_cast<double>(with_tools) : 0.0;
  r.successful_tool_calls_pct = calls ? 100.0 * static_cast<double>(successful_calls) / static_cast<double>(calls) : 0.0;
  r.model_better_pct = 100.0 * static_cast<double>(better) / dn;
  if (dict) r.successful_queries_max = successful_queries_bound(pairs, *dict, budget);

  if (n >= 2) {
    const auto t = paired_t_test(model, dict_only);
    r.t_statistic = t.t_statistic;
    r.p_value = t.p_value;
    r.t_test_degenerate = t.degenerate;
  } else {
    r.t_test_degenerate = true;
  }
  return r;
}

struct EvalOutput {
  EvalReport report;
  std::vector<Episode> episodes;
};

/// One tool loop per test pair. Without a dictionary the budget is 0, so
/// every tool-usage field is 0.
inline EvalOutput evaluate(const Policy& policy, const std::vector<ParallelPair>& test_pairs, const Dictionary* dict,
                           const EvalConfig& cfg = {}) {
  if (test_pairs.empty()) throw std::invalid_argument("evaluate: empty test set");
  const std::size_t budget = dict ? cfg.tool_budget : 0;
  EvalOutput out;
  out.episodes =
      run_episodes(policy, sources_of(test_pairs), dict, budget, cfg.generation, cfg.seed, 0xE7A1, cfg.workers);
  out.report = compute_report(out.episodes, test_pairs, dict, budget, cfg.bleu);
  return out;
}

namespace detail {
inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
inline double finite_or_nan(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}
}  // namespace detail

/// A non-finite t statistic (zero-variance differences) is written as null.
inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["avg_bleu"] = r.avg_bleu;
  j["answers_with_tools_pct"] = r.answers_with_tools_pct;
  j["avg_tool_calls"] = r.avg_tool_calls;
  j["successful_tool_calls_pct"] = r.successful_tool_calls_pct;
  j["successful_queries"] = r.successful_queries;
  j["successful_queries_max"] = r.successful_queries_max;
  j["dict_only_mean_bleu"] = r.dict_only_mean_bleu;
  j["model_mean_bleu"] = r.model_mean_bleu;
  j["t_statistic"] = detail::finite_or_null(r.t_statistic);
  j["p_value"] = r.p_value;
  j["model_better_pct"] = r.model_better_pct;
  j["n_samples"] = r.n_samples;
  j["metadata"] = {{"t_test_degenerate", r.t_test_degenerate},
                   {"dict_only_aggregation", "per-sample maximum over all returned matches"}};
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.avg_bleu = j.at("avg_bleu").get<double>();
  r.answers_with_tools_pct = j.at("answers_with_tools_pct").get<double>();
  r.avg_tool_calls = j.at("avg_tool_calls").get<double>();
  r.successful_tool_calls_pct = j.at("successful_tool_calls_pct").get<double>();
  r.successful_queries = j.at("successful_queries").get<std::int64_t>();
  r.successful_queries_max = j.at("successful_queries_max").get<std::int64_t>();
  r.dict_only_mean_bleu = j.at("dict_only_mean_bleu").get<double>();
  r.model_mean_bleu = j.at("model_mean_bleu").get<double>();
  r.t_statistic = detail::finite_or_nan(j.at("t_statistic"));
  r.p_value = j.at("p_value").get<double>();
  r.model_better_pct = j.at("model_better_pct").get<double>();
  r.n_samples = j.at("n_samples").get<std::int64_t>();
  if (j.contains("metadata")) r.t_test_degenerate = j["metadata"].value("t_test_degenerate", false);
  return r;
}

inline void write_transcripts(std::ostream& out, const std::vector<Episode>& episodes) {
  for (const auto& ep : episodes) out << episode_to_json_line(ep) << '\n';
}

inline std::vector<Episode> read_transcripts(std::istream& in, const Vocabulary& vocab) {
  std::vector<Episode> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(episode_from_json(nlohmann::json::parse(line), vocab));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("bad transcript line: ") + e.what());
    }
  }
  return out;
}

}  // namespace lexrl
