#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lexrl/data.hpp"
#include "lexrl/dictionary.hpp"
#include "lexrl/loss.hpp"
#include "lexrl/metrics.hpp"
#include "lexrl/optimizer.hpp"
#include "lexrl/protocol.hpp"
#include "lexrl/rollout.hpp"
#include "lexrl/transformer.hpp"

namespace lexrl {

struct GrpoConfig {
  std::size_t group_size = 8;
  std::size_t max_steps = 1400;
  double lr = 5e-6;
  std::size_t grad_accum_steps = 8;
  double temperature = 1.0;
  std::size_t max_new_tokens = 512;
  RewardKind reward_kind = RewardKind::Bleu;
  std::size_t eval_every = 50;
  std::size_t eval_set_size = 640;
  std::size_t tool_budget = 4;
  double grad_clip_norm = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  BleuConfig bleu;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  /// Where the last batch is written if the loss turns non-finite.
  std::filesystem::path diagnostics_path;

  void validate() const {
    if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
    if (max_steps < 1 || grad_accum_steps < 1 || eval_every < 1 || eval_set_size < 1) {
      throw std::invalid_argument("GRPO step counts must be positive");
    }
    if (!(lr > 0.0) || !(temperature > 0.0) || max_new_tokens < 1) throw std::invalid_argument("invalid GRPO settings");
  }

  AdamWConfig optimizer() const { return {lr, beta1, beta2, eps, weight_decay, grad_clip_norm}; }
  GenerationConfig sampling() const { return {temperature, max_new_tokens, false}; }
};

struct GroupBatch {
  std::string source;
  std::string reference;
  std::vector<Episode> episodes;
  std::vector<double> rewards;
  std::vector<double> advantages;
  /// Per episode, true on model-generated completion symbols only.
  std::vector<std::vector<bool>> loss_masks;
};

/// A_i = r_i - mean(r). No division by the standard deviation.
/// Computed from offsets to r_0, so equal rewards give exactly zero and a
/// shift that keeps the offsets exact leaves the advantages bit-identical.
inline std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("advantages need a group of at least two");
  std::vector<double> out(rewards.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    out[i] = rewards[i] - rewards[0];
    mean += out[i];
  }
  mean /= static_cast<double>(rewards.size());
  for (double& a : out) a -= mean;
  return out;
}

/// G rollouts of one prompt; rollout i of step `step` uses stream
/// derive_seed(cfg.seed, step, i).
inline GroupBatch collect_group(const Policy& policy, const ParallelPair& pair, const Dictionary* dict,
                                const GrpoConfig& cfg, std::uint64_t step) {
  if (trim(pair.source).empty() || trim(pair.target).empty()) throw std::invalid_argument("empty side in RL pair");
  GroupBatch batch;
  batch.source = pair.source;
  batch.reference = pair.target;
  const std::vector<std::string> sources(cfg.group_size, pair.source);
  batch.episodes = run_episodes(policy, sources, dict, cfg.tool_budget, cfg.sampling(), cfg.seed, step, cfg.workers);
  for (const auto& ep : batch.episodes) {
    batch.rewards.push_back(reward(ep, pair.target, cfg.reward_kind, cfg.bleu));
    batch.loss_masks.push_back(episode_symbols(policy.vocabulary(), ep).trainable);
  }
  batch.advantages = compute_advantages(batch.rewards);
  return batch;
}

/// Recorded policy-gradient loss of one group:
///   -(1/T) sum_i A_i sum_{t unmasked} log pi(y_it | context)
/// with T the unmasked symbol count over the whole group.
template <typename S>
struct PolicyLoss {
  std::vector<LossGraph<S>> terms;
  double value = 0.0;
  std::size_t token_count = 0;

  bool skipped() const noexcept { return token_count == 0; }
  void backward(Gradients& grads, double scale = 1.0, std::size_t workers = 1) const {
    backward_all(terms, grads, scale, workers);
  }
};

/// The weighted sequences behind policy_loss; exposed so callers can tamper
/// with labels at masked positions.
inline std::vector<WeightedSequence> policy_sequences(const GroupBatch& batch, const Vocabulary& vocab,
                                                      std::size_t* token_count = nullptr) {
  std::size_t total = 0;
  for (const auto& m : batch.loss_masks)
    for (bool b : m) total += b ? 1 : 0;
  if (token_count) *token_count = total;
  std::vector<WeightedSequence> out;
  if (total == 0) return out;
  for (std::size_t i = 0; i < batch.episodes.size(); ++i) {
    const double a = batch.advantages[i];
    if (a == 0.0) continue;
    auto sym = episode_symbols(vocab, batch.episodes[i]);
    if (sym.symbols.size() < 2) continue;
    WeightedSequence seq;
    seq.weights.resize(sym.symbols.size());
    for (std::size_t t = 0; t < sym.symbols.size(); ++t) {
      seq.weights[t] = batch.loss_masks[i][t] ? a / static_cast<double>(total) : 0.0;
    }
    seq.symbols = std::move(sym.symbols);
    out.push_back(std::move(seq));
  }
  return out;
}

template <typename S>
PolicyLoss<S> policy_loss_from(const Transformer<S>& model, const std::vector<WeightedSequence>& sequences,
                               std::size_t token_count, std::size_t workers = 1) {
  PolicyLoss<S> loss;
  loss.token_count = token_count;
  loss.terms = record_losses(model, sequences, workers);
  for (const auto& t : loss.terms) loss.value += t.value();
  return loss;
}

/// Log-probabilities are recomputed under the current parameters; with one
/// update per group the importance ratio is 1, so neither ratio clipping
/// nor a KL term appears.
template <typename S>
PolicyLoss<S> policy_loss(const GroupBatch& batch, const Transformer<S>& model, std::size_t workers = 1) {
  std::size_t total = 0;
  const auto seqs = policy_sequences(batch, model.vocabulary(), &total);
  return policy_loss_from(model, seqs, total, workers);
}

inline nlohmann::json group_to_json(const GroupBatch& b) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : b.episodes) eps.push_back(episode_to_json(e));
  return {{"source", b.source},   {"reference", b.reference},   {"episodes", eps},
          {"rewards", b.rewards}, {"advantages", b.advantages}};
}

struct RlLogEntry {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double mean_tool_calls = 0.0;
  double loss = 0.0;

  bool operator==(const RlLogEntry&) const = default;
};

struct RlEvalEntry {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double mean_tool_calls = 0.0;

  bool operator==(const RlEvalEntry&) const = default;
};

struct RlResult {
  std::vector<RlLogEntry> log;
  std::vector<RlEvalEntry> eval_log;
  std::vector<std::size_t> eval_indices;
  std::size_t optimizer_steps = 0;
  std::size_t skipped_steps = 0;
};

/// Greedy rollouts on `pairs`; mean reward and mean serviced calls.
inline RlEvalEntry mean_reward(const Policy& policy, const std::vector<ParallelPair>& pairs, const Dictionary* dict,
                               const GrpoConfig& cfg) {
  GenerationConfig gen{cfg.temperature, cfg.max_new_tokens, true};
  const auto eps = run_episodes(policy, sources_of(pairs), dict, cfg.tool_budget, gen, cfg.seed, 0xE7A1, cfg.workers);
  RlEvalEntry e;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    e.mean_reward += reward(eps[i], pairs[i].target, cfg.reward_kind, cfg.bleu);
    e.mean_tool_calls += static_cast<double>(eps[i].tool_calls.size());
  }
  e.mean_reward /= static_cast<double>(eps.size());
  e.mean_tool_calls /= static_cast<double>(eps.size());
  return e;
}

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One group per step from a uniformly drawn pair, gradients averaged over
/// `grad_accum_steps` steps per AdamW update, greedy evaluation of a fixed
/// seeded subset every `eval_every` steps.
template <typename S>
RlResult rl_train(Transformer<S>& model, const std::vector<ParallelPair>& corpus, const Dictionary* dict,
                  const GrpoConfig& cfg, const std::function<void(const RlLogEntry&)>& on_step = {},
                  const std::function<void(const RlEvalEntry&)>& on_eval = {}) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("rl_train: empty corpus");
  RlResult result;

  Rng subset_rng(derive_seed(cfg.seed, 0xE5E7));
  const auto order = detail::shuffled_indices(corpus.size(), subset_rng);
  result.eval_indices.assign(order.begin(),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.eval_set_size, order.size())));
  std::vector<ParallelPair> eval_pairs;
  for (std::size_t i : result.eval_indices) eval_pairs.push_back(corpus[i]);

  Rng pick(derive_seed(cfg.seed, 0x9A1F));
  AdamW opt(model.parameter_count());
  Gradients grads(model.parameter_count());
  std::size_t pending = 0;
  const auto adam = cfg.optimizer();
  auto apply = [&] {
    for (double& g : grads.values) g /= static_cast<double>(pending);
    opt.step(model, grads, adam);
    grads.zero();
    pending = 0;
    ++result.optimizer_steps;
  };

  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    const ParallelPair& pair = corpus[uniform_index(pick, corpus.size())];
    const GroupBatch batch = collect_group(model, pair, dict, cfg, step);
    const auto loss = policy_loss(batch, model, cfg.workers);

    if (!std::isfinite(loss.value)) {
      if (!cfg.diagnostics_path.empty()) {
        std::ofstream out(cfg.diagnostics_path);
        out << group_to_json(batch).dump(2, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
      }
      throw NonFiniteLoss("non-finite policy loss at step " + std::to_string(step));
    }
    if (loss.skipped()) {
      std::cerr << "warning: RL step " << step << " has no unmasked completion symbols; skipped\n";
      ++result.skipped_steps;
    } else {
      loss.backward(grads, 1.0, cfg.workers);
    }
    if (++pending == cfg.grad_accum_steps) apply();

    RlLogEntry entry{step, 0.0, 0.0, loss.value};
    for (std::size_t i = 0; i < batch.episodes.size(); ++i) {
      entry.mean_reward += batch.rewards[i];
      entry.mean_tool_calls += static_cast<double>(batch.episodes[i].tool_calls.size());
    }
    entry.mean_reward /= static_cast<double>(batch.episodes.size());
    entry.mean_tool_calls /= static_cast<double>(batch.episodes.size());
    result.log.push_back(entry);
    if (on_step) on_step(entry);

    if (step % cfg.eval_every == 0) {
      auto e = mean_reward(model, eval_pairs, dict, cfg);
      e.step = step;
      result.eval_log.push_back(e);
      if (on_eval) on_eval(e);
    }
  }
  if (pending > 0) apply();
  return result;
}

}  // namespace lexrl
