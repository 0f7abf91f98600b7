#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lexrl/data.hpp"
#include "lexrl/dictionary.hpp"
#include "lexrl/loss.hpp"
#include "lexrl/optimizer.hpp"
#include "lexrl/protocol.hpp"
#include "lexrl/random.hpp"
#include "lexrl/text.hpp"
#include "lexrl/transformer.hpp"

namespace lexrl {

struct SftConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Not used by the reference recipe; <= 0 disables.
  double grad_clip_norm = 0.0;
  std::size_t max_lookup_words = 4;
  std::uint64_t seed = 0;
  /// Threads for per-sequence gradients; results do not depend on it.
  std::size_t workers = 1;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("epochs and batch_size must be positive");
    if (!(lr > 0.0) || weight_decay < 0.0) throw std::invalid_argument("invalid SFT optimizer settings");
  }

  AdamWConfig optimizer() const { return {lr, beta1, beta2, eps, weight_decay, grad_clip_norm}; }
};

/// One formatted training text and its per-symbol loss mask. The mask is
/// false on the prompt and on every injected match block.
struct SftExample {
  std::string full_text;
  std::vector<SymbolId> symbols;
  std::vector<bool> loss_mask;
  std::size_t prompt_symbols = 0;
  std::vector<std::string> lookups;
};

namespace detail {
inline void append_piece(SftExample& ex, const Vocabulary& vocab, const std::string& text, bool trainable) {
  const auto ids = vocab.encode(text);
  ex.full_text += text;
  ex.symbols.insert(ex.symbols.end(), ids.begin(), ids.end());
  ex.loss_mask.insert(ex.loss_mask.end(), ids.size(), trainable);
}
}  // namespace detail

/// Prompt, then k ~ U{0..max_lookup_words} synthetic dictionary calls on
/// distinct source word positions (in source order), each followed by the
/// real lookup result, then the answer block. With no dictionary the
/// example is prompt + answer.
inline SftExample augment_example(const ParallelPair& pair, const Dictionary* dict, Rng& rng,
                                  std::size_t max_lookup_words, const Vocabulary& vocab) {
  if (trim(pair.source).empty() || trim(pair.target).empty()) throw std::invalid_argument("empty side in SFT pair");
  const TagSet& tags = vocab.tags();
  SftExample ex;
  detail::append_piece(ex, vocab, build_prompt(pair.source), false);
  ex.prompt_symbols = ex.symbols.size();

  if (dict != nullptr) {
    const auto words = split_words(pair.source);
    std::size_t k = static_cast<std::size_t>(uniform_index(rng, max_lookup_words + 1));
    k = std::min(k, words.size());
    std::vector<std::size_t> positions(words.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(positions[i], positions[i + uniform_index(rng, positions.size() - i)]);
    }
    positions.resize(k);
    std::sort(positions.begin(), positions.end());
    for (std::size_t p : positions) {
      const std::string& word = words[p];
      detail::append_piece(ex, vocab, tags.tool_open + " " + word + " " + tags.tool_close, true);
      detail::append_piece(ex, vocab, render_matches(dict->lookup(word, Dictionary::kDefaultMaxMatches), tags), false);
      ex.lookups.push_back(word);
    }
  }
  detail::append_piece(ex, vocab, tags.answer_open + " " + pair.target + " " + tags.answer_close, true);
  return ex;
}

/// Fits an example to the policy: the prompt keeps its trailing
/// `prompt_window` symbols, and is cut further from the left if the whole
/// text still exceeds the context. Returns nothing when the completion
/// alone cannot fit. Weights are 1 on loss-bearing symbols.
template <typename S>
std::optional<WeightedSequence> training_sequence(const Transformer<S>& model, const SftExample& ex) {
  const std::size_t ctx = model.context_length();
  const std::size_t completion = ex.symbols.size() - ex.prompt_symbols;
  if (completion + 1 > ctx) return std::nullopt;
  std::size_t keep = ex.prompt_symbols;
  if (model.prompt_window() > 0) keep = std::min(keep, model.prompt_window());
  keep = std::min(keep, ctx - completion);
  if (keep == 0) return std::nullopt;
  const std::size_t start = ex.prompt_symbols - keep;

  WeightedSequence seq;
  seq.symbols.assign(ex.symbols.begin() + static_cast<std::ptrdiff_t>(start), ex.symbols.end());
  seq.weights.resize(seq.symbols.size());
  for (std::size_t i = 0; i < seq.symbols.size(); ++i) seq.weights[i] = ex.loss_mask[start + i] ? 1.0 : 0.0;
  return seq;
}

struct SftLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
};

/// Token-mean NLL over a batch: every loss-bearing symbol weighs
/// 1/(total loss-bearing symbols). Backpropagates into `grads` when given.
template <typename S>
std::optional<double> sft_batch_loss(const Transformer<S>& model, std::vector<WeightedSequence> batch,
                                     Gradients* grads, std::size_t workers = 1) {
  double count = 0.0;
  for (const auto& s : batch)
    for (std::size_t t = 1; t < s.weights.size(); ++t) count += s.weights[t];
  if (count == 0.0) return std::nullopt;
  for (auto& s : batch)
    for (double& w : s.weights) w /= count;
  const auto graphs = record_losses(model, batch, workers);
  double loss = 0.0;
  for (const auto& g : graphs) loss += g.value();
  if (grads) backward_all(graphs, *grads, 1.0, workers);
  return loss;
}

struct SftResult {
  std::vector<SftLogEntry> log;
  std::size_t skipped_batches = 0;
  std::size_t skipped_examples = 0;
};

/// Mini-batch AdamW on the masked next-symbol loss. Deterministic given
/// `cfg.seed`. Pass `dict = nullptr` for the tool-free recipe.
template <typename S>
SftResult sft_train(Transformer<S>& model, const std::vector<ParallelPair>& corpus, const Dictionary* dict,
                    const SftConfig& cfg, const std::function<void(const SftLogEntry&)>& on_step = {}) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("sft_train: empty corpus");
  SftResult result;
  Rng rng(derive_seed(cfg.seed, 0x5f7));
  AdamW opt(model.parameter_count());
  Gradients grads(model.parameter_count());
  const auto adam = cfg.optimizer();

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::shuffled_indices(corpus.size(), rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<WeightedSequence> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) {
        const auto ex = augment_example(corpus[order[i]], dict, rng, cfg.max_lookup_words, model.vocabulary());
        auto seq = training_sequence(model, ex);
        if (!seq) {
          ++result.skipped_examples;
          continue;
        }
        batch.push_back(std::move(*seq));
      }
      grads.zero();
      const auto loss = sft_batch_loss(model, std::move(batch), &grads, cfg.workers);
      if (!loss) {
        std::cerr << "warning: SFT batch at step " << step << " has no loss-bearing symbols; skipped\n";
        ++result.skipped_batches;
        continue;
      }
      if (!std::isfinite(*loss)) throw std::runtime_error("non-finite SFT loss at step " + std::to_string(step));
      opt.step(model, grads, adam);
      ++step;
      result.log.push_back({step, *loss});
      if (on_step) on_step(result.log.back());
    }
  }
  return result;
}

}  // namespace lexrl
