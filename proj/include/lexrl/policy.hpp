#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "lexrl/random.hpp"
#include "lexrl/vocabulary.hpp"

namespace lexrl {

class ContextOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct GenerationConfig {
  double temperature = 1.0;
  std::size_t max_new_tokens = 512;
  /// Argmax decoding; used for evaluation. Sampling otherwise.
  bool greedy = false;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
  }
};

/// Incremental decoding state over a fixed parameter snapshot.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  /// Next-symbol logits given everything fed so far.
  virtual std::span<const double> logits() const = 0;
  virtual void feed(SymbolId symbol) = 0;
  virtual std::size_t length() const = 0;

  void feed(std::span<const SymbolId> symbols) {
    for (SymbolId s : symbols) feed(s);
  }
};

/// Anything that can drive the tool loop: the transformer, or scripted
/// mocks in tests.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual const Vocabulary& vocabulary() const = 0;
  virtual std::size_t context_length() const = 0;
  /// Number of trailing prompt symbols the policy conditions on; 0 = all
  /// that fit in the context.
  virtual std::size_t prompt_window() const { return 0; }
  /// `prompt` must be non-empty and fit in the context.
  virtual std::unique_ptr<DecodeSession> open(std::span<const SymbolId> prompt) const = 0;
};

inline std::size_t argmax(std::span<const double> logits) {
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

/// Probabilities of softmax(logits / temperature), computed in double with
/// max subtraction.
inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
  std::vector<double> p(logits.size());
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - m) / temperature);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

/// One draw from softmax(logits / temperature); consumes exactly one
/// uniform variate.
inline SymbolId sample_from_logits(std::span<const double> logits, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (logits.empty()) throw std::invalid_argument("empty logits");
  const std::vector<double> p = softmax(logits, temperature);
  double u = uniform01(rng);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (u < p[i]) return static_cast<SymbolId>(i);
    u -= p[i];
  }
  // Rounding left a sliver of mass; give it to the last non-zero symbol.
  for (std::size_t i = p.size(); i-- > 0;) {
    if (p[i] > 0.0) return static_cast<SymbolId>(i);
  }
  return static_cast<SymbolId>(argmax(logits));
}

inline SymbolId next_symbol(const DecodeSession& session, const GenerationConfig& gen, Rng& rng) {
  if (gen.greedy) return static_cast<SymbolId>(argmax(session.logits()));
  return sample_from_logits(session.logits(), gen.temperature, rng);
}

inline void check_context(const Policy& policy, std::size_t length) {
  if (length == 0) throw std::invalid_argument("empty context");
  if (length > policy.context_length()) {
    throw ContextOverflow("context of " + std::to_string(length) + " symbols exceeds limit " +
                          std::to_string(policy.context_length()));
  }
}

/// Draw the symbol following `context` at the given temperature.
inline SymbolId sample_next(const Policy& policy, std::span<const SymbolId> context,
                            double temperature, Rng& rng) {
  check_context(policy, context.size());
  const auto session = policy.open(context);
  return sample_from_logits(session->logits(), temperature, rng);
}

/// The trailing part of an encoded prompt the policy actually sees.
inline std::vector<SymbolId> fit_prompt(const Policy& policy, std::vector<SymbolId> prompt) {
  std::size_t keep = policy.context_length() > 0 ? policy.context_length() - 1 : 0;
  if (policy.prompt_window() > 0) keep = std::min(keep, policy.prompt_window());
  if (prompt.size() > keep) prompt.erase(prompt.begin(), prompt.end() - static_cast<std::ptrdiff_t>(keep));
  return prompt;
}

}  // namespace lexrl
