#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "lexrl/parallel.hpp"
#include "lexrl/transformer.hpp"

namespace lexrl {

/// Gradient accumulator in parameter layout; always 64-bit.
struct Gradients {
  std::vector<double> values;

  Gradients() = default;
  explicit Gradients(std::size_t n) : values(n, 0.0) {}
  void zero() { std::fill(values.begin(), values.end(), 0.0); }
  std::size_t size() const noexcept { return values.size(); }
};

/// A sequence scored by sum_t weights[t] * -log p(labels[t] | symbols[<t]).
/// Position 0 is never scored. `labels` defaults to `symbols`.
struct WeightedSequence {
  std::vector<SymbolId> symbols;
  std::vector<SymbolId> labels;
  std::vector<double> weights;

  SymbolId label(std::size_t t) const { return labels.empty() ? symbols[t] : labels[t]; }
};

/// Recorded forward pass of one weighted NLL term, ready for backward.
template <typename S>
class LossGraph {
 public:
  using Matrix = typename Transformer<S>::Matrix;

  LossGraph() = default;

  bool recorded() const noexcept { return model_ != nullptr; }
  double value() const noexcept { return value_; }
  /// d(loss)/d(logits); row r belongs to position r + 1.
  const Matrix& logit_gradients() const { return dlogits_; }
  const ForwardRecord<S>& record() const { return rec_; }

  /// Adds scale * d(loss)/d(params) into `out`.
  void backward(Gradients& out, double scale = 1.0) const {
    if (!recorded()) throw std::logic_error("backward called without a recorded forward pass");
    if (out.size() != model_->parameter_count()) throw std::invalid_argument("gradient buffer size mismatch");
    AlignedVector<S> scratch(out.size(), S(0));
    model_->backward(rec_, dlogits_, scratch);
    for (std::size_t i = 0; i < scratch.size(); ++i) out.values[i] += scale * static_cast<double>(scratch[i]);
  }

  template <typename T>
  friend LossGraph<T> record_loss(const Transformer<T>& model, const WeightedSequence& seq);

 private:
  const Transformer<S>* model_ = nullptr;
  ForwardRecord<S> rec_;
  Matrix dlogits_;
  double value_ = 0.0;
};

/// Forward pass plus loss value and logit gradients. Rows with zero weight
/// get exactly zero logit gradient and never read their label.
template <typename S>
LossGraph<S> record_loss(const Transformer<S>& model, const WeightedSequence& seq) {
  const std::size_t n = seq.symbols.size();
  if (n < 2) throw std::invalid_argument("loss needs at least two symbols");
  if (seq.weights.size() != n || (!seq.labels.empty() && seq.labels.size() != n)) {
    throw std::invalid_argument("weights/labels must match the symbol count");
  }
  LossGraph<S> g;
  g.model_ = &model;
  g.rec_ = model.forward(std::span<const SymbolId>(seq.symbols.data(), n - 1));
  const auto V = static_cast<Eigen::Index>(model.config().vocab_size);
  g.dlogits_ = LossGraph<S>::Matrix::Zero(static_cast<Eigen::Index>(n - 1), V);
  double total = 0.0;
  std::vector<double> p(static_cast<std::size_t>(V));
  for (std::size_t t = 1; t < n; ++t) {
    const double w = seq.weights[t];
    if (w == 0.0) continue;
    const auto r = static_cast<Eigen::Index>(t - 1);
    const SymbolId y = seq.label(t);
    if (y < 0 || y >= V) throw std::out_of_range("label outside vocabulary");
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < V; ++j) m = std::max(m, static_cast<double>(g.rec_.logits(r, j)));
    double z = 0.0;
    for (Eigen::Index j = 0; j < V; ++j) {
      p[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(g.rec_.logits(r, j)) - m);
      z += p[static_cast<std::size_t>(j)];
    }
    const double logp = static_cast<double>(g.rec_.logits(r, y)) - m - std::log(z);
    total += w * -logp;
    for (Eigen::Index j = 0; j < V; ++j) {
      const double pj = p[static_cast<std::size_t>(j)] / z;
      g.dlogits_(r, j) = static_cast<S>(w * (pj - (j == y ? 1.0 : 0.0)));
    }
  }
  g.value_ = total;
  return g;
}

template <typename S>
std::vector<LossGraph<S>> record_losses(const Transformer<S>& model, const std::vector<WeightedSequence>& seqs,
                                        std::size_t workers = 1) {
  std::vector<LossGraph<S>> out(seqs.size());
  parallel_for(seqs.size(), workers, [&](std::size_t i) { out[i] = record_loss(model, seqs[i]); });
  return out;
}

/// Adds scale * d(loss)/d(params) of every graph into `out` in graph order.
/// With several workers each graph fills its own buffer first; 0 + x is
/// exact, so the sum is bit-identical to the single-threaded one.
template <typename S>
void backward_all(const std::vector<LossGraph<S>>& graphs, Gradients& out, double scale = 1.0,
                  std::size_t workers = 1) {
  if (workers <= 1 || graphs.size() < 2) {
    for (const auto& g : graphs) g.backward(out, scale);
    return;
  }
  std::vector<Gradients> parts(graphs.size());
  parallel_for(graphs.size(), workers, [&](std::size_t i) {
    parts[i] = Gradients(out.size());
    graphs[i].backward(parts[i], scale);
  });
  for (const auto& part : parts)
    for (std::size_t k = 0; k < out.size(); ++k) out.values[k] += part.values[k];
}

/// log p(sequence[t] | sequence[<t]) for t = 1..n-1 (entry t-1).
template <typename S>
std::vector<double> sequence_logprobs(const Transformer<S>& model, std::span<const SymbolId> sequence) {
  if (sequence.size() < 2) throw std::invalid_argument("sequence_logprobs needs at least two symbols");
  const auto rec = model.forward(sequence.first(sequence.size() - 1));
  std::vector<double> out(sequence.size() - 1);
  for (std::size_t t = 1; t < sequence.size(); ++t) {
    const auto row = rec.logits.row(static_cast<Eigen::Index>(t - 1)).template cast<double>();
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    out[t - 1] = row(sequence[t]) - lse;
  }
  return out;
}

}  // namespace lexrl
