#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "lexrl/loss.hpp"
#include "lexrl/transformer.hpp"

namespace lexrl {

struct AdamWConfig {
  double lr = 5e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global-norm clip threshold; <= 0 disables clipping.
  double grad_clip_norm = 0.1;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepReport {
  double grad_norm = 0.0;
  double clip_scale = 1.0;
};

/// Decoupled-weight-decay Adam with global-norm clipping. Moments are kept
/// in double; frozen tensors are skipped entirely.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(std::size_t parameter_count) : m_(parameter_count, 0.0), v_(parameter_count, 0.0) {}

  std::size_t step_count() const noexcept { return step_; }
  const std::vector<double>& first_moment() const noexcept { return m_; }
  const std::vector<double>& second_moment() const noexcept { return v_; }

  template <typename S>
  StepReport step(Transformer<S>& model, const Gradients& grads, const AdamWConfig& cfg) {
    const auto params = model.parameters();
    if (grads.size() != params.size()) throw std::invalid_argument("gradient size mismatch");
    if (m_.size() != params.size()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }

    StepReport report;
    double sq = 0.0;
    for (const auto& t : model.tensors()) {
      if (!t.trainable) continue;
      for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
        const double g = grads.values[i];
        if (!std::isfinite(g)) {
          std::ostringstream os;
          os << "non-finite gradient in " << t.name << " at element " << (i - t.offset) << " (" << g << ")";
          throw NonFiniteGradient(os.str());
        }
        sq += g * g;
      }
    }
    report.grad_norm = std::sqrt(sq);
    if (cfg.grad_clip_norm > 0.0 && report.grad_norm > cfg.grad_clip_norm) {
      report.clip_scale = cfg.grad_clip_norm / report.grad_norm;
    }

    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (const auto& t : model.tensors()) {
      if (!t.trainable) continue;
      for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
        const double g = grads.values[i] * report.clip_scale;
        m_[i] = cfg.beta1 * m_[i] + (1.0 - cfg.beta1) * g;
        v_[i] = cfg.beta2 * v_[i] + (1.0 - cfg.beta2) * g * g;
        double p = static_cast<double>(params[i]);
        p -= cfg.lr * cfg.weight_decay * p;
        p -= cfg.lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg.eps);
        params[i] = static_cast<S>(p);
      }
    }
    return report;
  }

 private:
  std::vector<double> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace lexrl
