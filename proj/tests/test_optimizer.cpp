#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "lexrl/optimizer.hpp"

using namespace lexrl;
using lexrl::testing::tiny_model;

namespace {
Gradients random_gradients(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Gradients g(n);
  Rng rng(seed);
  for (double& v : g.values) v = scale * standard_normal(rng);
  return g;
}

// Straight transcription of the decoupled update, one scalar at a time.
struct ReferenceAdam {
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& p, const std::vector<double>& g, const AdamWConfig& c) {
    if (m.empty()) m.assign(p.size(), 0.0), v.assign(p.size(), 0.0);
    double norm = 0;
    for (double x : g) norm += x * x;
    norm = std::sqrt(norm);
    const double s = (c.grad_clip_norm > 0 && norm > c.grad_clip_norm) ? c.grad_clip_norm / norm : 1.0;
    ++t;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * s;
      m[i] = c.beta1 * m[i] + (1 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1 - c.beta2) * gi * gi;
      const double mh = m[i] / (1 - std::pow(c.beta1, t));
      const double vh = v[i] / (1 - std::pow(c.beta2, t));
      p[i] = p[i] - c.lr * c.weight_decay * p[i] - c.lr * mh / (std::sqrt(vh) + c.eps);
    }
  }
};
}  // namespace

TEST(AdamW, MatchesReferenceUpdateOverSeveralSteps) {
  auto model = tiny_model(1);
  const AdamWConfig cfg{1e-3, 0.9, 0.999, 1e-8, 0.01, 0.0};
  std::vector<double> expected(model.parameters().begin(), model.parameters().end());
  ReferenceAdam ref;
  AdamW opt(model.parameter_count());
  for (int s = 0; s < 3; ++s) {
    const auto g = random_gradients(model.parameter_count(), 10 + s);
    opt.step(model, g, cfg);
    ref.step(expected, g.values, cfg);
  }
  EXPECT_EQ(opt.step_count(), 3u);
  for (std::size_t i = 0; i < expected.size(); ++i) ASSERT_NEAR(model.parameters()[i], expected[i], 1e-15);
}

TEST(AdamW, FirstStepIsSignedLearningRate) {
  auto model = tiny_model(2);
  const std::vector<double> before(model.parameters().begin(), model.parameters().end());
  const auto g = random_gradients(model.parameter_count(), 3);
  AdamW opt;
  opt.step(model, g, {0.01, 0.9, 0.999, 1e-8, 0.0, 0.0});
  // Bias correction cancels: the step is lr * |g| / (|g| + eps) against the sign of g.
  for (std::size_t i = 0; i < before.size(); ++i) {
    const double a = std::abs(g.values[i]);
    EXPECT_NEAR(before[i] - model.parameters()[i], std::copysign(0.01 * a / (a + 1e-8), g.values[i]), 1e-15);
  }
}

TEST(AdamW, ClippingScalesToTheThreshold) {
  auto model = tiny_model(3);
  const auto g = random_gradients(model.parameter_count(), 4, 5.0);
  AdamW opt(model.parameter_count());
  const auto report = opt.step(model, g, {1e-3, 0.9, 0.999, 1e-8, 0.0, 0.1});
  double norm = 0;
  for (double x : g.values) norm += x * x;
  EXPECT_NEAR(report.grad_norm, std::sqrt(norm), 1e-9);
  EXPECT_NEAR(report.clip_scale * report.grad_norm, 0.1, 1e-12);
  EXPECT_NEAR(opt.first_moment()[7], 0.1 * g.values[7] * report.clip_scale, 1e-15);

  AdamW unclipped(model.parameter_count());
  const auto small = random_gradients(model.parameter_count(), 4, 1e-6);
  EXPECT_EQ(unclipped.step(model, small, {1e-3, 0.9, 0.999, 1e-8, 0.0, 0.1}).clip_scale, 1.0);
}

TEST(AdamW, FrozenTensorsNeitherMoveNorCountTowardTheNorm) {
  auto model = tiny_model(4);
  model.set_trainable([](std::string_view name) { return !name.starts_with("blocks.0."); });
  const std::vector<double> before(model.parameters().begin(), model.parameters().end());
  Gradients g = random_gradients(model.parameter_count(), 5);
  double trainable_sq = 0;
  for (const auto& t : model.tensors()) {
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
      if (t.trainable) {
        trainable_sq += g.values[i] * g.values[i];
      } else {
        g.values[i] = std::nan("");  // never inspected
      }
    }
  }
  AdamW opt;
  const auto report = opt.step(model, g, {1e-3, 0.9, 0.999, 1e-8, 0.1, 0.0});
  EXPECT_NEAR(report.grad_norm, std::sqrt(trainable_sq), 1e-9);
  std::size_t frozen = 0;
  for (const auto& t : model.tensors()) {
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
      if (!t.trainable) {
        EXPECT_EQ(model.parameters()[i], before[i]);
        ++frozen;
      }
    }
  }
  EXPECT_GT(frozen, 0u);
}

TEST(AdamW, NonFiniteGradientThrowsBeforeAnyUpdate) {
  auto model = tiny_model(5);
  const std::vector<double> before(model.parameters().begin(), model.parameters().end());
  Gradients g = random_gradients(model.parameter_count(), 6);
  g.values.back() = std::numeric_limits<double>::infinity();
  AdamW opt;
  EXPECT_THROW(opt.step(model, g, {}), NonFiniteGradient);
  EXPECT_EQ(opt.step_count(), 0u);
  for (std::size_t i = 0; i < before.size(); ++i) ASSERT_EQ(model.parameters()[i], before[i]);
  EXPECT_THROW(opt.step(model, Gradients(3), {}), std::invalid_argument);
}
