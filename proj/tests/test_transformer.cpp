#include <gtest/gtest.h>

#include <set>

#include "gradcheck.hpp"
#include "lexrl/checkpoint.hpp"
#include "lexrl/loss.hpp"
#include "lexrl/transformer.hpp"
#include "support.hpp"

using namespace lexrl;
using lexrl::testing::tiny_model;

namespace {
WeightedSequence random_sequence(Rng& rng, std::size_t n) {
  WeightedSequence s;
  for (std::size_t i = 0; i < n; ++i) {
    s.symbols.push_back(static_cast<SymbolId>(uniform_index(rng, 264)));
    s.weights.push_back(uniform_index(rng, 4) == 0 ? 0.0 : uniform01(rng));
  }
  return s;
}
}  // namespace

TEST(Transformer, ParameterCountMatchesClosedForm) {
  for (std::size_t L : {1u, 2u, 4u}) {
    for (std::size_t d : {8u, 64u, 128u}) {
      TransformerConfig c;
      c.layers = L;
      c.width = d;
      c.heads = 4;
      const std::size_t V = 264;
      const std::size_t expected = V * d + L * (12 * d * d + 13 * d) + 2 * d + d * V;
      EXPECT_EQ(parameter_count(c), expected);
      EXPECT_EQ(Transformer<float>(c).parameter_count(), expected);
    }
  }
}

TEST(Transformer, TensorsTileTheBufferWithUniqueNames) {
  TransformerConfig c;
  c.layers = 3;
  c.width = 16;
  const Transformer<float> m(c);
  std::size_t at = 0;
  std::set<std::string> names;
  for (const auto& t : m.tensors()) {
    EXPECT_EQ(t.offset, at);
    at += t.size();
    EXPECT_TRUE(names.insert(t.name).second);
  }
  EXPECT_EQ(at, m.parameter_count());
  EXPECT_EQ(m.tensors().size(), 1 + 3 * 12 + 2 + 1u);
}

TEST(Transformer, InvalidShapesAreRejected) {
  TransformerConfig c;
  c.width = 10;
  c.heads = 4;
  EXPECT_THROW(Transformer<float>{c}, std::invalid_argument);
  c.width = 12;
  c.heads = 4;  // head width 3 is odd
  EXPECT_THROW(Transformer<float>{c}, std::invalid_argument);
  c = {};
  c.vocab_size = 100;
  EXPECT_THROW(Transformer<float>{c}, std::invalid_argument);
}

TEST(Transformer, InitializationFollowsTheScheme) {
  TransformerConfig c;
  c.layers = 2;
  c.width = 64;
  Transformer<double> m(c);
  Rng rng(1);
  m.initialize(rng);
  for (const auto& t : m.tensors()) {
    const auto p = m.parameters().subspan(t.offset, t.size());
    if (t.name.ends_with("gain")) {
      for (double v : p) EXPECT_EQ(v, 1.0);
    } else if (t.name.ends_with("bias")) {
      for (double v : p) EXPECT_EQ(v, 0.0);
    } else {
      double s2 = 0;
      for (double v : p) s2 += v * v;
      const double sd = std::sqrt(s2 / p.size());
      const bool residual = t.name.ends_with("proj.weight") || t.name.ends_with("down.weight");
      EXPECT_NEAR(sd, residual ? 0.01 : 0.02, 0.002) << t.name;
    }
  }
}

TEST(Transformer, GradientsMatchFiniteDifferencesOnEveryTensor) {
  auto model = tiny_model(3);
  Rng rng(5);
  const auto seq = random_sequence(rng, 12);
  Gradients g(model.parameter_count());
  record_loss(model, seq).backward(g);
  Rng pick(9);
  const auto r = lexrl::testing::gradient_check(
      model, [&] { return record_loss(model, seq).value(); }, g.values, 6, pick);
  EXPECT_LT(r.worst_relative_error, 1e-4) << r.worst_tensor;
  EXPECT_EQ(r.checked, 6 * model.tensors().size());
}

TEST(Transformer, ZeroWeightRowsHaveZeroLogitGradientAndIgnoreLabels) {
  auto model = tiny_model(4);
  Rng rng(2);
  auto seq = random_sequence(rng, 10);
  seq.weights[3] = seq.weights[6] = 0.0;
  const auto g = record_loss(model, seq);
  EXPECT_EQ(g.logit_gradients().row(2).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.logit_gradients().row(5).cwiseAbs().maxCoeff(), 0.0);
  auto corrupted = seq;
  corrupted.labels = seq.symbols;
  corrupted.labels[3] = -12345;  // would throw if read
  corrupted.labels[6] = 999999;
  const auto h = record_loss(model, corrupted);
  EXPECT_EQ(h.value(), g.value());
  EXPECT_EQ(h.logit_gradients(), g.logit_gradients());
}

TEST(Transformer, SessionMatchesFullForward) {
  auto model = tiny_model(6, 40);
  Rng rng(3);
  std::vector<SymbolId> seq;
  for (int i = 0; i < 40; ++i) seq.push_back(static_cast<SymbolId>(uniform_index(rng, 264)));
  const auto rec = model.forward(seq);
  for (std::size_t prompt : {1u, 5u, 39u}) {
    auto session = model.open(std::span(seq).first(prompt));
    for (std::size_t t = prompt - 1; t < seq.size(); ++t) {
      const auto lg = session->logits();
      for (std::size_t j = 0; j < lg.size(); ++j) ASSERT_NEAR(lg[j], rec.logits(t, j), 1e-12);
      if (t + 1 < seq.size()) session->feed(seq[t + 1]);
    }
    EXPECT_EQ(session->length(), seq.size());
    EXPECT_THROW(session->feed(SymbolId{0}), ContextOverflow);
  }
}

TEST(Transformer, FloatAndDoubleAgree) {
  const auto d = tiny_model(7);
  const auto f = d.cast<float>();
  const std::vector<SymbolId> seq = {1, 2, 256, 99, 261, 3};
  const auto rd = d.forward(seq);
  const auto rf = f.forward(seq);
  EXPECT_LT((rd.logits - rf.logits.cast<double>()).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Transformer, RotaryPositionsMakeOrderMatter) {
  const auto m = tiny_model(8);
  const auto a = m.forward(std::vector<SymbolId>{10, 20, 30});
  const auto b = m.forward(std::vector<SymbolId>{20, 10, 30});
  EXPECT_GT((a.logits.row(2) - b.logits.row(2)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Transformer, ContextIsEnforced) {
  const auto m = tiny_model(1, 8);
  EXPECT_THROW(m.forward(std::vector<SymbolId>(9, 1)), ContextOverflow);
  EXPECT_THROW(m.open(std::vector<SymbolId>(9, 1)), ContextOverflow);
  EXPECT_THROW(m.forward(std::vector<SymbolId>{}), std::invalid_argument);
  EXPECT_THROW(m.forward(std::vector<SymbolId>{264}), std::out_of_range);
}

TEST(Transformer, SequenceLogprobsMatchSessionSoftmax) {
  const auto m = tiny_model(2);
  const std::vector<SymbolId> seq = {5, 6, 7, 8, 9};
  const auto lp = sequence_logprobs(m, seq);
  ASSERT_EQ(lp.size(), 4u);
  auto session = m.open(std::span(seq).first(1));
  for (std::size_t t = 1; t < seq.size(); ++t) {
    const auto p = softmax(session->logits());
    EXPECT_NEAR(lp[t - 1], std::log(p[seq[t]]), 1e-12);
    session->feed(seq[t]);
  }
}

TEST(Sampling, FrequenciesFollowTemperedSoftmax) {
  const std::vector<double> logits = {0.0, 1.0, -1.0, 2.0, 0.5};
  for (double temperature : {0.5, 1.0, 2.0}) {
    const auto p = softmax(logits, temperature);
    std::vector<int> counts(logits.size(), 0);
    Rng rng(static_cast<std::uint64_t>(temperature * 100));
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[sample_from_logits(logits, temperature, rng)];
    double chi2 = 0;
    for (std::size_t k = 0; k < p.size(); ++k) chi2 += std::pow(counts[k] - n * p[k], 2) / (n * p[k]);
    // 4 degrees of freedom; 99.9% quantile is 18.47.
    EXPECT_LT(chi2, 18.47) << "temperature " << temperature;
  }
  Rng rng(1);
  EXPECT_THROW(sample_from_logits(logits, 0.0, rng), std::invalid_argument);
}

TEST(Sampling, OneUniformPerDraw) {
  const std::vector<double> logits = {0.0, 0.0, 0.0};
  Rng a(3), b(3);
  for (int i = 0; i < 10; ++i) sample_from_logits(logits, 1.0, a);
  for (int i = 0; i < 10; ++i) uniform01(b);
  EXPECT_EQ(a(), b());
}

TEST(Sampling, FitPromptKeepsTheTail) {
  TransformerConfig c;
  c.layers = 1;
  c.width = 8;
  c.heads = 2;
  c.context_length = 10;
  c.prompt_window = 4;
  const Transformer<float> m(c);
  std::vector<SymbolId> prompt = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(fit_prompt(m, prompt), (std::vector<SymbolId>{3, 4, 5, 6}));
  c.prompt_window = 0;
  c.context_length = 4;
  EXPECT_EQ(fit_prompt(Transformer<float>(c), prompt), (std::vector<SymbolId>{4, 5, 6}));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  lexrl::testing::TempDir dir("ckpt");
  TransformerConfig c;
  c.layers = 2;
  c.width = 16;
  c.heads = 2;
  c.context_length = 64;
  c.prompt_window = 32;
  Transformer<float> m(c);
  Rng rng(11);
  m.initialize(rng);
  m.parameters()[0] = -0.0f;
  m.parameters()[1] = 1e-42f;  // subnormal
  rng();
  save_checkpoint(dir / "a", m, 17, rng, {{"lr", 0.5}});
  const auto ck = load_checkpoint(dir / "a");
  EXPECT_EQ(ck.model.config(), c);
  EXPECT_EQ(ck.step, 17u);
  EXPECT_EQ(ck.rng, rng);
  EXPECT_EQ(ck.hyperparameters.at("lr"), 0.5);
  ASSERT_EQ(ck.model.parameter_count(), m.parameter_count());
  EXPECT_EQ(std::memcmp(ck.model.parameters().data(), m.parameters().data(), m.parameter_count() * sizeof(float)), 0);
  EXPECT_EQ(std::filesystem::file_size(dir / "a" / "params.bin"), m.parameter_count() * 4);

  save_checkpoint(dir / "b", ck.model, ck.step, ck.rng, ck.hyperparameters);
  for (const char* f : {"manifest.json", "params.bin"}) {
    std::ifstream x(dir / "a" / f, std::ios::binary), y(dir / "b" / f, std::ios::binary);
    EXPECT_EQ(std::string(std::istreambuf_iterator<char>(x), {}), std::string(std::istreambuf_iterator<char>(y), {}));
  }
}

TEST(Checkpoint, CorruptionIsDetected) {
  lexrl::testing::TempDir dir("ckpt-bad");
  TransformerConfig c;
  c.layers = 1;
  c.width = 8;
  c.heads = 2;
  c.context_length = 16;
  Transformer<float> m(c);
  save_checkpoint(dir.path(), m, 0, Rng(1));
  std::filesystem::resize_file(dir / "params.bin", 10);
  EXPECT_THROW(load_checkpoint(dir.path()), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir / "missing"), IoError);
  TagSet other;
  other.answer_open = "<a>";
  save_checkpoint(dir.path(), m, 0, Rng(1));
  EXPECT_THROW(load_checkpoint(dir.path(), Vocabulary(other)), CheckpointError);
}
