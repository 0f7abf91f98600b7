#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "lexrl/policy.hpp"
#include "lexrl/random.hpp"
#include "lexrl/vocabulary.hpp"

namespace lexrl {

struct TransformerConfig {
  std::size_t vocab_size = 264;
  std::size_t layers = 4;
  std::size_t width = 128;
  std::size_t heads = 4;
  std::size_t context_length = 512;
  /// Trailing prompt symbols kept at train and decode time; 0 keeps all that fit.
  std::size_t prompt_window = 0;

  std::size_t ff_width() const noexcept { return 4 * width; }
  std::size_t head_width() const noexcept { return width / heads; }

  void validate() const {
    if (vocab_size < 1 || layers < 1 || width < 1 || heads < 1 || context_length < 2) {
      throw std::invalid_argument("transformer hyperparameters must be positive (context >= 2)");
    }
    if (width % heads != 0) throw std::invalid_argument("width must be divisible by heads");
    if (head_width() % 2 != 0) throw std::invalid_argument("head width must be even for rotary positions");
  }

  bool operator==(const TransformerConfig&) const = default;
};

/// V*d + L*(12d^2 + 13d) + 2d + d*V with the 4x feed-forward. Positions are
/// rotary, so the context length adds no parameters.
inline std::size_t parameter_count(const TransformerConfig& c) {
  const std::size_t d = c.width, v = c.vocab_size, f = c.ff_width();
  const std::size_t per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
  return v * d + c.layers * per_layer + 2 * d + d * v;
}

struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  bool trainable = true;

  std::size_t size() const noexcept { return rows * cols; }
};

template <typename S>
struct ForwardRecord;

template <typename S>
using AlignedVector = std::vector<S, Eigen::aligned_allocator<S>>;

/// Decoder-only pre-norm transformer over the protocol vocabulary, with
/// rotary position encoding on queries and keys.
///
/// Parameters live in one flat buffer described by `tensors()`; gradients
/// use the same layout. `S` is float for training and double for gradient
/// checks.
template <typename S>
class Transformer final : public Policy {
 public:
  using Scalar = S;
  using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using RowMap = Eigen::Map<RowVector>;
  using ConstRowMap = Eigen::Map<const RowVector>;

  struct LayerOffsets {
    std::size_t ln1_gain, ln1_bias, qkv_weight, qkv_bias, proj_weight, proj_bias;
    std::size_t ln2_gain, ln2_bias, up_weight, up_bias, down_weight, down_bias;
  };

  explicit Transformer(TransformerConfig cfg, Vocabulary vocab = Vocabulary{})
      : cfg_(cfg), vocab_(std::move(vocab)) {
    cfg_.validate();
    if (cfg_.vocab_size != vocab_.size()) throw std::invalid_argument("vocab_size does not match vocabulary");
    layout();
  }

  /// Normal(0, 0.02) weights, residual projections scaled by 1/sqrt(2L),
  /// unit norm gains, zero biases.
  void initialize(Rng& rng) {
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
    for (const auto& t : tensors_) {
      auto p = std::span<S>(params_).subspan(t.offset, t.size());
      const bool gain = t.name.ends_with("gain");
      const bool bias = t.name.ends_with("bias");
      const bool residual = t.name.ends_with("proj.weight") || t.name.ends_with("down.weight");
      for (S& x : p) {
        if (gain) {
          x = S(1);
        } else if (bias) {
          x = S(0);
        } else {
          x = static_cast<S>(0.02 * standard_normal(rng) * (residual ? residual_scale : 1.0));
        }
      }
    }
  }

  const TransformerConfig& config() const noexcept { return cfg_; }
  const std::vector<TensorSpec>& tensors() const noexcept { return tensors_; }
  std::span<S> parameters() noexcept { return params_; }
  std::span<const S> parameters() const noexcept { return params_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }

  /// Parameter-subset hook: tensors for which `keep` is false are frozen by
  /// the optimizer.
  void set_trainable(const std::function<bool(std::string_view)>& keep) {
    for (auto& t : tensors_) t.trainable = keep(t.name);
  }

  template <typename T>
  Transformer<T> cast() const {
    Transformer<T> out(cfg_, vocab_);
    auto dst = out.parameters();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<T>(params_[i]);
    out.set_trainable([&](std::string_view name) {
      for (const auto& t : tensors_)
        if (t.name == name) return t.trainable;
      return true;
    });
    return out;
  }

  // Policy
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::size_t context_length() const override { return cfg_.context_length; }
  std::size_t prompt_window() const override { return cfg_.prompt_window; }
  std::unique_ptr<DecodeSession> open(std::span<const SymbolId> prompt) const override;

  /// Full-sequence forward pass keeping every activation needed by backward.
  ForwardRecord<S> forward(std::span<const SymbolId> inputs) const;

  /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits).
  void backward(const ForwardRecord<S>& rec, const Matrix& dlogits, std::span<S> grad) const;

  // Raw tensor views, used by the decode session and the backward pass.
  ConstMatrixMap mat(std::size_t offset, std::size_t rows, std::size_t cols) const {
    return ConstMatrixMap(params_.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }
  ConstRowMap row(std::size_t offset, std::size_t n) const {
    return ConstRowMap(params_.data() + offset, static_cast<Eigen::Index>(n));
  }
  const LayerOffsets& layer(std::size_t l) const { return layers_[l]; }
  std::size_t token_embedding_offset() const noexcept { return tok_emb_; }
  std::size_t final_gain_offset() const noexcept { return lnf_gain_; }
  std::size_t final_bias_offset() const noexcept { return lnf_bias_; }
  std::size_t head_offset() const noexcept { return head_; }

  static constexpr double kNormEps = 1e-5;
  static constexpr double kRotaryBase = 10000.0;

  /// Rotates each (2i, 2i+1) pair of a head vector at position `pos` by
  /// pos * base^(-2i/head_width); `inverse` applies the transpose.
  template <typename Block>
  void rotate(Block&& v, std::size_t pos, bool inverse) const {
    const std::size_t half = cfg_.head_width() / 2;
    const S* c = cos_.data() + pos * half;
    const S* s = sin_.data() + pos * half;
    for (std::size_t i = 0; i < half; ++i) {
      const auto a = static_cast<Eigen::Index>(2 * i);
      const S x0 = v(a), x1 = v(a + 1);
      const S sn = inverse ? -s[i] : s[i];
      v(a) = x0 * c[i] - x1 * sn;
      v(a + 1) = x0 * sn + x1 * c[i];
    }
  }

 private:
  std::size_t add(const std::string& name, std::size_t rows, std::size_t cols) {
    tensors_.push_back({name, rows, cols, total_, true});
    total_ += rows * cols;
    return tensors_.back().offset;
  }

  void layout() {
    const std::size_t d = cfg_.width, f = cfg_.ff_width(), v = cfg_.vocab_size;
    tok_emb_ = add("token_embedding", v, d);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      LayerOffsets o{};
      o.ln1_gain = add(p + "ln1.gain", 1, d);
      o.ln1_bias = add(p + "ln1.bias", 1, d);
      o.qkv_weight = add(p + "attn.qkv.weight", d, 3 * d);
      o.qkv_bias = add(p + "attn.qkv.bias", 1, 3 * d);
      o.proj_weight = add(p + "attn.proj.weight", d, d);
      o.proj_bias = add(p + "attn.proj.bias", 1, d);
      o.ln2_gain = add(p + "ln2.gain", 1, d);
      o.ln2_bias = add(p + "ln2.bias", 1, d);
      o.up_weight = add(p + "ffn.up.weight", d, f);
      o.up_bias = add(p + "ffn.up.bias", 1, f);
      o.down_weight = add(p + "ffn.down.weight", f, d);
      o.down_bias = add(p + "ffn.down.bias", 1, d);
      layers_.push_back(o);
    }
    lnf_gain_ = add("final_norm.gain", 1, d);
    lnf_bias_ = add("final_norm.bias", 1, d);
    head_ = add("head.weight", d, v);
    params_.assign(total_, S(0));

    const std::size_t half = cfg_.head_width() / 2;
    cos_.resize(cfg_.context_length * half);
    sin_.resize(cfg_.context_length * half);
    for (std::size_t p = 0; p < cfg_.context_length; ++p) {
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(kRotaryBase, -2.0 * static_cast<double>(i) / static_cast<double>(cfg_.head_width()));
        cos_[p * half + i] = static_cast<S>(std::cos(static_cast<double>(p) * freq));
        sin_[p * half + i] = static_cast<S>(std::sin(static_cast<double>(p) * freq));
      }
    }
  }

  TransformerConfig cfg_;
  Vocabulary vocab_;
  std::vector<TensorSpec> tensors_;
  std::vector<LayerOffsets> layers_;
  // Eigen's vectorized reductions peel to the buffer's alignment, so a fixed
  // alignment keeps results bit-identical from run to run.
  AlignedVector<S> params_;
  std::vector<S> cos_, sin_;
  std::size_t total_ = 0;
  std::size_t tok_emb_ = 0, lnf_gain_ = 0, lnf_bias_ = 0, head_ = 0;
};

template <typename S>
struct LayerRecord {
  using Matrix = typename Transformer<S>::Matrix;
  Matrix ln1_hat, h1, qkv, attn_out, ln2_hat, h2, up, act;
  std::vector<S> ln1_rstd, ln2_rstd;
  std::vector<Matrix> att;  // per head, T x T, causal
};

template <typename S>
struct ForwardRecord {
  using Matrix = typename Transformer<S>::Matrix;
  std::vector<SymbolId> inputs;
  std::vector<LayerRecord<S>> layers;
  Matrix lnf_hat, hf, logits;
  std::vector<S> lnf_rstd;
};

namespace detail {

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

template <typename S>
S gelu(S x) {
  const S th = std::tanh(static_cast<S>(kGeluK) * (x + static_cast<S>(kGeluC) * x * x * x));
  return S(0.5) * x * (S(1) + th);
}

template <typename S>
S gelu_grad(S x) {
  const S u = static_cast<S>(kGeluK) * (x + static_cast<S>(kGeluC) * x * x * x);
  const S th = std::tanh(u);
  const S du = static_cast<S>(kGeluK) * (S(1) + S(3) * static_cast<S>(kGeluC) * x * x);
  return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * du;
}

template <typename S>
void layernorm_forward(const typename Transformer<S>::Matrix& x, typename Transformer<S>::ConstRowMap gain,
                       typename Transformer<S>::ConstRowMap bias, typename Transformer<S>::Matrix& hat,
                       std::vector<S>& rstd, typename Transformer<S>::Matrix& out) {
  const auto rows = x.rows();
  hat.resize(rows, x.cols());
  out.resize(rows, x.cols());
  rstd.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index t = 0; t < rows; ++t) {
    const S mean = x.row(t).mean();
    const S var = (x.row(t).array() - mean).square().mean();
    const S r = S(1) / std::sqrt(var + static_cast<S>(Transformer<S>::kNormEps));
    rstd[static_cast<std::size_t>(t)] = r;
    hat.row(t) = (x.row(t).array() - mean) * r;
    out.row(t) = hat.row(t).array() * gain.array() + bias.array();
  }
}

/// dx += d(layernorm)/dx; dgain, dbias accumulated.
template <typename S>
void layernorm_backward(const typename Transformer<S>::Matrix& dy, const typename Transformer<S>::Matrix& hat,
                        const std::vector<S>& rstd, typename Transformer<S>::ConstRowMap gain,
                        typename Transformer<S>::RowMap dgain, typename Transformer<S>::RowMap dbias,
                        typename Transformer<S>::Matrix& dx) {
  using RowVector = typename Transformer<S>::RowVector;
  for (Eigen::Index t = 0; t < dy.rows(); ++t) {
    const RowVector dhat = dy.row(t).array() * gain.array();
    const S m1 = dhat.mean();
    const S m2 = (dhat.array() * hat.row(t).array()).mean();
    dx.row(t).array() += (dhat.array() - m1 - hat.row(t).array() * m2) * rstd[static_cast<std::size_t>(t)];
  }
  dgain += (dy.array() * hat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
}

}  // namespace detail

template <typename S>
ForwardRecord<S> Transformer<S>::forward(std::span<const SymbolId> inputs) const {
  const auto T = static_cast<Eigen::Index>(inputs.size());
  if (T == 0) throw std::invalid_argument("forward: empty input");
  if (inputs.size() > cfg_.context_length) {
    throw ContextOverflow("forward: sequence of " + std::to_string(inputs.size()) + " exceeds context " +
                          std::to_string(cfg_.context_length));
  }
  const auto d = static_cast<Eigen::Index>(cfg_.width);
  const auto hd = static_cast<Eigen::Index>(cfg_.head_width());
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  ForwardRecord<S> rec;
  rec.inputs.assign(inputs.begin(), inputs.end());
  Matrix x(T, d);
  const auto tok = mat(tok_emb_, cfg_.vocab_size, cfg_.width);
  for (Eigen::Index t = 0; t < T; ++t) {
    const SymbolId s = inputs[static_cast<std::size_t>(t)];
    if (s < 0 || static_cast<std::size_t>(s) >= cfg_.vocab_size) throw std::out_of_range("symbol outside vocabulary");
    x.row(t) = tok.row(s);
  }

  rec.layers.resize(cfg_.layers);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const auto& o = layers_[l];
    auto& L = rec.layers[l];
    detail::layernorm_forward<S>(x, row(o.ln1_gain, cfg_.width), row(o.ln1_bias, cfg_.width), L.ln1_hat, L.ln1_rstd,
                                 L.h1);
    L.qkv.noalias() = L.h1 * mat(o.qkv_weight, cfg_.width, 3 * cfg_.width);
    L.qkv.rowwise() += row(o.qkv_bias, 3 * cfg_.width);
    for (Eigen::Index t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        const auto hh = static_cast<Eigen::Index>(h) * hd;
        rotate(L.qkv.row(t).segment(hh, hd), static_cast<std::size_t>(t), false);
        rotate(L.qkv.row(t).segment(d + hh, hd), static_cast<std::size_t>(t), false);
      }
    }

    L.attn_out.resize(T, d);
    L.att.resize(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const auto hh = static_cast<Eigen::Index>(h) * hd;
      const auto q = L.qkv.block(0, hh, T, hd);
      const auto k = L.qkv.block(0, d + hh, T, hd);
      const auto v = L.qkv.block(0, 2 * d + hh, T, hd);
      Matrix& a = L.att[h];
      a.noalias() = (q * k.transpose()) * scale;
      for (Eigen::Index t = 0; t < T; ++t) {
        const S m = a.row(t).head(t + 1).maxCoeff();
        a.row(t).head(t + 1) = (a.row(t).head(t + 1).array() - m).exp();
        a.row(t).head(t + 1) /= a.row(t).head(t + 1).sum();
        a.row(t).tail(T - t - 1).setZero();
      }
      L.attn_out.block(0, hh, T, hd).noalias() = a * v;
    }
    x.noalias() += L.attn_out * mat(o.proj_weight, cfg_.width, cfg_.width);
    x.rowwise() += row(o.proj_bias, cfg_.width);

    detail::layernorm_forward<S>(x, row(o.ln2_gain, cfg_.width), row(o.ln2_bias, cfg_.width), L.ln2_hat, L.ln2_rstd,
                                 L.h2);
    L.up.noalias() = L.h2 * mat(o.up_weight, cfg_.width, cfg_.ff_width());
    L.up.rowwise() += row(o.up_bias, cfg_.ff_width());
    L.act = L.up.unaryExpr([](S v) { return detail::gelu(v); });
    x.noalias() += L.act * mat(o.down_weight, cfg_.ff_width(), cfg_.width);
    x.rowwise() += row(o.down_bias, cfg_.width);
  }
  detail::layernorm_forward<S>(x, row(lnf_gain_, cfg_.width), row(lnf_bias_, cfg_.width), rec.lnf_hat, rec.lnf_rstd,
                               rec.hf);
  rec.logits.noalias() = rec.hf * mat(head_, cfg_.width, cfg_.vocab_size);
  return rec;
}

template <typename S>
void Transformer<S>::backward(const ForwardRecord<S>& rec, const Matrix& dlogits, std::span<S> grad) const {
  if (grad.size() != params_.size()) throw std::invalid_argument("gradient buffer size mismatch");
  const auto T = static_cast<Eigen::Index>(rec.inputs.size());
  if (dlogits.rows() != T || dlogits.cols() != static_cast<Eigen::Index>(cfg_.vocab_size)) {
    throw std::invalid_argument("dlogits shape mismatch");
  }
  const auto d = static_cast<Eigen::Index>(cfg_.width);
  const auto hd = static_cast<Eigen::Index>(cfg_.head_width());
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  auto gmat = [&](std::size_t off, std::size_t r, std::size_t c) {
    return MatrixMap(grad.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  };
  auto grow = [&](std::size_t off, std::size_t n) { return RowMap(grad.data() + off, static_cast<Eigen::Index>(n)); };

  gmat(head_, cfg_.width, cfg_.vocab_size).noalias() += rec.hf.transpose() * dlogits;
  const Matrix dhf = dlogits * mat(head_, cfg_.width, cfg_.vocab_size).transpose();
  Matrix dx = Matrix::Zero(T, d);
  detail::layernorm_backward<S>(dhf, rec.lnf_hat, rec.lnf_rstd, row(lnf_gain_, cfg_.width), grow(lnf_gain_, cfg_.width),
                                grow(lnf_bias_, cfg_.width), dx);

  Matrix dh(T, d), dqkv(T, 3 * d), dattn(T, d), datt, dscores;
  for (std::size_t l = cfg_.layers; l-- > 0;) {
    const auto& o = layers_[l];
    const auto& L = rec.layers[l];

    // feed-forward residual branch
    gmat(o.down_weight, cfg_.ff_width(), cfg_.width).noalias() += L.act.transpose() * dx;
    grow(o.down_bias, cfg_.width) += dx.colwise().sum();
    Matrix dup = dx * mat(o.down_weight, cfg_.ff_width(), cfg_.width).transpose();
    dup.array() *= L.up.unaryExpr([](S v) { return detail::gelu_grad(v); }).array();
    gmat(o.up_weight, cfg_.width, cfg_.ff_width()).noalias() += L.h2.transpose() * dup;
    grow(o.up_bias, cfg_.ff_width()) += dup.colwise().sum();
    dh.noalias() = dup * mat(o.up_weight, cfg_.width, cfg_.ff_width()).transpose();
    detail::layernorm_backward<S>(dh, L.ln2_hat, L.ln2_rstd, row(o.ln2_gain, cfg_.width), grow(o.ln2_gain, cfg_.width),
                                  grow(o.ln2_bias, cfg_.width), dx);

    // attention residual branch
    gmat(o.proj_weight, cfg_.width, cfg_.width).noalias() += L.attn_out.transpose() * dx;
    grow(o.proj_bias, cfg_.width) += dx.colwise().sum();
    dattn.noalias() = dx * mat(o.proj_weight, cfg_.width, cfg_.width).transpose();
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const auto hh = static_cast<Eigen::Index>(h) * hd;
      const auto q = L.qkv.block(0, hh, T, hd);
      const auto k = L.qkv.block(0, d + hh, T, hd);
      const auto v = L.qkv.block(0, 2 * d + hh, T, hd);
      const Matrix& a = L.att[h];
      const auto dout = dattn.block(0, hh, T, hd);
      datt.noalias() = dout * v.transpose();
      dqkv.block(0, 2 * d + hh, T, hd).noalias() = a.transpose() * dout;
      dscores = a.cwiseProduct(datt);
      for (Eigen::Index t = 0; t < T; ++t) {
        const S s = dscores.row(t).sum();
        dscores.row(t) -= a.row(t) * s;
      }
      dscores *= scale;
      dqkv.block(0, hh, T, hd).noalias() = dscores * k;
      dqkv.block(0, d + hh, T, hd).noalias() = dscores.transpose() * q;
      for (Eigen::Index t = 0; t < T; ++t) {
        rotate(dqkv.row(t).segment(hh, hd), static_cast<std::size_t>(t), true);
        rotate(dqkv.row(t).segment(d + hh, hd), static_cast<std::size_t>(t), true);
      }
    }
    gmat(o.qkv_weight, cfg_.width, 3 * cfg_.width).noalias() += L.h1.transpose() * dqkv;
    grow(o.qkv_bias, 3 * cfg_.width) += dqkv.colwise().sum();
    dh.noalias() = dqkv * mat(o.qkv_weight, cfg_.width, 3 * cfg_.width).transpose();
    detail::layernorm_backward<S>(dh, L.ln1_hat, L.ln1_rstd, row(o.ln1_gain, cfg_.width), grow(o.ln1_gain, cfg_.width),
                                  grow(o.ln1_bias, cfg_.width), dx);
  }

  auto dtok = gmat(tok_emb_, cfg_.vocab_size, cfg_.width);
  for (Eigen::Index t = 0; t < T; ++t) dtok.row(rec.inputs[static_cast<std::size_t>(t)]) += dx.row(t);
}

/// KV-cached incremental decoding; logits match the full forward pass.
template <typename S>
class TransformerSession final : public DecodeSession {
 public:
  using Matrix = typename Transformer<S>::Matrix;
  using RowVector = typename Transformer<S>::RowVector;

  TransformerSession(const Transformer<S>& model, std::span<const SymbolId> prompt) : model_(model) {
    const auto& c = model.config();
    keys_.assign(c.layers, Matrix(static_cast<Eigen::Index>(c.context_length), static_cast<Eigen::Index>(c.width)));
    values_ = keys_;
    check_context(model, prompt.size());
    for (SymbolId s : prompt) feed(s);
  }

  std::span<const double> logits() const override { return logits_; }
  std::size_t length() const override { return length_; }
  using DecodeSession::feed;

  void feed(SymbolId symbol) override {
    const auto& c = model_.config();
    if (length_ >= c.context_length) throw ContextOverflow("decode session is at the context limit");
    if (symbol < 0 || static_cast<std::size_t>(symbol) >= c.vocab_size) throw std::out_of_range("symbol outside vocabulary");
    const auto d = static_cast<Eigen::Index>(c.width);
    const auto hd = static_cast<Eigen::Index>(c.head_width());
    const auto pos = static_cast<Eigen::Index>(length_);
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

    RowVector x = model_.mat(model_.token_embedding_offset(), c.vocab_size, c.width).row(symbol);
    RowVector h(d), attn(d);
    for (std::size_t l = 0; l < c.layers; ++l) {
      const auto& o = model_.layer(l);
      norm(x, o.ln1_gain, o.ln1_bias, h);
      RowVector qkv = h * model_.mat(o.qkv_weight, c.width, 3 * c.width);
      qkv += model_.row(o.qkv_bias, 3 * c.width);
      for (std::size_t hi = 0; hi < c.heads; ++hi) {
        const auto hh = static_cast<Eigen::Index>(hi) * hd;
        model_.rotate(qkv.segment(hh, hd), length_, false);
        model_.rotate(qkv.segment(d + hh, hd), length_, false);
      }
      keys_[l].row(pos) = qkv.segment(d, d);
      values_[l].row(pos) = qkv.segment(2 * d, d);
      for (std::size_t hi = 0; hi < c.heads; ++hi) {
        const auto hh = static_cast<Eigen::Index>(hi) * hd;
        const auto K = keys_[l].block(0, hh, pos + 1, hd);
        const auto V = values_[l].block(0, hh, pos + 1, hd);
        RowVector scores = (qkv.segment(hh, hd) * K.transpose()) * scale;
        const S m = scores.maxCoeff();
        scores = (scores.array() - m).exp();
        scores /= scores.sum();
        attn.segment(hh, hd).noalias() = scores * V;
      }
      x.noalias() += attn * model_.mat(o.proj_weight, c.width, c.width);
      x += model_.row(o.proj_bias, c.width);
      norm(x, o.ln2_gain, o.ln2_bias, h);
      RowVector up = h * model_.mat(o.up_weight, c.width, c.ff_width());
      up += model_.row(o.up_bias, c.ff_width());
      up = up.unaryExpr([](S v) { return detail::gelu(v); });
      x.noalias() += up * model_.mat(o.down_weight, c.ff_width(), c.width);
      x += model_.row(o.down_bias, c.width);
    }
    norm(x, model_.final_gain_offset(), model_.final_bias_offset(), h);
    const RowVector logits = h * model_.mat(model_.head_offset(), c.width, c.vocab_size);
    logits_.resize(c.vocab_size);
    for (std::size_t i = 0; i < c.vocab_size; ++i) logits_[i] = static_cast<double>(logits(static_cast<Eigen::Index>(i)));
    ++length_;
  }

 private:
  void norm(const RowVector& x, std::size_t gain, std::size_t bias, RowVector& out) const {
    const auto d = model_.config().width;
    const S mean = x.mean();
    const S var = (x.array() - mean).square().mean();
    const S r = S(1) / std::sqrt(var + static_cast<S>(Transformer<S>::kNormEps));
    out = ((x.array() - mean) * r) * model_.row(gain, d).array() + model_.row(bias, d).array();
  }

  const Transformer<S>& model_;
  std::vector<Matrix> keys_, values_;
  std::vector<double> logits_;
  std::size_t length_ = 0;
};

template <typename S>
std::unique_ptr<DecodeSession> Transformer<S>::open(std::span<const SymbolId> prompt) const {
  return std::make_unique<TransformerSession<S>>(*this, prompt);
}

}  // namespace lexrl
