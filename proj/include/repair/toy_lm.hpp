#pragma once

// A single-block causal model: token embeddings mixed by a fixed exponential
// decay over the prefix, one FFN (key matrix, shifted GELU, value matrix) with
// a residual connection, and an unembedding. The value matrix is the only
// parameter the editors touch, so every entry point takes it explicitly.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "repair/numeric.hpp"

namespace repair {

using Token = std::uint32_t;

inline constexpr Token kEndToken = 0;

/// Non-empty list of token ids.
class TokenSequence {
 public:
  TokenSequence() = default;
  explicit TokenSequence(std::vector<Token> tokens) : tokens_(std::move(tokens)) {}
  TokenSequence(std::initializer_list<Token> tokens) : tokens_(tokens) {}

  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  Token operator[](std::size_t i) const { return tokens_[i]; }
  Token back() const { return tokens_.back(); }
  void push_back(Token t) { tokens_.push_back(t); }

  auto begin() const { return tokens_.begin(); }
  auto end() const { return tokens_.end(); }
  const std::vector<Token>& tokens() const { return tokens_; }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
  friend auto operator<=>(const TokenSequence&, const TokenSequence&) = default;

  /// Throws unless non-empty and every id is below `vocab_size`.
  void validate(std::size_t vocab_size, const char* what = "sequence") const {
    if (tokens_.empty()) throw std::invalid_argument(std::string(what) + " is empty");
    for (Token t : tokens_) {
      if (t >= vocab_size) {
        throw std::invalid_argument(std::string(what) + ": token " + std::to_string(t) +
                                    " outside vocab of " + std::to_string(vocab_size));
      }
    }
  }

 private:
  std::vector<Token> tokens_;
};

inline TokenSequence concat(const TokenSequence& a, const TokenSequence& b) {
  std::vector<Token> out = a.tokens();
  out.insert(out.end(), b.begin(), b.end());
  return TokenSequence(std::move(out));
}

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t hidden_dim = 32;
  std::size_t ffn_dim = 1024;
  /// Weight of the previous context state: h_t = decay * h_{t-1} + embed[x_t].
  double context_decay = 0.5;
  /// The FFN nonlinearity is GELU(z - shift); a large shift makes the
  /// activation pattern sparse.
  double activation_shift = 6.0;
  /// Standard deviation of W_k entries is key_gain / sqrt(hidden_dim).
  double key_gain = 3.0;
  double embed_scale = 1.0;

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("model.vocab_size must be >= 2");
    if (hidden_dim < 1) throw std::invalid_argument("model.hidden_dim must be >= 1");
    if (ffn_dim < 1) throw std::invalid_argument("model.ffn_dim must be >= 1");
    if (!(context_decay >= 0.0 && context_decay < 1.0)) {
      throw std::invalid_argument("model.context_decay must lie in [0, 1)");
    }
    if (!std::isfinite(activation_shift)) {
      throw std::invalid_argument("model.activation_shift must be finite");
    }
    if (!(key_gain > 0.0) || !(embed_scale > 0.0)) {
      throw std::invalid_argument("model.key_gain and model.embed_scale must be > 0");
    }
  }
};

inline double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); }

inline double gelu_grad(double z) {
  const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + z * pdf;
}

struct ModelState {
  ModelConfig config;
  Matrix embed;    // vocab x hidden
  Matrix key;      // hidden x ffn   (W_k)
  Matrix value;    // ffn x hidden   (W_v)
  Matrix unembed;  // hidden x vocab

  static ModelState random(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto fill = [&rng](Matrix& m, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (double& v : m.values()) v = dist(rng);
    };
    ModelState m;
    m.config = cfg;
    m.embed = Matrix(cfg.vocab_size, cfg.hidden_dim);
    m.key = Matrix(cfg.hidden_dim, cfg.ffn_dim);
    m.value = Matrix(cfg.ffn_dim, cfg.hidden_dim);
    m.unembed = Matrix(cfg.hidden_dim, cfg.vocab_size);
    const double h = static_cast<double>(cfg.hidden_dim);
    const double f = static_cast<double>(cfg.ffn_dim);
    fill(m.embed, cfg.embed_scale);
    fill(m.key, cfg.key_gain / std::sqrt(h));
    fill(m.value, 1.0 / std::sqrt(f));
    fill(m.unembed, 1.0 / std::sqrt(h));
    return m;
  }

  void require_value_shape(const Matrix& v) const {
    if (!v.same_shape(value)) {
      throw ShapeError("value matrix " + v.shape_string() + " does not match W_v " +
                       value.shape_string());
    }
  }
};

/// Everything upstream of the value matrix for each position of a sequence.
/// It does not depend on W_v, so it can be cached across edits.
struct ContextTrace {
  Matrix hidden;      // T x hidden: residual stream entering the FFN
  Matrix activation;  // T x ffn:    a_t = phi(rmsnorm(h_t) W_k)
};

inline ContextTrace trace_context(const ModelState& model, const TokenSequence& tokens) {
  tokens.validate(model.config.vocab_size, "input");
  const std::size_t T = tokens.size();
  const std::size_t H = model.config.hidden_dim;
  const std::size_t F = model.config.ffn_dim;
  ContextTrace tr{Matrix(T, H), Matrix(T, F)};
  std::vector<double> state(H, 0.0);
  std::vector<double> normed(H);
  for (std::size_t t = 0; t < T; ++t) {
    auto e = model.embed.row(tokens[t]);
    double ms = 0.0;
    for (std::size_t j = 0; j < H; ++j) {
      state[j] = model.config.context_decay * state[j] + e[j];
      ms += state[j] * state[j];
    }
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(H) + 1e-12);
    auto hrow = tr.hidden.row(t);
    for (std::size_t j = 0; j < H; ++j) {
      hrow[j] = state[j];
      normed[j] = state[j] * inv;
    }
    Vector pre = vecmat(normed, model.key);
    auto arow = tr.activation.row(t);
    for (std::size_t p = 0; p < F; ++p) arow[p] = gelu(pre[p] - model.config.activation_shift);
  }
  return tr;
}

/// A(x): the FFN activation at the final position of `x`.
inline Vector activation_tap(const ModelState& model, const TokenSequence& x) {
  const ContextTrace tr = trace_context(model, x);
  auto last = tr.activation.row(tr.activation.rows() - 1);
  return Vector(std::vector<double>(last.begin(), last.end()));
}

/// Next-token logits at position t of a traced sequence: (h_t + a_t V) U.
inline Vector logits_at(const ModelState& model, const ContextTrace& tr, std::size_t t,
                        const Matrix& value_matrix) {
  Vector out = vecmat(tr.activation.row(t), value_matrix);
  auto h = tr.hidden.row(t);
  for (std::size_t j = 0; j < out.dim(); ++j) out[j] += h[j];
  return vecmat(out, model.unembed);
}

inline Vector softmax(const Vector& logits, double temperature = 1.0) {
  double mx = logits[0];
  for (double z : logits) mx = std::max(mx, z);
  Vector p(logits.dim());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.dim(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    sum += p[i];
  }
  p *= 1.0 / sum;
  return p;
}

inline Vector log_softmax(const Vector& logits, double temperature = 1.0) {
  double mx = logits[0];
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp((z - mx) / temperature);
  const double lse = std::log(sum);
  Vector out(logits.dim());
  for (std::size_t i = 0; i < logits.dim(); ++i) out[i] = (logits[i] - mx) / temperature - lse;
  return out;
}

struct ForwardResult {
  Matrix logits;      // T x vocab, row t predicts token t+1
  Vector activation;  // A(x) at the final position
};

inline ForwardResult forward(const ModelState& model, const TokenSequence& x,
                             const Matrix& value_matrix) {
  model.require_value_shape(value_matrix);
  const ContextTrace tr = trace_context(model, x);
  const std::size_t T = x.size();
  ForwardResult out{Matrix(T, model.config.vocab_size), Vector()};
  for (std::size_t t = 0; t < T; ++t) {
    Vector z = logits_at(model, tr, t, value_matrix);
    std::copy(z.begin(), z.end(), out.logits.row(t).begin());
  }
  auto last = tr.activation.row(T - 1);
  out.activation = Vector(std::vector<double>(last.begin(), last.end()));
  return out;
}

/// A prompt/target pair with its context trace cached. The trace covers
/// prompt ++ target[0..n-2], i.e. every position that predicts a target token.
struct TracedExample {
  TokenSequence prompt;
  TokenSequence target;
  ContextTrace trace;

  static TracedExample make(const ModelState& model, const TokenSequence& prompt,
                            const TokenSequence& target) {
    prompt.validate(model.config.vocab_size, "prompt");
    target.validate(model.config.vocab_size, "target");
    std::vector<Token> seq = prompt.tokens();
    seq.insert(seq.end(), target.begin(), target.end() - 1);
    return {prompt, target, trace_context(model, TokenSequence(std::move(seq)))};
  }

  std::size_t first_prediction() const { return prompt.size() - 1; }
};

/// Summed autoregressive cross-entropy of the target; accumulates
/// scale * dL/dV into `grad` when it is non-null.
inline double autoreg_ce_traced(const ModelState& model, const TracedExample& ex,
                                const Matrix& value_matrix, Matrix* grad = nullptr,
                                double scale = 1.0) {
  model.require_value_shape(value_matrix);
  double loss = 0.0;
  const std::size_t H = model.config.hidden_dim;
  for (std::size_t k = 0; k < ex.target.size(); ++k) {
    const std::size_t t = ex.first_prediction() + k;
    const Vector logits = logits_at(model, ex.trace, t, value_matrix);
    const Vector logp = log_softmax(logits);
    loss -= logp[ex.target[k]];
    if (grad != nullptr) {
      // dL/dlogits = p - onehot(y); dL/dout = U (p - y); dL/dV = a_t^T dout.
      Vector dlogits(logits.dim());
      for (std::size_t i = 0; i < logits.dim(); ++i) dlogits[i] = std::exp(logp[i]);
      dlogits[ex.target[k]] -= 1.0;
      Vector dout(H);
      for (std::size_t j = 0; j < H; ++j) dout[j] = dot(model.unembed.row(j), dlogits.values());
      add_outer(*grad, ex.trace.activation.row(t), dout.values(), scale);
    }
  }
  return loss;
}

/// -sum_t log p(y_t | y_<t, x) with the supplied value matrix, and its
/// gradient with respect to that matrix.
inline LossAndGrad autoreg_ce(const ModelState& model, const TokenSequence& prompt,
                              const TokenSequence& target, const Matrix& value_matrix) {
  if (target.empty()) throw std::invalid_argument("autoreg_ce: empty target");
  const TracedExample ex = TracedExample::make(model, prompt, target);
  LossAndGrad out{0.0, Matrix(value_matrix.rows(), value_matrix.cols())};
  out.value = autoreg_ce_traced(model, ex, value_matrix, &out.grad);
  return out;
}

/// Argmax decoding; stops after emitting the end token or `max_len` tokens.
inline TokenSequence greedy_decode(const ModelState& model, const TokenSequence& prompt,
                                   std::size_t max_len, const Matrix& value_matrix) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  model.require_value_shape(value_matrix);
  TokenSequence context = prompt;
  TokenSequence out;
  for (std::size_t step = 0; step < max_len; ++step) {
    const ContextTrace tr = trace_context(model, context);
    const Vector logits = logits_at(model, tr, context.size() - 1, value_matrix);
    Token best = 0;
    for (std::size_t i = 1; i < logits.dim(); ++i) {
      if (logits[i] > logits[best]) best = static_cast<Token>(i);
    }
    out.push_back(best);
    if (best == kEndToken) break;
    context.push_back(best);
  }
  return out;
}

}  // namespace repair
