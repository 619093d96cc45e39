#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tst/ops.hpp"
#include "tst/tensor.hpp"

// Causal transformer over real-valued sequences: linear input projection,
// additive sinusoidal positional encoding, a stack of encoder blocks with
// causal + key-padding masking (post-norm arrangement), and a bounded output
// head mapping back to the input feature width.

namespace tst::model {

using nlohmann::json;

enum class Activation { Sigmoid, Tanh };

inline std::string activation_name(Activation a) {
  return a == Activation::Sigmoid ? "sigmoid" : "tanh";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown output activation '" + s + "'");
}

enum class Mode { Train, Infer };

struct ModelConfig {
  std::size_t input_dim = 11;  // features, including the 2 generation flags
  std::size_t d_model = 512;
  std::size_t n_heads = 8;
  std::size_t n_blocks = 8;
  std::size_t d_ff = 512;
  double dropout_p = 0.1;
  std::size_t max_window = 400;
  Activation output_activation = Activation::Sigmoid;

  void validate() const {
    if (input_dim == 0) throw ConfigError("input_dim must be positive");
    if (d_model == 0 || n_heads == 0) throw ConfigError("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) +
                        ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    }
    if (d_model % 2 != 0) {
      throw ConfigError("d_model must be even for the sinusoidal positional encoding");
    }
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must lie in [0, 1)");
    if (max_window == 0) throw ConfigError("max_window must be positive");
  }

  static ModelConfig gcut_reference() {
    return ModelConfig{11, 512, 8, 8, 512, 0.1, 400, Activation::Sigmoid};
  }

  json to_json() const {
    return json{{"input_dim", input_dim},   {"d_model", d_model},
                {"n_heads", n_heads},       {"n_blocks", n_blocks},
                {"d_ff", d_ff},             {"dropout", dropout_p},
                {"max_window", max_window}, {"output_activation", activation_name(output_activation)}};
  }

  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_blocks = j.at("n_blocks").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.dropout_p = j.at("dropout").get<double>();
    c.max_window = j.at("max_window").get<std::size_t>();
    c.output_activation = activation_from_name(j.at("output_activation").get<std::string>());
    return c;
  }
};

// Exact scalar parameter count:
//   L * [4(d^2 + d) + (d*f + f) + (f*d + d) + 4d] + (F*d + d) + (d*F + F)
inline std::size_t count_parameters(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, f = cfg.d_ff, fin = cfg.input_dim;
  const std::size_t per_block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
  return cfg.n_blocks * per_block + (fin * d + d) + (d * fin + fin);
}

template <typename T>
struct BlockParams {
  Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor<T> w_ff1, b_ff1, w_ff2, b_ff2;
  Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

template <typename T>
struct ModelParams {
  Tensor<T> w_in, b_in;
  std::vector<BlockParams<T>> blocks;
  Tensor<T> w_out, b_out;

  // Stable name -> tensor ordering; checkpoints and the optimizer rely on it.
  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("in.w", w_in);
    out.emplace_back("in.b", b_in);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      const auto& b = blocks[i];
      out.emplace_back(p + "attn.wq", b.w_q);
      out.emplace_back(p + "attn.bq", b.b_q);
      out.emplace_back(p + "attn.wk", b.w_k);
      out.emplace_back(p + "attn.bk", b.b_k);
      out.emplace_back(p + "attn.wv", b.w_v);
      out.emplace_back(p + "attn.bv", b.b_v);
      out.emplace_back(p + "attn.wo", b.w_o);
      out.emplace_back(p + "attn.bo", b.b_o);
      out.emplace_back(p + "ff.w1", b.w_ff1);
      out.emplace_back(p + "ff.b1", b.b_ff1);
      out.emplace_back(p + "ff.w2", b.w_ff2);
      out.emplace_back(p + "ff.b2", b.b_ff2);
      out.emplace_back(p + "ln1.gain", b.ln1_gain);
      out.emplace_back(p + "ln1.bias", b.ln1_bias);
      out.emplace_back(p + "ln2.gain", b.ln2_gain);
      out.emplace_back(p + "ln2.bias", b.ln2_bias);
    }
    out.emplace_back("out.w", w_out);
    out.emplace_back("out.b", b_out);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto& t : parameters()) n += t.numel();
    return n;
  }

  void zero_grad() const {
    for (auto& t : parameters()) t.zero_grad();
  }
};

// Xavier-uniform weights, zero biases, unit layer-norm gains; deterministic
// for a fixed seed.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto xavier = [&rng](std::size_t rows, std::size_t cols) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> t(Shape{rows, cols});
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
    t.set_requires_grad(true);
    return t;
  };
  auto vec = [](std::size_t n, T fill) {
    Tensor<T> t(Shape{n}, fill);
    t.set_requires_grad(true);
    return t;
  };

  const std::size_t d = cfg.d_model, f = cfg.d_ff, fin = cfg.input_dim;
  ModelParams<T> p;
  p.w_in = xavier(fin, d);
  p.b_in = vec(d, T(0));
  p.blocks.resize(cfg.n_blocks);
  for (auto& b : p.blocks) {
    b.w_q = xavier(d, d);
    b.b_q = vec(d, T(0));
    b.w_k = xavier(d, d);
    b.b_k = vec(d, T(0));
    b.w_v = xavier(d, d);
    b.b_v = vec(d, T(0));
    b.w_o = xavier(d, d);
    b.b_o = vec(d, T(0));
    b.w_ff1 = xavier(d, f);
    b.b_ff1 = vec(f, T(0));
    b.w_ff2 = xavier(f, d);
    b.b_ff2 = vec(d, T(0));
    b.ln1_gain = vec(d, T(1));
    b.ln1_bias = vec(d, T(0));
    b.ln2_gain = vec(d, T(1));
    b.ln2_bias = vec(d, T(0));
  }
  p.w_out = xavier(d, fin);
  p.b_out = vec(fin, T(0));
  return p;
}

// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(pos / 10000^(2i/d)).
template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d) {
  if (d % 2 != 0) throw ConfigError("positional encoding needs an even width");
  Tensor<T> pe(Shape{length, d});
  auto& pd = pe.data();
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) / freq;
      pd[pos * d + i] = static_cast<T>(std::sin(angle));
      pd[pos * d + i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

// The two attention masks: the causal component ([T, T], position t attends
// to keys 0..t) and the key-padding component ([B, T], keys beyond each
// sequence's true length are excluded). combined() folds them into a
// [B, 1, T, T] mask that broadcasts over heads; a (query, key) pair is
// forbidden iff the causal rule forbids it or the key is padding.
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t window = 0;
  std::vector<std::uint8_t> causal;       // [T, T], true = forbidden
  std::vector<std::uint8_t> key_padding;  // [B, T], true = padding key

  BoolMask combined() const {
    BoolMask m;
    m.shape = Shape{batch, 1, window, window};
    m.masked.assign(batch * window * window, 0);
    for (std::size_t s = 0; s < batch; ++s)
      for (std::size_t q = 0; q < window; ++q)
        for (std::size_t k = 0; k < window; ++k)
          if (causal[q * window + k] || key_padding[s * window + k]) {
            m.masked[(s * window + q) * window + k] = 1;
          }
    return m;
  }
};

inline AttentionMask build_masks(const std::vector<std::size_t>& lengths,
                                 std::size_t padded_len) {
  AttentionMask m;
  m.batch = lengths.size();
  m.window = padded_len;
  m.causal.assign(padded_len * padded_len, 0);
  for (std::size_t q = 0; q < padded_len; ++q)
    for (std::size_t k = q + 1; k < padded_len; ++k) m.causal[q * padded_len + k] = 1;
  m.key_padding.assign(m.batch * padded_len, 0);
  for (std::size_t s = 0; s < m.batch; ++s) {
    const std::size_t len = lengths[s];
    if (len == 0 || len > padded_len) {
      throw DataError("sequence length " + std::to_string(len) + " outside [1, " +
                      std::to_string(padded_len) + "]");
    }
    for (std::size_t k = len; k < padded_len; ++k) m.key_padding[s * padded_len + k] = 1;
  }
  return m;
}

template <typename T>
Tensor<T> multi_head_attention(GradTape<T>* tape, const Tensor<T>& x,
                               const BlockParams<T>& bp, const BoolMask& mask,
                               std::size_t n_heads) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw DimensionError("attention expects [B,T,d], got " + shape_str(xs));
  const std::size_t b = xs[0], t = xs[1], d = xs[2];
  const std::size_t dh = d / n_heads;

  auto split_heads = [&](const Tensor<T>& m) {
    return transpose(tape, reshape(tape, m, Shape{b, t, n_heads, dh}), 1, 2);
  };
  Tensor<T> q = split_heads(linear(tape, x, bp.w_q, bp.b_q));
  Tensor<T> k = split_heads(linear(tape, x, bp.w_k, bp.b_k));
  Tensor<T> v = split_heads(linear(tape, x, bp.w_v, bp.b_v));

  Tensor<T> scores = scale(tape, matmul(tape, q, transpose(tape, k, 2, 3)),
                           T(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor<T> attn = masked_softmax(tape, scores, mask);
  Tensor<T> ctx = matmul(tape, attn, v);
  Tensor<T> merged = reshape(tape, transpose(tape, ctx, 1, 2), Shape{b, t, d});
  return linear(tape, merged, bp.w_o, bp.b_o);
}

// Post-norm block: LN1(x + Drop(MHA(x))) then LN2(a + Drop(FF(a))).
template <typename T>
Tensor<T> encoder_block(GradTape<T>* tape, const Tensor<T>& x, const BlockParams<T>& bp,
                        const BoolMask& mask, std::size_t n_heads, double dropout_p,
                        Mode mode, std::mt19937_64* rng) {
  constexpr T kLnEps = T(1e-5);
  const bool training = mode == Mode::Train;

  Tensor<T> attn = multi_head_attention(tape, x, bp, mask, n_heads);
  attn = dropout(tape, attn, dropout_p, rng, training);
  Tensor<T> a = layer_norm(tape, add(tape, x, attn), bp.ln1_gain, bp.ln1_bias, kLnEps);

  Tensor<T> ff = linear(tape, relu(tape, linear(tape, a, bp.w_ff1, bp.b_ff1)), bp.w_ff2, bp.b_ff2);
  ff = dropout(tape, ff, dropout_p, rng, training);
  return layer_norm(tape, add(tape, a, ff), bp.ln2_gain, bp.ln2_bias, kLnEps);
}

// inputs: [B, T, F_in] -> predictions [B, T, F_in], bounded by the output
// activation. Pure in (params, inputs, masks, mode, rng state).
template <typename T>
Tensor<T> forward(GradTape<T>* tape, const ModelParams<T>& params, const ModelConfig& cfg,
                  const Tensor<T>& inputs, const AttentionMask& masks, Mode mode,
                  std::mt19937_64* rng = nullptr) {
  const Shape& xs = inputs.shape();
  if (xs.size() != 3 || xs[2] != cfg.input_dim) {
    throw DimensionError("forward expects [B,T," + std::to_string(cfg.input_dim) +
                         "], got " + shape_str(xs));
  }
  const std::size_t b = xs[0], t = xs[1], d = cfg.d_model;
  if (masks.batch != b || masks.window != t) {
    throw DimensionError("attention mask covers [" + std::to_string(masks.batch) + "," +
                         std::to_string(masks.window) + "], batch is " + shape_str(xs));
  }
  if (t > cfg.max_window) {
    throw ConfigError("sequence length " + std::to_string(t) +
                      " exceeds the model window " + std::to_string(cfg.max_window));
  }
  const bool training = mode == Mode::Train;
  const BoolMask mask = masks.combined();

  Tensor<T> h = linear(tape, inputs, params.w_in, params.b_in);

  Tensor<T> pe = positional_encoding<T>(t, d);
  Tensor<T> pe_b(Shape{b, t, d});
  for (std::size_t s = 0; s < b; ++s) {
    std::copy(pe.data().begin(), pe.data().end(), pe_b.data().begin() + s * t * d);
  }
  h = add(tape, h, pe_b);
  h = dropout(tape, h, cfg.dropout_p, rng, training);

  for (const auto& blk : params.blocks) {
    h = encoder_block(tape, h, blk, mask, cfg.n_heads, cfg.dropout_p, mode, rng);
  }

  Tensor<T> out = linear(tape, h, params.w_out, params.b_out);
  return cfg.output_activation == Activation::Sigmoid ? sigmoid(tape, out)
                                                      : tanh_act(tape, out);
}

}  // namespace tst::model
