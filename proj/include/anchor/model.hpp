#ifndef ANCHOR_MODEL_HPP_
#define ANCHOR_MODEL_HPP_

#include "anchor/tensor.hpp"
#include "anchor/tokens.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

// Micro decoder-only transformer: learned absolute positions, pre-norm
// RMSNorm blocks (attention + GELU MLP), a final RMSNorm, and a linear
// lm_head. Text embeddings are the final-layer hidden state at an appended
// end-of-sequence token; that same vector can be injected back at input
// position 0 as a soft prefix to condition generation.

namespace anchor {

inline constexpr double kRmsNormEps = 1e-5;
inline constexpr double kAttnMaskValue = -1e30;
inline constexpr double kInitStd = 0.02;

struct ModelConfig {
  Index vocab_size = 64;
  Index hidden_dim = 64;
  Index num_layers = 2;
  Index num_heads = 2;
  Index ffn_dim = 256;
  Index max_seq_len = 48;
  int32_t eos_token_id = 1;
  int32_t pad_token_id = 0;

  Index head_dim() const { return hidden_dim / num_heads; }

  void validate() const {
    if (vocab_size <= 0 || hidden_dim <= 0 || num_layers <= 0 || num_heads <= 0 ||
        ffn_dim <= 0 || max_seq_len <= 0)
      throw TensorError("ModelConfig: all dimensions must be positive");
    if (hidden_dim % num_heads != 0)
      throw TensorError("ModelConfig: hidden_dim " + std::to_string(hidden_dim) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    if (eos_token_id == pad_token_id)
      throw TensorError("ModelConfig: eos_token_id equals pad_token_id");
    if (eos_token_id < 0 || eos_token_id >= vocab_size || pad_token_id < 0 ||
        pad_token_id >= vocab_size)
      throw TensorError("ModelConfig: special token ids must be < vocab_size");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline Index param_count(const ModelConfig& c) {
  const Index d = c.hidden_dim;
  return c.vocab_size * d + c.max_seq_len * d +
         c.num_layers * (4 * d * d + 2 * d * c.ffn_dim + 2 * d) + d + d * c.vocab_size;
}

template <typename S>
struct LayerParams {
  Tensor<S> attn_norm;  // [d]
  Tensor<S> wq, wk, wv, wo;  // [d,d]
  Tensor<S> ffn_norm;  // [d]
  Tensor<S> w_up;    // [d,ffn]
  Tensor<S> w_down;  // [ffn,d]
};

template <typename S>
struct ModelParams {
  ModelConfig config;
  Tensor<S> token_embed;  // [V,d]
  Tensor<S> pos_embed;    // [max_seq_len,d]
  std::vector<LayerParams<S>> layers;
  Tensor<S> final_norm;  // [d]
  Tensor<S> lm_head;     // [d,V]

  template <typename F>
  void for_each_param(F&& f) {
    f("token_embed", token_embed);
    f("pos_embed", pos_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "attn_norm", layers[l].attn_norm);
      f(p + "wq", layers[l].wq);
      f(p + "wk", layers[l].wk);
      f(p + "wv", layers[l].wv);
      f(p + "wo", layers[l].wo);
      f(p + "ffn_norm", layers[l].ffn_norm);
      f(p + "w_up", layers[l].w_up);
      f(p + "w_down", layers[l].w_down);
    }
    f("final_norm", final_norm);
    f("lm_head", lm_head);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    const_cast<ModelParams*>(this)->for_each_param(
        [&f](const std::string& name, const Tensor<S>& t) { f(name, t); });
  }

  void zero_grads() {
    for_each_param([](const std::string&, Tensor<S>& t) { t.zero_grad(); });
  }

  void set_trainable(bool on) {
    for_each_param([on](const std::string&, Tensor<S>& t) { t.set_requires_grad(on); });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_param([&ok](const std::string&, const Tensor<S>& t) {
      ok = ok && t.values().isFinite().all();
    });
    return ok;
  }
};

// Scaled-normal init (std 0.02), residual output projections scaled by
// 1/sqrt(2L), norm gains at one. Draws happen in double so a float and a
// double model from the same seed hold the same numbers.
template <typename S>
ModelParams<S> init_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  const Index d = config.hidden_dim;
  const Index v = config.vocab_size;

  ModelParams<S> p;
  p.config = config;
  p.token_embed = Tensor<S>::zeros({v, d}, true);
  p.pos_embed = Tensor<S>::zeros({config.max_seq_len, d}, true);
  p.layers.resize(static_cast<size_t>(config.num_layers));
  for (auto& l : p.layers) {
    l.attn_norm = Tensor<S>::zeros({d}, true);
    l.wq = Tensor<S>::zeros({d, d}, true);
    l.wk = Tensor<S>::zeros({d, d}, true);
    l.wv = Tensor<S>::zeros({d, d}, true);
    l.wo = Tensor<S>::zeros({d, d}, true);
    l.ffn_norm = Tensor<S>::zeros({d}, true);
    l.w_up = Tensor<S>::zeros({d, config.ffn_dim}, true);
    l.w_down = Tensor<S>::zeros({config.ffn_dim, d}, true);
  }
  p.final_norm = Tensor<S>::zeros({d}, true);
  p.lm_head = Tensor<S>::zeros({d, v}, true);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_std = kInitStd / std::sqrt(2.0 * double(config.num_layers));
  p.for_each_param([&](const std::string& name, Tensor<S>& t) {
    const bool gain = name.find("norm") != std::string::npos;
    if (gain) {
      t.values().setOnes();
      return;
    }
    const bool residual_out =
        name.ends_with(".wo") || name.ends_with(".w_down");
    const double std_dev = residual_out ? residual_std : kInitStd;
    for (Index i = 0; i < t.numel(); ++i) t.values()[i] = S(normal(rng) * std_dev);
  });
  return p;
}

namespace detail {

// Additive attention bias [B*H, T, T]: 0 where key position t' <= query
// position t and t' is valid for that row, a large negative constant
// elsewhere. Padded keys therefore receive exactly zero attention.
template <typename S>
Tensor<S> attention_bias(const std::vector<Index>& valid_len, Index heads, Index t) {
  const Index b = static_cast<Index>(valid_len.size());
  Tensor<S> bias = Tensor<S>::zeros({b * heads, t, t});
  const S neg = S(kAttnMaskValue);
  for (Index i = 0; i < b; ++i) {
    const Index valid = valid_len[static_cast<size_t>(i)];
    for (Index q = 0; q < t; ++q) {
      for (Index k = 0; k < t; ++k) {
        if (k > q || k >= valid) bias.values()[(i * t + q) * t + k] = neg;
      }
    }
  }
  if (heads > 1) {
    // replicate the per-sequence block across heads
    const Index block = t * t;
    for (Index i = b; i-- > 0;) {
      for (Index h = 0; h < heads; ++h) {
        bias.values().segment((i * heads + h) * block, block) =
            bias.values().segment(i * block, block);
      }
    }
  }
  return bias;
}

// Pre-norm decoder stack over already-embedded inputs x: [B,T,d].
// valid_len[b] counts attendable positions in row b (everything after is
// masked out of attention as a key). Returns [B,T,d] after the final norm.
template <typename S>
Tensor<S> decoder_stack(const ModelParams<S>& p, const Tensor<S>& x_in,
                        const std::vector<Index>& valid_len) {
  const Index b = x_in.dim(0), t = x_in.dim(1), d = x_in.dim(2);
  const Index heads = p.config.num_heads;
  const Index hd = p.config.head_dim();
  const S inv_sqrt_hd = S(1) / std::sqrt(S(hd));
  Tensor<S> bias = attention_bias<S>(valid_len, heads, t);

  Tensor<S> x = reshape(x_in, {b * t, d});
  for (const auto& layer : p.layers) {
    // attention
    Tensor<S> xn = rmsnorm(x, layer.attn_norm, S(kRmsNormEps));
    auto split_heads = [&](const Tensor<S>& m) {
      return reshape(permute(reshape(m, {b, t, heads, hd}), {0, 2, 1, 3}),
                     {b * heads, t, hd});
    };
    Tensor<S> q = split_heads(matmul(xn, layer.wq));
    Tensor<S> k = split_heads(matmul(xn, layer.wk));
    Tensor<S> v = split_heads(matmul(xn, layer.wv));
    Tensor<S> scores = scale(matmul_batched(q, transpose_last2(k)), inv_sqrt_hd);
    Tensor<S> att = softmax_lastdim(add(scores, bias));
    Tensor<S> ctx = matmul_batched(att, v);  // [B*H, T, hd]
    Tensor<S> merged = reshape(
        permute(reshape(ctx, {b, heads, t, hd}), {0, 2, 1, 3}), {b * t, d});
    x = add(x, matmul(merged, layer.wo));

    // feed-forward
    Tensor<S> xn2 = rmsnorm(x, layer.ffn_norm, S(kRmsNormEps));
    Tensor<S> h = gelu(matmul(xn2, layer.w_up));
    x = add(x, matmul(h, layer.w_down));
  }
  Tensor<S> out = rmsnorm(x, p.final_norm, S(kRmsNormEps));
  return reshape(out, {b, t, d});
}

template <typename S>
void check_tokens(const ModelParams<S>& p, const TokenBatch& batch) {
  for (int32_t id : batch.tokens)
    if (id < 0 || id >= p.config.vocab_size)
      throw TensorError("forward: token id " + std::to_string(id) + " outside vocab " +
                        std::to_string(p.config.vocab_size));
}

}  // namespace detail

// Per-position hidden states after the final decoder layer and final norm.
// Causal: position t attends only to positions <= t; padded positions are
// masked out of attention entirely.
template <typename S>
Tensor<S> forward_hidden(const ModelParams<S>& p, const TokenBatch& batch) {
  detail::check_tokens(p, batch);
  if (batch.width > p.config.max_seq_len)
    throw TensorError("forward_hidden: sequence length " + std::to_string(batch.width) +
                      " exceeds max_seq_len " + std::to_string(p.config.max_seq_len));
  const Index b = batch.rows, t = batch.width, d = p.config.hidden_dim;
  Tensor<S> emb = gather_rows(p.token_embed, batch.tokens);
  Tensor<S> x = add_broadcast(reshape(emb, {b, t, d}), slice(p.pos_embed, 0, 0, t));
  return detail::decoder_stack(p, x, batch.lengths);
}

// Appends [EOS] to every row and pools the hidden state at that position.
// The result is invariant to how much right padding the batch carries.
template <typename S>
Tensor<S> encode_eos(const ModelParams<S>& p, const TokenBatch& batch) {
  Index longest = 0;
  for (Index len : batch.lengths) longest = std::max(longest, len);
  if (longest + 1 > p.config.max_seq_len)
    throw TensorError("encode_eos: sequence length " + std::to_string(longest) +
                      " leaves no room for [EOS] within max_seq_len " +
                      std::to_string(p.config.max_seq_len));
  TokenBatch with_eos;
  with_eos.pad_id = p.config.pad_token_id;
  with_eos.rows = batch.rows;
  with_eos.width = longest + 1;
  with_eos.tokens.assign(static_cast<size_t>(with_eos.rows * with_eos.width),
                         p.config.pad_token_id);
  with_eos.lengths.resize(static_cast<size_t>(batch.rows));
  std::vector<Index> eos_pos(static_cast<size_t>(batch.rows));
  for (Index r = 0; r < batch.rows; ++r) {
    const Index len = batch.lengths[static_cast<size_t>(r)];
    for (Index i = 0; i < len; ++i)
      with_eos.tokens[static_cast<size_t>(r * with_eos.width + i)] = batch.at(r, i);
    with_eos.tokens[static_cast<size_t>(r * with_eos.width + len)] = p.config.eos_token_id;
    with_eos.lengths[static_cast<size_t>(r)] = len + 1;
    eos_pos[static_cast<size_t>(r)] = len;
  }
  Tensor<S> hidden = forward_hidden(p, with_eos);
  return take_timestep(hidden, eos_pos);
}

// Teacher-forced decoding conditioned on a soft prefix: input row 0 is the
// prefix vector itself (it bypasses the token embedding and receives the
// position-0 positional embedding), rows 1..m embed the target tokens.
// Returns lm_head logits at every position; gradients flow through the
// prefix into whatever produced it.
template <typename S>
Tensor<S> decode_with_prefix(const ModelParams<S>& p, const Tensor<S>& prefix,
                             const TokenBatch& targets) {
  detail::check_tokens(p, targets);
  const Index d = p.config.hidden_dim;
  Tensor<S> pref = prefix;
  if (pref.ndim() == 1) pref = reshape(pref, {1, pref.dim(0)});
  if (pref.ndim() != 2 || pref.dim(1) != d)
    throw TensorError("decode_with_prefix: prefix shape " + shape_str(prefix.shape()) +
                      " does not match hidden_dim " + std::to_string(d));
  const Index b = pref.dim(0);
  const Index m = targets.rows == 0 ? 0 : targets.width;
  if (targets.rows != 0 && targets.rows != b)
    throw TensorError("decode_with_prefix: prefix batch " + std::to_string(b) +
                      " vs target batch " + std::to_string(targets.rows));
  if (1 + m > p.config.max_seq_len)
    throw TensorError("decode_with_prefix: prefix + " + std::to_string(m) +
                      " target positions exceed max_seq_len " +
                      std::to_string(p.config.max_seq_len));

  Tensor<S> x = reshape(pref, {b, 1, d});
  if (m > 0) {
    Tensor<S> emb = reshape(gather_rows(p.token_embed, targets.tokens), {b, m, d});
    x = concat<S>({x, emb}, 1);
  }
  x = add_broadcast(x, slice(p.pos_embed, 0, 0, 1 + m));
  std::vector<Index> valid(static_cast<size_t>(b), 1);
  for (Index r = 0; r < targets.rows; ++r)
    valid[static_cast<size_t>(r)] = 1 + targets.lengths[static_cast<size_t>(r)];
  Tensor<S> hidden = detail::decoder_stack(p, x, valid);
  Tensor<S> logits = matmul(reshape(hidden, {b * (1 + m), d}), p.lm_head);
  return reshape(logits, {b, 1 + m, p.config.vocab_size});
}

// Greedy argmax decoding from a soft prefix until [EOS] or max_new tokens;
// ties break toward the lowest token id. Returns content tokens only.
template <typename S>
TokenSequence greedy_decode(const ModelParams<S>& p, const Tensor<S>& prefix,
                            Index max_new) {
  NoGrad<S> off;
  TokenSequence out;
  for (Index step = 0; step < max_new; ++step) {
    if (1 + static_cast<Index>(out.size()) + 1 > p.config.max_seq_len) break;
    TokenBatch tb = TokenBatch::pad({out}, p.config.pad_token_id);
    Tensor<S> logits = decode_with_prefix(p, prefix, tb);
    const Index v = p.config.vocab_size;
    const Index last = static_cast<Index>(out.size());
    auto row = logits.values().segment(last * v, v);
    Index best = 0;
    for (Index i = 1; i < v; ++i)
      if (row[i] > row[best]) best = i;
    if (best == p.config.eos_token_id) break;
    out.push_back(static_cast<int32_t>(best));
  }
  return out;
}

}  // namespace anchor

#endif  // ANCHOR_MODEL_HPP_
