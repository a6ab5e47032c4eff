// Cascaded Conformer encoder: a causal first pass (left-context attention,
// causal depthwise convolution) and a non-causal second pass consuming the
// first pass's output. Adapter blocks attach after every layer of both passes.
//
// Layer composition: half FFN -> self-attention -> depthwise conv -> half FFN
// -> final layer norm, each sub-block residual. Learned absolute position
// embeddings are added once at the encoder input.

#pragma once

#include <optional>

#include "ldasr/adapter.hpp"
#include "ldasr/ops.hpp"
#include "ldasr/tensor.hpp"

namespace ldasr {

struct BackboneConfig {
  int width = 128;        // d, must equal the stacked feature dimension
  int heads = 4;
  int kernel_size = 7;    // odd
  int ffn_multiplier = 2;
  int causal_layers = 2;
  int noncausal_layers = 2;
  int max_frames = 64;    // position table rows
  int left_context = 0;   // attention window for causal layers; 0 = unlimited
  float ln_eps = 1e-6f;
};

struct ConformerLayerParams {
  Tensor ffn1_ln_gamma, ffn1_ln_beta, ffn1_w1, ffn1_b1, ffn1_w2, ffn1_b2;
  Tensor attn_ln_gamma, attn_ln_beta, wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor conv_ln_gamma, conv_ln_beta, conv_kernel, conv_bias;
  Tensor ffn2_ln_gamma, ffn2_ln_beta, ffn2_w1, ffn2_b1, ffn2_w2, ffn2_b2;
  Tensor final_ln_gamma, final_ln_beta;
  int heads = 4;
  int kernel_size = 7;
  bool causal = true;
  int left_context = 0;
  float ln_eps = 1e-6f;
};

struct CascadedEncoderParams {
  std::vector<ConformerLayerParams> causal;
  std::vector<ConformerLayerParams> noncausal;
  Tensor pos_embedding;  // max_frames x d
  BackboneConfig cfg;
};

namespace detail {

inline Tensor ones(int64_t n) { return Tensor::from({n}, std::vector<float>(n, 1.0f)); }

}  // namespace detail

inline ConformerLayerParams make_conformer_layer(const BackboneConfig& cfg, bool causal,
                                                 Rng& rng) {
  if (cfg.width % cfg.heads != 0)
    throw ConfigError("attention width must be divisible by head count");
  if (cfg.kernel_size % 2 == 0) throw ConfigError("convolution kernel size must be odd");
  const int64_t d = cfg.width, f = (int64_t)cfg.ffn_multiplier * d;
  ConformerLayerParams p;
  auto ln = [&](Tensor& g, Tensor& b) {
    g = detail::ones(d);
    b = Tensor::zeros({d});
  };
  ln(p.ffn1_ln_gamma, p.ffn1_ln_beta);
  p.ffn1_w1 = detail::xavier_like(d, f, rng);
  p.ffn1_b1 = Tensor::zeros({f});
  p.ffn1_w2 = detail::xavier_like(f, d, rng);
  p.ffn1_b2 = Tensor::zeros({d});
  ln(p.attn_ln_gamma, p.attn_ln_beta);
  p.wq = detail::xavier_like(d, d, rng);
  p.bq = Tensor::zeros({d});
  p.wk = detail::xavier_like(d, d, rng);
  p.bk = Tensor::zeros({d});
  p.wv = detail::xavier_like(d, d, rng);
  p.bv = Tensor::zeros({d});
  p.wo = detail::xavier_like(d, d, rng);
  p.bo = Tensor::zeros({d});
  ln(p.conv_ln_gamma, p.conv_ln_beta);
  p.conv_kernel = Tensor::zeros({cfg.kernel_size, d});
  fill_normal(p.conv_kernel, rng, 1.0f / std::sqrt((float)cfg.kernel_size));
  p.conv_bias = Tensor::zeros({d});
  ln(p.ffn2_ln_gamma, p.ffn2_ln_beta);
  p.ffn2_w1 = detail::xavier_like(d, f, rng);
  p.ffn2_b1 = Tensor::zeros({f});
  p.ffn2_w2 = detail::xavier_like(f, d, rng);
  p.ffn2_b2 = Tensor::zeros({d});
  ln(p.final_ln_gamma, p.final_ln_beta);
  p.heads = cfg.heads;
  p.kernel_size = cfg.kernel_size;
  p.causal = causal;
  p.left_context = causal ? cfg.left_context : 0;
  p.ln_eps = cfg.ln_eps;
  return p;
}

inline CascadedEncoderParams make_cascaded_encoder(const BackboneConfig& cfg, Rng& rng) {
  if (cfg.causal_layers < 1 || cfg.noncausal_layers < 1)
    throw ConfigError("each encoder pass needs at least one layer");
  CascadedEncoderParams enc;
  enc.cfg = cfg;
  for (int i = 0; i < cfg.causal_layers; ++i)
    enc.causal.push_back(make_conformer_layer(cfg, true, rng));
  for (int i = 0; i < cfg.noncausal_layers; ++i)
    enc.noncausal.push_back(make_conformer_layer(cfg, false, rng));
  enc.pos_embedding = Tensor::zeros({cfg.max_frames, cfg.width});
  fill_normal(enc.pos_embedding, rng, 0.02f);
  return enc;
}

// Structural attention mask, additive: 0 = allowed, -inf = masked.
// Causal layers see [max(0, t-left_context+1), t]; left_context 0 = unlimited.
inline Tensor make_attention_mask(int64_t t, bool causal, int left_context = 0) {
  Tensor m = Tensor::zeros({t, t});
  if (!causal && left_context == 0) return m;
  for (int64_t q = 0; q < t; ++q)
    for (int64_t k = 0; k < t; ++k) {
      const bool future = causal && k > q;
      const bool beyond = left_context > 0 && k < q - (int64_t)left_context + 1;
      if (future || beyond) m.ptr()[q * t + k] = kNegInf;
    }
  return m;
}

namespace detail {

inline Tensor feed_forward(Tensor x, Tensor lng, Tensor lnb, Tensor w1, Tensor b1, Tensor w2,
                           Tensor b2, float eps) {
  Tensor h = relu(add_bias(matmul(layer_norm(x, lng, lnb, eps), w1), b1));
  return add_bias(matmul(h, w2), b2);
}

// Replicates the structural T×T mask per (batch, head) and adds -inf on keys
// beyond each utterance's valid length.
inline Tensor build_score_mask(const Tensor& structural, const std::vector<int>& lengths,
                               int64_t heads, int64_t t) {
  const int64_t b = (int64_t)lengths.size();
  Tensor m = Tensor::zeros({b * heads, t, t});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t h = 0; h < heads; ++h) {
      float* dst = m.ptr() + ((i * heads + h) * t) * t;
      std::copy(structural.ptr(), structural.ptr() + t * t, dst);
      for (int64_t q = 0; q < t; ++q)
        for (int64_t k = lengths[i]; k < t; ++k) dst[q * t + k] = kNegInf;
    }
  return m;
}

inline std::vector<float> frame_validity(const std::vector<int>& lengths, int64_t t) {
  std::vector<float> mask(lengths.size() * t, 0.0f);
  for (size_t i = 0; i < lengths.size(); ++i)
    for (int64_t s = 0; s < std::min<int64_t>(lengths[i], t); ++s) mask[i * t + s] = 1.0f;
  return mask;
}

}  // namespace detail

// One Conformer layer. `attn_mask` is the structural T×T additive mask; key
// padding from `lengths` is applied on top of it. Padded frames are zeroed
// before the convolution so valid outputs never depend on pad values.
inline Tensor conformer_layer(Tensor x, const ConformerLayerParams& p, const Tensor& attn_mask,
                              const std::vector<int>& lengths) {
  if (x.rank() != 3) throw DimError("conformer_layer: input must be B x T x d");
  const int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (p.wq.dim(0) != d) throw DimError("conformer_layer: width mismatch");
  if (attn_mask.rank() != 2 || attn_mask.dim(0) != t || attn_mask.dim(1) != t)
    throw DimError("conformer_layer: attention mask must be " + std::to_string(t) + "x" +
                   std::to_string(t));
  if ((int64_t)lengths.size() != b) throw DimError("conformer_layer: lengths size mismatch");
  const float eps = p.ln_eps;

  x = add(x, scale(detail::feed_forward(x, p.ffn1_ln_gamma, p.ffn1_ln_beta, p.ffn1_w1, p.ffn1_b1,
                                        p.ffn1_w2, p.ffn1_b2, eps),
                   0.5f));

  {
    Tensor xa = layer_norm(x, p.attn_ln_gamma, p.attn_ln_beta, eps);
    Tensor q = split_heads(add_bias(matmul(xa, p.wq), p.bq), p.heads);
    Tensor k = split_heads(add_bias(matmul(xa, p.wk), p.bk), p.heads);
    Tensor v = split_heads(add_bias(matmul(xa, p.wv), p.bv), p.heads);
    const float inv_sqrt = 1.0f / std::sqrt((float)(d / p.heads));
    Tensor scores = scale(bmm_nt(q, k), inv_sqrt);
    scores = add(scores, detail::build_score_mask(attn_mask, lengths, p.heads, t));
    Tensor ctx = merge_heads(bmm(softmax_lastdim(scores), v), p.heads);
    x = add(x, add_bias(matmul(ctx, p.wo), p.bo));
  }

  {
    Tensor xc = layer_norm(x, p.conv_ln_gamma, p.conv_ln_beta, eps);
    xc = mul_time_mask(xc, detail::frame_validity(lengths, t));
    x = add(x, depthwise_conv1d(xc, p.conv_kernel, p.conv_bias, p.causal));
  }

  x = add(x, scale(detail::feed_forward(x, p.ffn2_ln_gamma, p.ffn2_ln_beta, p.ffn2_w1, p.ffn2_b1,
                                        p.ffn2_w2, p.ffn2_b2, eps),
                   0.5f));

  return layer_norm(x, p.final_ln_gamma, p.final_ln_beta, eps);
}

struct EncoderOutputs {
  Tensor first_pass;   // causal stack output, B x T x d
  Tensor second_pass;  // non-causal stack output, B x T x d
};

// Full cascade. When `adapters` is non-null its blocks attach in order: one
// per causal layer, then one per non-causal layer; `adapt_last_layer=false`
// skips the final layer of each pass (and expects two fewer blocks).
inline EncoderOutputs encode_cascaded(Tensor features, const CascadedEncoderParams& enc,
                                      const std::vector<AdapterBlock>* adapters,
                                      const Tensor& language_onehot,
                                      const std::vector<int>& lengths,
                                      bool adapt_last_layer = true, bool adapter_bias = true) {
  const int64_t t = features.dim(1);
  if (t > enc.pos_embedding.dim(0))
    throw DimError("encode_cascaded: sequence longer than position table (" +
                   std::to_string(t) + " > " + std::to_string(enc.pos_embedding.dim(0)) + ")");
  const size_t n_causal = enc.causal.size(), n_noncausal = enc.noncausal.size();
  if (adapters) {
    const size_t expected =
        adapt_last_layer ? n_causal + n_noncausal : (n_causal - 1) + (n_noncausal - 1);
    if (adapters->size() != expected)
      throw ConfigError("encode_cascaded: expected " + std::to_string(expected) +
                        " adapter blocks, got " + std::to_string(adapters->size()));
  }

  std::vector<int> pos_idx(t);
  for (int64_t i = 0; i < t; ++i) pos_idx[i] = (int)i;
  Tensor x = add_time(features, gather_rows(enc.pos_embedding, pos_idx));

  size_t block = 0;
  auto maybe_adapt = [&](Tensor h, bool is_last_of_pass) {
    if (!adapters || (is_last_of_pass && !adapt_last_layer)) return h;
    return adapter_forward(h, (*adapters)[block++], language_onehot, enc.cfg.ln_eps,
                           adapter_bias);
  };

  Tensor causal_mask = make_attention_mask(t, true, enc.cfg.left_context);
  for (size_t i = 0; i < n_causal; ++i) {
    x = conformer_layer(x, enc.causal[i], causal_mask, lengths);
    x = maybe_adapt(x, i + 1 == n_causal);
  }
  EncoderOutputs out;
  out.first_pass = x;

  Tensor full_mask = make_attention_mask(t, false, 0);
  for (size_t i = 0; i < n_noncausal; ++i) {
    x = conformer_layer(x, enc.noncausal[i], full_mask, lengths);
    x = maybe_adapt(x, i + 1 == n_noncausal);
  }
  out.second_pass = x;
  return out;
}

// Closed-form parameter count of one Conformer layer:
//   2 FFNs:       2 * (2d + d*f + f + f*d + d)   with f = ffn_multiplier * d
//   attention:    2d + 4*(d*d + d)
//   convolution:  2d + kernel*d + d
//   final norm:   2d
inline int64_t conformer_layer_param_count(const BackboneConfig& cfg) {
  const int64_t d = cfg.width, f = (int64_t)cfg.ffn_multiplier * d, k = cfg.kernel_size;
  const int64_t ffn = 2 * d + d * f + f + f * d + d;
  const int64_t attn = 2 * d + 4 * (d * d + d);
  const int64_t conv = 2 * d + k * d + d;
  return 2 * ffn + attn + conv + 2 * d;
}

inline int64_t encoder_param_count(const BackboneConfig& cfg) {
  return (int64_t)(cfg.causal_layers + cfg.noncausal_layers) * conformer_layer_param_count(cfg) +
         (int64_t)cfg.max_frames * cfg.width;
}

}  // namespace ldasr
