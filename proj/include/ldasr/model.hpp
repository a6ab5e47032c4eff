// The full streaming multilingual transducer: cascaded Conformer backbone,
// per-layer language-dependent adapters, prediction network and HAT joint,
// with every tensor registered under a stable name.
//
// Name layout:
//   backbone/pos_emb, backbone/{causal,noncausal}/<ii>/<tensor>
//   decoder/<tensor>, joint/<tensor>
//   adapter/{causal,noncausal}/<ii>/{D,U,D_b,U_b,ln_gamma,ln_beta}
// Everything outside adapter/ is frozen during adapter finetuning; the
// backbone fingerprint covers exactly that set, in lexicographic name order.

#pragma once

#include <map>

#include "ldasr/backbone.hpp"
#include "ldasr/config.hpp"
#include "ldasr/frontend.hpp"
#include "ldasr/transducer.hpp"

namespace ldasr {

struct ModelConfig {
  BackboneConfig backbone;
  int languages = 4;
  int vocab = 32;
  int adapter_hidden = 8;
  bool adapter_bias = true;
  bool adapter_after_last = true;
  float adapter_init_scale = 0.02f;
  int pred_embed = 32;
  int joint_dim = 32;
  float fastemit_lambda = 5e-3f;
  float pass1_weight = 0.5f;
  float pass2_weight = 0.5f;

  int adapter_block_count() const {
    const int total = backbone.causal_layers + backbone.noncausal_layers;
    return adapter_after_last ? total : total - 2;
  }
};

inline ModelConfig model_config_from(const RunConfig& rc) {
  ModelConfig mc;
  mc.backbone.width = (int)(rc.d_raw * rc.stack_factor);
  mc.backbone.heads = (int)rc.heads;
  mc.backbone.kernel_size = (int)rc.kernel_size;
  mc.backbone.ffn_multiplier = (int)rc.ffn_multiplier;
  mc.backbone.causal_layers = (int)rc.causal_layers;
  mc.backbone.noncausal_layers = (int)rc.noncausal_layers;
  mc.backbone.max_frames = (int)rc.max_frames;
  mc.backbone.left_context = (int)rc.left_context;
  mc.backbone.ln_eps = (float)rc.ln_eps;
  mc.languages = (int)rc.languages;
  mc.vocab = (int)rc.vocab;
  mc.adapter_hidden = (int)rc.adapter_hidden;
  mc.adapter_bias = rc.adapter_bias != 0;
  mc.adapter_after_last = rc.adapter_after_last != 0;
  mc.adapter_init_scale = (float)rc.adapter_init_scale;
  mc.pred_embed = (int)rc.pred_embed;
  mc.joint_dim = (int)rc.joint_dim;
  mc.fastemit_lambda = (float)rc.fastemit_lambda;
  mc.pass1_weight = (float)rc.pass1_weight;
  mc.pass2_weight = (float)rc.pass2_weight;
  return mc;
}

namespace detail {
inline std::string layer_tag(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%02d", i);
  return buf;
}
}  // namespace detail

class Model {
 public:
  ModelConfig cfg;
  CascadedEncoderParams encoder;
  std::vector<AdapterBlock> adapters;
  PredictionNetParams pred;
  JointParams joint;
  std::map<std::string, Tensor> params;

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    Model m;
    m.cfg = cfg;
    Rng enc_rng(derive_seed(seed, "backbone"));
    m.encoder = make_cascaded_encoder(cfg.backbone, enc_rng);
    Rng dec_rng(derive_seed(seed, "decoder"));
    m.pred = make_prediction_net(cfg.vocab, cfg.pred_embed, cfg.joint_dim, dec_rng,
                                 cfg.backbone.ln_eps);
    Rng joint_rng(derive_seed(seed, "joint"));
    m.joint = make_joint(cfg.backbone.width, cfg.joint_dim, cfg.vocab, joint_rng);
    Rng ad_rng(derive_seed(seed, "adapter"));
    for (int i = 0; i < cfg.adapter_block_count(); ++i)
      m.adapters.push_back(make_adapter_block(cfg.languages, cfg.backbone.width,
                                              cfg.adapter_hidden, ad_rng,
                                              cfg.adapter_init_scale));
    m.register_params();
    return m;
  }

  // --- parameter set selectors ---------------------------------------------

  const std::map<std::string, Tensor>& all_params() const { return params; }

  std::map<std::string, Tensor> frozen_params() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, t] : params)
      if (name.rfind("adapter/", 0) != 0) out.emplace(name, t);
    return out;
  }

  std::map<std::string, Tensor> adapter_params() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, t] : params)
      if (name.rfind("adapter/", 0) == 0) out.emplace(name, t);
    return out;
  }

  // The per-language weight slices: D, U, D_b, U_b only. This is the whole
  // trainable set during adapter finetuning; the shared adapter layer norms
  // stay frozen with everything else.
  std::map<std::string, Tensor> adapter_slice_params() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, t] : params) {
      if (name.rfind("adapter/", 0) != 0) continue;
      const std::string leaf = name.substr(name.rfind('/') + 1);
      if (leaf == "D" || leaf == "U" || leaf == "D_b" || leaf == "U_b") out.emplace(name, t);
    }
    return out;
  }

  void set_requires_grad(const std::map<std::string, Tensor>& set, bool value) {
    for (auto& [name, t] : set) {
      (void)name;
      Tensor tt = t;
      tt.set_requires_grad(value);
    }
  }

  void mark_trainable(const std::map<std::string, Tensor>& trainable) {
    set_requires_grad(params_as_map(), false);
    set_requires_grad(trainable, true);
  }

  std::map<std::string, Tensor> params_as_map() const { return params; }

  // --- forward ----------------------------------------------------------------

  EncoderOutputs encode(const Batch& batch) const {
    return encode_cascaded(batch.stacked_features, encoder,
                           adapters.empty() ? nullptr : &adapters, batch.language_onehot,
                           batch.feature_lengths, cfg.adapter_after_last, cfg.adapter_bias);
  }

  std::vector<int> targets_of(const Batch& batch, int64_t row) const {
    const int64_t stride = std::max<int64_t>(batch.max_targets, 1);
    std::vector<int> t(batch.targets.begin() + row * stride,
                       batch.targets.begin() + row * stride + batch.target_lengths[row]);
    return t;
  }

  // Mean per-utterance transducer loss for each pass.
  std::pair<Tensor, Tensor> dual_loss(const Batch& batch) const {
    EncoderOutputs out = encode(batch);
    const int64_t b = batch.size();
    Tensor sum1, sum2;
    for (int64_t i = 0; i < b; ++i) {
      const std::vector<int> targets = targets_of(batch, i);
      Tensor l1 = transducer_loss(slice_time(out.first_pass, i, batch.feature_lengths[i]),
                                  targets, pred, joint, cfg.fastemit_lambda);
      Tensor l2 = transducer_loss(slice_time(out.second_pass, i, batch.feature_lengths[i]),
                                  targets, pred, joint, cfg.fastemit_lambda);
      sum1 = sum1.defined() ? add(sum1, l1) : l1;
      sum2 = sum2.defined() ? add(sum2, l2) : l2;
    }
    return {scale(sum1, 1.0f / (float)b), scale(sum2, 1.0f / (float)b)};
  }

  Tensor loss(const Batch& batch) const {
    auto [l1, l2] = dual_loss(batch);
    return add(scale(l1, cfg.pass1_weight), scale(l2, cfg.pass2_weight));
  }

 private:
  void register_layer(const std::string& prefix, ConformerLayerParams& p) {
    auto put = [&](const std::string& leaf, Tensor t) { params.emplace(prefix + leaf, t); };
    put("ffn1_ln_gamma", p.ffn1_ln_gamma);
    put("ffn1_ln_beta", p.ffn1_ln_beta);
    put("ffn1_w1", p.ffn1_w1);
    put("ffn1_b1", p.ffn1_b1);
    put("ffn1_w2", p.ffn1_w2);
    put("ffn1_b2", p.ffn1_b2);
    put("attn_ln_gamma", p.attn_ln_gamma);
    put("attn_ln_beta", p.attn_ln_beta);
    put("wq", p.wq);
    put("bq", p.bq);
    put("wk", p.wk);
    put("bk", p.bk);
    put("wv", p.wv);
    put("bv", p.bv);
    put("wo", p.wo);
    put("bo", p.bo);
    put("conv_ln_gamma", p.conv_ln_gamma);
    put("conv_ln_beta", p.conv_ln_beta);
    put("conv_kernel", p.conv_kernel);
    put("conv_bias", p.conv_bias);
    put("ffn2_ln_gamma", p.ffn2_ln_gamma);
    put("ffn2_ln_beta", p.ffn2_ln_beta);
    put("ffn2_w1", p.ffn2_w1);
    put("ffn2_b1", p.ffn2_b1);
    put("ffn2_w2", p.ffn2_w2);
    put("ffn2_b2", p.ffn2_b2);
    put("final_ln_gamma", p.final_ln_gamma);
    put("final_ln_beta", p.final_ln_beta);
  }

  void register_params() {
    params.clear();
    params.emplace("backbone/pos_emb", encoder.pos_embedding);
    for (size_t i = 0; i < encoder.causal.size(); ++i)
      register_layer("backbone/causal/" + detail::layer_tag((int)i) + "/", encoder.causal[i]);
    for (size_t i = 0; i < encoder.noncausal.size(); ++i)
      register_layer("backbone/noncausal/" + detail::layer_tag((int)i) + "/",
                     encoder.noncausal[i]);
    params.emplace("decoder/embed_recent", pred.embed_recent);
    params.emplace("decoder/embed_previous", pred.embed_previous);
    params.emplace("decoder/ln_gamma", pred.ln_gamma);
    params.emplace("decoder/ln_beta", pred.ln_beta);
    params.emplace("decoder/proj_w", pred.proj_w);
    params.emplace("decoder/proj_b", pred.proj_b);
    params.emplace("joint/enc_w", joint.enc_w);
    params.emplace("joint/enc_b", joint.enc_b);
    params.emplace("joint/pred_w", joint.pred_w);
    params.emplace("joint/pred_b", joint.pred_b);
    params.emplace("joint/head_w", joint.head_w);
    params.emplace("joint/head_b", joint.head_b);
    const int per_pass_causal =
        cfg.adapter_after_last ? cfg.backbone.causal_layers : cfg.backbone.causal_layers - 1;
    for (int i = 0; i < (int)adapters.size(); ++i) {
      const bool causal_pass = i < per_pass_causal;
      const int layer = causal_pass ? i : i - per_pass_causal;
      const std::string prefix = std::string("adapter/") +
                                 (causal_pass ? "causal/" : "noncausal/") +
                                 detail::layer_tag(layer) + "/";
      params.emplace(prefix + "D", adapters[i].down);
      params.emplace(prefix + "U", adapters[i].up);
      params.emplace(prefix + "D_b", adapters[i].down_bias);
      params.emplace(prefix + "U_b", adapters[i].up_bias);
      params.emplace(prefix + "ln_gamma", adapters[i].ln_gamma);
      params.emplace(prefix + "ln_beta", adapters[i].ln_beta);
    }
  }
};

// Closed-form size of the frozen parameter set (encoder + decoder + joint);
// see the architecture notes in the README.
inline int64_t decoder_param_count(const ModelConfig& cfg) {
  const int64_t v = cfg.vocab, e = cfg.pred_embed, j = cfg.joint_dim;
  return 2 * (v + 1) * e + 2 * e + e * j + j;
}

inline int64_t joint_param_count(const ModelConfig& cfg) {
  const int64_t d = cfg.backbone.width, j = cfg.joint_dim, v = cfg.vocab;
  return d * j + j + j * j + j + j * (v + 1) + (v + 1);
}

inline int64_t frozen_param_count(const ModelConfig& cfg) {
  return encoder_param_count(cfg.backbone) + decoder_param_count(cfg) + joint_param_count(cfg);
}

}  // namespace ldasr
