// Transducer decoder stack: a two-token embedding prediction network, a
// HAT-factorized joint network (sigmoid blank, softmax labels), the alignment
// marginalization loss, FastEmit gradient scaling, and greedy/beam decoding
// with optional shallow fusion.
//
// Alignment convention: a complete alignment interleaves exactly T blanks and
// U labels in any order. The forward variable alpha lives on a (T+1) x (U+1)
// grid where alpha[t][u] covers prefixes with t blanks and u labels; label
// arcs taken after the last blank condition on the final encoder frame. Arc
// score tables are indexed by frame: log_blank is T x (U+1), log_label is
// T x U. The DP itself runs in double precision inside a single graph node.

#pragma once

#include <array>
#include <optional>

#include "ldasr/ops.hpp"
#include "ldasr/tensor.hpp"

namespace ldasr {

struct PredictionNetParams {
  // row V of each table is the start-of-history embedding
  Tensor embed_recent;    // (V+1) x e, most recent non-blank token
  Tensor embed_previous;  // (V+1) x e, token before that
  Tensor ln_gamma, ln_beta;  // e
  Tensor proj_w;  // e x j
  Tensor proj_b;  // j
  int vocab = 0;
  float ln_eps = 1e-6f;
};

struct JointParams {
  Tensor enc_w;   // d x j
  Tensor enc_b;   // j
  Tensor pred_w;  // j x j
  Tensor pred_b;  // j
  Tensor head_w;  // j x (V+1); the blank logit is the last column
  Tensor head_b;  // V+1
  int vocab = 0;
};

struct Hypothesis {
  std::vector<int> tokens;
  double log_score = 0.0;
};

inline PredictionNetParams make_prediction_net(int vocab, int embed_dim, int joint_dim,
                                               Rng& rng, float ln_eps = 1e-6f) {
  PredictionNetParams p;
  p.vocab = vocab;
  p.ln_eps = ln_eps;
  p.embed_recent = Tensor::zeros({vocab + 1, embed_dim});
  fill_normal(p.embed_recent, rng, 0.1f);
  p.embed_previous = Tensor::zeros({vocab + 1, embed_dim});
  fill_normal(p.embed_previous, rng, 0.1f);
  p.ln_gamma = Tensor::from({embed_dim}, std::vector<float>(embed_dim, 1.0f));
  p.ln_beta = Tensor::zeros({embed_dim});
  p.proj_w = detail::xavier_like(embed_dim, joint_dim, rng);
  p.proj_b = Tensor::zeros({joint_dim});
  return p;
}

inline JointParams make_joint(int enc_dim, int joint_dim, int vocab, Rng& rng) {
  JointParams j;
  j.vocab = vocab;
  j.enc_w = detail::xavier_like(enc_dim, joint_dim, rng);
  j.enc_b = Tensor::zeros({joint_dim});
  j.pred_w = detail::xavier_like(joint_dim, joint_dim, rng);
  j.pred_b = Tensor::zeros({joint_dim});
  j.head_w = detail::xavier_like(joint_dim, vocab + 1, rng);
  j.head_b = Tensor::zeros({vocab + 1});
  return j;
}

// History rows for every prefix length 0..U: position -1 and -2 tokens, with
// the start row (index V) standing in for missing history. Blank never enters
// a history.
inline std::pair<std::vector<int>, std::vector<int>> history_rows(const std::vector<int>& targets,
                                                                  int vocab) {
  for (int t : targets)
    if (t < 0 || t >= vocab) throw std::out_of_range("prediction history token out of range");
  const size_t u = targets.size();
  std::vector<int> recent(u + 1, vocab), previous(u + 1, vocab);
  for (size_t i = 1; i <= u; ++i) {
    recent[i] = targets[i - 1];
    if (i >= 2) previous[i] = targets[i - 2];
  }
  return {recent, previous};
}

// Graph path: prediction-net states for all prefixes of `targets`, (U+1) x j.
inline Tensor prediction_states(const std::vector<int>& targets,
                                const PredictionNetParams& p) {
  auto [recent, previous] = history_rows(targets, p.vocab);
  Tensor emb = add(gather_rows(p.embed_recent, recent), gather_rows(p.embed_previous, previous));
  Tensor normed = layer_norm(emb, p.ln_gamma, p.ln_beta, p.ln_eps);
  return add_bias(matmul(normed, p.proj_w), p.proj_b);
}

// Arc-score tables for one utterance's lattice.
struct LatticeScores {
  Tensor log_blank;       // T x (U+1)
  Tensor log_label;       // T x U, log P(y_{u+1} | t, u)
  Tensor log_labels_all;  // T x (U+1) x V, full HAT label distribution
};

inline LatticeScores lattice_scores(Tensor enc, const std::vector<int>& targets,
                                    const PredictionNetParams& pred, const JointParams& joint) {
  if (enc.rank() != 2) throw DimError("lattice_scores: encoder input must be T x d");
  const int64_t t = enc.dim(0), u = (int64_t)targets.size(), v = joint.vocab;
  Tensor enc_proj = add_bias(matmul(enc, joint.enc_w), joint.enc_b);           // T x j
  Tensor pred_proj = add_bias(matmul(prediction_states(targets, pred), joint.pred_w),
                              joint.pred_b);                                   // (U+1) x j
  Tensor hidden = tanh_op(outer_add(enc_proj, pred_proj));                     // T x (U+1) x j
  Tensor logits = add_bias(matmul(hidden, joint.head_w), joint.head_b);        // T x (U+1) x (V+1)
  Tensor blank_logit = slice_last(logits, v, v + 1);                           // T x (U+1) x 1
  LatticeScores s;
  s.log_blank = reshape(log_sigmoid(blank_logit), {t, u + 1});
  s.log_labels_all =
      add_bcast_last(log_softmax_lastdim(slice_last(logits, 0, v)),
                     log_one_minus_sigmoid(blank_logit));
  s.log_label = u > 0 ? gather_labels(s.log_labels_all, targets) : Tensor::zeros({t, 0});
  return s;
}

// Negative log marginal likelihood over all T-blank/U-label interleavings.
// The whole DP is one graph node: alpha/beta run in double, and the backward
// pass scales label-arc posteriors by (1 + fastemit_lambda) while leaving
// blank arcs untouched. `alpha_out`, when given, receives the (T+1) x (U+1)
// forward log-probabilities.
inline Tensor rnnt_nll(Tensor log_blank, Tensor log_label, float fastemit_lambda = 0.0f,
                       std::vector<double>* alpha_out = nullptr) {
  if (log_blank.rank() != 2 || log_label.rank() != 2)
    throw DimError("rnnt_nll: expects T x (U+1) and T x U score tables");
  const int64_t t_max = log_blank.dim(0);
  const int64_t u_max = log_label.dim(1);
  if (log_blank.dim(1) != u_max + 1 || (log_label.dim(0) != t_max && u_max > 0))
    throw DimError("rnnt_nll: inconsistent lattice shapes");
  if (t_max < 1) throw ContractError("rnnt_nll: need at least one frame");
  for (int64_t i = 0; i < log_blank.numel(); ++i)
    if (!std::isfinite(log_blank.ptr()[i])) throw TrainError("rnnt_nll: non-finite blank score");
  for (int64_t i = 0; i < log_label.numel(); ++i)
    if (!std::isfinite(log_label.ptr()[i])) throw TrainError("rnnt_nll: non-finite label score");

  const auto lb = [&](int64_t t, int64_t u) { return (double)log_blank.ptr()[t * (u_max + 1) + u]; };
  // label arcs taken with all frames consumed reuse the last frame's scores
  const auto ll = [&](int64_t t, int64_t u) {
    return (double)log_label.ptr()[std::min(t, t_max - 1) * u_max + u];
  };
  constexpr double kInf = std::numeric_limits<double>::infinity();
  auto logaddexp = [](double a, double b) {
    if (a == -kInf) return b;
    if (b == -kInf) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(std::min(a, b) - m));
  };

  std::vector<double> alpha((t_max + 1) * (u_max + 1), -kInf);
  auto at = [&](std::vector<double>& m, int64_t t, int64_t u) -> double& {
    return m[t * (u_max + 1) + u];
  };
  at(alpha, 0, 0) = 0.0;
  for (int64_t t = 0; t <= t_max; ++t)
    for (int64_t u = 0; u <= u_max; ++u) {
      if (t == 0 && u == 0) continue;
      double a = t > 0 ? at(alpha, t - 1, u) + lb(t - 1, u) : -kInf;
      double b = u > 0 ? at(alpha, t, u - 1) + ll(t, u - 1) : -kInf;
      at(alpha, t, u) = logaddexp(a, b);
    }
  const double log_z = at(alpha, t_max, u_max);
  if (alpha_out) *alpha_out = alpha;

  const float loss = (float)(-log_z);
  auto alpha_held = std::make_shared<std::vector<double>>(std::move(alpha));
  return make_op(
      {1}, {loss}, {log_blank, log_label},
      [log_blank, log_label, alpha_held, t_max, u_max, log_z,
       fastemit_lambda](TensorNode& self) mutable {
        const double inf = std::numeric_limits<double>::infinity();
        const double gout = self.grad[0];
        const auto lb = [&](int64_t t, int64_t u) {
          return (double)log_blank.ptr()[t * (u_max + 1) + u];
        };
        const auto ll = [&](int64_t t, int64_t u) {
          return (double)log_label.ptr()[std::min(t, t_max - 1) * u_max + u];
        };
        auto logaddexp = [inf](double a, double b) {
          if (a == -inf) return b;
          if (b == -inf) return a;
          const double m = std::max(a, b);
          return m + std::log1p(std::exp(std::min(a, b) - m));
        };
        std::vector<double> beta((t_max + 1) * (u_max + 1), -inf);
        auto at = [&](std::vector<double>& m, int64_t t, int64_t u) -> double& {
          return m[t * (u_max + 1) + u];
        };
        auto a_at = [&](int64_t t, int64_t u) { return (*alpha_held)[t * (u_max + 1) + u]; };
        at(beta, t_max, u_max) = 0.0;
        for (int64_t t = t_max; t >= 0; --t)
          for (int64_t u = u_max; u >= 0; --u) {
            if (t == t_max && u == u_max) continue;
            double via_blank = t < t_max ? lb(t, u) + at(beta, t + 1, u) : -inf;
            double via_label = u < u_max ? ll(t, u) + at(beta, t, u + 1) : -inf;
            at(beta, t, u) = logaddexp(via_blank, via_label);
          }
        std::vector<float> g_blank(log_blank.numel(), 0.0f);
        std::vector<float> g_label(log_label.numel(), 0.0f);
        for (int64_t t = 0; t < t_max; ++t)
          for (int64_t u = 0; u <= u_max; ++u) {
            const double post = std::exp(a_at(t, u) + lb(t, u) + at(beta, t + 1, u) - log_z);
            g_blank[t * (u_max + 1) + u] += (float)(-gout * post);
          }
        const double label_scale = 1.0 + (double)fastemit_lambda;
        for (int64_t t = 0; t <= t_max; ++t)
          for (int64_t u = 0; u < u_max; ++u) {
            const double post = std::exp(a_at(t, u) + ll(t, u) + at(beta, t, u + 1) - log_z);
            g_label[std::min(t, t_max - 1) * u_max + u] += (float)(-gout * post * label_scale);
          }
        accumulate_grad(log_blank, g_blank.data());
        if (log_label.numel() > 0) accumulate_grad(log_label, g_label.data());
      });
}

// Full per-utterance loss: encoder frames enc (T x d) against `targets`.
inline Tensor transducer_loss(Tensor enc, const std::vector<int>& targets,
                              const PredictionNetParams& pred, const JointParams& joint,
                              float fastemit_lambda = 0.0f) {
  LatticeScores s = lattice_scores(enc, targets, pred, joint);
  return rnnt_nll(s.log_blank, s.log_label, fastemit_lambda);
}

// ---------------------------------------------------------------------------
// Inference fast path (no graph): raw float math in double accumulators.

namespace detail {

inline std::vector<double> pred_state_vector(const PredictionNetParams& p, int recent,
                                             int previous) {
  const int64_t e = p.embed_recent.dim(1), j = p.proj_w.dim(1);
  std::vector<double> emb(e);
  for (int64_t i = 0; i < e; ++i)
    emb[i] = (double)p.embed_recent.ptr()[recent * e + i] +
             (double)p.embed_previous.ptr()[previous * e + i];
  double mean = 0.0;
  for (double v : emb) mean += v;
  mean /= (double)e;
  double var = 0.0;
  for (double v : emb) var += (v - mean) * (v - mean);
  var /= (double)e;
  const double istd = 1.0 / std::sqrt(var + (double)p.ln_eps);
  std::vector<double> out(j, 0.0);
  for (int64_t i = 0; i < e; ++i) {
    const double nv = ((emb[i] - mean) * istd) * (double)p.ln_gamma.ptr()[i] +
                      (double)p.ln_beta.ptr()[i];
    for (int64_t q = 0; q < j; ++q) out[q] += nv * (double)p.proj_w.ptr()[i * j + q];
  }
  for (int64_t q = 0; q < j; ++q) out[q] += (double)p.proj_b.ptr()[q];
  return out;
}

inline double softplus_d(double z) {
  if (z > 30.0) return z;
  if (z < -30.0) return std::exp(z);
  return std::log1p(std::exp(z));
}

}  // namespace detail

// Prediction-network state for a decode history (the last two non-blank
// tokens; pass -1 for missing positions). Blank emissions never change it.
inline std::vector<double> prediction_forward(const PredictionNetParams& p, int recent,
                                              int previous) {
  if (recent >= p.vocab || previous >= p.vocab)
    throw std::out_of_range("prediction_forward: token id >= vocab");
  const int r = recent < 0 ? p.vocab : recent;
  const int q = previous < 0 ? p.vocab : previous;
  return detail::pred_state_vector(p, r, q);
}

struct JointOutput {
  double log_blank = 0.0;
  std::vector<double> log_labels;  // V entries: log((1-b) * softmax)
};

// Projected encoder frame for the fast path: enc_w^T frame + enc_b.
inline std::vector<double> project_encoder_frame(const JointParams& jp, const float* frame,
                                                 int64_t d) {
  const int64_t j = jp.enc_w.dim(1);
  std::vector<double> out(j, 0.0);
  for (int64_t i = 0; i < d; ++i) {
    const double x = frame[i];
    for (int64_t q = 0; q < j; ++q) out[q] += x * (double)jp.enc_w.ptr()[i * j + q];
  }
  for (int64_t q = 0; q < j; ++q) out[q] += (double)jp.enc_b.ptr()[q];
  return out;
}

// HAT joint: b = sigmoid(blank logit); labels share log(1-b) plus a softmax.
inline JointOutput joint_hat(const std::vector<double>& enc_proj,
                             const std::vector<double>& pred_state, const JointParams& jp) {
  const int64_t j = jp.pred_w.dim(1), v = jp.vocab;
  std::vector<double> hidden(j, 0.0);
  for (int64_t i = 0; i < j; ++i) {
    const double x = pred_state[i];
    for (int64_t q = 0; q < j; ++q) hidden[q] += x * (double)jp.pred_w.ptr()[i * j + q];
  }
  for (int64_t q = 0; q < j; ++q)
    hidden[q] = std::tanh(hidden[q] + enc_proj[q] + (double)jp.pred_b.ptr()[q]);
  std::vector<double> logits(v + 1, 0.0);
  for (int64_t q = 0; q < j; ++q) {
    const double h = hidden[q];
    for (int64_t c = 0; c <= v; ++c) logits[c] += h * (double)jp.head_w.ptr()[q * (v + 1) + c];
  }
  for (int64_t c = 0; c <= v; ++c) logits[c] += (double)jp.head_b.ptr()[c];

  JointOutput out;
  out.log_blank = -detail::softplus_d(-logits[v]);
  const double log_one_minus_b = -detail::softplus_d(logits[v]);
  double mx = -std::numeric_limits<double>::infinity();
  for (int64_t c = 0; c < v; ++c) mx = std::max(mx, logits[c]);
  double denom = 0.0;
  for (int64_t c = 0; c < v; ++c) denom += std::exp(logits[c] - mx);
  const double lse = mx + std::log(denom);
  out.log_labels.resize(v);
  for (int64_t c = 0; c < v; ++c) out.log_labels[c] = log_one_minus_b + logits[c] - lse;
  return out;
}

// Shallow-fusion hook for label emissions during search.
class LabelScorer {
 public:
  virtual ~LabelScorer() = default;
  virtual double label_logp(const std::vector<int>& context, int token) const = 0;
};

namespace detail {

struct BeamEntry {
  std::vector<int> tokens;
  double score = 0.0;     // fused: am + lm_weight * lm
  double am_score = 0.0;  // acoustic arcs only
  double lm_score = 0.0;  // sum of label LM log-probs
  int recent = -1, previous = -1;
};

inline bool beam_better(const BeamEntry& a, const BeamEntry& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

}  // namespace detail

struct FusedHypothesis {
  std::vector<int> tokens;
  double log_score = 0.0;  // fused
  double am_logprob = 0.0;
  double lm_logprob = 0.0;
};

// Frame-synchronous beam search with the same per-hypothesis commit rule as
// greedy decoding: a hypothesis keeps emitting labels while its best fused
// label score beats blank (up to max_symbols_per_frame), then takes the
// blank. Hypotheses are alignment paths; no recombination. beam_width 1 with
// no fusion therefore reproduces greedy_decode exactly.
inline std::vector<FusedHypothesis> beam_decode_fused(const Tensor& enc,
                                                      const PredictionNetParams& pp,
                                                      const JointParams& jp, int beam_width,
                                                      int max_symbols_per_frame = 4,
                                                      const LabelScorer* lm = nullptr,
                                                      double lm_weight = 0.0) {
  if (beam_width < 1) throw ContractError("beam_decode: beam width must be >= 1");
  if (max_symbols_per_frame < 1)
    throw ContractError("beam_decode: symbol cap must be >= 1");
  const int64_t t_max = enc.dim(0), d = enc.dim(1);
  const int v = jp.vocab;

  std::vector<detail::BeamEntry> beams{detail::BeamEntry{}};
  for (int64_t t = 0; t < t_max; ++t) {
    const std::vector<double> eproj = project_encoder_frame(jp, enc.ptr() + t * d, d);
    std::vector<detail::BeamEntry> alive = std::move(beams);
    std::vector<detail::BeamEntry> finished;
    for (int step = 0; step <= max_symbols_per_frame && !alive.empty(); ++step) {
      std::vector<detail::BeamEntry> expansions;
      for (auto& h : alive) {
        const JointOutput out =
            joint_hat(eproj, prediction_forward(pp, h.recent, h.previous), jp);
        std::vector<double> lm_term(v, 0.0), fused(v);
        for (int c = 0; c < v; ++c) {
          if (lm) lm_term[c] = lm->label_logp(h.tokens, c);
          fused[c] = out.log_labels[c] + lm_weight * lm_term[c];
        }
        int best = 0;
        for (int c = 1; c < v; ++c)
          if (fused[c] > fused[best]) best = c;
        if (step == max_symbols_per_frame || out.log_blank >= fused[best]) {
          h.score += out.log_blank;
          h.am_score += out.log_blank;
          finished.push_back(std::move(h));
          continue;
        }
        for (int c = 0; c < v; ++c) {
          detail::BeamEntry e = h;
          e.tokens.push_back(c);
          e.score += fused[c];
          e.am_score += out.log_labels[c];
          e.lm_score += lm_term[c];
          e.previous = e.recent;
          e.recent = c;
          expansions.push_back(std::move(e));
        }
      }
      std::sort(expansions.begin(), expansions.end(), detail::beam_better);
      if ((int)expansions.size() > beam_width) expansions.resize(beam_width);
      alive = std::move(expansions);
    }
    std::sort(finished.begin(), finished.end(), detail::beam_better);
    if ((int)finished.size() > beam_width) finished.resize(beam_width);
    beams = std::move(finished);
  }
  std::vector<FusedHypothesis> out;
  for (const auto& b : beams)
    out.push_back(FusedHypothesis{b.tokens, b.score, b.am_score, b.lm_score});
  return out;
}

inline std::vector<Hypothesis> beam_decode(const Tensor& enc, const PredictionNetParams& pp,
                                           const JointParams& jp, int beam_width,
                                           int max_symbols_per_frame = 4,
                                           const LabelScorer* lm = nullptr,
                                           double lm_weight = 0.0) {
  std::vector<Hypothesis> out;
  for (const auto& h :
       beam_decode_fused(enc, pp, jp, beam_width, max_symbols_per_frame, lm, lm_weight))
    out.push_back(Hypothesis{h.tokens, h.log_score});
  return out;
}

// Frame-synchronous greedy decode: emit argmax labels while they beat blank,
// up to the per-frame cap, then advance. Blank wins ties.
inline Hypothesis greedy_decode(const Tensor& enc, const PredictionNetParams& pp,
                                const JointParams& jp, int max_symbols_per_frame = 4) {
  if (max_symbols_per_frame < 1)
    throw ContractError("greedy_decode: symbol cap must be >= 1");
  const int64_t t_max = enc.dim(0), d = enc.dim(1);
  Hypothesis hyp;
  int recent = -1, previous = -1;
  for (int64_t t = 0; t < t_max; ++t) {
    const std::vector<double> eproj = project_encoder_frame(jp, enc.ptr() + t * d, d);
    for (int step = 0;; ++step) {
      const JointOutput out = joint_hat(eproj, prediction_forward(pp, recent, previous), jp);
      int best = 0;
      for (int c = 1; c < jp.vocab; ++c)
        if (out.log_labels[c] > out.log_labels[best]) best = c;
      if (step == max_symbols_per_frame || out.log_blank >= out.log_labels[best]) {
        hyp.log_score += out.log_blank;
        break;
      }
      hyp.tokens.push_back(best);
      hyp.log_score += out.log_labels[best];
      previous = recent;
      recent = best;
    }
  }
  return hyp;
}

}  // namespace ldasr
