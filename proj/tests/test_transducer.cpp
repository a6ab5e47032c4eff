#include <gtest/gtest.h>

#include <cmath>

#include "ldasr/transducer.hpp"

using namespace ldasr;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double logaddexp_d(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

// Independent oracle: enumerate every interleaving of T blanks and U labels.
// A label taken after all frames are consumed conditions on the last frame.
void enumerate_paths(const Tensor& lb, const Tensor& ll, int64_t t, int64_t u, int64_t t_max,
                     int64_t u_max, double logp, double& total, int64_t& count) {
  if (t == t_max && u == u_max) {
    total = logaddexp_d(total, logp);
    ++count;
    return;
  }
  if (t < t_max)
    enumerate_paths(lb, ll, t + 1, u, t_max, u_max,
                    logp + lb.ptr()[t * (u_max + 1) + u], total, count);
  if (u < u_max)
    enumerate_paths(lb, ll, t, u + 1, t_max, u_max,
                    logp + ll.ptr()[std::min(t, t_max - 1) * u_max + u], total, count);
}

double brute_force_nll(const Tensor& lb, const Tensor& ll, int64_t t_max, int64_t u_max,
                       int64_t* path_count = nullptr) {
  double total = -kInf;
  int64_t count = 0;
  enumerate_paths(lb, ll, 0, 0, t_max, u_max, 0.0, total, count);
  if (path_count) *path_count = count;
  return -total;
}

Tensor random_logprobs(Shape shape, uint64_t seed) {
  Tensor t = Tensor::zeros(std::move(shape));
  Rng rng(seed);
  for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = -std::abs(rng.normal(1.0f)) - 0.05f;
  return t;
}

PredictionNetParams random_pred(int vocab, int e, int j, uint64_t seed) {
  Rng rng(seed);
  return make_prediction_net(vocab, e, j, rng);
}

JointParams random_joint(int d, int j, int vocab, uint64_t seed) {
  Rng rng(seed);
  return make_joint(d, j, vocab, rng);
}

Tensor random_enc(int64_t t, int64_t d, uint64_t seed) {
  Tensor enc = Tensor::zeros({t, d});
  Rng rng(seed);
  fill_normal(enc, rng, 1.0f);
  return enc;
}

}  // namespace

// --- DP loss against path enumeration ----------------------------------------

TEST(TransducerLoss, EmptyTargetIsForcedBlankPath) {
  Tensor lb = random_logprobs({4, 1}, 1);
  Tensor ll = Tensor::zeros({4, 0});
  double expect = 0.0;
  for (int t = 0; t < 4; ++t) expect -= lb.ptr()[t];
  Tensor loss = rnnt_nll(lb, ll);
  EXPECT_NEAR(loss.item(), expect, 1e-6);
}

TEST(TransducerLoss, ThreePathHandEnumeration) {
  // T=2, U=1: label-blank-blank, blank-label-blank, blank-blank-label
  Tensor lb = random_logprobs({2, 2}, 2);
  Tensor ll = random_logprobs({2, 1}, 3);
  auto LB = [&](int t, int u) { return (double)lb.ptr()[t * 2 + u]; };
  auto LL = [&](int t) { return (double)ll.ptr()[t]; };
  const double p1 = LL(0) + LB(0, 1) + LB(1, 1);
  const double p2 = LB(0, 0) + LL(1) + LB(1, 1);
  const double p3 = LB(0, 0) + LB(1, 0) + LL(1);  // trailing label reuses frame 1
  const double expect = -logaddexp_d(p1, logaddexp_d(p2, p3));
  int64_t count = 0;
  EXPECT_NEAR(brute_force_nll(lb, ll, 2, 1, &count), expect, 1e-9);
  EXPECT_EQ(count, 3);
  EXPECT_NEAR(rnnt_nll(lb, ll).item(), expect, 1e-6);
}

TEST(TransducerLoss, MatchesBruteForceOnGrid) {
  uint64_t seed = 100;
  for (int64_t t = 1; t <= 4; ++t)
    for (int64_t u = 0; u <= 3; ++u) {
      Tensor lb = random_logprobs({t, u + 1}, seed++);
      Tensor ll = random_logprobs({t, u}, seed++);
      const double oracle = brute_force_nll(lb, ll, t, u);
      EXPECT_NEAR(rnnt_nll(lb, ll).item(), oracle, 1e-6) << "T=" << t << " U=" << u;
    }
}

TEST(TransducerLoss, AlphaStartsAtZeroAndStaysNonPositive) {
  Tensor lb = random_logprobs({3, 3}, 41);
  Tensor ll = random_logprobs({3, 2}, 42);
  std::vector<double> alpha;
  rnnt_nll(lb, ll, 0.0f, &alpha);
  EXPECT_EQ(alpha[0], 0.0);
  for (double a : alpha) EXPECT_LE(a, 1e-5);
}

TEST(TransducerLoss, GradientMatchesFiniteDifferences) {
  // double-precision loss readout (the DP's own accumulator) so the check
  // isn't dominated by float32 output rounding
  auto nll_double = [](Tensor lb, Tensor ll) {
    NoGradGuard ng;
    std::vector<double> alpha;
    rnnt_nll(lb, ll, 0.0f, &alpha);
    return -alpha.back();
  };
  for (uint64_t seed = 200; seed < 206; ++seed) {
    Tensor lb = random_logprobs({3, 3}, seed);
    Tensor ll = random_logprobs({3, 2}, seed + 50);
    lb.set_requires_grad(true);
    ll.set_requires_grad(true);
    backward(rnnt_nll(lb, ll));
    const float h = 1e-3f;
    for (Tensor* leaf : {&lb, &ll}) {
      for (int64_t i = 0; i < leaf->numel(); ++i) {
        const float orig = leaf->ptr()[i];
        const float xp = orig + h, xm = orig - h;
        leaf->ptr()[i] = xp;
        const double lp = nll_double(lb, ll);
        leaf->ptr()[i] = xm;
        const double lm = nll_double(lb, ll);
        leaf->ptr()[i] = orig;
        const double fd = (lp - lm) / ((double)xp - (double)xm);
        const double an = leaf->node()->grad[i];
        EXPECT_LT(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3}), 1e-3)
            << "seed " << seed << " elem " << i;
      }
    }
  }
}

TEST(TransducerLoss, NonFiniteScoresRejected) {
  Tensor lb = random_logprobs({2, 2}, 7);
  Tensor ll = random_logprobs({2, 1}, 8);
  lb.ptr()[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(rnnt_nll(lb, ll), TrainError);
}

// --- FastEmit -----------------------------------------------------------------

TEST(FastEmit, LambdaZeroGradsBitIdentical) {
  Tensor lb = random_logprobs({3, 3}, 20);
  Tensor ll = random_logprobs({3, 2}, 21);
  lb.set_requires_grad(true);
  ll.set_requires_grad(true);
  backward(rnnt_nll(lb, ll, 0.0f));
  std::vector<float> g1b = lb.grad(), g1l = ll.grad();
  lb.zero_grad();
  ll.zero_grad();
  backward(rnnt_nll(lb, ll, 0.0f));
  EXPECT_EQ(g1b, lb.grad());
  EXPECT_EQ(g1l, ll.grad());
}

TEST(FastEmit, LabelArcGradsScaleByOnePlusLambda) {
  const float lambda = 5e-3f;  // production regularization weight
  Tensor lb = random_logprobs({2, 2}, 30);
  Tensor ll = random_logprobs({2, 1}, 31);
  lb.set_requires_grad(true);
  ll.set_requires_grad(true);
  backward(rnnt_nll(lb, ll, 0.0f));
  std::vector<float> plain_b = lb.grad(), plain_l = ll.grad();
  lb.zero_grad();
  ll.zero_grad();
  backward(rnnt_nll(lb, ll, lambda));
  for (size_t i = 0; i < plain_l.size(); ++i)
    EXPECT_NEAR(ll.grad()[i], plain_l[i] * (1.0f + lambda), 1e-7 + std::abs(plain_l[i]) * 1e-6);
  for (size_t i = 0; i < plain_b.size(); ++i) EXPECT_EQ(lb.grad()[i], plain_b[i]);
}

// --- HAT joint -----------------------------------------------------------------

TEST(JointHat, NormalizesToOne) {
  const int d = 8, j = 6, v = 5;
  JointParams jp = random_joint(d, j, v, 40);
  PredictionNetParams pp = random_pred(v, 4, j, 41);
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> frame(d);
    for (auto& f : frame) f = rng.normal(1.0f);
    auto eproj = project_encoder_frame(jp, frame.data(), d);
    auto out = joint_hat(eproj, prediction_forward(pp, rng.uniform_int(-1, v - 1), -1), jp);
    double sum = std::exp(out.log_blank);
    for (double l : out.log_labels) sum += std::exp(l);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(JointHat, ZeroBlankLogitGivesHalf) {
  // all-zero weights: every logit is its bias; blank bias 0 -> P(blank) = 0.5
  const int j = 4, v = 3;
  JointParams jp;
  jp.vocab = v;
  jp.enc_w = Tensor::zeros({4, j});
  jp.enc_b = Tensor::zeros({j});
  jp.pred_w = Tensor::zeros({j, j});
  jp.pred_b = Tensor::zeros({j});
  jp.head_w = Tensor::zeros({j, v + 1});
  jp.head_b = Tensor::zeros({v + 1});
  std::vector<double> eproj(j, 0.0), pred(j, 0.0);
  auto out = joint_hat(eproj, pred, jp);
  EXPECT_NEAR(std::exp(out.log_blank), 0.5, 1e-9);
}

TEST(JointHat, LabelDistributionBySoftmax) {
  // V=2 label logits [log 3, 0] with blank pushed to -inf: probs [0.75, 0.25]
  const int v = 2, j = 1;
  JointParams jp;
  jp.vocab = v;
  jp.enc_w = Tensor::zeros({1, j});
  jp.enc_b = Tensor::zeros({j});
  jp.pred_w = Tensor::zeros({j, j});
  jp.pred_b = Tensor::zeros({j});
  jp.head_w = Tensor::zeros({j, v + 1});
  jp.head_b = Tensor::from({v + 1}, {std::log(3.0f), 0.0f, -40.0f});
  std::vector<double> eproj(j, 0.0), pred(j, 0.0);
  auto out = joint_hat(eproj, pred, jp);
  EXPECT_NEAR(std::exp(out.log_labels[0]), 0.75, 1e-6);
  EXPECT_NEAR(std::exp(out.log_labels[1]), 0.25, 1e-6);
}

TEST(JointHat, LatticeScoresNormalizeAtEveryNode) {
  const int d = 8, j = 6, v = 5;
  JointParams jp = random_joint(d, j, v, 50);
  PredictionNetParams pp = random_pred(v, 4, j, 51);
  Tensor enc = random_enc(4, d, 52);
  LatticeScores s = lattice_scores(enc, {1, 3, 0}, pp, jp);
  for (int64_t t = 0; t < 4; ++t)
    for (int64_t u = 0; u <= 3; ++u) {
      double sum = std::exp((double)s.log_blank.ptr()[t * 4 + u]);
      for (int c = 0; c < v; ++c)
        sum += std::exp((double)s.log_labels_all.ptr()[(t * 4 + u) * v + c]);
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(JointHat, GraphAndFastPathAgree) {
  const int d = 8, j = 6, v = 5;
  JointParams jp = random_joint(d, j, v, 60);
  PredictionNetParams pp = random_pred(v, 4, j, 61);
  Tensor enc = random_enc(3, d, 62);
  const std::vector<int> targets = {2, 4};
  LatticeScores s = lattice_scores(enc, targets, pp, jp);
  for (int64_t t = 0; t < 3; ++t)
    for (int64_t u = 0; u <= 2; ++u) {
      const int recent = u >= 1 ? targets[u - 1] : -1;
      const int previous = u >= 2 ? targets[u - 2] : -1;
      auto out = joint_hat(project_encoder_frame(jp, enc.ptr() + t * d, d),
                           prediction_forward(pp, recent, previous), jp);
      EXPECT_NEAR(out.log_blank, s.log_blank.ptr()[t * 3 + u], 1e-5);
      for (int c = 0; c < v; ++c)
        EXPECT_NEAR(out.log_labels[c], s.log_labels_all.ptr()[(t * 3 + u) * v + c], 1e-5);
    }
}

// --- prediction network --------------------------------------------------------

TEST(PredictionNet, EmptyHistoryUsesStartRows) {
  PredictionNetParams pp = random_pred(6, 4, 5, 70);
  auto start = prediction_forward(pp, -1, -1);
  auto from_states = prediction_states({}, pp);  // single row, prefix length 0
  ASSERT_EQ(from_states.shape(), (Shape{1, 5}));
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(start[i], from_states.ptr()[i], 1e-5);
}

TEST(PredictionNet, OrderSensitiveHistories) {
  PredictionNetParams pp = random_pred(6, 4, 5, 71);
  auto ab = prediction_forward(pp, 1, 2);
  auto ba = prediction_forward(pp, 2, 1);
  double diff = 0;
  for (size_t i = 0; i < ab.size(); ++i) diff += std::abs(ab[i] - ba[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(PredictionNet, BlankNeverAdvancesHistory) {
  PredictionNetParams pp = random_pred(6, 4, 5, 72);
  // decode-side contract: the state is a pure function of the two history
  // tokens, and blank emissions do not touch them
  auto a = prediction_forward(pp, 3, 1);
  auto b = prediction_forward(pp, 3, 1);
  EXPECT_EQ(a, b);
  // prefix states depend only on non-blank targets by construction
  auto [recent, previous] = history_rows({4, 2}, 6);
  EXPECT_EQ(recent, (std::vector<int>{6, 4, 2}));
  EXPECT_EQ(previous, (std::vector<int>{6, 6, 4}));
}

TEST(PredictionNet, OutOfRangeTokenThrows) {
  PredictionNetParams pp = random_pred(6, 4, 5, 73);
  EXPECT_THROW(prediction_forward(pp, 6, -1), std::out_of_range);
  EXPECT_THROW(prediction_states({7}, pp), std::out_of_range);
}

// --- decoding -------------------------------------------------------------------

namespace {

// j = V+1, identity head over tanh(enc frame): a frame with +big at index i
// forces label i; +big at index V forces blank.
JointParams forcing_joint(int v) {
  const int j = v + 1;
  JointParams jp;
  jp.vocab = v;
  jp.enc_w = Tensor::zeros({j, j});
  for (int i = 0; i < j; ++i) jp.enc_w.ptr()[i * j + i] = 1.0f;
  jp.enc_b = Tensor::zeros({j});
  jp.pred_w = Tensor::zeros({j, j});
  jp.pred_b = Tensor::zeros({j});
  jp.head_w = Tensor::zeros({j, j});
  for (int i = 0; i < j; ++i) jp.head_w.ptr()[i * j + i] = 1.0f;
  jp.head_b = Tensor::zeros({j});
  return jp;
}

Tensor forcing_frames(const std::vector<int>& winners, int v) {
  Tensor enc = Tensor::zeros({(int64_t)winners.size(), v + 1});
  for (size_t t = 0; t < winners.size(); ++t) {
    for (int i = 0; i <= v; ++i) enc.ptr()[t * (v + 1) + i] = -9.0f;
    enc.ptr()[t * (v + 1) + winners[t]] = 9.0f;
  }
  return enc;
}

}  // namespace

TEST(GreedyDecode, BlankAlwaysWinsGivesEmpty) {
  const int v = 6;
  JointParams jp = forcing_joint(v);
  PredictionNetParams pp = random_pred(v, 4, v + 1, 80);
  Tensor enc = forcing_frames({v, v, v}, v);  // blank forced everywhere
  Hypothesis h = greedy_decode(enc, pp, jp, 4);
  EXPECT_TRUE(h.tokens.empty());
  EXPECT_LT(h.log_score, 0.0);
}

TEST(GreedyDecode, ForcedTokenSequence) {
  const int v = 6;
  JointParams jp = forcing_joint(v);
  PredictionNetParams pp = random_pred(v, 4, v + 1, 81);
  // frame 0 forces token 2, frame 1 forces blank, frame 2 forces token 5
  Tensor enc = forcing_frames({2, v, 5}, v);
  Hypothesis h = greedy_decode(enc, pp, jp, /*cap=*/1);
  EXPECT_EQ(h.tokens, (std::vector<int>{2, 5}));
}

TEST(GreedyDecode, CapBoundsEmissionsPerFrame) {
  const int v = 6;
  JointParams jp = forcing_joint(v);
  PredictionNetParams pp = random_pred(v, 4, v + 1, 82);
  Tensor enc = forcing_frames({3, 3, 3, 3}, v);  // label always argmax
  Hypothesis h = greedy_decode(enc, pp, jp, /*cap=*/1);
  EXPECT_EQ(h.tokens, (std::vector<int>(4, 3)));
}

TEST(BeamDecode, WidthOneEqualsGreedy) {
  const int d = 8, j = 6, v = 5;
  for (uint64_t seed = 90; seed < 95; ++seed) {
    JointParams jp = random_joint(d, j, v, seed);
    PredictionNetParams pp = random_pred(v, 4, j, seed + 10);
    Tensor enc = random_enc(5, d, seed + 20);
    Hypothesis g = greedy_decode(enc, pp, jp, 3);
    auto beams = beam_decode(enc, pp, jp, 1, 3);
    ASSERT_EQ(beams.size(), 1u);
    EXPECT_EQ(beams[0].tokens, g.tokens);
    EXPECT_NEAR(beams[0].log_score, g.log_score, 1e-12);
  }
}

TEST(BeamDecode, TopScoreDominatesGreedy) {
  const int d = 8, j = 6, v = 5;
  for (uint64_t seed = 300; seed < 310; ++seed) {
    JointParams jp = random_joint(d, j, v, seed);
    PredictionNetParams pp = random_pred(v, 4, j, seed + 10);
    Tensor enc = random_enc(4, d, seed + 20);
    Hypothesis g = greedy_decode(enc, pp, jp, 3);
    auto beams = beam_decode(enc, pp, jp, 4, 3);
    ASSERT_FALSE(beams.empty());
    EXPECT_GE(beams[0].log_score, g.log_score - 1e-12);
  }
}

namespace {

// Exhaustive expansion of the decoder's search space (same commit rule, no
// pruning): every reachable complete path.
void expand_all(const Tensor& enc, const PredictionNetParams& pp, const JointParams& jp,
                int cap, int64_t t, int step, detail::BeamEntry h,
                std::vector<detail::BeamEntry>& out) {
  if (t == enc.dim(0)) {
    out.push_back(std::move(h));
    return;
  }
  const int64_t d = enc.dim(1);
  auto eproj = project_encoder_frame(jp, enc.ptr() + t * d, d);
  auto jo = joint_hat(eproj, prediction_forward(pp, h.recent, h.previous), jp);
  int best = 0;
  for (int c = 1; c < jp.vocab; ++c)
    if (jo.log_labels[c] > jo.log_labels[best]) best = c;
  if (step == cap || jo.log_blank >= jo.log_labels[best]) {
    h.score += jo.log_blank;
    expand_all(enc, pp, jp, cap, t + 1, 0, std::move(h), out);
    return;
  }
  for (int c = 0; c < jp.vocab; ++c) {
    detail::BeamEntry e = h;
    e.tokens.push_back(c);
    e.score += jo.log_labels[c];
    e.previous = e.recent;
    e.recent = c;
    expand_all(enc, pp, jp, cap, t, step + 1, std::move(e), out);
  }
}

}  // namespace

TEST(BeamDecode, ExhaustiveWidthReturnsArgmax) {
  const int d = 4, j = 3, v = 2;
  for (uint64_t seed = 400; seed < 405; ++seed) {
    JointParams jp = random_joint(d, j, v, seed);
    PredictionNetParams pp = random_pred(v, 3, j, seed + 7);
    Tensor enc = random_enc(2, d, seed + 14);
    std::vector<detail::BeamEntry> all;
    expand_all(enc, pp, jp, 2, 0, 0, detail::BeamEntry{}, all);
    std::sort(all.begin(), all.end(), detail::beam_better);
    auto beams = beam_decode(enc, pp, jp, (int)all.size() + 1, 2);
    ASSERT_FALSE(beams.empty());
    EXPECT_EQ(beams[0].tokens, all[0].tokens);
    EXPECT_NEAR(beams[0].log_score, all[0].score, 1e-12);
  }
}

TEST(BeamDecode, FusionShiftsScores) {
  // a scorer that strongly prefers token 0 must be able to flip the argmax
  struct Prefer0 : LabelScorer {
    double label_logp(const std::vector<int>&, int token) const override {
      return token == 0 ? 0.0 : -10.0;
    }
  };
  const int d = 8, j = 6, v = 4;
  JointParams jp = random_joint(d, j, v, 500);
  PredictionNetParams pp = random_pred(v, 4, j, 501);
  Tensor enc = random_enc(4, d, 502);
  Prefer0 lm;
  auto fused = beam_decode(enc, pp, jp, 2, 3, &lm, 5.0);
  for (const auto& h : fused)
    for (int tok : h.tokens) EXPECT_EQ(tok, 0);
}
