// Add-k smoothed n-gram language model over token IDs, used for shallow
// fusion during teacher transcription. Events per context are the V tokens
// plus an end-of-sequence marker, so conditionals sum to 1.

#pragma once

#include <unordered_map>
#include <vector>

#include "ldasr/transducer.hpp"

namespace ldasr {

class NGramLM : public LabelScorer {
 public:
  NGramLM() = default;

  static NGramLM train(const std::vector<std::vector<int>>& transcripts, int order,
                       double smoothing, int vocab) {
    if (order < 1) throw ConfigError("ngram: order must be >= 1");
    if (smoothing < 0.0) throw ConfigError("ngram: smoothing must be >= 0");
    if (transcripts.empty()) throw ConfigError("ngram: empty training corpus");
    NGramLM lm;
    lm.order_ = order;
    lm.vocab_ = vocab;
    lm.k_ = smoothing;
    for (const auto& t : transcripts) {
      for (int tok : t)
        if (tok < 0 || tok >= vocab) throw DataError("ngram: token outside vocabulary");
      std::vector<int> ctx(order - 1, kBos);
      auto push = [&](int event) {
        const uint64_t key = lm.context_key(ctx);
        auto& entry = lm.counts_[key];
        ++entry.per_event[event];
        ++entry.total;
        if (order > 1) {
          ctx.erase(ctx.begin());
          ctx.push_back(event);
        }
      };
      for (int tok : t) push(tok);
      push(lm.eos());
    }
    return lm;
  }

  int order() const { return order_; }
  int eos() const { return vocab_; }

  // log P(event | last order-1 tokens); event may be the EOS marker.
  double event_logp(const std::vector<int>& history, int event) const {
    std::vector<int> ctx(order_ - 1, kBos);
    const int n = (int)history.size();
    for (int i = 0; i < order_ - 1; ++i)
      if (n - (order_ - 1) + i >= 0) ctx[i] = history[n - (order_ - 1) + i];
    const int events = vocab_ + 1;
    auto it = counts_.find(context_key(ctx));
    if (it == counts_.end()) return std::log(1.0 / events);  // unseen context: uniform
    const auto& entry = it->second;
    auto cit = entry.per_event.find(event);
    const double c = cit == entry.per_event.end() ? 0.0 : (double)cit->second;
    return std::log((c + k_) / ((double)entry.total + k_ * events));
  }

  double label_logp(const std::vector<int>& context, int token) const override {
    return event_logp(context, token);
  }

  // total log-probability of a complete sequence including the end marker
  double sequence_logp(const std::vector<int>& tokens) const {
    double total = 0.0;
    std::vector<int> prefix;
    for (int tok : tokens) {
      total += event_logp(prefix, tok);
      prefix.push_back(tok);
    }
    return total + event_logp(prefix, eos());
  }

 private:
  static constexpr int kBos = -1;

  uint64_t context_key(const std::vector<int>& ctx) const {
    uint64_t h = 1469598103934665603ull;
    for (int c : ctx) h = fnv1a64(&c, sizeof(c), h);
    return h;
  }

  struct Counts {
    std::unordered_map<int, int64_t> per_event;
    int64_t total = 0;
  };

  int order_ = 1;
  int vocab_ = 0;
  double k_ = 0.0;
  std::unordered_map<uint64_t, Counts> counts_;
};

// Shallow-fusion combination used everywhere a teacher score meets the LM.
inline double fused_score(double am_logprob, double lm_logprob, double lm_weight) {
  return am_logprob + lm_weight * lm_logprob;
}

}  // namespace ldasr
