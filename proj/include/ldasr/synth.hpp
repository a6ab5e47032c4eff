// Desk-scale corpus construction from a RunConfig: head languages with
// abundant data, tail languages with scarce data, and a controllable fraction
// of tail tokens whose emission means alias a head language's means for a
// *different* token. The shared backbone cannot tell those apart without
// language conditioning, which is exactly the gap adapters close.

#pragma once

#include "ldasr/config.hpp"
#include "ldasr/frontend.hpp"

namespace ldasr {

inline std::vector<LanguageSpec> make_language_specs(const RunConfig& rc) {
  std::vector<LanguageSpec> specs;
  const int inventory = (int)rc.lang_tokens;
  std::vector<Tensor> head_means;
  for (int k = 0; k < (int)rc.languages; ++k) {
    LanguageSpec s;
    s.language_id = k;
    s.noise_scale = (float)rc.noise_scale;
    const bool head = k < (int)rc.head_languages;
    s.supervised_count = (int)(head ? rc.head_supervised : rc.tail_supervised);
    s.unlabeled_count = (int)(head ? rc.head_unlabeled : rc.tail_unlabeled);
    s.emission_means = make_emission_means(
        inventory, (int)rc.d_raw, derive_seed(rc.seed, "emission/" + std::to_string(k)),
        (float)rc.mean_scale);
    if (head) {
      head_means.push_back(s.emission_means);
    } else if (!head_means.empty() && rc.tail_confusable > 0.0) {
      // alias the first ceil(fraction * inventory) tail tokens onto a head
      // language's means, shifted by one token, plus a small jitter
      const Tensor& donor = head_means[k % head_means.size()];
      const int aliased = (int)std::ceil(rc.tail_confusable * inventory);
      Rng jitter(derive_seed(rc.seed, "alias/" + std::to_string(k)));
      for (int tok = 0; tok < aliased; ++tok) {
        const int donor_tok = (tok + 1) % inventory;
        for (int64_t j = 0; j < rc.d_raw; ++j)
          s.emission_means.ptr()[tok * rc.d_raw + j] =
              donor.ptr()[donor_tok * rc.d_raw + j] +
              jitter.normal(0.15f * (float)rc.mean_scale);
      }
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

struct CorpusBundle {
  std::vector<Utterance> train_supervised;
  std::vector<Utterance> unlabeled;
  std::vector<std::vector<int>> unlabeled_truth;  // test oracle only
  std::vector<Utterance> dev;
  std::vector<Utterance> test;
};

inline CorpusBundle make_corpus(const RunConfig& rc) {
  CorpusParams p;
  p.min_transcript_len = (int)rc.min_transcript_len;
  p.max_transcript_len = (int)rc.max_transcript_len;
  p.frames_per_token = (int)rc.frames_per_token;

  std::vector<LanguageSpec> specs = make_language_specs(rc);
  CorpusBundle bundle;
  {
    GeneratedCorpus train = generate_corpus(specs, p, derive_seed(rc.seed, "corpus/train"));
    bundle.train_supervised = std::move(train.supervised);
    bundle.unlabeled = std::move(train.unlabeled);
    bundle.unlabeled_truth = std::move(train.unlabeled_truth);
  }
  auto eval_split = [&](const char* name, int64_t count) {
    std::vector<LanguageSpec> eval_specs = specs;
    for (auto& s : eval_specs) {
      s.supervised_count = (int)count;
      s.unlabeled_count = 0;
    }
    return generate_corpus(eval_specs, p, derive_seed(rc.seed, std::string("corpus/") + name))
        .supervised;
  };
  bundle.dev = eval_split("dev", rc.dev_per_language);
  bundle.test = eval_split("test", rc.test_per_language);
  return bundle;
}

}  // namespace ldasr
