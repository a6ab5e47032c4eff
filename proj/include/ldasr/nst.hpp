// Noisy student training: LM-fused teacher transcription of unlabeled data,
// normalized-score filtering, and the iterative teacher -> student loop whose
// final student is the adapter-finetuned model over the frozen backbone.
//
// Teachers transcribe with the non-causal second pass. Intermediate students
// are full models re-trained from the base backbone on supervised plus kept
// pseudo-labels; only the last iteration trains adapter slices alone.

#pragma once

#include <algorithm>

#include "ldasr/checkpoint.hpp"
#include "ldasr/harness.hpp"
#include "ldasr/ngram.hpp"
#include "ldasr/train.hpp"

namespace ldasr {

struct PseudoLabel {
  size_t utterance_index = 0;  // into the unlabeled list
  std::string utterance_id;
  int language_id = 0;
  std::vector<int> tokens;
  double am_logprob = 0.0;
  double lm_logprob = 0.0;
  double normalized_score = 0.0;  // fused log-prob / max(1, token count)
  int teacher_iteration = 0;
};

inline std::vector<PseudoLabel> transcribe_unlabeled(const Model& teacher,
                                                     const std::vector<Utterance>& unlabeled,
                                                     const NGramLM* lm, const RunConfig& rc,
                                                     int teacher_iteration) {
  NoGradGuard ng;
  std::vector<PseudoLabel> out;
  for (size_t i = 0; i < unlabeled.size(); ++i) {
    const Utterance& u = unlabeled[i];
    if (u.supervised || !u.transcript.empty())
      throw ContractError("transcribe_unlabeled: labeled utterance in unlabeled set");
    Utterance stacked = u;
    stacked.features = frame_stack(u.features, (int)rc.stack_factor);
    Batch batch = make_batch({stacked}, 0, teacher.cfg.languages);
    EncoderOutputs enc = teacher.encode(batch);
    const int64_t t = stacked.features.dim(0), d = teacher.cfg.backbone.width;
    Tensor enc2 = Tensor::zeros({t, d});
    std::copy(enc.second_pass.ptr(), enc.second_pass.ptr() + t * d, enc2.ptr());
    auto hyps = beam_decode_fused(enc2, teacher.pred, teacher.joint, (int)rc.beam_width,
                                  (int)rc.max_symbols_per_frame, lm, rc.lm_weight);
    if (hyps.empty()) throw ContractError("transcribe_unlabeled: empty beam");
    const FusedHypothesis& best = hyps.front();
    PseudoLabel label;
    label.utterance_index = i;
    label.utterance_id = u.id;
    label.language_id = u.language_id;
    label.tokens = best.tokens;
    label.am_logprob = best.am_logprob;
    label.lm_logprob = best.lm_logprob;
    label.normalized_score =
        best.log_score / (double)std::max<size_t>(1, best.tokens.size());
    label.teacher_iteration = teacher_iteration;
    out.push_back(std::move(label));
  }
  return out;
}

// Keep the best ceil(fraction * count) by normalized score, ties broken by
// utterance ID ascending; grouped per language when requested. Pure subset:
// kept labels are returned unchanged.
inline std::vector<PseudoLabel> filter_transcripts(const std::vector<PseudoLabel>& labels,
                                                   double keep_fraction, bool per_language) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw ContractError("filter_transcripts: keep_fraction must be in (0, 1]");
  if (labels.empty()) return {};
  std::map<int, std::vector<size_t>> groups;
  for (size_t i = 0; i < labels.size(); ++i)
    groups[per_language ? labels[i].language_id : 0].push_back(i);
  std::vector<size_t> kept_idx;
  for (auto& [lang, idx] : groups) {
    (void)lang;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
      if (labels[a].normalized_score != labels[b].normalized_score)
        return labels[a].normalized_score > labels[b].normalized_score;
      return labels[a].utterance_id < labels[b].utterance_id;
    });
    const size_t keep = (size_t)std::ceil(keep_fraction * (double)idx.size());
    for (size_t i = 0; i < keep && i < idx.size(); ++i) kept_idx.push_back(idx[i]);
  }
  std::sort(kept_idx.begin(), kept_idx.end());
  std::vector<PseudoLabel> kept;
  for (size_t i : kept_idx) kept.push_back(labels[i]);
  return kept;
}

struct NstIterationRecord {
  int iteration = 0;
  std::map<int, int64_t> kept_per_language;
  std::map<int, double> dev_wer;  // cascaded pass
  int64_t training_set_size = 0;
};

struct NstResult {
  Model final_model;
  std::vector<NstIterationRecord> ledger;
  std::vector<std::string> final_trainable_names;
};

inline void write_nst_ledger(std::ostream& os, const std::vector<NstIterationRecord>& ledger) {
  os << "iteration\tlanguage\tkept\tdev_wer\n";
  os << std::setprecision(17);
  for (const auto& rec : ledger)
    for (const auto& [lang, wer_value] : rec.dev_wer) {
      const auto it = rec.kept_per_language.find(lang);
      os << rec.iteration << '\t' << lang << '\t'
         << (it == rec.kept_per_language.end() ? 0 : it->second) << '\t' << wer_value << '\n';
    }
}

inline NstResult run_nst(const Model& base_backbone, const std::vector<Utterance>& supervised,
                         const std::vector<Utterance>& unlabeled,
                         const std::vector<Utterance>& dev, const RunConfig& rc) {
  if (supervised.empty()) throw DataError("run_nst: no supervised data");
  std::vector<std::vector<int>> lm_corpus;
  for (const auto& u : supervised) lm_corpus.push_back(u.transcript);
  const NGramLM lm =
      NGramLM::train(lm_corpus, (int)rc.lm_order, rc.lm_smoothing, (int)rc.vocab);

  // teacher 0: full model on supervised data only, with SpecAugment
  Model teacher = clone_model(base_backbone);
  {
    TrainOptions o = train_options_from(rc, rc.teacher_steps, derive_seed(rc.seed, "nst/teacher0"));
    try {
      train_model(teacher, supervised, teacher.all_params(), o);
    } catch (const TrainError& e) {
      throw TrainError("nst teacher 0: " + std::string(e.what()));
    }
  }

  NstResult result;
  for (int iter = 1; iter <= (int)rc.nst_iterations; ++iter) {
    const bool final_iteration = iter == (int)rc.nst_iterations;
    auto pseudo = transcribe_unlabeled(teacher, unlabeled, &lm, rc, iter - 1);
    auto kept = filter_transcripts(pseudo, rc.keep_fraction, rc.per_language_filter != 0);

    std::vector<Utterance> train_set = supervised;
    NstIterationRecord rec;
    rec.iteration = iter;
    for (const auto& label : kept) {
      rec.kept_per_language[label.language_id] += 1;
      if (label.tokens.empty()) continue;  // an empty transcription trains nothing
      Utterance u = unlabeled[label.utterance_index];
      u.transcript = label.tokens;
      u.supervised = true;
      train_set.push_back(std::move(u));
    }
    rec.training_set_size = (int64_t)train_set.size();

    Model student = clone_model(base_backbone);
    const uint64_t seed = derive_seed(rc.seed, "nst/student" + std::to_string(iter));
    try {
      if (final_iteration) {
        TrainOptions o = train_options_from(rc, rc.lda_steps, seed);
        const auto trainable = student.adapter_slice_params();
        for (const auto& [name, t] : trainable) {
          (void)t;
          result.final_trainable_names.push_back(name);
        }
        train_model(student, train_set, trainable, o);
      } else {
        TrainOptions o = train_options_from(rc, rc.student_steps, seed);
        train_model(student, train_set, student.all_params(), o);
      }
    } catch (const TrainError& e) {
      throw TrainError("nst iteration " + std::to_string(iter) + ": " + std::string(e.what()));
    }

    EvalReport dev_report =
        evaluate_model(student, dev, (int)rc.stack_factor, (int)rc.max_symbols_per_frame,
                       "nst_iter" + std::to_string(iter), iter);
    rec.dev_wer = dev_report.cascaded_wer;
    result.ledger.push_back(std::move(rec));
    teacher = std::move(student);
  }
  result.final_model = std::move(teacher);
  return result;
}

}  // namespace ldasr
