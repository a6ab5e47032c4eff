// Evaluation harness: WER, per-language model evaluation over both passes,
// peak-checkpoint selection, and relative-WER reporting. Report files are
// UTF-8 tab-separated tables.

#pragma once

#include <iomanip>
#include <map>
#include <ostream>
#include <set>

#include "ldasr/model.hpp"
#include "ldasr/train.hpp"

namespace ldasr {

// Levenshtein edit distance (unit costs) over reference length, floored at 1.
inline double wer(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
  const size_t n = reference.size(), m = hypothesis.size();
  std::vector<int64_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = (int64_t)j;
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = (int64_t)i;
    for (size_t j = 1; j <= m; ++j) {
      const int64_t sub = prev[j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return (double)prev[m] / (double)std::max<size_t>(1, n);
}

struct DecodeResult {
  Hypothesis first_pass;
  Hypothesis second_pass;
};

// Greedy decode of one raw utterance through both passes.
inline DecodeResult decode_utterance(const Model& model, const Utterance& raw, int stack_factor,
                                     int max_symbols_per_frame) {
  NoGradGuard ng;
  Utterance stacked = raw;
  stacked.features = frame_stack(raw.features, stack_factor);
  Batch batch = make_batch({stacked}, 0, model.cfg.languages);
  EncoderOutputs out = model.encode(batch);
  const int64_t t = stacked.features.dim(0), d = model.cfg.backbone.width;
  Tensor enc1 = Tensor::zeros({t, d}), enc2 = Tensor::zeros({t, d});
  std::copy(out.first_pass.ptr(), out.first_pass.ptr() + t * d, enc1.ptr());
  std::copy(out.second_pass.ptr(), out.second_pass.ptr() + t * d, enc2.ptr());
  DecodeResult r;
  r.first_pass = greedy_decode(enc1, model.pred, model.joint, max_symbols_per_frame);
  r.second_pass = greedy_decode(enc2, model.pred, model.joint, max_symbols_per_frame);
  return r;
}

struct EvalReport {
  std::string model_id;
  int64_t step = 0;
  std::map<int, double> causal_wer;    // per language, utterance-weighted mean
  std::map<int, double> cascaded_wer;  // second (non-causal) pass
  std::map<int, int64_t> utterances;
};

inline EvalReport evaluate_model(const Model& model, const std::vector<Utterance>& test_set,
                                 int stack_factor, int max_symbols_per_frame,
                                 const std::string& model_id = "", int64_t step = 0) {
  EvalReport report;
  report.model_id = model_id;
  report.step = step;
  std::map<int, double> sum1, sum2;
  for (const Utterance& u : test_set) {
    if (u.language_id < 0 || u.language_id >= model.cfg.languages)
      throw std::out_of_range("evaluate_model: utterance language " +
                              std::to_string(u.language_id) + " outside model range");
    if (u.transcript.empty())
      throw ContractError("evaluate_model: test utterance without reference transcript");
    DecodeResult r = decode_utterance(model, u, stack_factor, max_symbols_per_frame);
    sum1[u.language_id] += wer(u.transcript, r.first_pass.tokens);
    sum2[u.language_id] += wer(u.transcript, r.second_pass.tokens);
    report.utterances[u.language_id] += 1;
  }
  for (const auto& [lang, count] : report.utterances) {
    report.causal_wer[lang] = sum1[lang] / (double)count;
    report.cascaded_wer[lang] = sum2[lang] / (double)count;
  }
  return report;
}

// Per language, the step with the lowest cascaded-pass WER; ties go to the
// earliest step.
struct PeakChoice {
  int64_t step = 0;
  double wer = 0.0;
  std::string model_id;
};

inline std::map<int, PeakChoice> select_peak_checkpoints(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ContractError("select_peak_checkpoints: no reports");
  std::map<int, PeakChoice> best;
  for (const EvalReport& r : reports)
    for (const auto& [lang, w] : r.cascaded_wer) {
      auto it = best.find(lang);
      if (it == best.end() || w < it->second.wer ||
          (w == it->second.wer && r.step < it->second.step))
        best[lang] = PeakChoice{r.step, w, r.model_id};
    }
  return best;
}

struct WerrReport {
  std::map<int, double> per_language;  // (base - cand) / base
  std::set<int> undefined;             // zero-WER baselines, excluded from the average
  double macro_average = 0.0;
};

inline WerrReport report_werr(const EvalReport& baseline, const EvalReport& candidate) {
  WerrReport out;
  std::set<int> base_langs, cand_langs;
  for (const auto& [l, w] : baseline.cascaded_wer) base_langs.insert(l);
  for (const auto& [l, w] : candidate.cascaded_wer) cand_langs.insert(l);
  if (base_langs != cand_langs)
    throw ContractError("report_werr: language sets differ between reports");
  double sum = 0.0;
  int64_t n = 0;
  for (int lang : base_langs) {
    const double base = baseline.cascaded_wer.at(lang);
    const double cand = candidate.cascaded_wer.at(lang);
    if (base == 0.0) {
      out.undefined.insert(lang);
      continue;
    }
    const double reduction = (base - cand) / base;  // negative = regression, never clipped
    out.per_language[lang] = reduction;
    sum += reduction;
    ++n;
  }
  out.macro_average = n > 0 ? sum / (double)n : 0.0;
  return out;
}

// --- TSV report files -----------------------------------------------------

inline void write_eval_report(std::ostream& os, const EvalReport& r) {
  os << "#model\t" << r.model_id << "\n#step\t" << r.step << "\n";
  os << "language\tcausal_wer\tcascaded_wer\tutterances\n";
  os << std::setprecision(17);
  for (const auto& [lang, count] : r.utterances)
    os << lang << '\t' << r.causal_wer.at(lang) << '\t' << r.cascaded_wer.at(lang) << '\t'
       << count << '\n';
}

inline EvalReport read_eval_report(std::istream& is) {
  EvalReport r;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string tag, value;
      std::getline(ls, tag, '\t');
      std::getline(ls, value);
      if (tag == "#model") r.model_id = value;
      if (tag == "#step") r.step = std::stoll(value);
      continue;
    }
    if (line.rfind("language\t", 0) == 0) continue;
    int lang;
    double w1, w2;
    int64_t count;
    ls >> lang >> w1 >> w2 >> count;
    if (!ls) throw DataError("malformed eval report line: " + line);
    r.causal_wer[lang] = w1;
    r.cascaded_wer[lang] = w2;
    r.utterances[lang] = count;
  }
  return r;
}

inline void write_werr_report(std::ostream& os, const WerrReport& r) {
  os << "language\trelative_wer_reduction\n";
  os << std::setprecision(17);
  for (const auto& [lang, red] : r.per_language) os << lang << '\t' << red << '\n';
  for (int lang : r.undefined) os << lang << "\tundefined\n";
  os << "average\t" << r.macro_average << '\n';
}

}  // namespace ldasr
