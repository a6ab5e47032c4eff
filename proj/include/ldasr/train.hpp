// Batch-sampling training loop shared by backbone training, adapter
// finetuning, the full-finetune baseline, and the NST students. Single
// threaded; every random draw derives from TrainOptions::seed.

#pragma once

#include <functional>

#include "ldasr/model.hpp"
#include "ldasr/optim.hpp"

namespace ldasr {

struct TrainOptions {
  int64_t steps = 100;
  int batch_size = 8;
  std::string sampling = "uniform";  // uniform over languages | proportional to data
  uint64_t seed = 1;
  int stack_factor = 4;
  bool specaugment = true;
  bool sa_on_raw = true;  // mask raw frames before stacking, or stacked frames after
  int sa_freq_masks = 2, sa_freq_max = 4, sa_time_masks = 1, sa_time_max = 2;
  AdamConfig adam;
  // called after each optimizer step whose (1-based) index hits save_every
  int64_t save_every = 0;
  std::function<void(int64_t, const Model&)> snapshot_hook;
};

inline TrainOptions train_options_from(const RunConfig& rc, int64_t steps, uint64_t seed) {
  TrainOptions o;
  o.steps = steps;
  o.batch_size = (int)rc.batch_size;
  o.sampling = rc.sampling;
  o.seed = seed;
  o.stack_factor = (int)rc.stack_factor;
  o.specaugment = rc.sa_enabled != 0;
  o.sa_on_raw = rc.sa_on_raw != 0;
  o.sa_freq_masks = (int)rc.sa_freq_masks;
  o.sa_freq_max = (int)rc.sa_freq_max;
  o.sa_time_masks = (int)rc.sa_time_masks;
  o.sa_time_max = (int)rc.sa_time_max;
  o.adam.beta1 = rc.beta1;
  o.adam.beta2 = rc.beta2;
  o.adam.epsilon = rc.adam_eps;
  o.adam.peak_lr = rc.peak_lr;
  o.adam.warmup_steps = rc.warmup_steps;
  o.adam.ema_enabled = rc.ema_enabled != 0;
  o.adam.ema_decay = rc.ema_decay;
  return o;
}

struct TrainResult {
  int64_t steps_run = 0;
  double last_loss = 0.0;
  std::map<std::string, Tensor> ema_shadow;  // empty unless EMA was enabled
};

// Stacks one utterance for the model, with training-time SpecAugment applied
// to the raw frames first.
inline Utterance prepare_utterance(const Utterance& raw, const TrainOptions& o, bool training,
                                   uint64_t aug_seed) {
  Utterance out = raw;
  Tensor feats = raw.features;
  const bool augment = training && o.specaugment;
  if (augment && o.sa_on_raw)
    feats = spec_augment(feats, o.sa_freq_masks, o.sa_freq_max, o.sa_time_masks, o.sa_time_max,
                         aug_seed);
  feats = frame_stack(feats, o.stack_factor);
  if (augment && !o.sa_on_raw)
    feats = spec_augment(feats, o.sa_freq_masks, o.sa_freq_max, o.sa_time_masks, o.sa_time_max,
                         aug_seed);
  out.features = feats;
  return out;
}

// Trains exactly `trainable` in place; every other parameter is left frozen
// (and is bit-identical afterwards). `data` holds raw, labeled utterances.
inline TrainResult train_model(Model& model, const std::vector<Utterance>& data,
                               const std::map<std::string, Tensor>& trainable,
                               const TrainOptions& opts) {
  if (data.empty()) throw DataError("train_model: empty training set");
  for (const auto& u : data)
    if (u.transcript.empty()) throw ContractError("train_model: unlabeled utterance in data");

  std::vector<std::vector<size_t>> by_language(model.cfg.languages);
  for (size_t i = 0; i < data.size(); ++i) {
    if (data[i].language_id < 0 || data[i].language_id >= model.cfg.languages)
      throw std::out_of_range("train_model: utterance language outside model range");
    by_language[data[i].language_id].push_back(i);
  }
  std::vector<int> langs_with_data;
  for (int k = 0; k < model.cfg.languages; ++k)
    if (!by_language[k].empty()) langs_with_data.push_back(k);

  model.mark_trainable(trainable);
  AdamOptimizer opt(trainable, opts.adam);
  Rng sampler(derive_seed(opts.seed, "sampler"));

  TrainResult result;
  for (int64_t step = 1; step <= opts.steps; ++step) {
    std::vector<Utterance> batch_utts;
    for (int slot = 0; slot < opts.batch_size; ++slot) {
      size_t pick;
      if (opts.sampling == "proportional") {
        pick = (size_t)sampler.uniform_int(0, (int)data.size() - 1);
      } else {
        const int lang =
            langs_with_data[sampler.uniform_int(0, (int)langs_with_data.size() - 1)];
        const auto& pool = by_language[lang];
        pick = pool[sampler.uniform_int(0, (int)pool.size() - 1)];
      }
      const uint64_t aug_seed = derive_seed(
          opts.seed, "aug/" + std::to_string(step) + "/" + std::to_string(slot));
      batch_utts.push_back(prepare_utterance(data[pick], opts, true, aug_seed));
    }
    Batch batch = make_batch(batch_utts, /*pad_token=*/0, model.cfg.languages);
    Tensor loss = model.loss(batch);
    if (!std::isfinite(loss.item()))
      throw TrainError("train_model: non-finite loss at step " + std::to_string(step));
    opt.zero_grad();
    backward(loss);
    opt.step();
    result.last_loss = loss.item();
    result.steps_run = step;
    if (opts.save_every > 0 && opts.snapshot_hook && step % opts.save_every == 0)
      opts.snapshot_hook(step, model);
  }
  if (opts.adam.ema_enabled) result.ema_shadow = opt.ema_shadow();
  return result;
}

}  // namespace ldasr
