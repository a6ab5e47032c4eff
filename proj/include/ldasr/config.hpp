// Flat key=value run configuration. Every knob of the pipeline lives here so
// a checkpoint can embed the digest of exactly what produced it. Unknown keys
// are rejected.

#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <sstream>
#include <string>

#include "ldasr/tensor.hpp"

namespace ldasr {

struct RunConfig {
  // model dimensions
  int64_t d_raw = 32;
  int64_t stack_factor = 4;  // model width d = d_raw * stack_factor
  int64_t languages = 4;
  int64_t vocab = 32;
  int64_t heads = 4;
  int64_t kernel_size = 7;
  int64_t ffn_multiplier = 2;
  int64_t causal_layers = 2;
  int64_t noncausal_layers = 2;
  int64_t max_frames = 64;
  int64_t left_context = 0;  // 0 = unlimited
  int64_t adapter_hidden = 8;
  int64_t adapter_bias = 1;
  int64_t adapter_after_last = 1;
  int64_t pred_embed = 32;
  int64_t joint_dim = 32;
  double fastemit_lambda = 5e-3;
  double pass1_weight = 0.5;
  double pass2_weight = 0.5;
  double ln_eps = 1e-6;
  double adapter_init_scale = 0.02;

  // optimizer
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double peak_lr = 1.8e-3;
  int64_t warmup_steps = 1000;
  int64_t ema_enabled = 0;
  double ema_decay = 0.999;

  // SpecAugment; masks apply to raw frames before stacking unless sa_on_raw=0
  int64_t sa_enabled = 1;
  int64_t sa_on_raw = 1;
  int64_t sa_freq_masks = 2;
  int64_t sa_freq_max = 4;
  int64_t sa_time_masks = 1;
  int64_t sa_time_max = 2;

  // synthetic corpus
  int64_t lang_tokens = 16;  // per-language token inventory (tokens 0..n-1)
  int64_t head_languages = 2;
  int64_t head_supervised = 160;
  int64_t tail_supervised = 8;
  int64_t head_unlabeled = 24;
  int64_t tail_unlabeled = 80;
  int64_t dev_per_language = 16;
  int64_t test_per_language = 30;
  double noise_scale = 0.4;
  double mean_scale = 1.0;
  double tail_confusable = 0.5;  // fraction of tail tokens aliasing head means
  int64_t min_transcript_len = 2;
  int64_t max_transcript_len = 5;
  int64_t frames_per_token = 3;

  // training
  int64_t batch_size = 8;
  int64_t backbone_steps = 600;
  int64_t lda_steps = 300;
  int64_t full_steps = 300;
  std::string sampling = "uniform";  // batch languages: uniform | proportional
  int64_t save_every = 0;            // 0 = final checkpoint only
  int64_t max_symbols_per_frame = 4;

  // noisy student training
  int64_t nst_iterations = 4;
  double keep_fraction = 0.6;
  int64_t per_language_filter = 1;
  double lm_weight = 0.3;
  int64_t beam_width = 4;
  int64_t lm_order = 3;
  double lm_smoothing = 0.5;
  int64_t student_steps = 250;
  int64_t teacher_steps = 400;

  uint64_t seed = 1234;
};

namespace detail {

struct ConfigField {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = [] {
    std::map<std::string, ConfigField> m;
    auto add_int = [&m](const std::string& name, int64_t RunConfig::* member) {
      m[name] = ConfigField{
          [member](const RunConfig& c) { return std::to_string(c.*member); },
          [member, name](RunConfig& c, const std::string& v) {
            try {
              size_t pos = 0;
              c.*member = std::stoll(v, &pos);
              if (pos != v.size()) throw std::invalid_argument(v);
            } catch (const std::exception&) {
              throw ConfigError("config: bad integer for '" + name + "': " + v);
            }
          }};
    };
    auto add_double = [&m](const std::string& name, double RunConfig::* member) {
      m[name] = ConfigField{
          [member](const RunConfig& c) { return format_double(c.*member); },
          [member, name](RunConfig& c, const std::string& v) {
            try {
              size_t pos = 0;
              c.*member = std::stod(v, &pos);
              if (pos != v.size()) throw std::invalid_argument(v);
            } catch (const std::exception&) {
              throw ConfigError("config: bad number for '" + name + "': " + v);
            }
          }};
    };
    auto add_u64 = [&m](const std::string& name, uint64_t RunConfig::* member) {
      m[name] = ConfigField{
          [member](const RunConfig& c) { return std::to_string(c.*member); },
          [member, name](RunConfig& c, const std::string& v) {
            try {
              size_t pos = 0;
              c.*member = std::stoull(v, &pos);
              if (pos != v.size()) throw std::invalid_argument(v);
            } catch (const std::exception&) {
              throw ConfigError("config: bad integer for '" + name + "': " + v);
            }
          }};
    };
    auto add_str = [&m](const std::string& name, std::string RunConfig::* member) {
      m[name] = ConfigField{[member](const RunConfig& c) { return c.*member; },
                            [member](RunConfig& c, const std::string& v) { c.*member = v; }};
    };

    add_int("d_raw", &RunConfig::d_raw);
    add_int("stack_factor", &RunConfig::stack_factor);
    add_int("languages", &RunConfig::languages);
    add_int("vocab", &RunConfig::vocab);
    add_int("heads", &RunConfig::heads);
    add_int("kernel_size", &RunConfig::kernel_size);
    add_int("ffn_multiplier", &RunConfig::ffn_multiplier);
    add_int("causal_layers", &RunConfig::causal_layers);
    add_int("noncausal_layers", &RunConfig::noncausal_layers);
    add_int("max_frames", &RunConfig::max_frames);
    add_int("left_context", &RunConfig::left_context);
    add_int("adapter_hidden", &RunConfig::adapter_hidden);
    add_int("adapter_bias", &RunConfig::adapter_bias);
    add_int("adapter_after_last", &RunConfig::adapter_after_last);
    add_int("pred_embed", &RunConfig::pred_embed);
    add_int("joint_dim", &RunConfig::joint_dim);
    add_double("fastemit_lambda", &RunConfig::fastemit_lambda);
    add_double("pass1_weight", &RunConfig::pass1_weight);
    add_double("pass2_weight", &RunConfig::pass2_weight);
    add_double("ln_eps", &RunConfig::ln_eps);
    add_double("adapter_init_scale", &RunConfig::adapter_init_scale);
    add_double("beta1", &RunConfig::beta1);
    add_double("beta2", &RunConfig::beta2);
    add_double("adam_eps", &RunConfig::adam_eps);
    add_double("peak_lr", &RunConfig::peak_lr);
    add_int("warmup_steps", &RunConfig::warmup_steps);
    add_int("ema_enabled", &RunConfig::ema_enabled);
    add_double("ema_decay", &RunConfig::ema_decay);
    add_int("sa_enabled", &RunConfig::sa_enabled);
    add_int("sa_on_raw", &RunConfig::sa_on_raw);
    add_int("sa_freq_masks", &RunConfig::sa_freq_masks);
    add_int("sa_freq_max", &RunConfig::sa_freq_max);
    add_int("sa_time_masks", &RunConfig::sa_time_masks);
    add_int("sa_time_max", &RunConfig::sa_time_max);
    add_int("lang_tokens", &RunConfig::lang_tokens);
    add_int("head_languages", &RunConfig::head_languages);
    add_int("head_supervised", &RunConfig::head_supervised);
    add_int("tail_supervised", &RunConfig::tail_supervised);
    add_int("head_unlabeled", &RunConfig::head_unlabeled);
    add_int("tail_unlabeled", &RunConfig::tail_unlabeled);
    add_int("dev_per_language", &RunConfig::dev_per_language);
    add_int("test_per_language", &RunConfig::test_per_language);
    add_double("noise_scale", &RunConfig::noise_scale);
    add_double("mean_scale", &RunConfig::mean_scale);
    add_double("tail_confusable", &RunConfig::tail_confusable);
    add_int("min_transcript_len", &RunConfig::min_transcript_len);
    add_int("max_transcript_len", &RunConfig::max_transcript_len);
    add_int("frames_per_token", &RunConfig::frames_per_token);
    add_int("batch_size", &RunConfig::batch_size);
    add_int("backbone_steps", &RunConfig::backbone_steps);
    add_int("lda_steps", &RunConfig::lda_steps);
    add_int("full_steps", &RunConfig::full_steps);
    add_str("sampling", &RunConfig::sampling);
    add_int("save_every", &RunConfig::save_every);
    add_int("max_symbols_per_frame", &RunConfig::max_symbols_per_frame);
    add_int("nst_iterations", &RunConfig::nst_iterations);
    add_double("keep_fraction", &RunConfig::keep_fraction);
    add_int("per_language_filter", &RunConfig::per_language_filter);
    add_double("lm_weight", &RunConfig::lm_weight);
    add_int("beam_width", &RunConfig::beam_width);
    add_int("lm_order", &RunConfig::lm_order);
    add_double("lm_smoothing", &RunConfig::lm_smoothing);
    add_int("student_steps", &RunConfig::student_steps);
    add_int("teacher_steps", &RunConfig::teacher_steps);
    add_u64("seed", &RunConfig::seed);
    return m;
  }();
  return fields;
}

}  // namespace detail

inline void validate_config(const RunConfig& c) {
  if (c.languages < 1) throw ConfigError("config: languages must be >= 1");
  if (c.vocab < 2) throw ConfigError("config: vocab must be >= 2");
  if (c.lang_tokens < 1 || c.lang_tokens > c.vocab)
    throw ConfigError("config: lang_tokens must be in [1, vocab]");
  if (c.head_languages < 0 || c.head_languages > c.languages)
    throw ConfigError("config: head_languages must be in [0, languages]");
  if (c.adapter_hidden < 1 || c.adapter_hidden >= c.d_raw * c.stack_factor)
    throw ConfigError("config: adapter_hidden must satisfy 1 <= h < d");
  if (c.sampling != "uniform" && c.sampling != "proportional")
    throw ConfigError("config: sampling must be 'uniform' or 'proportional'");
  if (c.nst_iterations < 1) throw ConfigError("config: nst_iterations must be >= 1");
  if (!(c.keep_fraction > 0.0 && c.keep_fraction <= 1.0))
    throw ConfigError("config: keep_fraction must be in (0, 1]");
  if (c.min_transcript_len < 1 || c.max_transcript_len < c.min_transcript_len)
    throw ConfigError("config: bad transcript length range");
  if (c.kernel_size % 2 == 0) throw ConfigError("config: kernel_size must be odd");
  if (c.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (c.warmup_steps < 1) throw ConfigError("config: warmup_steps must be >= 1");
}

// Parses "key=value" lines; '#' starts a comment, blank lines are skipped.
inline RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
  const auto& fields = detail::config_fields();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    auto it = fields.find(key);
    if (it == fields.end())
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second.set(cfg, value);
  }
  validate_config(cfg);
  return cfg;
}

inline RunConfig parse_run_config_string(const std::string& text) {
  std::istringstream is(text);
  return parse_run_config(is);
}

// Canonical serialization: sorted key=value lines. The digest hashes exactly
// this text.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : detail::config_fields())
    out += name + "=" + field.get(cfg) + "\n";
  return out;
}

inline uint64_t config_digest(const RunConfig& cfg) {
  const std::string text = serialize_config(cfg);
  return fnv1a64(text.data(), text.size());
}

}  // namespace ldasr
