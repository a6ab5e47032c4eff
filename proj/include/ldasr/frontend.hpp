// Synthetic multilingual corpus generation, frame stacking, SpecAugment, and
// mixed-language batch assembly.
//
// Each language owns a token -> mean-feature-vector emission map. An utterance
// is its transcript's means repeated frames_per_token times plus white noise,
// so a noiseless corpus is exactly decodable and corpus generation is a pure
// function of (spec, seed).

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ldasr/tensor.hpp"

namespace ldasr {

struct Utterance {
  Tensor features;              // T_raw x d_raw (raw) or T x d (stacked)
  int language_id = 0;
  std::vector<int> transcript;  // empty iff unlabeled
  bool supervised = true;
  std::string id;               // stable identifier, used for tie-breaks
};

struct Batch {
  Tensor stacked_features;         // B x T x d
  std::vector<int> feature_lengths;  // valid stacked frames per row
  Tensor language_onehot;          // B x K
  std::vector<int> language_ids;   // convenience copy of the argmax
  std::vector<int> targets;        // B x max_targets, padded
  std::vector<int> target_lengths;
  int64_t max_targets = 0;
  int64_t size() const { return stacked_features.defined() ? stacked_features.dim(0) : 0; }
};

struct LanguageSpec {
  int language_id = 0;
  Tensor emission_means;  // inventory x d_raw, row i = mean vector of token i
  float noise_scale = 0.0f;
  int supervised_count = 0;
  int unlabeled_count = 0;
};

struct CorpusParams {
  int min_transcript_len = 2;
  int max_transcript_len = 5;
  int frames_per_token = 3;
};

struct GeneratedCorpus {
  std::vector<Utterance> supervised;
  std::vector<Utterance> unlabeled;
  // Generating transcripts of the unlabeled set, index-aligned. Only tests and
  // the evaluation harness may look at these.
  std::vector<std::vector<int>> unlabeled_truth;
};

// Random emission map with means drawn once per (seed, language).
inline Tensor make_emission_means(int inventory, int d_raw, uint64_t seed, float mean_scale) {
  Tensor m = Tensor::zeros({inventory, d_raw});
  Rng rng(seed);
  fill_normal(m, rng, mean_scale);
  return m;
}

namespace detail {

inline Utterance synth_utterance(const LanguageSpec& spec, const CorpusParams& p, uint64_t seed,
                                 const std::string& id) {
  Rng rng(seed);
  const int inventory = (int)spec.emission_means.dim(0);
  const int d_raw = (int)spec.emission_means.dim(1);
  const int len = rng.uniform_int(p.min_transcript_len, p.max_transcript_len);
  std::vector<int> tokens(len);
  for (int& t : tokens) t = rng.uniform_int(0, inventory - 1);
  const int t_raw = len * p.frames_per_token;
  Tensor feats = Tensor::zeros({t_raw, d_raw});
  for (int t = 0; t < t_raw; ++t) {
    const int tok = tokens[t / p.frames_per_token];
    const float* mean = spec.emission_means.ptr() + (int64_t)tok * d_raw;
    float* row = feats.ptr() + (int64_t)t * d_raw;
    for (int j = 0; j < d_raw; ++j) row[j] = mean[j] + rng.normal(spec.noise_scale);
  }
  Utterance u;
  u.features = feats;
  u.language_id = spec.language_id;
  u.transcript = std::move(tokens);
  u.supervised = true;
  u.id = id;
  return u;
}

}  // namespace detail

inline GeneratedCorpus generate_corpus(const std::vector<LanguageSpec>& specs,
                                       const CorpusParams& params, uint64_t seed) {
  if (specs.empty()) throw ConfigError("generate_corpus: no language specs");
  std::vector<bool> seen;
  for (const auto& s : specs) {
    if (s.language_id < 0) throw ConfigError("generate_corpus: negative language_id");
    if ((size_t)s.language_id >= seen.size()) seen.resize(s.language_id + 1, false);
    if (seen[s.language_id])
      throw ConfigError("generate_corpus: duplicate language_id " +
                        std::to_string(s.language_id));
    seen[s.language_id] = true;
    if (s.supervised_count < 0 || s.unlabeled_count < 0)
      throw ConfigError("generate_corpus: negative corpus count");
  }
  GeneratedCorpus out;
  for (const auto& spec : specs) {
    const std::string lang = "lang" + std::to_string(spec.language_id);
    for (int i = 0; i < spec.supervised_count; ++i) {
      const std::string id = lang + "/sup" + std::to_string(i);
      out.supervised.push_back(
          detail::synth_utterance(spec, params, derive_seed(seed, id), id));
    }
    for (int i = 0; i < spec.unlabeled_count; ++i) {
      const std::string id = lang + "/unl" + std::to_string(i);
      Utterance u = detail::synth_utterance(spec, params, derive_seed(seed, id), id);
      out.unlabeled_truth.push_back(std::move(u.transcript));
      u.transcript.clear();
      u.supervised = false;
      out.unlabeled.push_back(std::move(u));
    }
  }
  return out;
}

// T_raw x d_raw -> ceil(T_raw/factor) x (factor*d_raw); the trailing partial
// window is zero padded.
inline Tensor frame_stack(const Tensor& features, int factor) {
  if (factor < 1) throw ContractError("frame_stack: factor must be >= 1");
  if (features.rank() != 2) throw DimError("frame_stack: expects T_raw x d_raw");
  const int64_t t_raw = features.dim(0), d_raw = features.dim(1);
  const int64_t t = (t_raw + factor - 1) / factor;
  Tensor out = Tensor::zeros({t, factor * d_raw});
  for (int64_t w = 0; w < t; ++w)
    for (int64_t f = 0; f < factor; ++f) {
      const int64_t src = w * factor + f;
      if (src >= t_raw) break;
      std::copy(features.ptr() + src * d_raw, features.ptr() + (src + 1) * d_raw,
                out.ptr() + w * (factor * d_raw) + f * d_raw);
    }
  return out;
}

// Masks drawn as in SpecAugment: length ~ U[0, max_len], then a uniform start.
// Training-time only; max lengths of zero make this the identity.
inline Tensor spec_augment(const Tensor& features, int n_freq_masks, int max_freq_len,
                           int n_time_masks, int max_time_len, uint64_t seed) {
  if (n_freq_masks < 0 || max_freq_len < 0 || n_time_masks < 0 || max_time_len < 0)
    throw ContractError("spec_augment: mask parameters must be >= 0");
  const int64_t t = features.dim(0), d = features.dim(1);
  Tensor out = Tensor::from(features.shape(), features.data());
  Rng rng(seed);
  for (int m = 0; m < n_freq_masks; ++m) {
    const int len = std::min<int>(rng.uniform_int(0, max_freq_len), (int)d);
    if (len == 0) continue;
    const int start = rng.uniform_int(0, (int)d - len);
    for (int64_t r = 0; r < t; ++r)
      std::fill(out.ptr() + r * d + start, out.ptr() + r * d + start + len, 0.0f);
  }
  for (int m = 0; m < n_time_masks; ++m) {
    const int len = std::min<int>(rng.uniform_int(0, max_time_len), (int)t);
    if (len == 0) continue;
    const int start = rng.uniform_int(0, (int)t - len);
    std::fill(out.ptr() + (int64_t)start * d, out.ptr() + (int64_t)(start + len) * d, 0.0f);
  }
  return out;
}

// Pads stacked utterances to batch maxima and attaches one-hot language rows.
inline Batch make_batch(const std::vector<Utterance>& utts, int pad_token, int num_languages) {
  if (utts.empty()) throw ContractError("make_batch: empty utterance list");
  const int64_t d = utts.front().features.dim(1);
  int64_t max_t = 0, max_u = 0;
  for (const auto& u : utts) {
    if (u.features.rank() != 2 || u.features.dim(1) != d)
      throw DimError("make_batch: inconsistent feature dimensions");
    if (u.language_id < 0 || u.language_id >= num_languages)
      throw ContractError("make_batch: language_id out of range");
    max_t = std::max(max_t, u.features.dim(0));
    max_u = std::max(max_u, (int64_t)u.transcript.size());
  }
  const int64_t b = (int64_t)utts.size();
  Batch batch;
  batch.stacked_features = Tensor::zeros({b, max_t, d});
  batch.language_onehot = Tensor::zeros({b, (int64_t)num_languages});
  batch.max_targets = max_u;
  batch.targets.assign(b * std::max<int64_t>(max_u, 1), pad_token);
  for (int64_t i = 0; i < b; ++i) {
    const auto& u = utts[i];
    const int64_t t = u.features.dim(0);
    std::copy(u.features.ptr(), u.features.ptr() + t * d,
              batch.stacked_features.ptr() + i * max_t * d);
    batch.feature_lengths.push_back((int)t);
    batch.language_onehot.ptr()[i * num_languages + u.language_id] = 1.0f;
    batch.language_ids.push_back(u.language_id);
    for (size_t k = 0; k < u.transcript.size(); ++k)
      batch.targets[i * std::max<int64_t>(max_u, 1) + k] = u.transcript[k];
    batch.target_lengths.push_back((int)u.transcript.size());
  }
  return batch;
}

// ---------------------------------------------------------------------------
// On-disk corpus layout: one directory per language, one record file per
// utterance, plus a manifest of "relpath<TAB>language_id<TAB>supervised".
// Record: u32 T_raw, u32 d_raw (little endian), T_raw*d_raw f32 payload, then
// one UTF-8 line of space-separated token IDs; the line is absent when the
// utterance is unlabeled.

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("corpus record: truncated header");
  return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) | ((uint32_t)b[3] << 24);
}

}  // namespace detail

inline void save_utterance_record(const std::filesystem::path& path, const Utterance& u) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write record " + path.string());
  detail::write_u32(os, (uint32_t)u.features.dim(0));
  detail::write_u32(os, (uint32_t)u.features.dim(1));
  os.write(reinterpret_cast<const char*>(u.features.ptr()), u.features.numel() * sizeof(float));
  if (!u.transcript.empty()) {
    std::ostringstream line;
    for (size_t i = 0; i < u.transcript.size(); ++i) {
      if (i) line << ' ';
      line << u.transcript[i];
    }
    os << line.str() << '\n';
  }
  if (!os) throw DataError("short write on record " + path.string());
}

inline Utterance load_utterance_record(const std::filesystem::path& path, int language_id,
                                       bool supervised) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read record " + path.string());
  const uint32_t t_raw = detail::read_u32(is);
  const uint32_t d_raw = detail::read_u32(is);
  Tensor feats = Tensor::zeros({(int64_t)t_raw, (int64_t)d_raw});
  is.read(reinterpret_cast<char*>(feats.ptr()), feats.numel() * sizeof(float));
  if (!is) throw DataError("corpus record: truncated payload in " + path.string());
  Utterance u;
  u.features = feats;
  u.language_id = language_id;
  u.supervised = supervised;
  u.id = path.filename().string();
  std::string line;
  if (std::getline(is, line) && !line.empty()) {
    std::istringstream ls(line);
    int tok;
    while (ls >> tok) u.transcript.push_back(tok);
  }
  if (supervised && u.transcript.empty())
    throw DataError("supervised record without transcript: " + path.string());
  if (!supervised && !u.transcript.empty())
    throw DataError("unlabeled record carries a transcript: " + path.string());
  return u;
}

inline void save_corpus_split(const std::filesystem::path& dir,
                              const std::vector<Utterance>& utts) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw DataError("cannot write manifest in " + dir.string());
  for (size_t i = 0; i < utts.size(); ++i) {
    const auto& u = utts[i];
    const std::string lang_dir = "lang" + std::to_string(u.language_id);
    fs::create_directories(dir / lang_dir);
    const std::string rel = lang_dir + "/utt" + std::to_string(i) + ".bin";
    save_utterance_record(dir / rel, u);
    manifest << rel << '\t' << u.language_id << '\t' << (u.supervised ? 1 : 0) << '\n';
  }
}

inline std::vector<Utterance> load_corpus_split(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.tsv");
  if (!manifest) throw DataError("missing manifest in " + dir.string());
  std::vector<Utterance> utts;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string rel;
    int lang = -1, sup = -1;
    if (!std::getline(ls, rel, '\t') || !(ls >> lang >> sup))
      throw DataError("malformed manifest line: " + line);
    utts.push_back(load_utterance_record(dir / rel, lang, sup != 0));
  }
  return utts;
}

}  // namespace ldasr
