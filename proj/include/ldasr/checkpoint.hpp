// Checkpoint container and the adapter extract/merge/zero operations.
//
// File layout (all integers little endian):
//   "LDAC" magic, u32 version,
//   u32 metadata count, then per entry: u32 byte length + UTF-8 "key=value",
//   u32 tensor count, then per tensor: u32 name length + name + u32 rank +
//   rank x u64 dims,
//   then contiguous f32 payloads in directory order.
//
// The backbone fingerprint is 64-bit FNV-1a over the raw bytes of every
// tensor whose name is outside adapter/, concatenated in lexicographic name
// order. Checkpoints of one frozen-backbone run therefore share it, and a
// merge across different backbones is refused.

#pragma once

#include <filesystem>
#include <fstream>

#include "ldasr/model.hpp"

namespace ldasr {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadMagicError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct VersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct TruncatedError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct MergeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'L', 'D', 'A', 'C'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline uint64_t backbone_fingerprint(const Model& m) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : m.params) {  // std::map: lexicographic order
    if (name.rfind("adapter/", 0) == 0) continue;
    h = fnv1a64(t.ptr(), t.data().size() * sizeof(float), h);
  }
  return h;
}

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t take_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw TruncatedError(std::string("checkpoint truncated reading ") + what);
  return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) | ((uint32_t)b[3] << 24);
}

inline uint64_t take_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw TruncatedError(std::string("checkpoint truncated reading ") + what);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= (uint64_t)b[i] << (8 * i);
  return v;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

inline uint64_t parse_hex64(const std::string& s) {
  return std::strtoull(s.c_str(), nullptr, 16);
}

inline std::map<std::string, std::string> model_config_metadata(const ModelConfig& c) {
  std::map<std::string, std::string> m;
  auto put_i = [&](const char* k, int64_t v) { m[std::string("mc.") + k] = std::to_string(v); };
  auto put_f = [&](const char* k, double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    m[std::string("mc.") + k] = os.str();
  };
  put_i("width", c.backbone.width);
  put_i("heads", c.backbone.heads);
  put_i("kernel_size", c.backbone.kernel_size);
  put_i("ffn_multiplier", c.backbone.ffn_multiplier);
  put_i("causal_layers", c.backbone.causal_layers);
  put_i("noncausal_layers", c.backbone.noncausal_layers);
  put_i("max_frames", c.backbone.max_frames);
  put_i("left_context", c.backbone.left_context);
  put_f("ln_eps", c.backbone.ln_eps);
  put_i("languages", c.languages);
  put_i("vocab", c.vocab);
  put_i("adapter_hidden", c.adapter_hidden);
  put_i("adapter_bias", c.adapter_bias ? 1 : 0);
  put_i("adapter_after_last", c.adapter_after_last ? 1 : 0);
  put_f("adapter_init_scale", c.adapter_init_scale);
  put_i("pred_embed", c.pred_embed);
  put_i("joint_dim", c.joint_dim);
  put_f("fastemit_lambda", c.fastemit_lambda);
  put_f("pass1_weight", c.pass1_weight);
  put_f("pass2_weight", c.pass2_weight);
  return m;
}

inline ModelConfig model_config_from_metadata(const std::map<std::string, std::string>& m) {
  ModelConfig c;
  auto get = [&](const char* k) -> const std::string& {
    auto it = m.find(std::string("mc.") + k);
    if (it == m.end())
      throw CheckpointError(std::string("checkpoint metadata missing mc.") + k);
    return it->second;
  };
  c.backbone.width = std::stoi(get("width"));
  c.backbone.heads = std::stoi(get("heads"));
  c.backbone.kernel_size = std::stoi(get("kernel_size"));
  c.backbone.ffn_multiplier = std::stoi(get("ffn_multiplier"));
  c.backbone.causal_layers = std::stoi(get("causal_layers"));
  c.backbone.noncausal_layers = std::stoi(get("noncausal_layers"));
  c.backbone.max_frames = std::stoi(get("max_frames"));
  c.backbone.left_context = std::stoi(get("left_context"));
  c.backbone.ln_eps = std::stof(get("ln_eps"));
  c.languages = std::stoi(get("languages"));
  c.vocab = std::stoi(get("vocab"));
  c.adapter_hidden = std::stoi(get("adapter_hidden"));
  c.adapter_bias = get("adapter_bias") != "0";
  c.adapter_after_last = get("adapter_after_last") != "0";
  c.adapter_init_scale = std::stof(get("adapter_init_scale"));
  c.pred_embed = std::stoi(get("pred_embed"));
  c.joint_dim = std::stoi(get("joint_dim"));
  c.fastemit_lambda = std::stof(get("fastemit_lambda"));
  c.pass1_weight = std::stof(get("pass1_weight"));
  c.pass2_weight = std::stof(get("pass2_weight"));
  return c;
}

}  // namespace detail

inline void save_model(const Model& m, const std::filesystem::path& path, int64_t step = 0,
                       uint64_t config_digest_value = 0) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);

  std::map<std::string, std::string> meta = detail::model_config_metadata(m.cfg);
  meta["step"] = std::to_string(step);
  meta["config_digest"] = detail::hex64(config_digest_value);
  meta["backbone_fingerprint"] = detail::hex64(backbone_fingerprint(m));
  detail::put_u32(os, (uint32_t)meta.size());
  for (const auto& [k, v] : meta) {
    const std::string line = k + "=" + v;
    detail::put_u32(os, (uint32_t)line.size());
    os.write(line.data(), line.size());
  }

  detail::put_u32(os, (uint32_t)m.params.size());
  for (const auto& [name, t] : m.params) {
    detail::put_u32(os, (uint32_t)name.size());
    os.write(name.data(), name.size());
    detail::put_u32(os, (uint32_t)t.shape().size());
    for (int64_t d : t.shape()) detail::put_u64(os, (uint64_t)d);
  }
  for (const auto& [name, t] : m.params) {
    (void)name;
    os.write(reinterpret_cast<const char*>(t.ptr()), t.data().size() * sizeof(float));
  }
  if (!os) throw DataError("short write on checkpoint " + path.string());
}

struct LoadedModel {
  Model model;
  int64_t step = 0;
  uint64_t config_digest = 0;
  uint64_t fingerprint = 0;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw BadMagicError("bad magic in " + path.string());
  const uint32_t version = detail::take_u32(is, "version");
  if (version != kCheckpointVersion)
    throw VersionError("unsupported checkpoint version " + std::to_string(version) + " in " +
                       path.string());

  std::map<std::string, std::string> meta;
  const uint32_t meta_count = detail::take_u32(is, "metadata count");
  for (uint32_t i = 0; i < meta_count; ++i) {
    const uint32_t len = detail::take_u32(is, "metadata length");
    std::string line(len, '\0');
    is.read(line.data(), len);
    if (!is) throw TruncatedError("checkpoint truncated reading metadata");
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed metadata line: " + line);
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }

  const uint32_t tensor_count = detail::take_u32(is, "tensor count");
  std::vector<std::pair<std::string, Shape>> directory;
  for (uint32_t i = 0; i < tensor_count; ++i) {
    const uint32_t name_len = detail::take_u32(is, "tensor name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw TruncatedError("checkpoint truncated reading tensor name");
    const uint32_t rank = detail::take_u32(is, "tensor rank");
    Shape shape(rank);
    for (uint32_t r = 0; r < rank; ++r) shape[r] = (int64_t)detail::take_u64(is, "tensor dim");
    directory.emplace_back(std::move(name), std::move(shape));
  }

  LoadedModel out;
  out.model = Model::init(detail::model_config_from_metadata(meta), /*seed=*/0);
  if (directory.size() != out.model.params.size())
    throw CheckpointError("checkpoint tensor set does not match its config");
  for (auto& [name, shape] : directory) {
    auto it = out.model.params.find(name);
    if (it == out.model.params.end())
      throw CheckpointError("checkpoint holds unknown tensor '" + name + "'");
    Tensor t = it->second;
    if (t.shape() != shape)
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                            ", expected " + shape_str(t.shape()));
    is.read(reinterpret_cast<char*>(t.ptr()), t.data().size() * sizeof(float));
    if (!is) throw TruncatedError("checkpoint truncated reading payload of '" + name + "'");
  }
  out.step = std::stoll(meta.at("step"));
  out.config_digest = detail::parse_hex64(meta.at("config_digest"));
  out.fingerprint = detail::parse_hex64(meta.at("backbone_fingerprint"));
  const uint64_t recomputed = backbone_fingerprint(out.model);
  if (recomputed != out.fingerprint)
    throw CheckpointError("stored fingerprint does not match contents of " + path.string());
  return out;
}

// --- adapter slice operations -------------------------------------------------

struct AdapterSlice {
  int language_id = 0;
  int64_t source_step = 0;
  struct BlockSlice {
    Tensor down;       // d x h
    Tensor up;         // h x d
    Tensor down_bias;  // h
    Tensor up_bias;    // d
  };
  std::vector<BlockSlice> blocks;
};

inline void check_language(const Model& m, int language_id) {
  if (language_id < 0 || language_id >= m.cfg.languages)
    throw std::out_of_range("language " + std::to_string(language_id) +
                            " outside configured range K=" + std::to_string(m.cfg.languages));
}

inline AdapterSlice extract_adapter(const Model& m, int language_id, int64_t source_step = 0) {
  check_language(m, language_id);
  AdapterSlice slice;
  slice.language_id = language_id;
  slice.source_step = source_step;
  for (const AdapterBlock& b : m.adapters) {
    const int64_t d = b.width, h = b.hidden, k = language_id;
    AdapterSlice::BlockSlice s;
    s.down = Tensor::zeros({d, h});
    std::copy(b.down.ptr() + k * d * h, b.down.ptr() + (k + 1) * d * h, s.down.ptr());
    s.up = Tensor::zeros({h, d});
    std::copy(b.up.ptr() + k * h * d, b.up.ptr() + (k + 1) * h * d, s.up.ptr());
    s.down_bias = Tensor::zeros({h});
    std::copy(b.down_bias.ptr() + k * h, b.down_bias.ptr() + (k + 1) * h, s.down_bias.ptr());
    s.up_bias = Tensor::zeros({d});
    std::copy(b.up_bias.ptr() + k * d, b.up_bias.ptr() + (k + 1) * d, s.up_bias.ptr());
    slice.blocks.push_back(std::move(s));
  }
  return slice;
}

inline void insert_adapter(Model& m, const AdapterSlice& slice) {
  check_language(m, slice.language_id);
  if (slice.blocks.size() != m.adapters.size())
    throw DimError("adapter slice has " + std::to_string(slice.blocks.size()) +
                   " blocks, model expects " + std::to_string(m.adapters.size()));
  for (size_t i = 0; i < m.adapters.size(); ++i) {
    AdapterBlock& b = m.adapters[i];
    const AdapterSlice::BlockSlice& s = slice.blocks[i];
    const int64_t d = b.width, h = b.hidden, k = slice.language_id;
    if (s.down.shape() != Shape{d, h}) throw DimError("adapter slice shape mismatch");
    std::copy(s.down.ptr(), s.down.ptr() + d * h, b.down.ptr() + k * d * h);
    std::copy(s.up.ptr(), s.up.ptr() + h * d, b.up.ptr() + k * h * d);
    std::copy(s.down_bias.ptr(), s.down_bias.ptr() + h, b.down_bias.ptr() + k * h);
    std::copy(s.up_bias.ptr(), s.up_bias.ptr() + d, b.up_bias.ptr() + k * d);
  }
}

// Zeroes language_id's rows of every D, U, D_b, U_b: the adapter becomes an
// exact residual identity for that language.
inline void zero_adapter(Model& m, int language_id) {
  check_language(m, language_id);
  for (AdapterBlock& b : m.adapters) {
    const int64_t d = b.width, h = b.hidden, k = language_id;
    std::fill(b.down.ptr() + k * d * h, b.down.ptr() + (k + 1) * d * h, 0.0f);
    std::fill(b.up.ptr() + k * h * d, b.up.ptr() + (k + 1) * h * d, 0.0f);
    std::fill(b.down_bias.ptr() + k * h, b.down_bias.ptr() + (k + 1) * h, 0.0f);
    std::fill(b.up_bias.ptr() + k * d, b.up_bias.ptr() + (k + 1) * d, 0.0f);
  }
}

inline Model clone_model(const Model& src) {
  Model out = Model::init(src.cfg, /*seed=*/0);
  for (auto& [name, t] : out.params) t.data() = src.params.at(name).data();
  return out;
}

struct MergeAssignment {
  int language_id = 0;
  const Model* source = nullptr;
  int64_t source_step = 0;
  std::string label;  // for error messages, typically the checkpoint path
};

// base backbone + per-language slices from their assigned checkpoints.
// Refuses sources whose frozen set (or shared adapter layer norms) differ
// from the base: merged per-language forwards must be bit-identical to their
// source checkpoints.
inline Model merge_adapters(const std::vector<MergeAssignment>& assignments, const Model& base) {
  const uint64_t base_fp = backbone_fingerprint(base);
  std::vector<bool> assigned(base.cfg.languages, false);
  Model merged = clone_model(base);
  for (const auto& a : assignments) {
    if (!a.source) throw ContractError("merge_adapters: null source model");
    check_language(base, a.language_id);
    if (assigned[a.language_id])
      throw ConfigError("merge_adapters: language " + std::to_string(a.language_id) +
                        " assigned twice");
    assigned[a.language_id] = true;
    if (backbone_fingerprint(*a.source) != base_fp)
      throw MergeError("backbone fingerprint mismatch for '" + a.label + "' (language " +
                       std::to_string(a.language_id) + ")");
    if (a.source->adapters.size() != base.adapters.size())
      throw MergeError("adapter block count mismatch for '" + a.label + "'");
    for (size_t i = 0; i < base.adapters.size(); ++i) {
      if (a.source->adapters[i].ln_gamma.data() != base.adapters[i].ln_gamma.data() ||
          a.source->adapters[i].ln_beta.data() != base.adapters[i].ln_beta.data())
        throw MergeError("shared adapter layer norm differs from base in '" + a.label + "'");
    }
    insert_adapter(merged, extract_adapter(*a.source, a.language_id, a.source_step));
  }
  return merged;
}

}  // namespace ldasr
