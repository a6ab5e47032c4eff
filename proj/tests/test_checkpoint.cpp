#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ldasr/checkpoint.hpp"

using namespace ldasr;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.backbone.width = 16;
  mc.backbone.heads = 2;
  mc.backbone.kernel_size = 3;
  mc.backbone.ffn_multiplier = 2;
  mc.backbone.causal_layers = 2;
  mc.backbone.noncausal_layers = 2;
  mc.backbone.max_frames = 16;
  mc.languages = 3;
  mc.vocab = 8;
  mc.adapter_hidden = 4;
  mc.pred_embed = 8;
  mc.joint_dim = 8;
  return mc;
}

fs::path temp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "ldasr_ckpt_test";
  fs::create_directories(dir);
  return dir / name;
}

void randomize_language_slices(Model& m, int lang, uint64_t seed) {
  Rng rng(seed);
  for (AdapterBlock& b : m.adapters) {
    const int64_t d = b.width, h = b.hidden;
    for (int64_t i = lang * d * h; i < (lang + 1) * d * h; ++i)
      b.down.ptr()[i] = rng.normal(0.3f);
    for (int64_t i = lang * h * d; i < (lang + 1) * h * d; ++i) b.up.ptr()[i] = rng.normal(0.3f);
    for (int64_t i = lang * h; i < (lang + 1) * h; ++i) b.down_bias.ptr()[i] = rng.normal(0.3f);
    for (int64_t i = lang * d; i < (lang + 1) * d; ++i) b.up_bias.ptr()[i] = rng.normal(0.3f);
  }
}

Batch batch_for(const Model& m, int lang, uint64_t seed, int t = 5) {
  Utterance u;
  u.features = Tensor::zeros({t, m.cfg.backbone.width});
  Rng rng(seed);
  fill_normal(u.features, rng, 1.0f);
  u.language_id = lang;
  u.transcript = {1, 2};
  return make_batch({u}, 0, m.cfg.languages);
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  Model m = Model::init(tiny_model_config(), 42);
  const fs::path path = temp_file("roundtrip.ldac");
  save_model(m, path, /*step=*/17, /*config_digest=*/0xabcdef12u);
  LoadedModel loaded = load_model(path);
  EXPECT_EQ(loaded.step, 17);
  EXPECT_EQ(loaded.config_digest, 0xabcdef12u);
  EXPECT_EQ(loaded.fingerprint, backbone_fingerprint(m));
  ASSERT_EQ(loaded.model.params.size(), m.params.size());
  for (const auto& [name, t] : m.params) {
    const Tensor& lt = loaded.model.params.at(name);
    ASSERT_EQ(lt.shape(), t.shape()) << name;
    EXPECT_EQ(0, std::memcmp(lt.ptr(), t.ptr(), t.data().size() * sizeof(float))) << name;
  }
}

TEST(Checkpoint, SecondSaveIsBitIdenticalFile) {
  Model m = Model::init(tiny_model_config(), 43);
  const fs::path p1 = temp_file("save1.ldac"), p2 = temp_file("save2.ldac");
  save_model(m, p1, 3, 9);
  save_model(m, p2, 3, 9);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(s1, s2);
}

TEST(Checkpoint, BadMagicRejected) {
  Model m = Model::init(tiny_model_config(), 44);
  const fs::path path = temp_file("magic.ldac");
  save_model(m, path);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.write("NOPE", 4);
  f.close();
  EXPECT_THROW(load_model(path), BadMagicError);
}

TEST(Checkpoint, VersionMismatchRejected) {
  Model m = Model::init(tiny_model_config(), 45);
  const fs::path path = temp_file("version.ldac");
  save_model(m, path);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(4);
  const char v2[4] = {2, 0, 0, 0};
  f.write(v2, 4);
  f.close();
  EXPECT_THROW(load_model(path), VersionError);
}

TEST(Checkpoint, TruncationRejected) {
  Model m = Model::init(tiny_model_config(), 46);
  const fs::path path = temp_file("trunc.ldac");
  save_model(m, path);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 64);
  EXPECT_THROW(load_model(path), TruncatedError);
}

TEST(Checkpoint, FingerprintInvariantUnderAdapterMutation) {
  Model m = Model::init(tiny_model_config(), 47);
  const uint64_t fp0 = backbone_fingerprint(m);
  randomize_language_slices(m, 1, 99);  // adapter-only change
  EXPECT_EQ(backbone_fingerprint(m), fp0);
  m.encoder.causal[0].wq.ptr()[0] += 1e-3f;  // any backbone change moves it
  EXPECT_NE(backbone_fingerprint(m), fp0);
}

TEST(AdapterSlices, ExtractInsertRoundTrip) {
  Model m = Model::init(tiny_model_config(), 48);
  randomize_language_slices(m, 2, 7);
  std::map<std::string, std::vector<float>> before;
  for (const auto& [name, t] : m.params) before[name] = t.data();
  AdapterSlice slice = extract_adapter(m, 2, 11);
  EXPECT_EQ(slice.source_step, 11);
  insert_adapter(m, slice);
  for (const auto& [name, t] : m.params) EXPECT_EQ(before.at(name), t.data()) << name;
}

TEST(AdapterSlices, SlicesAreDisjoint) {
  Model m = Model::init(tiny_model_config(), 49);
  randomize_language_slices(m, 0, 13);
  randomize_language_slices(m, 1, 14);
  AdapterSlice one_before = extract_adapter(m, 1);
  zero_adapter(m, 0);
  AdapterSlice one_after = extract_adapter(m, 1);
  for (size_t i = 0; i < one_before.blocks.size(); ++i) {
    EXPECT_EQ(one_before.blocks[i].down.data(), one_after.blocks[i].down.data());
    EXPECT_EQ(one_before.blocks[i].up.data(), one_after.blocks[i].up.data());
  }
}

TEST(AdapterSlices, ShapeArithmetic) {
  ModelConfig mc = tiny_model_config();
  Model m = Model::init(mc, 50);
  AdapterSlice s = extract_adapter(m, 0);
  const int64_t d = mc.backbone.width, h = mc.adapter_hidden;
  ASSERT_EQ((int)s.blocks.size(), mc.adapter_block_count());
  for (const auto& b : s.blocks) {
    const int64_t values =
        b.down.numel() + b.up.numel() + b.down_bias.numel() + b.up_bias.numel();
    EXPECT_EQ(values, d * h + h * d + h + d);
  }
}

TEST(AdapterSlices, OutOfRangeLanguage) {
  Model m = Model::init(tiny_model_config(), 51);
  EXPECT_THROW(extract_adapter(m, 3), std::out_of_range);
  EXPECT_THROW(zero_adapter(m, -1), std::out_of_range);
}

TEST(ZeroAdapter, ForwardEqualsBackboneOnlyForThatLanguage) {
  Model m = Model::init(tiny_model_config(), 52);
  randomize_language_slices(m, 0, 21);
  randomize_language_slices(m, 1, 22);
  zero_adapter(m, 1);
  NoGradGuard ng;
  Batch batch = batch_for(m, 1, 31);
  EncoderOutputs with_adapters = m.encode(batch);
  EncoderOutputs plain = encode_cascaded(batch.stacked_features, m.encoder, nullptr,
                                         batch.language_onehot, batch.feature_lengths);
  for (int64_t i = 0; i < with_adapters.second_pass.numel(); ++i) {
    ASSERT_EQ(with_adapters.first_pass.ptr()[i], plain.first_pass.ptr()[i]);
    ASSERT_EQ(with_adapters.second_pass.ptr()[i], plain.second_pass.ptr()[i]);
  }
}

TEST(ZeroAdapter, OtherLanguagesUnchangedAndIdempotent) {
  Model m = Model::init(tiny_model_config(), 53);
  randomize_language_slices(m, 0, 23);
  randomize_language_slices(m, 1, 24);
  NoGradGuard ng;
  Batch batch0 = batch_for(m, 0, 33);
  EncoderOutputs before = m.encode(batch0);
  zero_adapter(m, 1);
  EncoderOutputs after = m.encode(batch0);
  EXPECT_EQ(before.second_pass.data(), after.second_pass.data());
  std::map<std::string, std::vector<float>> snap;
  for (const auto& [name, t] : m.params) snap[name] = t.data();
  zero_adapter(m, 1);  // idempotent
  for (const auto& [name, t] : m.params) EXPECT_EQ(snap.at(name), t.data()) << name;
}

TEST(Merge, OwnSourceForwardIsBitIdentical) {
  Model base = Model::init(tiny_model_config(), 54);
  Model run_a = clone_model(base);
  randomize_language_slices(run_a, 0, 41);
  randomize_language_slices(run_a, 2, 42);
  Model run_b = clone_model(base);
  randomize_language_slices(run_b, 1, 43);

  Model merged = merge_adapters({{0, &run_a, 100, "run_a"}, {1, &run_b, 200, "run_b"}}, base);
  NoGradGuard ng;
  for (int lang : {0, 1}) {
    const Model& source = lang == 0 ? run_a : run_b;
    for (uint64_t seed = 60; seed < 64; ++seed) {
      Batch batch = batch_for(merged, lang, seed);
      EncoderOutputs m_out = merged.encode(batch);
      EncoderOutputs s_out = source.encode(batch);
      ASSERT_EQ(m_out.second_pass.data(), s_out.second_pass.data()) << "lang " << lang;
      ASSERT_EQ(m_out.first_pass.data(), s_out.first_pass.data()) << "lang " << lang;
    }
  }
  // language 2 was never assigned: it keeps the base slices
  Batch batch2 = batch_for(merged, 2, 70);
  EXPECT_EQ(merged.encode(batch2).second_pass.data(), base.encode(batch2).second_pass.data());
}

TEST(Merge, MismatchedFingerprintRefused) {
  Model base = Model::init(tiny_model_config(), 55);
  Model other = Model::init(tiny_model_config(), 56);  // different backbone init
  try {
    merge_adapters({{0, &other, 0, "other.ldac"}}, base);
    FAIL() << "expected MergeError";
  } catch (const MergeError& e) {
    EXPECT_NE(std::string(e.what()).find("other.ldac"), std::string::npos);
  }
}

TEST(Merge, ZeroAssignmentsEqualsBase) {
  Model base = Model::init(tiny_model_config(), 57);
  randomize_language_slices(base, 0, 77);
  Model merged = merge_adapters({}, base);
  for (const auto& [name, t] : base.params)
    EXPECT_EQ(merged.params.at(name).data(), t.data()) << name;
}

TEST(Merge, DuplicateLanguageRejected) {
  Model base = Model::init(tiny_model_config(), 58);
  Model a = clone_model(base);
  EXPECT_THROW(merge_adapters({{1, &a, 0, "a"}, {1, &a, 0, "a"}}, base), ConfigError);
}

TEST(ModelRegistry, FrozenCountMatchesClosedForm) {
  ModelConfig mc = tiny_model_config();
  Model m = Model::init(mc, 59);
  int64_t frozen = 0;
  for (const auto& [name, t] : m.frozen_params()) {
    (void)name;
    frozen += t.numel();
  }
  EXPECT_EQ(frozen, frozen_param_count(mc));
}

TEST(ModelRegistry, AdapterSliceNames) {
  Model m = Model::init(tiny_model_config(), 60);
  const auto slices = m.adapter_slice_params();
  // 4 blocks x 4 tensors
  EXPECT_EQ(slices.size(), 16u);
  for (const auto& [name, t] : slices) {
    (void)t;
    EXPECT_EQ(name.rfind("adapter/", 0), 0u);
    const std::string leaf = name.substr(name.rfind('/') + 1);
    EXPECT_TRUE(leaf == "D" || leaf == "U" || leaf == "D_b" || leaf == "U_b") << name;
  }
  EXPECT_TRUE(m.params.count("adapter/causal/00/D"));
  EXPECT_TRUE(m.params.count("adapter/noncausal/01/U_b"));
  EXPECT_TRUE(m.params.count("backbone/causal/00/wq"));
}
