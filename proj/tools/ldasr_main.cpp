// ldasr command line: corpus generation, backbone training, adapter and full
// finetuning, noisy student training, checkpoint merging, evaluation, and
// relative-WER reporting.
//
// Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
// 4 merge/fingerprint error.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "ldasr/checkpoint.hpp"
#include "ldasr/harness.hpp"
#include "ldasr/nst.hpp"
#include "ldasr/synth.hpp"
#include "ldasr/train.hpp"

namespace fs = std::filesystem;
using namespace ldasr;

namespace {

RunConfig load_config(const std::string& path, bool seed_given, uint64_t seed) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open config file " + path);
    cfg = parse_run_config(is);
  }
  if (seed_given) cfg.seed = seed;
  validate_config(cfg);
  return cfg;
}

std::vector<Utterance> load_split(const fs::path& data_dir, const std::string& split) {
  return load_corpus_split(data_dir / split);
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

int cmd_gen_data(const RunConfig& cfg, const fs::path& out) {
  CorpusBundle bundle = make_corpus(cfg);
  fs::create_directories(out);
  save_corpus_split(out / "train", bundle.train_supervised);
  save_corpus_split(out / "unlabeled", bundle.unlabeled);
  save_corpus_split(out / "dev", bundle.dev);
  save_corpus_split(out / "test", bundle.test);
  write_text_file(out / "config.txt", serialize_config(cfg));
  std::cout << "wrote " << bundle.train_supervised.size() << " supervised, "
            << bundle.unlabeled.size() << " unlabeled, " << bundle.dev.size() << " dev, "
            << bundle.test.size() << " test utterances to " << out.string() << "\n";
  return 0;
}

// With EMA enabled a sibling *_ema.ldac holds the evaluation weights.
void maybe_save_ema(const Model& model, const TrainResult& r, const fs::path& file,
                    int64_t step, uint64_t digest) {
  if (r.ema_shadow.empty()) return;
  Model ema = clone_model(model);
  for (const auto& [name, shadow] : r.ema_shadow) ema.params.at(name).data() = shadow.data();
  fs::path ema_file = file;
  ema_file.replace_filename(file.stem().string() + "_ema" + file.extension().string());
  save_model(ema, ema_file, step, digest);
}

int cmd_train_backbone(const RunConfig& cfg, const fs::path& data, const fs::path& out) {
  auto train_set = load_split(data, "train");
  Model model = Model::init(model_config_from(cfg), derive_seed(cfg.seed, "model"));
  TrainOptions opts = train_options_from(cfg, cfg.backbone_steps, derive_seed(cfg.seed, "backbone"));
  // the foundation model trains without adapters: zero up-projections keep
  // them exact identities, and only the frozen set receives gradients
  TrainResult r = train_model(model, train_set, model.frozen_params(), opts);
  fs::create_directories(out);
  save_model(model, out / "backbone.ldac", r.steps_run, config_digest(cfg));
  maybe_save_ema(model, r, out / "backbone.ldac", r.steps_run, config_digest(cfg));
  std::cout << "backbone trained " << r.steps_run << " steps, final loss " << r.last_loss
            << ", saved to " << (out / "backbone.ldac").string() << "\n";
  return 0;
}

int cmd_finetune_lda(const RunConfig& cfg, const fs::path& data, const fs::path& backbone,
                     const fs::path& out) {
  auto train_set = load_split(data, "train");
  LoadedModel base = load_model(backbone);
  fs::create_directories(out);
  const uint64_t digest = config_digest(cfg);
  TrainOptions opts = train_options_from(cfg, cfg.lda_steps, derive_seed(cfg.seed, "lda"));
  opts.save_every = cfg.save_every;
  opts.snapshot_hook = [&](int64_t step, const Model& m) {
    save_model(m, out / ("lda_step" + std::to_string(step) + ".ldac"), step, digest);
  };
  TrainResult r = train_model(base.model, train_set, base.model.adapter_slice_params(), opts);
  save_model(base.model, out / "lda_final.ldac", r.steps_run, digest);
  maybe_save_ema(base.model, r, out / "lda_final.ldac", r.steps_run, digest);
  std::cout << "adapter finetune ran " << r.steps_run << " steps, final loss " << r.last_loss
            << ", saved to " << (out / "lda_final.ldac").string() << "\n";
  return 0;
}

int cmd_finetune_full(const RunConfig& cfg, const fs::path& data, const fs::path& backbone,
                      const fs::path& out, int language) {
  auto train_set = load_split(data, "train");
  std::vector<Utterance> mono;
  for (auto& u : train_set)
    if (u.language_id == language) mono.push_back(std::move(u));
  if (mono.empty())
    throw DataError("no training data for language " + std::to_string(language));
  LoadedModel base = load_model(backbone);
  check_language(base.model, language);
  TrainOptions opts = train_options_from(
      cfg, cfg.full_steps, derive_seed(cfg.seed, "full/" + std::to_string(language)));
  TrainResult r = train_model(base.model, mono, base.model.all_params(), opts);
  fs::create_directories(out);
  const fs::path path = out / ("full_lang" + std::to_string(language) + ".ldac");
  save_model(base.model, path, r.steps_run, config_digest(cfg));
  maybe_save_ema(base.model, r, path, r.steps_run, config_digest(cfg));
  std::cout << "full finetune of language " << language << " ran " << r.steps_run
            << " steps, final loss " << r.last_loss << ", saved to " << path.string() << "\n";
  return 0;
}

int cmd_nst_run(const RunConfig& cfg, const fs::path& data, const fs::path& backbone,
                const fs::path& out) {
  auto supervised = load_split(data, "train");
  auto unlabeled = load_split(data, "unlabeled");
  auto dev = load_split(data, "dev");
  LoadedModel base = load_model(backbone);
  NstResult result = run_nst(base.model, supervised, unlabeled, dev, cfg);
  fs::create_directories(out);
  {
    std::ofstream os(out / "nst_ledger.tsv");
    write_nst_ledger(os, result.ledger);
  }
  save_model(result.final_model, out / "nst_final.ldac", cfg.lda_steps, config_digest(cfg));
  std::cout << "nst ran " << result.ledger.size() << " iterations, final model saved to "
            << (out / "nst_final.ldac").string() << "\n";
  return 0;
}

int cmd_merge(const std::string& base_path, const std::vector<std::string>& checkpoints,
              const std::vector<int>& languages, const fs::path& out_file) {
  if (checkpoints.size() != languages.size())
    throw ConfigError("merge-adapters: each --checkpoint needs a paired --lang");
  LoadedModel base = load_model(base_path);
  std::vector<LoadedModel> sources;
  sources.reserve(checkpoints.size());
  for (const auto& p : checkpoints) sources.push_back(load_model(p));
  std::vector<MergeAssignment> assignments;
  for (size_t i = 0; i < sources.size(); ++i)
    assignments.push_back(MergeAssignment{languages[i], &sources[i].model,
                                          sources[i].step, checkpoints[i]});
  Model merged = merge_adapters(assignments, base.model);
  save_model(merged, out_file, base.step, base.config_digest);
  std::cout << "merged " << assignments.size() << " adapter slices into " << out_file.string()
            << "\n";
  return 0;
}

int cmd_zero_adapter(const std::string& checkpoint, int language, const fs::path& out_file) {
  LoadedModel loaded = load_model(checkpoint);
  zero_adapter(loaded.model, language);
  save_model(loaded.model, out_file, loaded.step, loaded.config_digest);
  std::cout << "zeroed language " << language << " adapter into " << out_file.string() << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint, const fs::path& data,
                 const std::string& split, const fs::path& out_file) {
  LoadedModel loaded = load_model(checkpoint);
  auto test_set = load_split(data, split);
  EvalReport report =
      evaluate_model(loaded.model, test_set, (int)cfg.stack_factor,
                     (int)cfg.max_symbols_per_frame, fs::path(checkpoint).filename().string(),
                     loaded.step);
  if (out_file.empty()) {
    write_eval_report(std::cout, report);
  } else {
    std::ofstream os(out_file);
    if (!os) throw DataError("cannot write " + out_file.string());
    write_eval_report(os, report);
  }
  return 0;
}

int cmd_report(const std::string& baseline, const std::string& candidate,
               const fs::path& out_file) {
  std::ifstream bs(baseline), cs(candidate);
  if (!bs) throw DataError("cannot open baseline report " + baseline);
  if (!cs) throw DataError("cannot open candidate report " + candidate);
  EvalReport base = read_eval_report(bs);
  EvalReport cand = read_eval_report(cs);
  WerrReport werr = report_werr(base, cand);
  if (out_file.empty()) {
    write_werr_report(std::cout, werr);
  } else {
    std::ofstream os(out_file);
    if (!os) throw DataError("cannot write " + out_file.string());
    write_werr_report(os, werr);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"language-dependent adapter finetuning for a streaming multilingual transducer"};
  app.require_subcommand(1);
  app.fallthrough();  // --config/--seed may follow the subcommand name

  std::string config_path;
  uint64_t seed = 0;
  bool seed_given = false;
  app.add_option("--config", config_path, "run configuration file (key=value lines)");
  app.add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
    seed_given = true;
  });

  std::string data_dir, out_dir, backbone_path, base_path, out_file;
  std::string baseline_path, candidate_path, split = "test";
  std::vector<std::string> checkpoints;
  std::vector<int> languages;
  int language = 0;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic multilingual corpus");
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* trainb = app.add_subcommand("train-backbone", "train the multilingual foundation model");
  trainb->add_option("--data", data_dir, "corpus directory from gen-data")->required();
  trainb->add_option("--out", out_dir, "output directory")->required();

  auto* lda = app.add_subcommand("finetune-lda", "adapter-only finetuning over a frozen backbone");
  lda->add_option("--data", data_dir)->required();
  lda->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
  lda->add_option("--out", out_dir)->required();

  auto* full = app.add_subcommand("finetune-full", "monolingual full-model finetune baseline");
  full->add_option("--data", data_dir)->required();
  full->add_option("--backbone", backbone_path)->required();
  full->add_option("--out", out_dir)->required();
  full->add_option("--lang", language, "language to finetune")->required();

  auto* nst = app.add_subcommand("nst-run", "noisy student training loop");
  nst->add_option("--data", data_dir)->required();
  nst->add_option("--backbone", backbone_path)->required();
  nst->add_option("--out", out_dir)->required();

  auto* merge = app.add_subcommand("merge-adapters",
                                   "compose per-language adapter slices from checkpoints");
  merge->add_option("--base", base_path, "base checkpoint providing the backbone")->required();
  merge->add_option("--checkpoint", checkpoints, "source checkpoint (repeat with --lang)");
  merge->add_option("--lang", languages, "language taken from the paired --checkpoint");
  merge->add_option("--out", out_file, "merged checkpoint path")->required();

  auto* zero = app.add_subcommand("zero-adapter", "zero one language's adapter slice");
  zero->add_option("--checkpoint", checkpoints, "input checkpoint")->required();
  zero->add_option("--lang", language)->required();
  zero->add_option("--out", out_file, "output checkpoint path")->required();

  auto* eval = app.add_subcommand("evaluate", "greedy-decode WER per language and pass");
  eval->add_option("--checkpoint", checkpoints, "model checkpoint")->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--split", split, "corpus split to score (default test)");
  eval->add_option("--out", out_file, "report path (default stdout)");

  auto* rep = app.add_subcommand("report", "relative WER reduction between two eval reports");
  rep->add_option("--baseline", baseline_path)->required();
  rep->add_option("--candidate", candidate_path)->required();
  rep->add_option("--out", out_file, "report path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    const RunConfig cfg = load_config(config_path, seed_given, seed);
    if (gen->parsed()) return cmd_gen_data(cfg, out_dir);
    if (trainb->parsed()) return cmd_train_backbone(cfg, data_dir, out_dir);
    if (lda->parsed()) return cmd_finetune_lda(cfg, data_dir, backbone_path, out_dir);
    if (full->parsed()) return cmd_finetune_full(cfg, data_dir, backbone_path, out_dir, language);
    if (nst->parsed()) return cmd_nst_run(cfg, data_dir, backbone_path, out_dir);
    if (merge->parsed()) return cmd_merge(base_path, checkpoints, languages, out_file);
    if (zero->parsed()) {
      if (checkpoints.size() != 1) throw ConfigError("zero-adapter: exactly one --checkpoint");
      return cmd_zero_adapter(checkpoints[0], language, out_file);
    }
    if (eval->parsed()) {
      if (checkpoints.size() != 1) throw ConfigError("evaluate: exactly one --checkpoint");
      return cmd_evaluate(cfg, checkpoints[0], data_dir, split, out_file);
    }
    if (rep->parsed()) return cmd_report(baseline_path, candidate_path, out_file);
    std::cerr << "error: no subcommand\n";
    return 2;
  } catch (const MergeError& e) {
    std::cerr << "merge error: " << e.what() << "\n";
    return 4;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
