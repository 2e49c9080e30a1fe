// vmmt command-line tool: train, translate, evaluate, backtranslate,
// synth-data and grad-check subcommands over the library.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "vmmt/reference.hpp"
#include "vmmt/train.hpp"

namespace {

using namespace vmmt;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open config '" + path + "'");
  nlohmann::json j;
  f >> j;
  return j;
}

int cmd_train(const std::string& config_path, const std::string& variant,
              const std::string& out_dir) {
  TrainConfig tc = train_config_from_json(read_json_file(config_path));
  if (!variant.empty()) tc.model.variant = variant_from_string(variant);
  if (!out_dir.empty()) tc.out_dir = out_dir;
  TrainResult res = train_from_files(tc);
  std::cout << "best epoch " << res.best_epoch << " val BLEU4 "
            << res.best_val_bleu << " after " << res.epochs_run
            << " epochs\n";
  if (!tc.out_dir.empty())
    std::cout << "checkpoint: " << tc.out_dir << "/best.vmck\n";
  return 0;
}

int cmd_translate(const std::string& ckpt, const std::string& src_path,
                  const std::string& mode, int beam_size,
                  const std::string& z, uint64_t seed) {
  Checkpoint ck = Checkpoint::load(ckpt);
  ParamStore params = ck.to_store();
  BpeApplier applier(ck.bpe);
  BpeApplier* bpe = ck.bpe.empty() ? nullptr : &applier;
  DecodeMode dm = mode == "beam" ? DecodeMode::kBeam : DecodeMode::kGreedy;
  check(mode == "beam" || mode == "greedy",
        "unknown --mode '" + mode + "' (greedy|beam)");
  check(z == "mean" || z == "sample", "unknown --z '" + z + "' (mean|sample)");
  ZPolicy zp;
  zp.sample = z == "sample";
  zp.seed = seed;
  for (const auto& line : read_lines(src_path)) {
    std::vector<int> ids = ck.vocab.to_ids(tokenize_line(line, bpe));
    if (ids.empty()) {
      std::cout << "\n";
      continue;
    }
    auto out = translate(params, ck.config, ids, dm, beam_size, zp);
    std::cout << detokenize(out, ck.vocab, ck.bpe) << "\n";
  }
  return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& src_path,
                 const std::string& ref_path, const std::string& features) {
  Checkpoint ck = Checkpoint::load(ckpt);
  FeatureMatrix fm;
  const FeatureMatrix* fmp = nullptr;
  if (!features.empty()) {
    fm = load_features(features);
    fmp = &fm;
  }
  EvalReport rep =
      evaluate(ck, read_lines(src_path), read_lines(ref_path), fmp);
  std::cout << rep.to_json().dump(2) << "\n";
  return 0;
}

int cmd_backtranslate(const std::string& ckpt, const std::string& mono_path,
                      const std::string& out_prefix) {
  Checkpoint ck = Checkpoint::load(ckpt);
  auto mono = read_lines(mono_path);
  auto synth = backtranslate(ck, mono);
  std::ofstream src_f(out_prefix + ".src", std::ios::binary);
  std::ofstream tgt_f(out_prefix + ".tgt", std::ios::binary);
  check(src_f.good() && tgt_f.good(),
        "cannot write outputs with prefix '" + out_prefix + "'");
  for (size_t i = 0; i < mono.size(); ++i) {
    src_f << synth[i] << "\n";
    tgt_f << mono[i] << "\n";
  }
  std::cout << "wrote " << mono.size() << " synthetic pairs to "
            << out_prefix << ".{src,tgt}\n";
  return 0;
}

int cmd_synth_data(uint64_t seed, int64_t pairs, int feature_dim,
                   double noise, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  int64_t val_n = std::max<int64_t>(1, pairs / 10);
  int64_t test_n = val_n;
  SynthData d = synth_task(seed, pairs + val_n + test_n,
                           default_synth_src_vocab(),
                           default_synth_lexicon(), feature_dim, noise);
  d.vocab.save(out_dir + "/vocab.txt");

  struct Split {
    const char* name;
    int64_t begin, end;
  };
  Split splits[] = {{"train", 0, pairs},
                    {"val", pairs, pairs + val_n},
                    {"test", pairs + val_n, pairs + val_n + test_n}};
  for (const auto& sp : splits) {
    std::ofstream src_f(out_dir + "/" + sp.name + ".src", std::ios::binary);
    std::ofstream tgt_f(out_dir + "/" + sp.name + ".tgt", std::ios::binary);
    FeatureMatrix fm;
    fm.rows = sp.end - sp.begin;
    fm.cols = feature_dim;
    for (int64_t i = sp.begin; i < sp.end; ++i) {
      const Sentence& s = d.corpus.sentences[i];
      std::vector<std::string> src_toks, tgt_toks;
      for (int id : s.src) src_toks.push_back(d.vocab.token(id));
      for (int id : s.tgt) tgt_toks.push_back(d.vocab.token(id));
      src_f << join_tokens(src_toks) << "\n";
      tgt_f << join_tokens(tgt_toks) << "\n";
      auto row = d.features.row(i);
      for (double v : row) fm.data.push_back(static_cast<float>(v));
    }
    save_features(fm, out_dir + "/" + sp.name + ".fvec");
  }
  std::cout << "wrote " << pairs << "/" << val_n << "/" << test_n
            << " train/val/test pairs under " << out_dir << "\n";
  return 0;
}

int cmd_grad_check(const std::string& variant, double tol) {
  // Tiny configuration: hidden 8, embed 8, c 2, o 4, vocab 12, 2 sentences.
  ModelConfig cfg;
  cfg.variant = variant_from_string(variant);
  cfg.vocab_size = 12;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 8;
  cfg.latent_dim = 2;
  cfg.image_dim = 4;
  cfg.dropout = 0.5;

  ParamStore params = build_params(cfg);
  Rng rng(20240517);
  // The check runs at a point with all entries ~U(-0.5, 0.5): the training
  // init (zero biases) parks ReLU pre-activations within the FD step of the
  // kink, where a secant does not estimate the one-sided derivative.
  params.randomize_all(rng, -0.5, 0.5);

  Batch b;
  b.src = {{5, 6, 7, 8}, {9, 10, 11, 0}};
  b.tgt = {{6, 5, 11}, {7, 4, 0}};
  b.src_len = {4, 3};
  b.tgt_len = {3, 2};
  if (cfg.uses_latent())
    b.features = {{0.1, -0.2, 0.3, 0.4}, {0.5, 0.6, -0.7, 0.8}};

  GradCheckReport rep = ref::check_model_gradients(
      params, cfg, b, /*eps_seed=*/20240518, 1e-5, tol, /*threads=*/2);
  std::cout << "variant " << variant << ": max relative error "
            << rep.max_rel_err << " over " << rep.coords_checked
            << " coordinates (worst: " << rep.worst_param << "["
            << rep.worst_index << "])\n";
  if (!rep.ok) {
    std::cout << "FAIL: " << rep.message << "\n";
    return 1;
  }
  std::cout << "OK (tolerance " << tol << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-variable multi-modal NMT"};
  app.require_subcommand(1);

  std::string config_path, variant, out_dir;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--config", config_path, "JSON config file")
      ->required();
  train_cmd->add_option("--variant", variant, "nmt|vmmt_f|vmmt_c");
  train_cmd->add_option("--out", out_dir, "output directory");

  std::string ckpt, src_path, mode = "greedy", z = "mean";
  int beam_size = 5;
  uint64_t seed = 0;
  auto* translate_cmd =
      app.add_subcommand("translate", "translate a source file");
  translate_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  translate_cmd->add_option("--src", src_path, "source text file")
      ->required();
  translate_cmd->add_option("--mode", mode, "greedy|beam");
  translate_cmd->add_option("--beam-size", beam_size, "beam width");
  translate_cmd->add_option("--z", z, "mean|sample");
  translate_cmd->add_option("--seed", seed, "sampling seed");

  std::string ref_path, features_path;
  auto* eval_cmd = app.add_subcommand("evaluate", "BLEU4/chrF3 report");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--src", src_path, "source text file")->required();
  eval_cmd->add_option("--ref", ref_path, "reference text file")->required();
  eval_cmd->add_option("--features", features_path, "FVEC feature file");

  std::string mono_path, out_prefix;
  auto* bt_cmd =
      app.add_subcommand("backtranslate", "reverse-translate monolingual data");
  bt_cmd->add_option("--ckpt", ckpt, "reverse checkpoint")->required();
  bt_cmd->add_option("--mono", mono_path, "monolingual target file")
      ->required();
  bt_cmd->add_option("--out", out_prefix, "output prefix")->required();

  int64_t pairs = 2000;
  int feature_dim = 32;
  double noise = 0.1;
  auto* synth_cmd =
      app.add_subcommand("synth-data", "generate the synthetic task");
  synth_cmd->add_option("--seed", seed, "generator seed");
  synth_cmd->add_option("--pairs", pairs, "training pair count");
  synth_cmd->add_option("--feature-dim", feature_dim, "image feature dim");
  synth_cmd->add_option("--noise", noise, "feature noise sigma");
  synth_cmd->add_option("--out", out_dir, "output directory")->required();

  double tol = 1e-4;
  auto* gc_cmd =
      app.add_subcommand("grad-check", "verify gradients vs finite differences");
  gc_cmd->add_option("--variant", variant, "nmt|vmmt_f|vmmt_c")->required();
  gc_cmd->add_option("--tol", tol, "max relative error");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, variant, out_dir);
    if (translate_cmd->parsed())
      return cmd_translate(ckpt, src_path, mode, beam_size, z, seed);
    if (eval_cmd->parsed())
      return cmd_evaluate(ckpt, src_path, ref_path, features_path);
    if (bt_cmd->parsed())
      return cmd_backtranslate(ckpt, mono_path, out_prefix);
    if (synth_cmd->parsed())
      return cmd_synth_data(seed, pairs, feature_dim, noise, out_dir);
    if (gc_cmd->parsed()) return cmd_grad_check(variant, tol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
