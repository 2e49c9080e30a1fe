#pragma once

// Training loop with BLEU-based model selection and patience-10 early
// stopping, the back-translation pretrain/fine-tune protocol, corpus
// decoding, and evaluation reports.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vmmt/adam.hpp"
#include "vmmt/checkpoint.hpp"
#include "vmmt/data.hpp"
#include "vmmt/metrics.hpp"
#include "vmmt/model.hpp"

namespace vmmt {

struct TrainConfig {
  ModelConfig model;
  double lr = 0.002;
  int batch_size = 40;
  int max_epochs = 40;
  int patience = 10;
  uint64_t seed = 1;
  int pretrain_epochs = 0;
  double grad_clip = 5.0;
  int decode_workers = 2;

  // File-based runs (the in-memory API ignores these).
  std::string train_src, train_tgt, val_src, val_tgt;
  std::string features;
  std::string vocab_file;
  std::string bpe_merges;
  int bpe_train_merges = 0;  // train a BPE model when no merges file given
  std::string synthetic_src, synthetic_tgt, synthetic_features;
  std::string out_dir;

  void validate() const {
    check(lr >= 0.0, "train config: lr must be >= 0");
    check(batch_size >= 1, "train config: batch_size must be >= 1");
    check(max_epochs >= 1, "train config: max_epochs must be >= 1");
    check(patience >= 1 && patience <= max_epochs,
          "train config: need 1 <= patience <= max_epochs");
    check(pretrain_epochs >= 0, "train config: pretrain_epochs must be >= 0");
  }
};

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.model = config_from_json(j);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.decode_workers = j.value("decode_workers", c.decode_workers);
  c.train_src = j.value("train_src", "");
  c.train_tgt = j.value("train_tgt", "");
  c.val_src = j.value("val_src", "");
  c.val_tgt = j.value("val_tgt", "");
  c.features = j.value("features", "");
  c.vocab_file = j.value("vocab", "");
  c.bpe_merges = j.value("bpe_merges", "");
  c.bpe_train_merges = j.value("bpe_train_merges", 0);
  c.synthetic_src = j.value("synthetic_src", "");
  c.synthetic_tgt = j.value("synthetic_tgt", "");
  c.synthetic_features = j.value("synthetic_features", "");
  c.out_dir = j.value("out_dir", "");
  return c;
}

struct TrainData {
  Vocab vocab;
  BpeModel bpe;
  ParallelCorpus train;
  ParallelCorpus val;
  std::vector<std::string> val_refs;  // reference text for validation BLEU
  const FeatureMatrix* train_features = nullptr;
  ParallelCorpus synthetic;  // back-translated data (feature bank 1)
  const FeatureMatrix* synthetic_features = nullptr;
};

struct EpochLog {
  int epoch = 0;
  double text_ll = 0, image_ll = 0, kl_raw = 0, kl_clamped = 0, elbo = 0;
  double val_bleu = 0;
  bool selected = false;
  bool pretrain = false;

  nlohmann::json to_json() const {
    return nlohmann::json{{"epoch", epoch},
                          {"text_ll", text_ll},
                          {"image_ll", image_ll},
                          {"kl_raw", kl_raw},
                          {"kl_clamped", kl_clamped},
                          {"elbo", elbo},
                          {"val_bleu", val_bleu},
                          {"selected", selected}};
  }
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
  double best_val_bleu = -1.0;
  int best_epoch = 0;   // global epoch index of the selected model
  int epochs_run = 0;
};

// ------------------------------- decoding -------------------------------

inline std::string detokenize(const std::vector<int>& ids, const Vocab& vocab,
                              const BpeModel& bpe) {
  std::vector<std::string> toks;
  for (int id : ids)
    if (id >= kUnkId) toks.push_back(vocab.token(id));  // drop pad/<s>/</s>
  if (!bpe.empty()) toks = merge_subwords(toks);
  return join_tokens(toks);
}

// Greedy/beam decoding of a whole corpus; sentences fan out over worker
// threads (each with its own tape) and are reassembled by index, so the
// output is identical for any worker count.
inline std::vector<std::vector<int>> translate_corpus(
    const ParamStore& params, const ModelConfig& cfg,
    const ParallelCorpus& corpus, int workers, DecodeMode mode = DecodeMode::kGreedy,
    int beam_size = 5, ZPolicy zp = {}) {
  std::vector<std::vector<int>> out(corpus.size());
  workers = std::max(1, workers);
  if (workers == 1) {
    for (int64_t i = 0; i < corpus.size(); ++i)
      if (!corpus.sentences[i].src.empty())
        out[i] = translate(params, cfg, corpus.sentences[i].src, mode,
                           beam_size, zp);
    return out;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (int64_t i = w; i < corpus.size(); i += workers)
        if (!corpus.sentences[i].src.empty())
          out[i] = translate(params, cfg, corpus.sentences[i].src, mode,
                             beam_size, zp);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

// ------------------------------- training -------------------------------

namespace detail {

inline double validation_bleu(const ParamStore& params,
                              const ModelConfig& cfg, const TrainData& data,
                              int workers) {
  auto decoded = translate_corpus(params, cfg, data.val, workers);
  std::vector<std::string> hyps(decoded.size());
  for (size_t i = 0; i < decoded.size(); ++i)
    hyps[i] = detokenize(decoded[i], data.vocab, data.bpe);
  return bleu4(hyps, data.val_refs);
}

inline std::vector<const FeatureMatrix*> feature_banks(const TrainData& d,
                                                       bool needed) {
  if (!needed) return {};
  std::vector<const FeatureMatrix*> banks{d.train_features};
  if (d.synthetic_features) banks.push_back(d.synthetic_features);
  return banks;
}

}  // namespace detail

// Trains with Adam, greedy-decodes the validation set after every epoch,
// keeps the best checkpoint by BLEU4, and stops after `patience` epochs
// without improvement. When pretrain_epochs > 0 and synthetic data is
// present, those first epochs run on the 1:1 gold/synthetic mixture with
// model selection disabled.
inline TrainResult train(const TrainConfig& tc, const TrainData& data,
                         std::ostream* log_stream = nullptr) {
  tc.validate();
  check(!data.train.empty(), "train: empty training corpus");
  check(!data.val.empty(), "train: empty validation corpus");

  ModelConfig cfg = tc.model;
  cfg.vocab_size = data.vocab.size();
  cfg.validate();
  if (cfg.uses_latent())
    check(data.train_features != nullptr,
          "train: variant " + to_string(cfg.variant) +
              " requires image features");

  Rng init_rng = Rng::derive(tc.seed, {0x1217});
  ParamStore params = build_params(cfg, init_rng);
  Adam adam(AdamConfig{tc.lr, 0.9, 0.999, 1e-8, tc.grad_clip});

  bool pretraining = tc.pretrain_epochs > 0 && !data.synthetic.empty();
  auto banks = detail::feature_banks(data, cfg.uses_latent());

  TrainResult result;
  int fine_tune_epoch = 0;
  std::string ckpt_path =
      tc.out_dir.empty() ? "" : tc.out_dir + "/best.vmck";

  auto emit = [&](const nlohmann::json& j) {
    if (log_stream) (*log_stream) << j.dump() << "\n";
  };

  int total_pretrain = pretraining ? tc.pretrain_epochs : 0;
  for (int epoch = 1; epoch <= total_pretrain + tc.max_epochs; ++epoch) {
    bool in_pretrain = epoch <= total_pretrain;
    const ParallelCorpus* corpus = &data.train;
    ParallelCorpus mixed;
    if (in_pretrain) {
      mixed = mix_upsample(data.train, data.synthetic,
                           Rng::derive(tc.seed, {0x313, (uint64_t)epoch})
                               .next_u64());
      corpus = &mixed;
    }
    auto batches = make_batches(
        *corpus, tc.batch_size,
        Rng::derive(tc.seed, {0xe90c, (uint64_t)epoch}).next_u64(), banks);

    ElboReport epoch_report;
    try {
      for (size_t bi = 0; bi < batches.size(); ++bi) {
        Tape tape;
        ParamBinder P(tape, params);
        Rng rng = Rng::derive(tc.seed,
                              {0x57e9, (uint64_t)epoch, (uint64_t)bi});
        ElboOut out = elbo_batch(tape, P, batches[bi], cfg, rng,
                                 /*train=*/true);
        tape.backward(out.loss);
        adam.step(params, P.grads());
        epoch_report.accumulate(out.report);
      }
    } catch (const TensorError& e) {
      // Non-finite loss or similar: keep the last good checkpoint.
      if (!ckpt_path.empty() && result.best_epoch > 0)
        result.best.save(ckpt_path);
      throw TensorError(std::string("training aborted at epoch ") +
                        std::to_string(epoch) + ": " + e.what());
    }

    EpochLog el;
    el.epoch = epoch;
    el.pretrain = in_pretrain;
    double n = std::max<int64_t>(1, epoch_report.sentences);
    el.text_ll = epoch_report.text_ll / n;
    el.image_ll = epoch_report.image_ll / n;
    el.kl_raw = epoch_report.kl_raw / n;
    el.kl_clamped = epoch_report.kl_clamped / n;
    el.elbo = epoch_report.elbo / n;
    el.val_bleu =
        detail::validation_bleu(params, cfg, data, tc.decode_workers);

    if (!in_pretrain) {
      ++fine_tune_epoch;
      if (el.val_bleu > result.best_val_bleu) {
        result.best_val_bleu = el.val_bleu;
        result.best_epoch = epoch;
        el.selected = true;
        result.best = Checkpoint::from_store(params, cfg, data.vocab,
                                             data.bpe, epoch, el.val_bleu,
                                             tc.seed);
        if (!ckpt_path.empty()) result.best.save(ckpt_path);
      }
    }
    result.log.push_back(el);
    emit(el.to_json());
    result.epochs_run = epoch;

    if (in_pretrain && epoch == total_pretrain) {
      emit(nlohmann::json{{"event", "pretrain_end"}, {"epoch", epoch}});
      fine_tune_epoch = 0;
    }
    if (!in_pretrain) {
      int best_ft = result.best_epoch - total_pretrain;
      if (fine_tune_epoch - best_ft >= tc.patience) break;
    }
  }
  return result;
}

// The two-phase §-style protocol as one call: identical to train() but
// makes the phases explicit at the call site.
inline TrainResult pretrain_finetune(const TrainConfig& tc,
                                     const TrainData& data,
                                     std::ostream* log_stream = nullptr) {
  return train(tc, data, log_stream);
}

// ----------------------------- backtranslate ----------------------------

// Reverse model translates monolingual target text into synthetic sources;
// output pairs are <synthetic source, gold target>.
inline std::vector<std::string> backtranslate(
    const Checkpoint& reverse_ck, const std::vector<std::string>& mono_lines,
    int workers = 2) {
  ParamStore params = reverse_ck.to_store();
  const ModelConfig& cfg = reverse_ck.config;
  BpeApplier applier(reverse_ck.bpe);
  BpeApplier* bpe = reverse_ck.bpe.empty() ? nullptr : &applier;

  ParallelCorpus mono;
  int64_t known = 0, total_tokens = 0;
  for (const auto& line : mono_lines) {
    Sentence s;
    s.src = reverse_ck.vocab.to_ids(tokenize_line(line, bpe));
    total_tokens += static_cast<int64_t>(s.src.size());
    for (int id : s.src)
      if (id != kUnkId) ++known;
    mono.sentences.push_back(std::move(s));
  }
  check(total_tokens == 0 || known > 0,
        "backtranslate: no vocabulary overlap between model and input");

  auto decoded = translate_corpus(params, cfg, mono, workers);
  std::vector<std::string> out(decoded.size());
  for (size_t i = 0; i < decoded.size(); ++i)
    out[i] = detokenize(decoded[i], reverse_ck.vocab, reverse_ck.bpe);
  return out;
}

// ------------------------------- evaluate -------------------------------

struct EvalReport {
  double bleu = 0.0;
  double chrf = 0.0;
  std::vector<std::string> outputs;
  bool has_elbo = false;
  ElboReport elbo;

  nlohmann::json to_json() const {
    nlohmann::json j{{"bleu4", bleu}, {"chrf3", chrf}, {"outputs", outputs}};
    if (has_elbo) {
      j["elbo"] = nlohmann::json{{"text_ll", elbo.text_ll},
                                 {"image_ll", elbo.image_ll},
                                 {"kl_raw", elbo.kl_raw},
                                 {"kl_clamped", elbo.kl_clamped},
                                 {"elbo", elbo.elbo},
                                 {"tokens", elbo.tokens},
                                 {"sentences", elbo.sentences}};
    }
    return j;
  }
};

// Deterministic test-set evaluation at z_policy=mean; adds a test-set ELBO
// decomposition when features are supplied.
inline EvalReport evaluate(const Checkpoint& ck,
                           const std::vector<std::string>& src_lines,
                           const std::vector<std::string>& ref_lines,
                           const FeatureMatrix* features = nullptr,
                           int workers = 2) {
  check(src_lines.size() == ref_lines.size(),
        "evaluate: source/reference line counts differ");
  ParamStore params = ck.to_store();
  const ModelConfig& cfg = ck.config;
  BpeApplier applier(ck.bpe);
  BpeApplier* bpe = ck.bpe.empty() ? nullptr : &applier;
  ParallelCorpus corpus =
      load_corpus(src_lines, ref_lines, ck.vocab, bpe,
                  /*attach_features=*/features != nullptr);

  EvalReport rep;
  auto decoded = translate_corpus(params, cfg, corpus, workers);
  rep.outputs.resize(decoded.size());
  for (size_t i = 0; i < decoded.size(); ++i)
    rep.outputs[i] = detokenize(decoded[i], ck.vocab, ck.bpe);
  rep.bleu = bleu4(rep.outputs, ref_lines);
  rep.chrf = chrf3(rep.outputs, ref_lines);

  if (features && cfg.uses_latent()) {
    check(features->rows == corpus.size(),
          "evaluate: feature rows " + std::to_string(features->rows) +
              " != corpus size " + std::to_string(corpus.size()));
    rep.has_elbo = true;
    auto batches = make_batches(corpus, 40, ck.seed, features);
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      Tape tape;
      ParamBinder P(tape, params);
      Rng rng = Rng::derive(ck.seed, {0xe7a1, (uint64_t)bi});
      ElboOut out =
          elbo_batch(tape, P, batches[bi], cfg, rng, /*train=*/false);
      rep.elbo.accumulate(out.report);
    }
  }
  return rep;
}

// --------------------------- file-based driver ---------------------------

// Loads everything the config names and runs train(); returns the result
// and writes best.vmck plus train_log.jsonl under out_dir.
struct LoadedTrainData {
  TrainData data;
  FeatureMatrix train_features_storage;
  FeatureMatrix synth_features_storage;
  BpeModel bpe;
};

inline void load_train_data(const TrainConfig& tc, LoadedTrainData& out) {
  check(!tc.train_src.empty() && !tc.train_tgt.empty(),
        "train config: train_src/train_tgt required");
  check(!tc.val_src.empty() && !tc.val_tgt.empty(),
        "train config: val_src/val_tgt required");

  auto train_src = read_lines(tc.train_src);
  auto train_tgt = read_lines(tc.train_tgt);
  auto val_src = read_lines(tc.val_src);
  auto val_tgt = read_lines(tc.val_tgt);

  if (!tc.bpe_merges.empty()) {
    out.bpe = BpeModel::load(tc.bpe_merges);
  } else if (tc.bpe_train_merges > 0) {
    std::map<std::string, int64_t> freq;
    for (const auto* lines : {&train_src, &train_tgt})
      for (const auto& line : *lines)
        for (const auto& w : preprocess(line)) ++freq[w];
    out.bpe = bpe_train(freq, tc.bpe_train_merges);
  }
  out.data.bpe = out.bpe;
  BpeApplier applier(out.bpe);
  BpeApplier* bpe = out.bpe.empty() ? nullptr : &applier;

  if (!tc.vocab_file.empty()) {
    out.data.vocab = Vocab::load(tc.vocab_file);
  } else {
    std::map<std::string, int64_t> counts;
    for (const auto* lines : {&train_src, &train_tgt})
      for (const auto& line : *lines)
        for (const auto& t : tokenize_line(line, bpe)) ++counts[t];
    out.data.vocab = Vocab::from_counts(counts);
  }

  bool needs_features = tc.model.uses_latent();
  out.data.train = load_corpus(train_src, train_tgt, out.data.vocab, bpe,
                               needs_features);
  out.data.val = load_corpus(val_src, val_tgt, out.data.vocab, bpe, false);
  out.data.val_refs = val_tgt;

  if (needs_features) {
    check(!tc.features.empty(),
          "train config: features required for variant " +
              to_string(tc.model.variant));
    out.train_features_storage = load_features(tc.features);
    check(out.train_features_storage.rows == out.data.train.size(),
          "train config: feature rows " +
              std::to_string(out.train_features_storage.rows) +
              " != training sentences " +
              std::to_string(out.data.train.size()));
    out.data.train_features = &out.train_features_storage;
  }

  if (!tc.synthetic_src.empty()) {
    check(!tc.synthetic_tgt.empty(),
          "train config: synthetic_tgt required with synthetic_src");
    auto synth_src = read_lines(tc.synthetic_src);
    auto synth_tgt = read_lines(tc.synthetic_tgt);
    out.data.synthetic = load_corpus(synth_src, synth_tgt, out.data.vocab,
                                     bpe, needs_features, /*synthetic=*/true,
                                     /*feature_bank=*/1);
    if (needs_features) {
      check(!tc.synthetic_features.empty(),
            "train config: synthetic_features required for variant " +
                to_string(tc.model.variant));
      out.synth_features_storage = load_features(tc.synthetic_features);
      check(out.synth_features_storage.rows ==
                static_cast<int64_t>(synth_src.size()),
            "train config: synthetic feature rows mismatch");
      out.data.synthetic_features = &out.synth_features_storage;
    }
  }
}

inline TrainResult train_from_files(TrainConfig tc) {
  LoadedTrainData loaded;
  load_train_data(tc, loaded);
  std::ofstream log_file;
  std::ostream* log_stream = nullptr;
  if (!tc.out_dir.empty()) {
    std::filesystem::create_directories(tc.out_dir);
    log_file.open(tc.out_dir + "/train_log.jsonl", std::ios::binary);
    check(log_file.good(), "train: cannot open log file under '" +
                               tc.out_dir + "'");
    log_stream = &log_file;
  }
  return train(tc, loaded.data, log_stream);
}

}  // namespace vmmt
