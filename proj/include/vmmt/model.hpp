#pragma once

// The three trainable models behind one config: the text-only NMT baseline,
// the fixed-prior VMMT_F and the conditional-prior VMMT_C. Composes the
// source encoder, latent machinery, attentive target decoder and the image
// feature decoder into the single-sample reparameterised ELBO, and provides
// image-free greedy/beam translation.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "vmmt/adam.hpp"
#include "vmmt/batch.hpp"
#include "vmmt/grad_check.hpp"
#include "vmmt/latent.hpp"
#include "vmmt/layers.hpp"
#include "vmmt/params.hpp"
#include "vmmt/rng.hpp"
#include "vmmt/tensor.hpp"

namespace vmmt {

enum class Variant { kNmt, kVmmtF, kVmmtC };

inline Variant variant_from_string(const std::string& s) {
  if (s == "nmt") return Variant::kNmt;
  if (s == "vmmt_f") return Variant::kVmmtF;
  if (s == "vmmt_c") return Variant::kVmmtC;
  throw TensorError("unknown variant '" + s +
                    "' (expected nmt, vmmt_f or vmmt_c)");
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kNmt: return "nmt";
    case Variant::kVmmtF: return "vmmt_f";
    default: return "vmmt_c";
  }
}

struct ModelConfig {
  Variant variant = Variant::kVmmtF;
  int vocab_size = 0;  // joint source/target vocabulary
  int embed_dim = 500;
  int hidden_dim = 500;
  int latent_dim = 500;
  int image_dim = 2048;
  double obs_scale = 1.0;  // observation stddev of the image Gaussian
  double free_bits = 0.0;  // KL floor, in bits
  double dropout = 0.5;
  CellType cell_type = CellType::kLstm;
  double image_loss_weight = 1.0;
  int enc_layers = 2;

  bool uses_latent() const { return variant != Variant::kNmt; }

  int decoder_input_dim() const {
    return embed_dim + (uses_latent() ? latent_dim : 0);
  }

  void validate() const {
    check(vocab_size > 4, "config: vocab_size must exceed the reserved ids");
    check(embed_dim > 0 && hidden_dim > 0, "config: dims must be positive");
    check(obs_scale > 0.0, "config: obs_scale must be > 0");
    check(free_bits >= 0.0, "config: free_bits must be >= 0");
    check(dropout >= 0.0 && dropout < 1.0, "config: dropout in [0,1)");
    if (uses_latent()) {
      check(latent_dim > 0, "config: latent_dim must be positive");
      check(image_dim > 0, "config: image_dim must be positive");
    }
  }
};

// Per-batch ELBO decomposition; every field is a sum over the sentences in
// the batch, in nats. The identity elbo == text_ll + image_ll - kl_clamped
// holds exactly because elbo is computed from the other three.
struct ElboReport {
  double text_ll = 0.0;
  double image_ll = 0.0;
  double kl_raw = 0.0;
  double kl_clamped = 0.0;
  double elbo = 0.0;
  int64_t tokens = 0;
  int64_t sentences = 0;

  void accumulate(const ElboReport& o) {
    text_ll += o.text_ll;
    image_ll += o.image_ll;
    kl_raw += o.kl_raw;
    kl_clamped += o.kl_clamped;
    elbo += o.elbo;
    tokens += o.tokens;
    sentences += o.sentences;
  }
};

// ------------------------------ parameters ------------------------------

// Registers every parameter of the given variant. Generative parameters are
// "gen.*", inference parameters "inf.*"; MLP hidden layers use hidden_dim.
inline ParamStore build_params(const ModelConfig& cfg) {
  cfg.validate();
  ParamStore ps;
  int E = cfg.embed_dim, H = cfg.hidden_dim, C = cfg.latent_dim;
  int V = cfg.vocab_size, O = cfg.image_dim;

  ps.add_weight("gen.src_emb", {V, E});
  ps.add_weight("gen.tgt_emb", {V, E});
  add_birnn_params(ps, cfg.cell_type, "gen.enc", E, H, cfg.enc_layers);
  add_affine_params(ps, "gen.dec_init", 2 * H, H);
  add_cell_params(ps, cfg.cell_type, "gen.dec_cell", cfg.decoder_input_dim(),
                  H);
  ps.add_weight("gen.attn.W", {H, 2 * H});
  add_affine_params(ps, "gen.out", H + 2 * H, V);

  if (cfg.uses_latent()) {
    add_mlp_params(ps, "gen.img", C, H, O);
    if (cfg.variant == Variant::kVmmtC) {
      add_mlp_params(ps, "gen.prior_mu", 2 * H, H, C);
      add_mlp_params(ps, "gen.prior_sigma", 2 * H, H, C);
    }
    add_affine_params(ps, "inf.x_proj", 2 * H, H);
    if (cfg.variant == Variant::kVmmtF) {
      add_mlp_params(ps, "inf.q_mu", H, H, C);
      add_mlp_params(ps, "inf.q_sigma", H, H, C);
    } else {
      add_cell_params(ps, cfg.cell_type, "inf.tgt_rnn.l1.fwd", E, H);
      add_cell_params(ps, cfg.cell_type, "inf.tgt_rnn.l1.bwd", E, H);
      add_mlp_params(ps, "inf.img", O, H, H);
      add_mlp_params(ps, "inf.q_mu", H + 2 * H + H, H, C);
      add_mlp_params(ps, "inf.q_sigma", H + 2 * H + H, H, C);
    }
  }
  return ps;
}

inline ParamStore build_params(const ModelConfig& cfg, Rng& rng) {
  ParamStore ps = build_params(cfg);
  ps.init_uniform(rng);
  return ps;
}

// ------------------------------- encoding -------------------------------

struct EncodedBatch {
  int batch = 0;
  int steps = 0;
  std::vector<Tensor> states;    // per position [B, 2H]
  std::vector<Tensor> mask;      // per position [B,1] constants in {0,1}
  std::vector<Tensor> inv_mask;  // 1 - mask
  Tensor inv_len;                // [B,1] constant 1/len
  Tensor avg;                    // masked average [B, 2H]
};

namespace detail {

inline std::vector<int> column_ids(const std::vector<std::vector<int>>& rows,
                                   int t) {
  std::vector<int> ids(rows.size());
  for (size_t r = 0; r < rows.size(); ++r)
    ids[r] = t < static_cast<int>(rows[r].size()) ? rows[r][t] : kPadId;
  return ids;
}

struct MaskSet {
  std::vector<Tensor> mask, inv_mask;
  Tensor inv_len;
};

inline MaskSet make_masks(Tape& tape, const std::vector<int>& lengths,
                          int steps) {
  MaskSet ms;
  int b = static_cast<int>(lengths.size());
  for (int t = 0; t < steps; ++t) {
    std::vector<double> m(b), im(b);
    for (int r = 0; r < b; ++r) {
      m[r] = t < lengths[r] ? 1.0 : 0.0;
      im[r] = 1.0 - m[r];
    }
    ms.mask.push_back(tape.constant({b, 1}, m));
    ms.inv_mask.push_back(tape.constant({b, 1}, im));
  }
  std::vector<double> il(b);
  for (int r = 0; r < b; ++r) il[r] = 1.0 / std::max(lengths[r], 1);
  ms.inv_len = tape.constant({b, 1}, il);
  return ms;
}

}  // namespace detail

inline EncodedBatch encode_batch(Tape& tape, ParamBinder& P,
                                 const ModelConfig& cfg,
                                 const std::vector<std::vector<int>>& src,
                                 const std::vector<int>& src_len, bool train,
                                 Rng* rng) {
  EncodedBatch enc;
  enc.batch = static_cast<int>(src.size());
  check(enc.batch > 0, "empty source");
  enc.steps = 0;
  for (int r = 0; r < enc.batch; ++r) {
    check(src_len[r] >= 1, "empty source");
    enc.steps = std::max(enc.steps, src_len[r]);
  }
  auto ms = detail::make_masks(tape, src_len, enc.steps);
  enc.mask = std::move(ms.mask);
  enc.inv_mask = std::move(ms.inv_mask);
  enc.inv_len = ms.inv_len;

  std::vector<Tensor> embeds;
  embeds.reserve(enc.steps);
  Tensor table = P("gen.src_emb");
  for (int t = 0; t < enc.steps; ++t)
    embeds.push_back(gather_rows(table, detail::column_ids(src, t)));
  enc.states =
      encode_source(cfg.cell_type, std::move(embeds), enc.mask, enc.inv_mask,
                    P, "gen.enc", cfg.hidden_dim, cfg.enc_layers, cfg.dropout,
                    train, rng);
  enc.avg = masked_average(enc.states, enc.mask, enc.inv_len);
  return enc;
}

// ------------------------------- decoding -------------------------------

struct DecoderStepOut {
  Tensor log_probs;  // [B, V]
  RnnState state;
  Tensor attn_weights;  // [B, Ts]
};

inline RnnState decoder_init_state(Tape& tape, ParamBinder& P,
                                   const ModelConfig& cfg,
                                   const EncodedBatch& enc) {
  RnnState s;
  s.h = vtanh(affine_layer(enc.avg, P, "gen.dec_init"));
  if (cfg.cell_type == CellType::kLstm)
    s.c = tape.zeros({enc.batch, cfg.hidden_dim});
  return s;
}

// One decoder step: embed the previous token, concatenate z when the
// variant has a latent, run the cell, attend over the source, and emit
// log-probabilities over the target vocabulary.
inline DecoderStepOut decoder_step(ParamBinder& P, const ModelConfig& cfg,
                                   const EncodedBatch& enc, const Tensor* z,
                                   const std::vector<int>& prev_ids,
                                   const RnnState& state, bool train,
                                   Rng* rng) {
  check(cfg.uses_latent() == (z != nullptr),
        std::string("decoder_step: variant ") + to_string(cfg.variant) +
            (z ? " takes no latent" : " requires a latent"));
  Tensor emb = gather_rows(P("gen.tgt_emb"), prev_ids);
  Tensor input = z ? concat_cols(emb, *z) : emb;
  DecoderStepOut out;
  out.state = rnn_cell_step(cfg.cell_type, input, state, P, "gen.dec_cell");
  Tensor sj = out.state.h;
  if (train && cfg.dropout > 0.0) sj = dropout(sj, cfg.dropout, *rng);
  AttentionOut att = bilinear_attention(sj, enc.states, enc.mask, P,
                                        "gen.attn");
  out.attn_weights = att.weights;
  Tensor pre = concat_cols(sj, att.context);
  if (train && cfg.dropout > 0.0) pre = dropout(pre, cfg.dropout, *rng);
  out.log_probs = log_softmax_rows(affine_layer(pre, P, "gen.out"));
  return out;
}

// --------------------------- image observation ---------------------------

// log N(v; nu, obs_scale^2 I) per row, the constant term included so the
// reported ELBO is a true bound.
inline Tensor image_log_likelihood(const Tensor& v, const Tensor& nu,
                                   double obs_scale) {
  check_same_shape("image_log_likelihood", v.shape(), nu.shape());
  check(obs_scale > 0.0, "image_log_likelihood: obs_scale must be > 0");
  int o = v.shape()[1];
  double var = obs_scale * obs_scale;
  double log_norm =
      -0.5 * static_cast<double>(o) *
      std::log(2.0 * 3.14159265358979323846264338327950288 * var);
  Tensor sq = row_sum(sq_diff(v, nu));
  return add_scalar(scalar_mul(sq, -1.0 / (2.0 * var)), log_norm);
}

inline Tensor image_feature_locations(const Tensor& z, ParamBinder& P) {
  return mlp(z, P, "gen.img");
}

// --------------------------------- ELBO ---------------------------------

struct ElboOut {
  Tensor loss;  // scalar, minimised by the trainer
  ElboReport report;
  // Per-sentence pieces, exposed for analysis/tests.
  Tensor text_row, image_row, kl_row, kl_clamped_row;
};

namespace detail {

// Sum over gold target tokens (bos-shifted inputs, eos-terminated outputs)
// of log pi_j(y_j), per sentence.
inline Tensor text_log_likelihood_rows(Tape& tape, ParamBinder& P,
                                       const ModelConfig& cfg,
                                       const EncodedBatch& enc,
                                       const Tensor* z, const Batch& batch,
                                       bool train, Rng& rng) {
  int B = batch.size();
  int steps = 0;
  for (int r = 0; r < B; ++r) steps = std::max(steps, batch.tgt_len[r] + 1);

  std::vector<int> score_len(B);
  for (int r = 0; r < B; ++r) score_len[r] = batch.tgt_len[r] + 1;
  auto ms = detail::make_masks(tape, score_len, steps);

  RnnState state = decoder_init_state(tape, P, cfg, enc);
  Tensor acc = tape.zeros({B, 1});
  std::vector<int> prev(B, kBosId);
  for (int t = 0; t < steps; ++t) {
    DecoderStepOut step =
        decoder_step(P, cfg, enc, z, prev, state, train, &rng);
    state = step.state;
    std::vector<int> gold(B);
    for (int r = 0; r < B; ++r) {
      gold[r] = t < batch.tgt_len[r]
                    ? batch.tgt[r][t]
                    : (t == batch.tgt_len[r] ? kEosId : kPadId);
    }
    acc = add(acc, mul(pick_col(step.log_probs, gold), ms.mask[t]));
    prev = gold;
  }
  return acc;
}

}  // namespace detail

// Single-sample reparameterised ELBO over a padded batch. One epsilon per
// sentence; dropout only at train time. When eps_override is supplied it
// must hold B*latent_dim standard-normal values (used to freeze noise).
inline ElboOut elbo_batch(Tape& tape, ParamBinder& P, const Batch& batch,
                          const ModelConfig& cfg, Rng& rng, bool train,
                          const std::vector<double>* eps_override = nullptr) {
  int B = batch.size();
  check(B > 0, "elbo_batch: empty batch");
  if (cfg.uses_latent())
    check(batch.has_features(),
          "missing image features for variant " + to_string(cfg.variant));

  EncodedBatch enc = encode_batch(tape, P, cfg, batch.src, batch.src_len,
                                  train, &rng);

  // Latent: prior, posterior, one sampled z per sentence.
  Tensor z;
  DiagGaussian prior, posterior;
  if (cfg.uses_latent()) {
    std::vector<double> flat(static_cast<size_t>(B) * cfg.image_dim);
    for (int r = 0; r < B; ++r) {
      check(static_cast<int>(batch.features[r].size()) == cfg.image_dim,
            "elbo_batch: feature row dim mismatch");
      std::copy(batch.features[r].begin(), batch.features[r].end(),
                flat.begin() + static_cast<size_t>(r) * cfg.image_dim);
    }
    Tensor v = tape.constant({B, cfg.image_dim}, std::move(flat));

    if (cfg.variant == Variant::kVmmtF) {
      prior = fixed_prior(tape, B, cfg.latent_dim);
      posterior =
          posterior_fixed_variant(enc.states, enc.mask, enc.inv_len, P);
    } else {
      prior = conditional_prior(enc.avg, P);
      int tgt_steps_n = 0;
      for (int r = 0; r < B; ++r)
        tgt_steps_n = std::max(tgt_steps_n, batch.tgt_len[r]);
      check(tgt_steps_n > 0, "posterior: empty target");
      std::vector<std::vector<int>> tgt_cols(tgt_steps_n);
      for (int t = 0; t < tgt_steps_n; ++t)
        tgt_cols[t] = detail::column_ids(batch.tgt, t);
      auto tm = detail::make_masks(tape, batch.tgt_len, tgt_steps_n);
      posterior = posterior_conditional(
          enc.states, enc.mask, enc.inv_len, tgt_cols, tm.mask, tm.inv_mask,
          tm.inv_len, v, cfg.cell_type, cfg.hidden_dim, cfg.dropout, train,
          &rng, P);
    }
    LatentSample s = reparameterize(posterior, &rng, eps_override);
    z = s.z;

    ElboOut out;
    // Decoder pass below fills text_row; compute image and KL rows now.
    Tensor nu = image_feature_locations(z, P);
    out.image_row = image_log_likelihood(v, nu, cfg.obs_scale);
    KlResult kl = kl_diag(posterior, prior);
    out.kl_row = kl.per_row;
    out.kl_clamped_row = free_bits(kl.per_row, cfg.free_bits);

    out.text_row =
        detail::text_log_likelihood_rows(tape, P, cfg, enc, &z, batch, train,
                                         rng);
    Tensor per_sentence = sub(
        add(out.text_row, scalar_mul(out.image_row, cfg.image_loss_weight)),
        out.kl_clamped_row);
    out.loss = scalar_mul(sum_all(per_sentence), -1.0 / B);

    out.report.sentences = B;
    for (int r = 0; r < B; ++r) {
      out.report.text_ll += out.text_row.at(r);
      out.report.image_ll += out.image_row.at(r);
      out.report.kl_raw += out.kl_row.at(r);
      out.report.kl_clamped += out.kl_clamped_row.at(r);
      out.report.tokens += batch.tgt_len[r] + 1;
    }
    out.report.elbo =
        out.report.text_ll + out.report.image_ll - out.report.kl_clamped;
    if (!std::isfinite(out.loss.scalar()))
      throw TensorError("non-finite loss: text_ll=" +
                        std::to_string(out.report.text_ll) + " image_ll=" +
                        std::to_string(out.report.image_ll) + " kl=" +
                        std::to_string(out.report.kl_raw));
    return out;
  }

  // Text-only baseline: the ELBO degenerates to the log-likelihood.
  ElboOut out;
  out.text_row = detail::text_log_likelihood_rows(tape, P, cfg, enc, nullptr,
                                                  batch, train, rng);
  out.loss = scalar_mul(sum_all(out.text_row), -1.0 / B);
  out.report.sentences = B;
  for (int r = 0; r < B; ++r) {
    out.report.text_ll += out.text_row.at(r);
    out.report.tokens += batch.tgt_len[r] + 1;
  }
  out.report.elbo = out.report.text_ll;
  if (!std::isfinite(out.loss.scalar()))
    throw TensorError("non-finite loss: text_ll=" +
                      std::to_string(out.report.text_ll));
  return out;
}

// ------------------------------ prediction ------------------------------

enum class DecodeMode { kGreedy, kBeam };

struct ZPolicy {
  bool sample = false;  // false: distribution mean
  uint64_t seed = 0;
};

namespace detail {

// Image-free z for prediction: VMMT_F uses its inference network's mean,
// VMMT_C the conditional prior's mean (or a sample under z_policy=sample).
inline Tensor prediction_z(ParamBinder& P, const ModelConfig& cfg,
                           const EncodedBatch& enc, const ZPolicy& zp) {
  DiagGaussian d;
  if (cfg.variant == Variant::kVmmtF) {
    d = posterior_fixed_variant(enc.states, enc.mask, enc.inv_len, P);
  } else {
    d = conditional_prior(enc.avg, P);
  }
  if (!zp.sample) return mean_sample(d).z;
  Rng rng(zp.seed);
  return reparameterize(d, &rng).z;
}

inline int argmax_row(const std::vector<double>& v, int cols, int row) {
  int best = 0;
  const double* p = v.data() + static_cast<size_t>(row) * cols;
  for (int c = 1; c < cols; ++c)
    if (p[c] > p[best]) best = c;
  return best;
}

}  // namespace detail

// Translates one source sentence without any image input. Decoding stops at
// </s> or at the 2*m+10 length cap; beam scores are length-normalised.
inline std::vector<int> translate(const ParamStore& params,
                                  const ModelConfig& cfg,
                                  const std::vector<int>& src_ids,
                                  DecodeMode mode = DecodeMode::kGreedy,
                                  int beam_size = 5, ZPolicy zp = {}) {
  check(!src_ids.empty(), "empty source");
  Tape tape;
  ParamBinder P(tape, params);
  int m = static_cast<int>(src_ids.size());
  int cap = 2 * m + 10;

  EncodedBatch enc = encode_batch(tape, P, cfg, {src_ids}, {m},
                                  /*train=*/false, nullptr);
  Tensor z;
  if (cfg.uses_latent()) z = detail::prediction_z(P, cfg, enc, zp);
  const Tensor* zp_ptr = cfg.uses_latent() ? &z : nullptr;

  if (mode == DecodeMode::kGreedy) {
    RnnState state = decoder_init_state(tape, P, cfg, enc);
    std::vector<int> out;
    int prev = kBosId;
    for (int t = 0; t < cap; ++t) {
      DecoderStepOut step = decoder_step(P, cfg, enc, zp_ptr, {prev}, state,
                                         /*train=*/false, nullptr);
      state = step.state;
      int next = detail::argmax_row(step.log_probs.value(), cfg.vocab_size, 0);
      if (next == kEosId) break;
      out.push_back(next);
      prev = next;
    }
    return out;
  }

  // Beam search. All live hypotheses advance as one [k, *] batch; the
  // encoder outputs are replicated per beam row.
  check(beam_size >= 1, "translate: beam size must be >= 1");
  struct Hyp {
    std::vector<int> ids;
    double score = 0.0;  // sum of token log-probs
  };
  struct Done {
    std::vector<int> ids;
    double norm_score;
  };
  std::vector<Hyp> beam{Hyp{}};
  std::vector<Done> done;
  RnnState state = decoder_init_state(tape, P, cfg, enc);
  // state currently has one row; expand lazily as the beam widens.
  for (int t = 0; t < cap && !beam.empty(); ++t) {
    int k = static_cast<int>(beam.size());
    std::vector<int> rep(k, 0);
    EncodedBatch enc_k;
    enc_k.batch = k;
    enc_k.steps = enc.steps;
    for (int i = 0; i < enc.steps; ++i) {
      enc_k.states.push_back(gather_rows(enc.states[i], rep));
      enc_k.mask.push_back(gather_rows(enc.mask[i], rep));
      enc_k.inv_mask.push_back(gather_rows(enc.inv_mask[i], rep));
    }
    enc_k.inv_len = gather_rows(enc.inv_len, rep);
    enc_k.avg = gather_rows(enc.avg, rep);
    Tensor z_k;
    const Tensor* z_k_ptr = nullptr;
    if (zp_ptr) {
      z_k = gather_rows(*zp_ptr, rep);
      z_k_ptr = &z_k;
    }
    std::vector<int> prev(k);
    for (int i = 0; i < k; ++i)
      prev[i] = beam[i].ids.empty() ? kBosId : beam[i].ids.back();
    DecoderStepOut step = decoder_step(P, cfg, enc_k, z_k_ptr, prev, state,
                                       /*train=*/false, nullptr);
    const auto& lp = step.log_probs.value();

    struct Cand {
      double score;
      int beam_idx;
      int token;
    };
    std::vector<Cand> cands;
    cands.reserve(static_cast<size_t>(k) * cfg.vocab_size);
    for (int i = 0; i < k; ++i)
      for (int w = 0; w < cfg.vocab_size; ++w)
        cands.push_back(
            {beam[i].score + lp[static_cast<size_t>(i) * cfg.vocab_size + w],
             i, w});
    int keep = std::min<int>(beam_size, static_cast<int>(cands.size()));
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam_idx != b.beam_idx)
                          return a.beam_idx < b.beam_idx;
                        return a.token < b.token;
                      });

    std::vector<Hyp> next_beam;
    std::vector<int> sel_rows;
    for (int c = 0; c < keep; ++c) {
      const Cand& cd = cands[c];
      if (cd.token == kEosId) {
        int len = static_cast<int>(beam[cd.beam_idx].ids.size()) + 1;
        done.push_back(Done{beam[cd.beam_idx].ids, cd.score / len});
        continue;
      }
      Hyp h = beam[cd.beam_idx];
      h.ids.push_back(cd.token);
      h.score = cd.score;
      next_beam.push_back(std::move(h));
      sel_rows.push_back(cd.beam_idx);
    }
    if (next_beam.empty()) break;
    RnnState ns;
    ns.h = gather_rows(step.state.h, sel_rows);
    if (cfg.cell_type == CellType::kLstm)
      ns.c = gather_rows(step.state.c, sel_rows);
    state = ns;
    beam = std::move(next_beam);
    if (static_cast<int>(done.size()) >= beam_size) break;
  }
  if (done.empty()) {
    // Length cap hit with nothing finished; fall back to the best live hyp.
    check(!beam.empty(), "translate: beam collapsed");
    const Hyp* best = &beam[0];
    for (const auto& h : beam)
      if (h.score / std::max<size_t>(1, h.ids.size()) >
          best->score / std::max<size_t>(1, best->ids.size()))
        best = &h;
    return best->ids;
  }
  const Done* best = &done[0];
  for (const auto& d : done)
    if (d.norm_score > best->norm_score) best = &d;
  return best->ids;
}

// Predicted image feature locations for a source sentence, using the same
// image-free z policy as translate. The NMT baseline has no image head.
inline std::vector<double> predict_image_features(
    const ParamStore& params, const ModelConfig& cfg,
    const std::vector<int>& src_ids, ZPolicy zp = {}) {
  check(cfg.uses_latent(),
        "no image head: variant nmt does not model image features");
  check(!src_ids.empty(), "empty source");
  Tape tape;
  ParamBinder P(tape, params);
  int m = static_cast<int>(src_ids.size());
  EncodedBatch enc = encode_batch(tape, P, cfg, {src_ids}, {m},
                                  /*train=*/false, nullptr);
  Tensor z = detail::prediction_z(P, cfg, enc, zp);
  Tensor nu = image_feature_locations(z, P);
  return nu.value();
}

// Scalar loss closure over a fixed batch with frozen noise: every call
// reseeds the rng so epsilon draws and dropout masks are identical, which
// makes the function finite-difference friendly.
inline ScalarLossFn make_elbo_loss_fn(const ModelConfig& cfg,
                                      const Batch& batch, uint64_t noise_seed,
                                      bool train) {
  return [cfg, batch, noise_seed, train](const ParamStore& params,
                                         ParamGrads* grads) -> double {
    Tape tape;
    ParamBinder P(tape, params);
    Rng rng = Rng::derive(noise_seed, {0xe1b0});
    ElboOut out = elbo_batch(tape, P, batch, cfg, rng, train);
    double value = out.loss.scalar();
    if (grads) {
      tape.backward(out.loss);
      *grads = P.grads();
    }
    return value;
  };
}

}  // namespace vmmt
