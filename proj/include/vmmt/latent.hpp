#pragma once

// Latent Gaussian machinery: the conditional and fixed priors, the two
// inference networks, reparameterised sampling, closed-form KL and the
// free-bits floor. Distribution parameters are batched [B, c] tensors;
// scales come out of a softplus and are floored at 1e-12.

#include <cmath>
#include <string>
#include <vector>

#include "vmmt/layers.hpp"
#include "vmmt/params.hpp"
#include "vmmt/rng.hpp"
#include "vmmt/tensor.hpp"

namespace vmmt {

inline constexpr double kLn2 = 0.6931471805599453094172321214581766;
inline constexpr double kScaleFloor = 1e-12;

struct DiagGaussian {
  Tensor loc;    // [B, c]
  Tensor scale;  // [B, c], strictly positive
};

enum class SampleSource { kPrior, kPosterior, kMean };

struct LatentSample {
  Tensor z;                 // [B, c]
  std::vector<double> eps;  // the standard-normal draw used (empty for mean)
  SampleSource source = SampleSource::kPosterior;
};

namespace detail {

inline void check_finite(const Tensor& t, const std::string& what) {
  const auto& v = t.value();
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]))
      throw TensorError(what + ": non-finite value " + std::to_string(v[i]) +
                        " at index " + std::to_string(i));
  }
}

}  // namespace detail

// Standard normal prior N(0, I_c), shared by every sentence in the batch.
inline DiagGaussian fixed_prior(Tape& tape, int batch, int c) {
  check(c >= 1, "fixed_prior: latent dim must be >= 1");
  DiagGaussian d;
  d.loc = tape.constant({batch, c},
                        std::vector<double>(static_cast<size_t>(batch) * c, 0.0));
  d.scale = tape.constant(
      {batch, c}, std::vector<double>(static_cast<size_t>(batch) * c, 1.0));
  return d;
}

// Conditional prior p(z|x): location and scale MLPs over the average source
// encoding. Parameter prefixes "<prefix>_mu" and "<prefix>_sigma".
inline DiagGaussian conditional_prior(const Tensor& avg_src, ParamBinder& P,
                                      const std::string& prefix = "gen.prior") {
  DiagGaussian d;
  d.loc = mlp(avg_src, P, prefix + "_mu");
  d.scale = clamp_min(softplus(mlp(avg_src, P, prefix + "_sigma")),
                      kScaleFloor);
  detail::check_finite(d.loc, "conditional_prior loc");
  detail::check_finite(d.scale, "conditional_prior scale");
  return d;
}

// Shared h_x pathway of both inference networks: per-position affine over
// the detached source encodings, then the masked average. Gradients stop at
// the source encoder so training the inference network never touches the
// generative encoder.
inline Tensor inference_source_summary(const std::vector<Tensor>& src_states,
                                       const std::vector<Tensor>& src_mask,
                                       const Tensor& src_inv_len,
                                       ParamBinder& P) {
  std::vector<Tensor> projected;
  projected.reserve(src_states.size());
  for (const auto& h : src_states)
    projected.push_back(affine_layer(stop_gradient(h), P, "inf.x_proj"));
  return masked_average(projected, src_mask, src_inv_len);
}

// VMMT_F approximate posterior q(z|x): usable at training and prediction
// time because it needs no image and no target.
inline DiagGaussian posterior_fixed_variant(
    const std::vector<Tensor>& src_states, const std::vector<Tensor>& src_mask,
    const Tensor& src_inv_len, ParamBinder& P) {
  check(!src_states.empty(), "posterior: empty source");
  Tensor hx = inference_source_summary(src_states, src_mask, src_inv_len, P);
  DiagGaussian q;
  q.loc = mlp(hx, P, "inf.q_mu");
  q.scale = clamp_min(softplus(mlp(hx, P, "inf.q_sigma")), kScaleFloor);
  return q;
}

// VMMT_C approximate posterior q(z|x,y,v). Re-uses the generative target
// embeddings (detached) under an inference-side bidirectional RNN, and runs
// the image features through their own MLP; dropout hits v at train time.
inline DiagGaussian posterior_conditional(
    const std::vector<Tensor>& src_states, const std::vector<Tensor>& src_mask,
    const Tensor& src_inv_len, const std::vector<std::vector<int>>& tgt_steps,
    const std::vector<Tensor>& tgt_mask, const std::vector<Tensor>& tgt_inv_mask,
    const Tensor& tgt_inv_len, const Tensor& v, CellType cell, int hidden,
    double dropout_rate, bool train, Rng* rng, ParamBinder& P) {
  check(!src_states.empty(), "posterior: empty source");
  check(!tgt_steps.empty(), "posterior: empty target");
  check(v.defined(), "conditional posterior requires image features");

  Tensor hx = inference_source_summary(src_states, src_mask, src_inv_len, P);

  std::vector<Tensor> tgt_embeds;
  tgt_embeds.reserve(tgt_steps.size());
  Tensor emb_table = P("gen.tgt_emb");
  for (const auto& ids : tgt_steps)
    tgt_embeds.push_back(stop_gradient(gather_rows(emb_table, ids)));
  std::vector<Tensor> tgt_states =
      bidirectional_layer(cell, tgt_embeds, tgt_mask, tgt_inv_mask, P,
                          "inf.tgt_rnn.l1", hidden);
  Tensor hy = masked_average(tgt_states, tgt_mask, tgt_inv_len);

  Tensor v_in = (train && dropout_rate > 0.0) ? dropout(v, dropout_rate, *rng)
                                              : v;
  Tensor hv = mlp(v_in, P, "inf.img");

  Tensor hall = concat_cols({hx, hy, hv});
  DiagGaussian q;
  q.loc = mlp(hall, P, "inf.q_mu");
  q.scale = clamp_min(softplus(mlp(hall, P, "inf.q_sigma")), kScaleFloor);
  return q;
}

// z = loc + eps * scale. When eps is not supplied it is drawn from the
// caller's seeded rng, one standard-normal vector per row.
inline LatentSample reparameterize(const DiagGaussian& d, Rng* rng,
                                   const std::vector<double>* eps_in = nullptr) {
  Tape& tape = *d.loc.tape();
  size_t n = d.loc.value().size();
  LatentSample s;
  s.source = SampleSource::kPosterior;
  if (eps_in) {
    check(eps_in->size() == n, "reparameterize: eps length " +
                                   std::to_string(eps_in->size()) +
                                   " != " + std::to_string(n));
    s.eps = *eps_in;
  } else {
    check(rng != nullptr, "reparameterize: need rng when eps not supplied");
    s.eps.resize(n);
    for (auto& e : s.eps) e = rng->normal();
  }
  Tensor eps_t = tape.constant(d.loc.shape(), s.eps);
  s.z = add(d.loc, mul(d.scale, eps_t));
  return s;
}

// Deterministic "sample" at the distribution mean: z is the loc node itself.
inline LatentSample mean_sample(const DiagGaussian& d) {
  LatentSample s;
  s.z = d.loc;
  s.source = SampleSource::kMean;
  return s;
}

struct KlResult {
  Tensor per_dim;  // [B, c]
  Tensor per_row;  // [B, 1], sum over latent dims
};

// Closed-form KL(q || p) for diagonal Gaussians, per dimension:
// log(sp/sq) + (sq^2 + (uq - up)^2) / (2 sp^2) - 1/2.
inline KlResult kl_diag(const DiagGaussian& q, const DiagGaussian& p) {
  check_same_shape("kl_diag", q.loc.shape(), p.loc.shape());
  check_same_shape("kl_diag", q.scale.shape(), p.scale.shape());
  Tensor log_ratio = sub(vlog(p.scale), vlog(q.scale));
  Tensor num = add(mul(q.scale, q.scale), sq_diff(q.loc, p.loc));
  Tensor den = scalar_mul(mul(p.scale, p.scale), 2.0);
  KlResult r;
  r.per_dim = add_scalar(add(log_ratio, div(num, den)), -0.5);
  r.per_row = row_sum(r.per_dim);
  return r;
}

// Free-bits floor over the whole latent vector as one group. The floor is
// given in bits and converted to nats; ties go to the clamp so no gradient
// reaches the posterior while the floor is active.
inline Tensor free_bits(const Tensor& kl_row, double floor_bits) {
  check(floor_bits >= 0.0, "free_bits: floor must be >= 0");
  if (floor_bits == 0.0) return kl_row;
  return clamp_min(kl_row, floor_bits * kLn2);
}

}  // namespace vmmt
