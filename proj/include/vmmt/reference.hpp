#pragma once

// Independent scalar recomputation of the model forward, used as an oracle
// by gradient checking and by tests. Processes one sentence at a time with
// plain loops (no tape, no batching, no masks) and is templated on the
// arithmetic type so finite differences can run at extended precision.
//
// The detached inputs of the inference networks (the reused source encoder
// and target embeddings) are read from a separate "frozen" parameter store.
// Training holds those inputs fixed at the current iterate; evaluating this
// function with frozen == live at the base point and perturbing only the
// live store therefore differentiates exactly the function whose gradient
// the optimizer uses.

#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#if defined(__SIZEOF_FLOAT128__)
#include <quadmath.h>
#endif

#include "vmmt/batch.hpp"
#include "vmmt/model.hpp"
#include "vmmt/params.hpp"

namespace vmmt::ref {

template <class Real>
struct RMath {
  static Real exp(Real x) { return std::exp(x); }
  static Real log(Real x) { return std::log(x); }
  static Real log1p(Real x) { return std::log1p(x); }
  static Real tanh(Real x) { return std::tanh(x); }
  static Real abs(Real x) { return std::abs(x); }
};

#if defined(__SIZEOF_FLOAT128__)
template <>
struct RMath<__float128> {
  static __float128 exp(__float128 x) { return expq(x); }
  static __float128 log(__float128 x) { return logq(x); }
  static __float128 log1p(__float128 x) { return log1pq(x); }
  static __float128 tanh(__float128 x) { return tanhq(x); }
  static __float128 abs(__float128 x) { return fabsq(x); }
};
#endif

template <class Real>
class RefModel {
 public:
  using Vec = std::vector<Real>;
  using Seq = std::vector<Vec>;  // one vector per position

  RefModel(const ModelConfig& cfg, const ParamStore& live,
           const ParamStore& frozen)
      : cfg_(cfg), live_(&live), frozen_(&frozen) {}

  explicit RefModel(const ModelConfig& cfg, const ParamStore& live)
      : RefModel(cfg, live, live) {}

  // -(1/B) sum over sentences of (text_ll + w*image_ll - kl_clamped).
  Real loss(const Batch& batch, const std::vector<double>& eps_flat) const {
    int B = batch.size();
    Real acc = Real(0);
    for (int s = 0; s < B; ++s) {
      std::vector<int> src(batch.src[s].begin(),
                           batch.src[s].begin() + batch.src_len[s]);
      std::vector<int> tgt(batch.tgt[s].begin(),
                           batch.tgt[s].begin() + batch.tgt_len[s]);
      std::vector<double> eps;
      if (cfg_.uses_latent()) {
        eps.assign(eps_flat.begin() + static_cast<size_t>(s) * cfg_.latent_dim,
                   eps_flat.begin() +
                       static_cast<size_t>(s + 1) * cfg_.latent_dim);
      }
      acc += sentence_objective(src, tgt,
                                cfg_.uses_latent() ? &batch.features[s]
                                                   : nullptr,
                                eps);
    }
    return -acc / Real(B);
  }

  // text_ll + w*image_ll - kl_clamped for one sentence.
  Real sentence_objective(const std::vector<int>& src,
                          const std::vector<int>& tgt,
                          const std::vector<double>* v,
                          const std::vector<double>& eps) const {
    Seq states = encode(*live_, src);
    Vec avg = average(states);
    if (!cfg_.uses_latent()) return text_ll(states, avg, tgt, nullptr);

    Vec prior_mu, prior_sigma;
    if (cfg_.variant == Variant::kVmmtC) {
      prior_mu = mlp(*live_, "gen.prior_mu", avg);
      prior_sigma = softplus_vec(mlp(*live_, "gen.prior_sigma", avg));
    } else {
      prior_mu.assign(cfg_.latent_dim, Real(0));
      prior_sigma.assign(cfg_.latent_dim, Real(1));
    }

    auto [q_mu, q_sigma] = posterior(src, tgt, v);
    Vec z(cfg_.latent_dim);
    for (int i = 0; i < cfg_.latent_dim; ++i)
      z[i] = q_mu[i] + Real(eps[i]) * q_sigma[i];

    Real kl = Real(0);
    for (int i = 0; i < cfg_.latent_dim; ++i) {
      Real lr = RMath<Real>::log(prior_sigma[i]) -
                RMath<Real>::log(q_sigma[i]);
      Real d = q_mu[i] - prior_mu[i];
      kl += lr + (q_sigma[i] * q_sigma[i] + d * d) /
                     (Real(2) * prior_sigma[i] * prior_sigma[i]) -
            Real(0.5);
    }
    Real floor = Real(cfg_.free_bits) * Real(kLn2);
    Real klc = cfg_.free_bits > 0.0 && kl < floor ? floor : kl;

    Vec nu = mlp(*live_, "gen.img", z);
    Real sq = Real(0);
    for (int i = 0; i < cfg_.image_dim; ++i) {
      Real d = Real((*v)[i]) - nu[i];
      sq += d * d;
    }
    Real var = Real(cfg_.obs_scale) * Real(cfg_.obs_scale);
    Real img = -Real(0.5) * Real(cfg_.image_dim) *
                   RMath<Real>::log(Real(2) * Real(M_PI) * var) -
               sq / (Real(2) * var);

    Real text = text_ll(states, avg, tgt, &z);
    return text + Real(cfg_.image_loss_weight) * img - klc;
  }

  // Posterior parameters (u, s); detached inputs come from the frozen store.
  std::pair<Vec, Vec> posterior(const std::vector<int>& src,
                                const std::vector<int>& tgt,
                                const std::vector<double>* v) const {
    Seq frozen_states = encode(*frozen_, src);
    Seq projected;
    for (const auto& h : frozen_states)
      projected.push_back(affine(*live_, "inf.x_proj", h));
    Vec hx = average(projected);

    Vec hall;
    if (cfg_.variant == Variant::kVmmtF) {
      hall = hx;
    } else {
      Seq tgt_emb;
      for (int id : tgt) tgt_emb.push_back(embed(*frozen_, "gen.tgt_emb", id));
      Seq tgt_states = birnn_layer(*live_, "inf.tgt_rnn.l1", tgt_emb);
      Vec hy = average(tgt_states);
      Vec hv_in(v->begin(), v->end());
      Vec hv = mlp(*live_, "inf.img", hv_in);
      hall = hx;
      hall.insert(hall.end(), hy.begin(), hy.end());
      hall.insert(hall.end(), hv.begin(), hv.end());
    }
    Vec u = mlp(*live_, "inf.q_mu", hall);
    Vec s = softplus_vec(mlp(*live_, "inf.q_sigma", hall));
    for (auto& x : s)
      if (x < Real(kScaleFloor)) x = Real(kScaleFloor);
    return {u, s};
  }

  // Full 2-layer bidirectional encoding of one sentence (no padding).
  Seq encode(const ParamStore& store, const std::vector<int>& src) const {
    Seq inputs;
    for (int id : src) inputs.push_back(embed(store, "gen.src_emb", id));
    Seq states = std::move(inputs);
    for (int l = 1; l <= cfg_.enc_layers; ++l)
      states = birnn_layer(store, "gen.enc.l" + std::to_string(l), states);
    return states;
  }

  // Sum over gold tokens of log pi_j(y_j), including </s>.
  Real text_ll(const Seq& states, const Vec& avg, const std::vector<int>& tgt,
               const Vec* z) const {
    int H = cfg_.hidden_dim;
    Vec h = tanh_vec(affine(*live_, "gen.dec_init", avg));
    Vec c(H, Real(0));
    Real total = Real(0);
    int prev = kBosId;
    for (size_t j = 0; j <= tgt.size(); ++j) {
      Vec in = embed(*live_, "gen.tgt_emb", prev);
      if (z) in.insert(in.end(), z->begin(), z->end());
      cell_step(*live_, "gen.dec_cell", in, h, c);
      Vec ctx = attention(h, states);
      Vec pre = h;
      pre.insert(pre.end(), ctx.begin(), ctx.end());
      Vec logits = affine(*live_, "gen.out", pre);
      int gold = j < tgt.size() ? tgt[j] : kEosId;
      total += log_softmax_at(logits, gold);
      prev = gold;
    }
    return total;
  }

  Vec attention(const Vec& query, const Seq& keys) const {
    const auto& W = live_->at("gen.attn.W");
    int kd = W.shape[1];
    Vec qw(kd, Real(0));
    for (int r = 0; r < W.shape[0]; ++r)
      for (int cc = 0; cc < kd; ++cc)
        qw[cc] += query[r] * Real(W.data[static_cast<size_t>(r) * kd + cc]);
    Vec scores(keys.size());
    for (size_t i = 0; i < keys.size(); ++i) {
      Real s = Real(0);
      for (int cc = 0; cc < kd; ++cc) s += qw[cc] * keys[i][cc];
      scores[i] = s;
    }
    Real mx = scores[0];
    for (Real s : scores)
      if (s > mx) mx = s;
    Real zsum = Real(0);
    for (auto& s : scores) {
      s = RMath<Real>::exp(s - mx);
      zsum += s;
    }
    Vec ctx(kd, Real(0));
    for (size_t i = 0; i < keys.size(); ++i) {
      Real w = scores[i] / zsum;
      for (int cc = 0; cc < kd; ++cc) ctx[cc] += w * keys[i][cc];
    }
    return ctx;
  }

  // ------------------------- scalar building blocks -------------------------

  Vec embed(const ParamStore& store, const std::string& name, int id) const {
    const auto& p = store.at(name);
    int d = p.shape[1];
    Vec out(d);
    for (int i = 0; i < d; ++i)
      out[i] = Real(p.data[static_cast<size_t>(id) * d + i]);
    return out;
  }

  Vec affine(const ParamStore& store, const std::string& prefix,
             const Vec& x) const {
    const auto& W = store.at(prefix + ".W");
    const auto& b = store.at(prefix + ".b");
    int in = W.shape[0], out_dim = W.shape[1];
    Vec y(out_dim);
    for (int o = 0; o < out_dim; ++o) y[o] = Real(b.data[o]);
    for (int i = 0; i < in; ++i)
      for (int o = 0; o < out_dim; ++o)
        y[o] += x[i] * Real(W.data[static_cast<size_t>(i) * out_dim + o]);
    return y;
  }

  Vec mlp(const ParamStore& store, const std::string& prefix,
          const Vec& x) const {
    Vec h = affine(store, prefix + ".l1", x);
    for (auto& v : h)
      if (v < Real(0)) v = Real(0);
    return affine(store, prefix + ".l2", h);
  }

  void cell_step(const ParamStore& store, const std::string& prefix,
                 const Vec& x, Vec& h, Vec& c) const {
    int H = static_cast<int>(h.size());
    Vec xh = x;
    xh.insert(xh.end(), h.begin(), h.end());
    if (cfg_.cell_type == CellType::kLstm) {
      Vec zg = affine(store, prefix, xh);
      Vec nh(H), nc(H);
      for (int k = 0; k < H; ++k) {
        Real i = sigmoid(zg[k]);
        Real f = sigmoid(zg[H + k]);
        Real o = sigmoid(zg[2 * H + k]);
        Real g = RMath<Real>::tanh(zg[3 * H + k]);
        nc[k] = f * c[k] + i * g;
        nh[k] = o * RMath<Real>::tanh(nc[k]);
      }
      h = std::move(nh);
      c = std::move(nc);
    } else {
      const auto& Wru = store.at(prefix + ".Wru");
      const auto& bru = store.at(prefix + ".bru");
      int in2 = Wru.shape[0];
      Vec ru(2 * H);
      for (int o = 0; o < 2 * H; ++o) ru[o] = Real(bru.data[o]);
      for (int i = 0; i < in2; ++i)
        for (int o = 0; o < 2 * H; ++o)
          ru[o] += xh[i] * Real(Wru.data[static_cast<size_t>(i) * 2 * H + o]);
      Vec xrh = x;
      for (int k = 0; k < H; ++k)
        xrh.push_back(sigmoid(ru[k]) * h[k]);
      const auto& Wn = store.at(prefix + ".Wn");
      const auto& bn = store.at(prefix + ".bn");
      Vec n(H);
      for (int o = 0; o < H; ++o) n[o] = Real(bn.data[o]);
      for (size_t i = 0; i < xrh.size(); ++i)
        for (int o = 0; o < H; ++o)
          n[o] += xrh[i] * Real(Wn.data[i * static_cast<size_t>(H) + o]);
      for (int k = 0; k < H; ++k) {
        Real u = sigmoid(ru[H + k]);
        h[k] = u * h[k] + (Real(1) - u) * RMath<Real>::tanh(n[k]);
      }
    }
  }

  Seq birnn_layer(const ParamStore& store, const std::string& prefix,
                  const Seq& xs) const {
    int H = cfg_.hidden_dim;
    int n = static_cast<int>(xs.size());
    Seq fwd(n), bwd(n);
    Vec h(H, Real(0)), c(H, Real(0));
    for (int i = 0; i < n; ++i) {
      cell_step(store, prefix + ".fwd", xs[i], h, c);
      fwd[i] = h;
    }
    h.assign(H, Real(0));
    c.assign(H, Real(0));
    for (int i = n - 1; i >= 0; --i) {
      cell_step(store, prefix + ".bwd", xs[i], h, c);
      bwd[i] = h;
    }
    Seq out(n);
    for (int i = 0; i < n; ++i) {
      out[i] = fwd[i];
      out[i].insert(out[i].end(), bwd[i].begin(), bwd[i].end());
    }
    return out;
  }

  static Vec average(const Seq& xs) {
    Vec out(xs[0].size(), Real(0));
    for (const auto& x : xs)
      for (size_t i = 0; i < x.size(); ++i) out[i] += x[i];
    for (auto& v : out) v /= Real(xs.size());
    return out;
  }

  static Real sigmoid(Real x) {
    return x >= Real(0)
               ? Real(1) / (Real(1) + RMath<Real>::exp(-x))
               : RMath<Real>::exp(x) / (Real(1) + RMath<Real>::exp(x));
  }

  static Vec tanh_vec(Vec x) {
    for (auto& v : x) v = RMath<Real>::tanh(v);
    return x;
  }

  static Vec softplus_vec(Vec x) {
    for (auto& v : x) {
      Real m = v > Real(0) ? v : Real(0);
      v = m + RMath<Real>::log1p(RMath<Real>::exp(-RMath<Real>::abs(v)));
    }
    return x;
  }

  static Real log_softmax_at(const Vec& logits, int idx) {
    Real mx = logits[0];
    for (Real v : logits)
      if (v > mx) mx = v;
    Real z = Real(0);
    for (Real v : logits) z += RMath<Real>::exp(v - mx);
    return logits[idx] - mx - RMath<Real>::log(z);
  }

 private:
  ModelConfig cfg_;
  const ParamStore* live_;
  const ParamStore* frozen_;
};

// Reverse-mode gradients of the eval-mode ELBO vs central finite
// differences of the reference forward, with the detached inference inputs
// held at the unperturbed iterate. Bulk differencing runs in long double;
// coordinates with tiny gradients are re-differenced in quad precision so
// rounding noise cannot masquerade as a gradient bug.
inline GradCheckReport check_model_gradients(ParamStore& params,
                                             const ModelConfig& cfg,
                                             const Batch& batch,
                                             uint64_t eps_seed,
                                             double step = 1e-5,
                                             double tol = 1e-4,
                                             int threads = 1) {
  std::vector<double> eps;
  if (cfg.uses_latent()) {
    Rng rng(eps_seed);
    eps.resize(static_cast<size_t>(batch.size()) * cfg.latent_dim);
    for (auto& e : eps) e = rng.normal();
  }

  ScalarLossFn f_ad = [&cfg, &batch, &eps](const ParamStore& ps,
                                           ParamGrads* grads) -> double {
    Tape tape;
    ParamBinder P(tape, ps);
    Rng unused(0);
    ElboOut out = elbo_batch(tape, P, batch, cfg, unused, /*train=*/false,
                             cfg.uses_latent() ? &eps : nullptr);
    double v = out.loss.scalar();
    if (grads) {
      tape.backward(out.loss);
      *grads = P.grads();
    }
    return v;
  };

  const ParamStore frozen = params;  // base-point copy for detached paths

  // The oracle must agree with the implementation at the base point.
  {
    RefModel<double> m(cfg, params, frozen);
    double impl = f_ad(params, nullptr);
    double oracle = m.loss(batch, eps);
    double rel = std::abs(impl - oracle) /
                 std::max(1e-12, std::abs(impl) + std::abs(oracle));
    check(rel < 1e-10, "reference forward disagrees with implementation: " +
                           std::to_string(impl) + " vs " +
                           std::to_string(oracle));
  }

  auto make_fd = [&cfg, &batch, &eps, &frozen](auto real_tag) -> FdEval {
    using Real = decltype(real_tag);
    return [&cfg, &batch, &eps, &frozen](ParamStore& ps,
                                         const std::string& name, size_t i,
                                         double step_) -> double {
      RefModel<Real> m(cfg, ps, frozen);
      auto& p = ps.at(name);
      double saved = p.data[i];
      p.data[i] = saved + step_;
      Real up = m.loss(batch, eps);
      p.data[i] = saved - step_;
      Real down = m.loss(batch, eps);
      p.data[i] = saved;
      return static_cast<double>((up - down) / (Real(2) * Real(step_)));
    };
  };

  FdEval fd_fast = make_fd(static_cast<long double>(0));
#if defined(__SIZEOF_FLOAT128__)
  FdEval fd_precise = make_fd(static_cast<__float128>(0));
#else
  FdEval fd_precise = nullptr;
#endif
  if (threads <= 1)
    return grad_check(params, f_ad, fd_fast, fd_precise, step, tol);

  // Fan the coordinate sweep out over worker threads, each perturbing its
  // own copy of the store; the max-reduction is order-independent.
  ParamGrads ad;
  f_ad(params, &ad);
  std::vector<GradCheckReport> partial(threads);
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w]() {
      ParamStore local = params;
      GradCheckReport& rep = partial[w];
      for (size_t pi = static_cast<size_t>(w); pi < local.size();
           pi += static_cast<size_t>(threads)) {
        auto& p = local.all()[pi];
        auto it = ad.find(p.name);
        const std::vector<double>* g_ad =
            it != ad.end() ? &it->second : nullptr;
        for (size_t i = 0; i < p.data.size(); ++i) {
          double adg = g_ad ? (*g_ad)[i] : 0.0;
          double fd = fd_fast(local, p.name, i, step);
          if (fd_precise && std::abs(adg) + std::abs(fd) < 1e-4)
            fd = fd_precise(local, p.name, i, step);
          if (!std::isfinite(fd) || !std::isfinite(adg)) {
            rep.message = "non-finite gradient for parameter '" + p.name +
                          "' at index " + std::to_string(i);
            rep.worst_param = p.name;
            rep.worst_index = static_cast<int64_t>(i);
            rep.max_rel_err = 1.0;
            return;
          }
          double rel = std::abs(adg - fd) /
                       std::max(1e-8, std::abs(adg) + std::abs(fd));
          ++rep.coords_checked;
          if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_param = p.name;
            rep.worst_index = static_cast<int64_t>(i);
          }
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  GradCheckReport report;
  for (const auto& rep : partial) {
    report.coords_checked += rep.coords_checked;
    if (!rep.message.empty() && report.message.empty())
      report.message = rep.message;
    if (rep.max_rel_err > report.max_rel_err) {
      report.max_rel_err = rep.max_rel_err;
      report.worst_param = rep.worst_param;
      report.worst_index = rep.worst_index;
    }
  }
  report.ok = report.message.empty() && report.max_rel_err < tol;
  if (!report.ok && report.message.empty())
    report.message = "max relative error " +
                     std::to_string(report.max_rel_err) + " at '" +
                     report.worst_param + "'[" +
                     std::to_string(report.worst_index) + "]";
  return report;
}

}  // namespace vmmt::ref
