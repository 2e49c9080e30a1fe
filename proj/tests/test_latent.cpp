#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "vmmt/latent.hpp"
#include "vmmt/model.hpp"
#include "vmmt/reference.hpp"

using namespace vmmt;

namespace {

// Monte-Carlo E_q[log q - log p] with antithetic pairs; densities written
// out by hand so the estimator shares nothing with kl_diag.
double mc_kl(const std::vector<double>& qu, const std::vector<double>& qs,
             const std::vector<double>& pu, const std::vector<double>& ps,
             int64_t pairs, uint64_t seed) {
  Rng rng(seed);
  size_t c = qu.size();
  auto log_normal = [](double x, double mu, double sigma) {
    double d = (x - mu) / sigma;
    return -0.5 * d * d - std::log(sigma) -
           0.5 * std::log(2.0 * 3.14159265358979323846);
  };
  double acc = 0;
  std::vector<double> eps(c);
  for (int64_t i = 0; i < pairs; ++i) {
    for (auto& e : eps) e = rng.normal();
    for (int sign : {+1, -1}) {
      double lq = 0, lp = 0;
      for (size_t k = 0; k < c; ++k) {
        double z = qu[k] + sign * eps[k] * qs[k];
        lq += log_normal(z, qu[k], qs[k]);
        lp += log_normal(z, pu[k], ps[k]);
      }
      acc += lq - lp;
    }
  }
  return acc / (2.0 * static_cast<double>(pairs));
}

DiagGaussian make_gaussian(Tape& t, const std::vector<double>& loc,
                           const std::vector<double>& scale) {
  DiagGaussian d;
  int c = static_cast<int>(loc.size());
  d.loc = t.constant({1, c}, loc);
  d.scale = t.constant({1, c}, scale);
  return d;
}

}  // namespace

TEST_CASE("fixed prior is a standard normal") {
  Tape t;
  DiagGaussian d = fixed_prior(t, 1, 3);
  for (double v : d.loc.value()) CHECK(v == 0.0);
  for (double v : d.scale.value()) CHECK(v == 1.0);

  KlResult kl = kl_diag(d, fixed_prior(t, 1, 3));
  CHECK(kl.per_row.value()[0] == 0.0);

  // Sample mean of 1e6 standard-normal draws.
  Rng rng(99);
  double mean = 0;
  for (int i = 0; i < 1000000; ++i) mean += rng.normal();
  mean /= 1e6;
  CHECK(std::abs(mean) < 0.004);
}

TEST_CASE("conditional prior") {
  ModelConfig cfg;
  cfg.variant = Variant::kVmmtC;
  cfg.vocab_size = 10;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 4;
  cfg.latent_dim = 2;
  cfg.image_dim = 4;
  SECTION("zero parameters give loc 0 and scale softplus(0)") {
    ParamStore ps = build_params(cfg);
    Tape t;
    ParamBinder P(t, ps);
    Tensor avg = t.constant({2, 8}, std::vector<double>(16, 0.3));
    DiagGaussian d = conditional_prior(avg, P);
    for (double v : d.loc.value()) CHECK(v == 0.0);
    for (double v : d.scale.value())
      CHECK(v == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SECTION("scale strictly positive over 1000 random inputs") {
    Rng rng(8);
    ParamStore ps = build_params(cfg, rng);
    ps.randomize_all(rng, -2, 2);
    for (int rep = 0; rep < 1000; ++rep) {
      Tape t;
      ParamBinder P(t, ps);
      std::vector<double> x(8);
      for (auto& v : x) v = rng.normal(0, 3);
      DiagGaussian d = conditional_prior(t.constant({1, 8}, x), P);
      for (double v : d.scale.value()) CHECK(v > 0.0);
    }
  }
  SECTION("fixed small MLP matches direct recomputation") {
    Rng rng(17);
    ParamStore ps = build_params(cfg, rng);
    ps.randomize_all(rng, -0.7, 0.7);
    std::vector<double> x = {0.2, -0.4, 1.0, 0.8, -0.1, 0.5, -0.9, 0.3};
    Tape t;
    ParamBinder P(t, ps);
    DiagGaussian d = conditional_prior(t.constant({1, 8}, x), P);

    ref::RefModel<double> oracle(cfg, ps);
    auto mu = oracle.mlp(ps, "gen.prior_mu", {x.begin(), x.end()});
    auto sg = ref::RefModel<double>::softplus_vec(
        oracle.mlp(ps, "gen.prior_sigma", {x.begin(), x.end()}));
    for (int k = 0; k < 2; ++k) {
      CHECK(d.loc.value()[k] == Catch::Approx(mu[k]).margin(1e-12));
      CHECK(d.scale.value()[k] == Catch::Approx(sg[k]).margin(1e-12));
    }
  }
}

TEST_CASE("posterior networks") {
  for (auto variant : {Variant::kVmmtF, Variant::kVmmtC}) {
    ModelConfig cfg;
    cfg.variant = variant;
    cfg.vocab_size = 12;
    cfg.embed_dim = 4;
    cfg.hidden_dim = 4;
    cfg.latent_dim = 2;
    cfg.image_dim = 4;
    cfg.dropout = 0.0;
    Rng rng(23);
    ParamStore ps = build_params(cfg, rng);
    ps.randomize_all(rng, -0.6, 0.6);

    Batch b;
    b.src = {{5, 6, 7}};
    b.tgt = {{8, 9}};
    b.src_len = {3};
    b.tgt_len = {2};
    b.features = {{0.3, -0.5, 0.8, 0.1}};

    Tape tape;
    ParamBinder P(tape, ps);
    Rng fr(1);
    EncodedBatch enc =
        encode_batch(tape, P, cfg, b.src, b.src_len, false, nullptr);
    DiagGaussian q;
    if (variant == Variant::kVmmtF) {
      q = posterior_fixed_variant(enc.states, enc.mask, enc.inv_len, P);
    } else {
      Tensor v = tape.constant({1, 4}, b.features[0]);
      auto tm = detail::make_masks(tape, b.tgt_len, 2);
      q = posterior_conditional(enc.states, enc.mask, enc.inv_len,
                                {{8}, {9}}, tm.mask, tm.inv_mask, tm.inv_len,
                                v, cfg.cell_type, cfg.hidden_dim, cfg.dropout,
                                false, &fr, P);
    }

    SECTION("scale strictly positive (" + to_string(variant) + ")") {
      for (double v : q.scale.value()) CHECK(v > 0.0);
    }

    SECTION("no gradient reaches generative encoder or target embeddings (" +
            to_string(variant) + ")") {
      Tensor loss = add(sum_all(q.loc), sum_all(q.scale));
      tape.backward(loss);
      ParamGrads g = P.grads();
      for (const char* name :
           {"gen.src_emb", "gen.enc.l1.fwd.W", "gen.enc.l1.bwd.W",
            "gen.enc.l2.fwd.W", "gen.enc.l2.bwd.W", "gen.tgt_emb"}) {
        if (!ps.has(name)) continue;
        auto it = g.find(name);
        if (it == g.end()) continue;  // never touched: exactly zero flow
        for (double v : it->second) CHECK(v == 0.0);
      }
      // The inference parameters do receive gradient.
      CHECK(g.count("inf.q_mu.l1.W") == 1);
    }

    SECTION("matches the unrolled oracle (" + to_string(variant) + ")") {
      ref::RefModel<double> oracle(cfg, ps);
      auto [u, s] = oracle.posterior({5, 6, 7}, {8, 9},
                                     variant == Variant::kVmmtC
                                         ? &b.features[0]
                                         : nullptr);
      for (int k = 0; k < 2; ++k) {
        CHECK(q.loc.value()[k] == Catch::Approx(u[k]).margin(1e-12));
        CHECK(q.scale.value()[k] == Catch::Approx(s[k]).margin(1e-12));
      }
    }
  }
}

TEST_CASE("conditional posterior requires image features") {
  ModelConfig cfg;
  cfg.variant = Variant::kVmmtC;
  cfg.vocab_size = 12;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 4;
  cfg.latent_dim = 2;
  cfg.image_dim = 4;
  Rng rng(3);
  ParamStore ps = build_params(cfg, rng);
  Batch b;
  b.src = {{5, 6}};
  b.tgt = {{7}};
  b.src_len = {2};
  b.tgt_len = {1};
  Tape tape;
  ParamBinder P(tape, ps);
  Rng fr(1);
  CHECK_THROWS_WITH(elbo_batch(tape, P, b, cfg, fr, false),
                    Catch::Matchers::ContainsSubstring("image features"));
}

TEST_CASE("reparameterize") {
  SECTION("zero eps returns the location") {
    Tape t;
    DiagGaussian d = make_gaussian(t, {1.0, -2.0}, {3.0, 0.5});
    std::vector<double> eps = {0.0, 0.0};
    LatentSample s = reparameterize(d, nullptr, &eps);
    CHECK(s.z.value()[0] == 1.0);
    CHECK(s.z.value()[1] == -2.0);
  }
  SECTION("clamped near-zero scale pins z to the location") {
    Tape t;
    DiagGaussian d;
    d.loc = t.constant({1, 2}, {1.0, -2.0});
    d.scale = clamp_min(t.constant({1, 2}, {0.0, 0.0}), kScaleFloor);
    std::vector<double> eps = {5.0, -5.0};
    LatentSample s = reparameterize(d, nullptr, &eps);
    CHECK(s.z.value()[0] == Catch::Approx(1.0).margin(1e-10));
    CHECK(s.z.value()[1] == Catch::Approx(-2.0).margin(1e-10));
  }
  SECTION("sample moments over 1e6 draws") {
    int64_t n = 1000000;
    Tape t;
    DiagGaussian d;
    d.loc = t.constant({1, 1}, {1.0});
    d.scale = t.constant({1, 1}, {2.0});
    Rng rng(2024);
    double sum = 0, sq = 0;
    for (int64_t i = 0; i < n; ++i) {
      LatentSample s = reparameterize(d, &rng);
      double z = s.z.value()[0];
      sum += z;
      sq += z * z;
    }
    double mean = sum / n;
    double stddev = std::sqrt(sq / n - mean * mean);
    CHECK(mean == Catch::Approx(1.0).margin(0.01));
    CHECK(stddev == Catch::Approx(2.0).margin(0.01));
  }
  SECTION("dz/dloc = I and dz/dscale = diag(eps)") {
    Tape t;
    Tensor loc = t.leaf({1, 3}, {0.5, -1.0, 2.0}, true);
    Tensor scale = t.leaf({1, 3}, {1.0, 0.5, 2.0}, true);
    DiagGaussian d{loc, scale};
    std::vector<double> eps = {0.7, -1.3, 0.2};
    LatentSample s = reparameterize(d, nullptr, &eps);
    std::vector<double> w = {1.0, 2.0, -1.0};
    t.backward(sum_all(mul(s.z, t.constant({1, 3}, w))));
    for (int k = 0; k < 3; ++k) {
      CHECK(t.grad(loc)[k] == Catch::Approx(w[k]).margin(1e-14));
      CHECK(t.grad(scale)[k] == Catch::Approx(w[k] * eps[k]).margin(1e-14));
    }
  }
  SECTION("mean sample is the location node itself") {
    Tape t;
    DiagGaussian d = make_gaussian(t, {1.5, 2.5}, {1.0, 1.0});
    LatentSample s = mean_sample(d);
    CHECK(s.z.id() == d.loc.id());
    CHECK(s.source == SampleSource::kMean);
  }
}

TEST_CASE("closed-form KL") {
  SECTION("identical distributions give exactly zero") {
    Tape t;
    DiagGaussian q = make_gaussian(t, {0.3, -0.7}, {1.2, 0.8});
    DiagGaussian p = make_gaussian(t, {0.3, -0.7}, {1.2, 0.8});
    KlResult kl = kl_diag(q, p);
    for (double v : kl.per_dim.value()) CHECK(v == 0.0);
    CHECK(kl.per_row.value()[0] == 0.0);
  }
  SECTION("unit mean shift against the standard normal is one half") {
    Tape t;
    KlResult kl = kl_diag(make_gaussian(t, {1.0}, {1.0}),
                          make_gaussian(t, {0.0}, {1.0}));
    CHECK(kl.per_row.value()[0] == Catch::Approx(0.5).epsilon(1e-12));
  }
  SECTION("matches the Monte-Carlo oracle on random 8-dim pairs") {
    Rng rng(555);
    for (int rep = 0; rep < 3; ++rep) {
      std::vector<double> qu(8), qs(8), pu(8), ps_(8);
      for (int k = 0; k < 8; ++k) {
        qu[k] = rng.uniform(-0.3, 0.3);
        pu[k] = rng.uniform(-0.3, 0.3);
        qs[k] = rng.uniform(0.95, 1.15);
        ps_[k] = rng.uniform(0.95, 1.15);
      }
      Tape t;
      KlResult kl = kl_diag(make_gaussian(t, qu, qs),
                            make_gaussian(t, pu, ps_));
      double mc = mc_kl(qu, qs, pu, ps_, 500000, 1000 + rep);
      CHECK(std::abs(kl.per_row.value()[0] - mc) < 0.01);
    }
  }
  SECTION("non-negative for random pairs, zero only at equality") {
    Rng rng(77);
    for (int rep = 0; rep < 200; ++rep) {
      std::vector<double> qu(4), qs(4), pu(4), ps_(4);
      bool same = true;
      for (int k = 0; k < 4; ++k) {
        qu[k] = rng.uniform(-2, 2);
        pu[k] = rng.uniform(-2, 2);
        qs[k] = rng.uniform(0.1, 3);
        ps_[k] = rng.uniform(0.1, 3);
        same = same && qu[k] == pu[k] && qs[k] == ps_[k];
      }
      Tape t;
      KlResult kl = kl_diag(make_gaussian(t, qu, qs),
                            make_gaussian(t, pu, ps_));
      CHECK(kl.per_row.value()[0] >= 0.0);
      if (!same) CHECK(kl.per_row.value()[0] > 1e-12);
    }
  }
  SECTION("dimension mismatch is fatal") {
    Tape t;
    CHECK_THROWS_WITH(kl_diag(make_gaussian(t, {0.0}, {1.0}),
                              make_gaussian(t, {0.0, 0.0}, {1.0, 1.0})),
                      Catch::Matchers::ContainsSubstring("kl_diag"));
  }
}

TEST_CASE("free bits") {
  Tape t;
  SECTION("active clamp returns the floor in nats") {
    Tensor kl = t.constant({1, 1}, {0.3});
    CHECK(free_bits(kl, 2.0).value()[0] ==
          Catch::Approx(2.0 * kLn2).epsilon(1e-12));
  }
  SECTION("floor zero is the identity") {
    Tensor kl = t.constant({1, 1}, {0.3});
    Tensor out = free_bits(kl, 0.0);
    CHECK(out.id() == kl.id());
  }
  SECTION("inactive clamp passes the KL through") {
    Tensor kl = t.constant({1, 1}, {5.0});
    CHECK(free_bits(kl, 2.0).value()[0] == 5.0);
  }
  SECTION("output never falls below the floor") {
    Rng rng(4);
    for (int rep = 0; rep < 100; ++rep) {
      double klv = rng.uniform(0, 4);
      double bits = rng.uniform(0, 4);
      Tape t2;
      double out = free_bits(t2.constant({1, 1}, {klv}), bits).value()[0];
      CHECK(out >= bits * kLn2 - 1e-15);
      CHECK(out >= klv - 1e-15);
    }
  }
  SECTION("no gradient flows while the clamp is active") {
    Tape t2;
    Tensor kl_in = t2.leaf({1, 1}, {0.3}, true);
    t2.backward(sum_all(free_bits(kl_in, 2.0)));
    CHECK(t2.grad(kl_in)[0] == 0.0);

    Tape t3;
    Tensor kl_in2 = t3.leaf({1, 1}, {5.0}, true);
    t3.backward(sum_all(free_bits(kl_in2, 2.0)));
    CHECK(t3.grad(kl_in2)[0] == 1.0);
  }
}

TEST_CASE("stop-gradient contract: inference-only updates leave theta intact") {
  ModelConfig cfg;
  cfg.variant = Variant::kVmmtF;
  cfg.vocab_size = 12;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 4;
  cfg.latent_dim = 2;
  cfg.image_dim = 4;
  cfg.dropout = 0.0;
  Rng rng(41);
  ParamStore ps = build_params(cfg, rng);

  Batch b;
  b.src = {{5, 6, 7}};
  b.tgt = {{8, 9}};
  b.src_len = {3};
  b.tgt_len = {2};
  b.features = {{0.3, -0.5, 0.8, 0.1}};

  std::vector<std::vector<double>> theta_before;
  for (const auto& p : ps.all())
    if (p.name.rfind("gen.", 0) == 0) theta_before.push_back(p.data);

  Adam adam;
  for (int step = 0; step < 3; ++step) {
    Tape tape;
    ParamBinder P(tape, ps);
    Rng fr(7 + step);
    ElboOut out = elbo_batch(tape, P, b, cfg, fr, true);
    tape.backward(out.loss);
    ParamGrads grads = P.grads();
    ParamGrads lambda_only;
    for (auto& [name, g] : grads)
      if (name.rfind("inf.", 0) == 0) lambda_only[name] = g;
    adam.step(ps, lambda_only);
  }
  size_t i = 0;
  for (const auto& p : ps.all())
    if (p.name.rfind("gen.", 0) == 0) CHECK(p.data == theta_before[i++]);
}
