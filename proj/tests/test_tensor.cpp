#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <map>

#include "vmmt/grad_check.hpp"
#include "vmmt/rng.hpp"
#include "vmmt/tensor.hpp"

using namespace vmmt;

namespace {

// Scalar loss built from one primitive: weights make the loss sensitive to
// every output entry. The builder receives a freshly reseeded rng on every
// evaluation so any constants it draws are identical across the central
// difference. Returns max relative error of AD vs FD over all coordinates.
using PrimitiveBuilder = std::function<Tensor(Tape&, Tensor, Rng&)>;

double fd_primitive(const PrimitiveBuilder& build,
                    const std::vector<double>& xv, const Shape& shape,
                    uint64_t const_seed, double h = 1e-6) {
  double worst = 0;
  std::vector<double> grad;
  auto eval = [&](const std::vector<double>& point, std::vector<double>* g) {
    Tape t;
    Rng rng(const_seed);
    Tensor x = t.leaf(shape, point, true);
    Tensor y = build(t, x, rng);
    std::vector<double> w(numel(y.shape()));
    for (size_t k = 0; k < w.size(); ++k)
      w[k] = 0.3 + 0.1 * static_cast<double>(k % 7);
    Tensor loss = sum_all(mul(y, t.constant(y.shape(), w)));
    if (g) {
      t.backward(loss);
      *g = t.grad(x);
    }
    return loss.scalar();
  };
  eval(xv, &grad);
  for (size_t i = 0; i < xv.size(); ++i) {
    auto up = xv, dn = xv;
    up[i] += h;
    dn[i] -= h;
    double fd = (eval(up, nullptr) - eval(dn, nullptr)) / (2 * h);
    double rel =
        std::abs(grad[i] - fd) / std::max(1e-8, std::abs(grad[i]) + std::abs(fd));
    worst = std::max(worst, rel);
  }
  return worst;
}

std::vector<double> random_point(Rng& rng, int64_t n, double lo, double hi,
                                 double keep_away_from_zero = 0.0) {
  std::vector<double> v(n);
  for (auto& x : v) {
    do {
      x = rng.uniform(lo, hi);
    } while (keep_away_from_zero > 0.0 && std::abs(x) < keep_away_from_zero);
  }
  return v;
}

}  // namespace

TEST_CASE("softplus at zero is ln 2 and output is strictly positive") {
  Tape t;
  Tensor x = t.constant({1}, {0.0});
  CHECK(softplus(x).scalar() == Catch::Approx(0.6931471805599453).epsilon(1e-12));
  // Strictly positive and finite across the working range (exp underflows
  // to zero below about -745, where the scale floor takes over).
  for (double v : {-700.0, -30.0, -1.0, 0.0, 5.0, 700.0, 1e8}) {
    Tape t2;
    CHECK(softplus(t2.constant({1}, {v})).scalar() > 0.0);
    CHECK(std::isfinite(softplus(t2.constant({1}, {v})).scalar()));
  }
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    Tape t3;
    CHECK(softplus(t3.constant({1}, {rng.uniform(-700, 700)})).scalar() > 0.0);
  }
}

TEST_CASE("softmax of equal entries is uniform, sums to one, positive") {
  Tape t;
  Tensor x = t.constant({1, 3}, {2.5, 2.5, 2.5});
  Tensor y = softmax_rows(x);
  for (double v : y.value()) CHECK(v == Catch::Approx(1.0 / 3).epsilon(1e-14));

  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    Tape t2;
    auto xv = random_point(rng, 8, -30, 30);
    Tensor s = softmax_rows(t2.leaf({2, 4}, xv, false));
    for (int r = 0; r < 2; ++r) {
      double sum = 0;
      for (int c = 0; c < 4; ++c) {
        double v = s.value()[r * 4 + c];
        CHECK(v > 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("stop-gradient freezes one factor of a product") {
  Tape t;
  std::vector<double> xv = {1.5, -2.0, 0.25};
  Tensor x = t.leaf({3}, xv, true);
  Tensor loss = sum_all(mul(stop_gradient(x), x));
  t.backward(loss);
  const auto& g = t.grad(x);
  for (size_t i = 0; i < xv.size(); ++i) CHECK(g[i] == xv[i]);  // x, not 2x
}

TEST_CASE("backward: analytic examples") {
  SECTION("sum of squares") {
    Tape t;
    Tensor x = t.leaf({2}, {1.0, 2.0}, true);
    t.backward(sum_all(mul(x, x)));
    CHECK(t.grad(x)[0] == Catch::Approx(2.0));
    CHECK(t.grad(x)[1] == Catch::Approx(4.0));
  }
  SECTION("tanh at zero") {
    Tape t;
    Tensor x = t.leaf({1}, {0.0}, true);
    t.backward(sum_all(vtanh(x)));
    CHECK(t.grad(x)[0] == Catch::Approx(1.0));
  }
  SECTION("d loss / d loss = 1") {
    Tape t;
    Tensor x = t.leaf({1}, {3.0}, true);
    Tensor loss = scalar_mul(x, 2.0);
    t.backward(loss);
    CHECK(t.grad(loss)[0] == 1.0);
  }
  SECTION("non-scalar loss is rejected") {
    Tape t;
    Tensor x = t.leaf({2}, {1.0, 2.0}, true);
    CHECK_THROWS_WITH(t.backward(x), Catch::Matchers::ContainsSubstring("scalar"));
  }
}

TEST_CASE("shape mismatch errors name the primitive and both shapes") {
  Tape t;
  Tensor a = t.constant({2, 3}, std::vector<double>(6, 1.0));
  Tensor b = t.constant({3, 2}, std::vector<double>(6, 1.0));
  CHECK_THROWS_WITH(add(a, b), Catch::Matchers::ContainsSubstring("add") &&
                                   Catch::Matchers::ContainsSubstring("[2,3]") &&
                                   Catch::Matchers::ContainsSubstring("[3,2]"));
  Tensor c = t.constant({4, 4}, std::vector<double>(16, 1.0));
  CHECK_THROWS_WITH(matmul(a, c), Catch::Matchers::ContainsSubstring("matmul"));
}

TEST_CASE("gradients accumulate into shared inputs") {
  Tape t;
  Tensor x = t.leaf({2}, {1.0, 3.0}, true);
  // loss = sum(x + x) + sum(2x) -> d/dx = 4
  Tensor loss = add(sum_all(add(x, x)), sum_all(scalar_mul(x, 2.0)));
  t.backward(loss);
  CHECK(t.grad(x)[0] == Catch::Approx(4.0));
  CHECK(t.grad(x)[1] == Catch::Approx(4.0));
}

TEST_CASE("every catalogued primitive matches finite differences") {
  Rng rng(1234);
  std::map<std::string, PrimitiveBuilder> props;
  auto cvec = [](Tape& t, Shape s, double lo, double hi, Rng& r) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = r.uniform(lo, hi);
    return t.constant(s, v);
  };
  props["add"] = [&](Tape& t, Tensor x, Rng& r) {
    return add(x, cvec(t, x.shape(), -1, 1, r));
  };
  props["sub"] = [&](Tape& t, Tensor x, Rng& r) {
    return sub(x, cvec(t, x.shape(), -1, 1, r));
  };
  props["mul"] = [&](Tape&, Tensor x, Rng&) { return mul(x, x); };
  props["div"] = [&](Tape& t, Tensor x, Rng& r) {
    return div(cvec(t, x.shape(), 0.5, 2, r), add_scalar(x, 4.0));
  };
  props["sq_diff"] = [&](Tape& t, Tensor x, Rng& r) {
    return sq_diff(x, cvec(t, x.shape(), -1, 1, r));
  };
  props["scalar_mul"] = [&](Tape&, Tensor x, Rng&) {
    return scalar_mul(x, -1.7);
  };
  props["add_scalar"] = [&](Tape&, Tensor x, Rng&) {
    return add_scalar(x, 0.9);
  };
  props["exp"] = [&](Tape&, Tensor x, Rng&) { return vexp(x); };
  props["log"] = [&](Tape&, Tensor x, Rng&) {
    return vlog(add_scalar(x, 3.0));
  };
  props["tanh"] = [&](Tape&, Tensor x, Rng&) { return vtanh(x); };
  props["sigmoid"] = [&](Tape&, Tensor x, Rng&) { return sigmoid(x); };
  props["relu"] = [&](Tape&, Tensor x, Rng&) { return relu(x); };
  props["softplus"] = [&](Tape&, Tensor x, Rng&) { return softplus(x); };
  props["clamp_min"] = [&](Tape&, Tensor x, Rng&) {
    return clamp_min(x, 0.1);
  };
  props["matmul"] = [&](Tape& t, Tensor x, Rng& r) {
    return matmul(x, cvec(t, {3, 2}, -1, 1, r));
  };
  props["affine"] = [&](Tape& t, Tensor x, Rng& r) {
    return affine(cvec(t, {2, 2}, -1, 1, r), x, cvec(t, {3}, -1, 1, r));
  };
  props["concat_cols"] = [&](Tape&, Tensor x, Rng&) {
    return concat_cols(x, mul(x, x));
  };
  props["slice_cols"] = [&](Tape&, Tensor x, Rng&) {
    return mul(slice_cols(x, 0, 2), slice_cols(x, 1, 2));
  };
  props["row_sum"] = [&](Tape&, Tensor x, Rng&) {
    return row_sum(mul(x, x));
  };
  props["row_scale"] = [&](Tape&, Tensor x, Rng&) {
    return row_scale(x, row_sum(x));
  };
  props["sum_all"] = [&](Tape&, Tensor x, Rng&) { return sum_all(mul(x, x)); };
  props["mean_all"] = [&](Tape&, Tensor x, Rng&) {
    return mean_all(mul(x, x));
  };
  props["softmax_rows"] = [&](Tape&, Tensor x, Rng&) {
    return softmax_rows(x);
  };
  props["log_softmax_rows"] = [&](Tape&, Tensor x, Rng&) {
    return log_softmax_rows(x);
  };
  props["gather_rows"] = [&](Tape&, Tensor x, Rng&) {
    return mul(gather_rows(x, {1, 0, 1}), gather_rows(x, {1, 1, 0}));
  };
  props["pick_col"] = [&](Tape&, Tensor x, Rng&) {
    return mul(pick_col(x, {2, 0}), pick_col(x, {1, 1}));
  };
  props["dropout"] = [&](Tape&, Tensor x, Rng& r) {
    return mul(dropout(x, 0.5, r), x);
  };
  // stop_gradient cannot be finite-differenced: a secant sees through the
  // frozen factor by construction. Its exactness contract is asserted below.
  props["stop_gradient"] = nullptr;

  auto catalogue = kernel_set();
  REQUIRE(catalogue.size() == props.size());
  for (const auto& name : catalogue) {
    INFO("primitive: " << name);
    REQUIRE(props.count(name) == 1);
  }

  for (const auto& [name, build] : props) {
    INFO("primitive: " << name);
    if (name == "stop_gradient") {
      for (int rep = 0; rep < 50; ++rep) {
        auto xv = random_point(rng, 6, -2, 2);
        Tape t;
        Tensor x = t.leaf({2, 3}, xv, true);
        t.backward(sum_all(mul(stop_gradient(x), x)));
        for (size_t i = 0; i < xv.size(); ++i)
          CHECK(t.grad(x)[i] == xv[i]);  // exactly the unfrozen factor
      }
      continue;
    }
    double worst = 0;
    for (int rep = 0; rep < 50; ++rep) {
      // Keep relu/clamp inputs off their kinks; harmless elsewhere.
      auto xv = random_point(rng, 6, -2, 2, 1e-2);
      if (name == "clamp_min")
        for (auto& v : xv)
          if (std::abs(v - 0.1) < 1e-2) v += 0.05;
      worst = std::max(worst, fd_primitive(build, xv, {2, 3},
                                           1000 + 13 * rep));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("clamp_min ties go to the clamp (zero gradient)") {
  Tape t;
  Tensor x = t.leaf({3}, {0.5, 1.0, 2.0}, true);
  t.backward(sum_all(clamp_min(x, 1.0)));
  CHECK(t.grad(x)[0] == 0.0);
  CHECK(t.grad(x)[1] == 0.0);  // exactly at the floor: clamp wins
  CHECK(t.grad(x)[2] == 1.0);
}

TEST_CASE("tape replay determinism") {
  auto run = [](uint64_t seed) {
    Tape t;
    Rng rng(seed);
    std::vector<double> xv(12);
    for (auto& v : xv) v = rng.normal();
    Tensor x = t.leaf({3, 4}, xv, true);
    Rng drop_rng(seed + 1);
    Tensor y = dropout(vtanh(matmul(x, x.tape()->constant(
                                           {4, 3}, {0.1, 0.2, 0.3, 0.4, 0.5,
                                                    0.6, 0.7, 0.8, 0.9, 1.0,
                                                    1.1, 1.2}))),
                       0.5, drop_rng);
    return sum_all(y).scalar();
  };
  CHECK(run(42) == run(42));
  CHECK(run(42) != run(43));
}

TEST_CASE("grad_check oracle on analytic functions") {
  SECTION("sum of exp") {
    ParamStore ps;
    ps.add_weight("x", {2});
    ps.at("x").data = {0.0, 1.0};
    auto f = [](const ParamStore& p, ParamGrads* g) {
      Tape t;
      ParamBinder P(t, p);
      Tensor loss = sum_all(vexp(P("x")));
      if (g) {
        t.backward(loss);
        *g = P.grads();
      }
      return loss.scalar();
    };
    auto rep = grad_check(ps, f, 1e-5, 1e-6);
    CHECK(rep.ok);
    CHECK(rep.max_rel_err < 1e-6);
  }
  SECTION("softplus slope at zero is one half") {
    ParamStore ps;
    ps.add_weight("x", {1});
    ps.at("x").data = {0.0};
    auto f = [](const ParamStore& p, ParamGrads* g) {
      Tape t;
      ParamBinder P(t, p);
      Tensor loss = sum_all(softplus(P("x")));
      if (g) {
        t.backward(loss);
        *g = P.grads();
      }
      return loss.scalar();
    };
    ParamGrads g;
    double fd;
    {
      auto& x = ps.at("x").data[0];
      x = 1e-5;
      double up = f(ps, nullptr);
      x = -1e-5;
      double dn = f(ps, nullptr);
      x = 0.0;
      fd = (up - dn) / 2e-5;
    }
    f(ps, &g);
    CHECK(fd == Catch::Approx(0.5).margin(1e-5));
    CHECK(g["x"][0] == Catch::Approx(0.5).margin(1e-12));
  }
  SECTION("non-finite values are reported with the parameter name") {
    ParamStore ps;
    ps.add_weight("bad", {1});
    ps.at("bad").data = {-1.0};
    auto f = [](const ParamStore& p, ParamGrads* g) {
      Tape t;
      ParamBinder P(t, p);
      Tensor loss = sum_all(vlog(P("bad")));  // log of negative -> nan
      if (g) {
        t.backward(loss);
        *g = P.grads();
      }
      return loss.scalar();
    };
    auto rep = grad_check(ps, f, 1e-5, 1e-4);
    CHECK_FALSE(rep.ok);
    CHECK_THAT(rep.message, Catch::Matchers::ContainsSubstring("non-finite"));
  }
}

TEST_CASE("dropout is inverted (eval needs no rescaling)") {
  Tape t;
  std::vector<double> xv(1000, 1.0);
  Tensor x = t.constant({1000}, xv);
  Rng rng(5);
  Tensor y = dropout(x, 0.5, rng);
  double mean = 0;
  int kept = 0;
  for (double v : y.value()) {
    if (v != 0.0) {
      CHECK(v == Catch::Approx(2.0));
      ++kept;
    }
    mean += v;
  }
  mean /= 1000;
  CHECK(kept > 400);
  CHECK(kept < 600);
  CHECK(mean == Catch::Approx(1.0).margin(0.2));
}

TEST_CASE("leaf validates shape against data length") {
  Tape t;
  CHECK_THROWS(t.leaf({2, 3}, {1.0, 2.0}, false));
}
