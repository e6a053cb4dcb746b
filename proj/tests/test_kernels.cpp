#include <Eigen/Eigenvalues>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "gppde/kernels.hpp"

using namespace gppde;

namespace {

struct Variant {
  std::string name;
  std::vector<KernelSpec> specs;
  ParamVector theta;
};

std::vector<Variant> all_variants(uint64_t seed) {
  std::vector<Variant> out;
  {
    std::vector<KernelSpec> s{KernelSpec::rbf_iso(2)};
    ParamVector t = ParamVector::zeros(s);
    t.set_value(s, 0, 0, 0.3);
    out.push_back({"rbf_iso", s, t});
  }
  {
    std::vector<KernelSpec> s{KernelSpec::rbf_aniso(2)};
    ParamVector t = ParamVector::zeros(s);
    t.set_value(s, 0, 0, 0.45);
    t.set_value(s, 0, 1, 0.25);
    out.push_back({"rbf_aniso", s, t});
  }
  {
    std::vector<KernelSpec> s{KernelSpec::periodic_time_space(10.0)};
    ParamVector t = ParamVector::zeros(s);
    t.set_value(s, 0, 0, 0.4);
    t.set_value(s, 0, 1, 0.7);
    out.push_back({"periodic", s, t});
  }
  {
    std::vector<KernelSpec> s{KernelSpec::additive_rbf_poly(2)};
    ParamVector t = ParamVector::zeros(s);
    t.set_value(s, 0, 0, 0.9);
    t.set_value(s, 0, 1, 0.6);
    t.raw[2] = 0.8;
    t.raw[3] = 1.2;
    out.push_back({"additive", s, t});
  }
  {
    std::vector<KernelSpec> s{KernelSpec::gibbs_mlp(2, {6, 6}, 1)};
    ParamVector t = ParamVector::zeros(s);
    Rng r(seed);
    auto w = glorot_init(s[0].mlp, r);
    for (size_t i = 0; i < w.size(); ++i) t.raw[static_cast<int>(i)] = w[i];
    out.push_back({"gibbs_iso", s, t});
  }
  {
    std::vector<KernelSpec> s{KernelSpec::gibbs_mlp(2, {5, 5}, 2)};
    ParamVector t = ParamVector::zeros(s);
    Rng r(seed + 1);
    auto w = glorot_init(s[0].mlp, r);
    for (size_t i = 0; i < w.size(); ++i) t.raw[static_cast<int>(i)] = w[i];
    out.push_back({"gibbs_aniso", s, t});
  }
  return out;
}

std::vector<MultiIndex> orders_up_to_two() {
  return {MultiIndex::zero(2),      MultiIndex::unit(2, 0),   MultiIndex::unit(2, 1),
          MultiIndex::second(2, 0), MultiIndex::second(2, 1), MultiIndex(2, {1, 1})};
}

}  // namespace

TEST_CASE("kernel_eval: unit diagonal and the hand RBF value") {
  std::vector<KernelSpec> s{KernelSpec::rbf_iso(2)};
  ParamVector t = ParamVector::zeros(s);
  t.set_value(s, 0, 0, 0.2);
  REQUIRE(kernel_eval(s[0], t, 0, Point(0.3, 0.8), Point(0.3, 0.8)) == Catch::Approx(1.0));
  REQUIRE(kernel_eval(s[0], t, 0, Point(0, 0), Point(0.2, 0)) ==
          Catch::Approx(std::exp(-0.5)).epsilon(1e-12));
}

TEST_CASE("kernel symmetry in (x, y) for all variants") {
  Rng rng(21);
  for (auto& v : all_variants(100)) {
    for (int trial = 0; trial < 20; ++trial) {
      Point x(rng.uniform(), rng.uniform()), y(rng.uniform(), rng.uniform());
      const double a = kernel_eval(v.specs[0], v.theta, 0, x, y);
      const double b = kernel_eval(v.specs[0], v.theta, 0, y, x);
      REQUIRE(a == Catch::Approx(b).margin(1e-14));
    }
  }
}

TEST_CASE("mixed derivative: order 0 equals eval; odd derivative vanishes at x == y") {
  std::vector<KernelSpec> s{KernelSpec::rbf_iso(2)};
  ParamVector t = ParamVector::zeros(s);
  t.set_value(s, 0, 0, 1.0);
  Point x(0.4, 0.6), y(0.1, 0.9);
  REQUIRE(kernel_mixed_deriv(s[0], t, 0, x, MultiIndex::zero(2), y, MultiIndex::zero(2)) ==
          Catch::Approx(kernel_eval(s[0], t, 0, x, y)));
  REQUIRE(kernel_mixed_deriv(s[0], t, 0, x, MultiIndex::unit(2, 0), x, MultiIndex::zero(2)) ==
          Catch::Approx(0.0).margin(1e-14));
  REQUIRE_THROWS_AS(
      kernel_mixed_deriv(s[0], t, 0, x, MultiIndex(2, {2, 1}), y, MultiIndex::zero(2)),
      UnsupportedOrder);
}

TEST_CASE("mixed derivatives match central finite differences for every variant") {
  // FD oracle on the scalar kernel_eval, each (alpha, beta) pair up to order 2
  Rng rng(31);
  const auto mis = orders_up_to_two();
  for (auto& v : all_variants(200)) {
    Point x(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8));
    Point y(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8));
    auto fd_at = [&](const MultiIndex& a, const MultiIndex& b, double h) {
      std::vector<std::pair<double, std::array<double, 4>>> stencil = {{1.0, {0, 0, 0, 0}}};
      auto expand = [&](int slot, int times) {
        for (int k = 0; k < times; ++k) {
          std::vector<std::pair<double, std::array<double, 4>>> next;
          for (auto tm : stencil) {
            auto pl = tm;
            pl.first /= 2 * h;
            pl.second[static_cast<size_t>(slot)] += h;
            auto mi2 = tm;
            mi2.first /= -2 * h;
            mi2.second[static_cast<size_t>(slot)] -= h;
            next.push_back(pl);
            next.push_back(mi2);
          }
          stencil = std::move(next);
        }
      };
      expand(0, a[0]);
      expand(1, a[1]);
      expand(2, b[0]);
      expand(3, b[1]);
      double fd = 0.0;
      for (const auto& tm : stencil)
        fd += tm.first * kernel_eval(v.specs[0], v.theta, 0,
                                     Point(x[0] + tm.second[0], x[1] + tm.second[1]),
                                     Point(y[0] + tm.second[2], y[1] + tm.second[3]));
      return fd;
    };
    for (const auto& a : mis)
      for (const auto& b : mis) {
        // the step balances truncation against eps/(2h)^q roundoff; for the
        // high orders a Richardson pair removes the oracle's own h^2 error
        const int q = a.total() + b.total();
        const double h = q <= 2 ? 1e-4 : 4e-3;
        double fd = fd_at(a, b, h);
        if (q >= 3) fd = (4.0 * fd_at(a, b, h / 2) - fd) / 3.0;
        const double got = kernel_mixed_deriv(v.specs[0], v.theta, 0, x, a, y, b);
        const double scale = std::abs(fd) + 1.0;
        const double rel = q <= 2 ? 1e-6 : (q == 3 ? 1e-5 : 3e-5);
        INFO(v.name << " alpha=(" << a[0] << a[1] << ") beta=(" << b[0] << b[1] << ")");
        REQUIRE(std::abs(got - fd) / scale <= rel);
      }
  }
}

TEST_CASE("derivative symmetry under argument swap") {
  Rng rng(41);
  const auto mis = orders_up_to_two();
  for (auto& v : all_variants(300)) {
    Point x(rng.uniform(), rng.uniform()), y(rng.uniform(), rng.uniform());
    for (const auto& a : mis)
      for (const auto& b : mis) {
        const double d1 = kernel_mixed_deriv(v.specs[0], v.theta, 0, x, a, y, b);
        const double d2 = kernel_mixed_deriv(v.specs[0], v.theta, 0, y, b, x, a);
        REQUIRE(std::abs(d1 - d2) <= 1e-12 * (1.0 + std::abs(d1)));
      }
  }
}

TEST_CASE("plain Gram matrices are positive semidefinite") {
  Rng rng(51);
  for (auto& v : all_variants(400)) {
    const int n = 30;
    Matrix K(n, n);
    std::vector<Point> pts;
    for (int i = 0; i < n; ++i) pts.emplace_back(rng.uniform(), rng.uniform());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) K(i, j) = kernel_eval(v.specs[0], v.theta, 0, pts[static_cast<size_t>(i)], pts[static_cast<size_t>(j)]);
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (K + K.transpose()));
    REQUIRE(es.eigenvalues().minCoeff() >= -1e-10 * es.eigenvalues().maxCoeff());
  }
}

TEST_CASE("periodic kernel is invariant under a period shift in space") {
  std::vector<KernelSpec> s{KernelSpec::periodic_time_space(10.0)};
  ParamVector t = ParamVector::zeros(s);
  t.set_value(s, 0, 0, 0.3);
  t.set_value(s, 0, 1, 0.5);
  Rng rng(61);
  for (int k = 0; k < 30; ++k) {
    Point x(rng.uniform(), rng.uniform(-5, 5)), y(rng.uniform(), rng.uniform(-5, 5));
    Point xs = x;
    xs[1] += 10.0;
    REQUIRE(kernel_eval(s[0], t, 0, x, y) ==
            Catch::Approx(kernel_eval(s[0], t, 0, xs, y)).margin(1e-12));
  }
}

TEST_CASE("kernel_param_tangent: zero direction, coincident-point invariance, FD oracle") {
  Rng rng(71);
  const auto mis = orders_up_to_two();
  for (auto& v : all_variants(500)) {
    ParamVector zero = ParamVector::zeros(v.specs);
    Point x(rng.uniform(), rng.uniform()), y(rng.uniform(), rng.uniform());
    REQUIRE(kernel_param_tangent(v.specs[0], v.theta, zero, 0, x, MultiIndex::zero(2), y,
                                 MultiIndex::zero(2)) == 0.0);
    // random direction FD check over a few derivative pairs
    ParamVector dir = ParamVector::zeros(v.specs);
    Rng dr(81);
    for (int i = 0; i < dir.total(); ++i) dir.raw[i] = dr.normal();
    const double h = 1e-6;
    for (int trial = 0; trial < 4; ++trial) {
      const auto& a = mis[static_cast<size_t>(trial)];
      const auto& b = mis[static_cast<size_t>((trial * 2 + 1) % mis.size())];
      ParamVector tp = v.theta, tm = v.theta;
      tp.raw += h * dir.raw;
      tm.raw -= h * dir.raw;
      const double fd = (kernel_mixed_deriv(v.specs[0], tp, 0, x, a, y, b) -
                         kernel_mixed_deriv(v.specs[0], tm, 0, x, a, y, b)) /
                        (2 * h);
      const double got = kernel_param_tangent(v.specs[0], v.theta, dir, 0, x, a, y, b);
      REQUIRE(std::abs(got - fd) <= 1e-6 * (1.0 + std::abs(fd)) + 1e-8);
    }
  }
  // RbfIso at x == y: value is identically 1, so any direction gives zero
  std::vector<KernelSpec> s{KernelSpec::rbf_iso(2)};
  ParamVector t = ParamVector::zeros(s);
  t.set_value(s, 0, 0, 0.77);
  ParamVector d = ParamVector::zeros(s);
  d.raw[0] = 1.0;
  Point q(0.4, 0.2);
  REQUIRE(kernel_param_tangent(s[0], t, d, 0, q, MultiIndex::zero(2), q, MultiIndex::zero(2)) ==
          Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("kernel_param_vjp: zero cotangent, duality with tangent, Gibbs FD") {
  Rng rng(91);
  const auto mis = orders_up_to_two();
  for (auto& v : all_variants(600)) {
    Point x(rng.uniform(), rng.uniform()), y(rng.uniform(), rng.uniform());
    const auto& a = mis[3];
    const auto& b = mis[4];
    auto zero = kernel_param_vjp(v.specs, v.theta, 0, x, a, y, b, 0.0);
    REQUIRE(zero.raw.cwiseAbs().maxCoeff() == 0.0);
    auto g = kernel_param_vjp(v.specs, v.theta, 0, x, a, y, b, 1.0);
    ParamVector dir = ParamVector::zeros(v.specs);
    Rng dr(17);
    for (int i = 0; i < dir.total(); ++i) dir.raw[i] = dr.normal();
    const double tan = kernel_param_tangent(v.specs[0], v.theta, dir, 0, x, a, y, b);
    const double dot = g.raw.dot(dir.raw);
    REQUIRE(std::abs(tan - dot) <= 1e-10 * (1.0 + std::abs(tan)));
  }
  // GibbsMlp: FD in 20 random weight coordinates
  std::vector<KernelSpec> s{KernelSpec::gibbs_mlp(2, {8, 8}, 1)};
  ParamVector t = ParamVector::zeros(s);
  Rng r(5);
  auto w = glorot_init(s[0].mlp, r);
  for (size_t i = 0; i < w.size(); ++i) t.raw[static_cast<int>(i)] = w[i];
  Point x(0.31, 0.72), y(0.58, 0.44);
  const auto a = MultiIndex::second(2, 0), b = MultiIndex::unit(2, 1);
  auto g = kernel_param_vjp(s, t, 0, x, a, y, b, 1.0);
  Rng cr(13);
  auto coords = sample_without_replacement(static_cast<size_t>(t.total()), 20, cr);
  const double h = 1e-5;
  for (auto ci : coords) {
    ParamVector tp = t, tm = t;
    tp.raw[static_cast<int>(ci)] += h;
    tm.raw[static_cast<int>(ci)] -= h;
    const double fd = (kernel_mixed_deriv(s[0], tp, 0, x, a, y, b) -
                       kernel_mixed_deriv(s[0], tm, 0, x, a, y, b)) /
                      (2 * h);
    REQUIRE(std::abs(g.raw[static_cast<int>(ci)] - fd) <= 1e-5 * (std::abs(fd) + 1e-2));
  }
}

TEST_CASE("lengthscale_field: softplus architecture facts and a hand-checked net") {
  std::vector<KernelSpec> s{KernelSpec::gibbs_mlp(2, {4, 4}, 1)};
  ParamVector t = ParamVector::zeros(s);  // all weights and biases zero
  auto l = lengthscale_field(s[0], t, 0, Point(0.3, 0.9));
  REQUIRE(l.size() == 1);
  REQUIRE(l[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  // positivity at random weights
  Rng r(3);
  auto w = glorot_init(s[0].mlp, r);
  for (size_t i = 0; i < w.size(); ++i) t.raw[static_cast<int>(i)] = w[i];
  for (int k = 0; k < 25; ++k) {
    auto lv = lengthscale_field(s[0], t, 0, Point(r.uniform(), r.uniform()));
    REQUIRE(lv[0] > 0.0);
  }
  // single-hidden-unit net evaluated by hand through tanh -> softplus
  std::vector<KernelSpec> s1{KernelSpec::gibbs_mlp(2, {1}, 1)};
  ParamVector t1 = ParamVector::zeros(s1);
  // layout: W1 (1x2) = [0.5, -0.25], b1 = 0.1, W2 (1x1) = 2.0, b2 = -0.3
  t1.raw[0] = 0.5;
  t1.raw[1] = -0.25;
  t1.raw[2] = 0.1;
  t1.raw[3] = 2.0;
  t1.raw[4] = -0.3;
  const Point q(0.6, 0.2);
  const double hidden = std::tanh(0.5 * 0.6 - 0.25 * 0.2 + 0.1);
  const double expect = std::log1p(std::exp(2.0 * hidden - 0.3));
  REQUIRE(lengthscale_field(s1[0], t1, 0, q)[0] == Catch::Approx(expect).epsilon(1e-12));
  // wrong variant
  std::vector<KernelSpec> rb{KernelSpec::rbf_iso(2)};
  ParamVector tr = ParamVector::zeros(rb);
  REQUIRE_THROWS_AS(lengthscale_field(rb[0], tr, 0, q), VariantMismatch);
}

TEST_CASE("GibbsMlp with a constant lengthscale field reproduces RbfAniso") {
  // zero hidden weights force l(x) = softplus(b_out) everywhere; choosing the
  // output bias so softplus(b) = c matches the stationary kernel with l = c
  const double c = 0.4;
  const double bias = std::log(std::exp(c) - 1.0);  // softplus inverse
  std::vector<KernelSpec> gs{KernelSpec::gibbs_mlp(2, {4}, 1)};
  ParamVector gt = ParamVector::zeros(gs);
  gt.raw[gs[0].mlp.bias_offset(1)] = bias;
  std::vector<KernelSpec> rs{KernelSpec::rbf_iso(2)};
  ParamVector rt = ParamVector::zeros(rs);
  rt.set_value(rs, 0, 0, c);
  Rng rng(8);
  const auto mis = orders_up_to_two();
  for (int k = 0; k < 100; ++k) {
    Point x(rng.uniform(), rng.uniform()), y(rng.uniform(), rng.uniform());
    REQUIRE(std::abs(kernel_eval(gs[0], gt, 0, x, y) - kernel_eval(rs[0], rt, 0, x, y)) <= 1e-12);
  }
  for (const auto& a : mis)
    for (const auto& b : mis) {
      Point x(0.21, 0.66), y(0.74, 0.32);
      const double dg = kernel_mixed_deriv(gs[0], gt, 0, x, a, y, b);
      const double dr = kernel_mixed_deriv(rs[0], rt, 0, x, a, y, b);
      REQUIRE(std::abs(dg - dr) <= 1e-10 * (1.0 + std::abs(dr)));
    }
}
