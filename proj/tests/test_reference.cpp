#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "gppde/reference.hpp"

using namespace gppde;

namespace {
struct CacheDirGuard {
  CacheDirGuard() { oracle::cache_dir() = "test_oracle_cache"; }
};
static CacheDirGuard guard;
}  // namespace

TEST_CASE("elliptic reference: prescribed solution values") {
  ProblemSpec p = ProblemSpec::make(ProblemName::Elliptic);
  auto ref = reference_solution(p, 128);
  REQUIRE(ref.eval(0, Point(0.5, 0.5)) == Catch::Approx(1.0).epsilon(1e-12));
  REQUIRE(ref.eval(0, Point(0.0, 0.37)) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("error_metrics: identity, constant offset, hand 2x2 grid") {
  ProblemSpec p = ProblemSpec::make(ProblemName::Elliptic);
  auto ref = reference_solution(p, 128);
  // a fake "state" is awkward here; instead check the metric arithmetic on
  // closures via the component helper with a constant-offset evaluator
  std::vector<KernelSpec> ks{KernelSpec::rbf_iso(2)};
  ParamVector th = ParamVector::zeros(ks);
  th.set_value(ks, 0, 0, 0.4);
  LinearizedInner li;
  li.Phi.component_count = 1;
  li.Phi.add_atom(DiffFunctional::eval_at(0, Point(0.5, 0.5)));
  li.b = Vector::Zero(1);  // the zero function
  GnState s = solve(li, ks, th, 1e-12);
  // state == 0 everywhere: vs ref_eval == 0 gives (0, 0)
  auto m0 = error_metrics_component(s, p, [](const Point&) { return 0.0; }, 0, 16);
  REQUIRE(m0.l2 == 0.0);
  REQUIRE(m0.linf == 0.0);
  // vs constant c: l2 == linf == |c| (forced by the RMS convention)
  auto mc = error_metrics_component(s, p, [](const Point&) { return 0.25; }, 0, 16);
  REQUIRE(mc.l2 == Catch::Approx(0.25));
  REQUIRE(mc.linf == Catch::Approx(0.25));
  // hand 2x2 pattern (+1, -1, +1, -1): l2 = 1, linf = 1
  auto mh = error_metrics_component(
      s, p, [](const Point& q) { return (q[0] < 0.5) == (q[1] < 0.5) ? 1.0 : -1.0; }, 0, 2);
  REQUIRE(mh.l2 == Catch::Approx(1.0));
  REQUIRE(mh.linf == Catch::Approx(1.0));
}

TEST_CASE("burgers oracle: initial row, odd symmetry, Crank-Nicolson cross-check") {
  ProblemSpec p = ProblemSpec::make(ProblemName::Burgers);
  auto ref = reference_solution(p, 128);
  for (double x : {-0.7, -0.2, 0.4, 0.9})
    REQUIRE(ref.eval(0, Point(1e-6, x)) == Catch::Approx(-std::sin(M_PI * x)).margin(1e-3));
  REQUIRE(std::abs(ref.eval(0, Point(0.5, 0.0)) + ref.eval(0, Point(0.5, 0.0))) < 1e-12);

  // independent Crank-Nicolson solve of the same problem (implicit diffusion,
  // explicit-in-iteration convection via Newton); n = 1024 nodes, dt = 2.5e-4
  const int n = 1025;
  const double h = 2.0 / (n - 1), dt = 2.5e-4, nu = p.constants.nu;
  std::vector<double> u(n);
  for (int i = 0; i < n; ++i) u[static_cast<size_t>(i)] = -std::sin(M_PI * (-1 + i * h));
  std::vector<double> a(n), b(n), c(n), d(n), un(n);
  auto rhs_f = [&](const std::vector<double>& w, int i) {
    return -w[static_cast<size_t>(i)] * (w[static_cast<size_t>(i + 1)] - w[static_cast<size_t>(i - 1)]) / (2 * h) +
           nu * (w[static_cast<size_t>(i + 1)] - 2 * w[static_cast<size_t>(i)] + w[static_cast<size_t>(i - 1)]) / (h * h);
  };
  const int steps = static_cast<int>(std::llround(1.0 / dt));
  double last_cn_residual = 0.0;
  for (int s2 = 0; s2 < steps; ++s2) {
    un = u;
    for (int newton = 0; newton < 3; ++newton) {
      for (int i = 1; i < n - 1; ++i) {
        const double J_c = 1.0 / dt + (un[static_cast<size_t>(i + 1)] - un[static_cast<size_t>(i - 1)]) / (4 * h) + nu / (h * h);
        const double J_w = -un[static_cast<size_t>(i)] / (4 * h) * -1.0 - nu / (2 * h * h);
        const double J_e = -un[static_cast<size_t>(i)] / (4 * h) - nu / (2 * h * h);
        a[static_cast<size_t>(i)] = J_w;
        b[static_cast<size_t>(i)] = J_c;
        c[static_cast<size_t>(i)] = J_e;
        d[static_cast<size_t>(i)] = -((un[static_cast<size_t>(i)] - u[static_cast<size_t>(i)]) / dt -
                                      0.5 * (rhs_f(un, i) + rhs_f(u, i)));
      }
      // Thomas solve on the interior
      for (int i = 2; i < n - 1; ++i) {
        const double m = a[static_cast<size_t>(i)] / b[static_cast<size_t>(i - 1)];
        b[static_cast<size_t>(i)] -= m * c[static_cast<size_t>(i - 1)];
        d[static_cast<size_t>(i)] -= m * d[static_cast<size_t>(i - 1)];
      }
      d[static_cast<size_t>(n - 2)] /= b[static_cast<size_t>(n - 2)];
      for (int i = n - 3; i >= 1; --i)
        d[static_cast<size_t>(i)] = (d[static_cast<size_t>(i)] - c[static_cast<size_t>(i)] * d[static_cast<size_t>(i + 1)]) / b[static_cast<size_t>(i)];
      double delta = 0.0;
      for (int i = 1; i < n - 1; ++i) {
        un[static_cast<size_t>(i)] += d[static_cast<size_t>(i)];
        delta = std::max(delta, std::abs(d[static_cast<size_t>(i)]));
      }
      if (delta < 1e-12) break;
    }
    if (s2 == steps - 1) {
      // discrete-equation residual of the accepted step (spec invariant)
      for (int i = 1; i < n - 1; ++i)
        last_cn_residual = std::max(
            last_cn_residual,
            std::abs((un[static_cast<size_t>(i)] - u[static_cast<size_t>(i)]) / dt -
                     0.5 * (rhs_f(un, i) + rhs_f(u, i))));
    }
    u = un;
  }
  REQUIRE(last_cn_residual <= 1e-6);
  double worst = 0.0;
  for (int i = 1; i < n - 1; i += 16) {
    const double x = -1 + i * h;
    worst = std::max(worst, std::abs(u[static_cast<size_t>(i)] - ref.eval(0, Point(1.0, x))));
  }
  REQUIRE(worst <= 5e-3);
}

TEST_CASE("eikonal oracle: sign, boundary values, refinement study") {
  ProblemSpec p = ProblemSpec::make(ProblemName::Eikonal);
  auto ref = reference_solution(p, 500);  // runs the internal two-level study
  const auto& g = ref.grid;
  for (int i = 0; i < g.res[0]; i += 13) {
    REQUIRE(g.at(0, i, 0) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(g.at(0, 0, i % g.res[1]) == Catch::Approx(0.0).margin(1e-12));
  }
  double umin = 1e9;
  for (int i = 0; i < g.res[0]; ++i)
    for (int j = 0; j < g.res[1]; ++j) umin = std::min(umin, g.at(0, i, j));
  REQUIRE(umin >= -1e-12);
  REQUIRE(ref.eval(0, Point(0.5, 0.5)) > 0.4);
}

TEST_CASE("schrodinger oracle: initial data and self-refinement") {
  ProblemSpec p = ProblemSpec::make(ProblemName::Schrodinger);
  auto ref = reference_solution(p, 1024);
  REQUIRE(ref.eval(0, Point(0.0, 0.0)) == Catch::Approx(2.0).epsilon(1e-6));
  REQUIRE(ref.eval(1, Point(0.0, 1.3)) == Catch::Approx(0.0).margin(1e-9));
  // focusing dynamics keep |h| bounded and the oracle grid finite
  for (double t : {0.25, 0.5, 0.75, 1.0})
    REQUIRE(std::isfinite(ref.eval(0, Point(t, 0.4))));
}

TEST_CASE("gray-scott oracle: initial data reproduced on the grid") {
  ProblemSpec p = ProblemSpec::make(ProblemName::GrayScott);
  auto ref = reference_solution(p, 1024);
  for (double x : {0.1, 0.35, 0.8}) {
    REQUIRE(ref.eval(0, Point(0.0, x)) == Catch::Approx(p.gs_u0(x)).margin(1e-6));
    REQUIRE(ref.eval(1, Point(0.0, x)) == Catch::Approx(p.gs_v0(x)).margin(1e-6));
  }
}

TEST_CASE("darcy forward oracle and observation generation") {
  ProblemSpec p = ProblemSpec::make(ProblemName::DarcyInverse);
  auto ref = reference_solution(p, 512);
  REQUIRE(ref.eval(0, Point(0.5, 0.5)) > 0.0);
  REQUIRE(ref.eval(1, Point(0.25, 0.25)) == Catch::Approx(std::log(std::exp(2.0) + std::exp(-2.0))));
  {
    // gamma = 0: exact interpolated values
    Rng rng(3);
    std::vector<Point> pts{Point(0.3, 0.4), Point(0.6, 0.7)};
    auto obs = generate_observations(ref, pts, 0.0, rng);
    REQUIRE(obs[0].second == Catch::Approx(ref.grid.interp(0, pts[0])));
  }
  {
    // empirical noise std over many draws is near gamma
    Rng rng(4);
    const double gamma = 1e-3;
    std::vector<Point> pts(10000, Point(0.5, 0.5));
    auto obs = generate_observations(ref, pts, gamma, rng);
    const double truth = ref.grid.interp(0, Point(0.5, 0.5));
    double var = 0.0;
    for (const auto& [q, v] : obs) var += (v - truth) * (v - truth);
    var /= static_cast<double>(obs.size());
    REQUIRE(std::sqrt(var) == Catch::Approx(gamma).epsilon(0.03));
  }
  {
    // spec-pinned experiment scale
    Rng rng(5);
    auto obs = generate_observations(p, ref, 60, 1e-3, rng);
    REQUIRE(obs.size() == 60);
  }
}
