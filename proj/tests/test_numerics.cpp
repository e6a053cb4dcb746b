#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "gppde/linalg.hpp"
#include "gppde/rng.hpp"

using namespace gppde;

namespace {

SymMatrix random_spd(int n, Rng& rng, double diag_boost = 1.0) {
  Matrix A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = rng.normal();
  SymMatrix S(Matrix(A * A.transpose()));
  S.m.diagonal().array() += diag_boost;
  return S;
}

}  // namespace

TEST_CASE("cholesky_nugget: identity") {
  SymMatrix I(Matrix(Matrix::Identity(3, 3)));
  auto F = cholesky_nugget(I, 0.0);
  REQUIRE((F.L - Matrix::Identity(3, 3)).norm() == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("cholesky_nugget: hand 2x2 factor") {
  SymMatrix S(2);
  S.m << 4, 2, 2, 3;
  auto F = cholesky_nugget(S, 0.0);
  REQUIRE(F.L(0, 0) == Catch::Approx(2.0));
  REQUIRE(F.L(1, 0) == Catch::Approx(1.0));
  REQUIRE(F.L(1, 1) == Catch::Approx(std::sqrt(2.0)));
  // L L^T reconstructs S
  REQUIRE((F.L * F.L.transpose() - S.m).norm() / S.m.norm() < 1e-15);
}

TEST_CASE("cholesky_nugget: rank-deficient needs the nugget") {
  SymMatrix S(2);
  S.m << 1, 1, 1, 1;
  REQUIRE_NOTHROW(cholesky_nugget(S, 1e-10));
  REQUIRE_THROWS_AS(cholesky_nugget(S, 0.0), NotPositiveDefinite);
}

TEST_CASE("solve_chol: identity and hand 2x2") {
  SymMatrix I(Matrix(Matrix::Identity(3, 3)));
  Vector b(3);
  b << 1, 2, 3;
  REQUIRE((solve_chol(cholesky_nugget(I, 0.0), b) - b).norm() < 1e-14);

  SymMatrix S(2);
  S.m << 4, 2, 2, 3;
  Vector b2(2);
  b2 << 1, 0;
  Vector x = solve_chol(cholesky_nugget(S, 0.0), b2);
  REQUIRE(x[0] == Catch::Approx(0.375));
  REQUIRE(x[1] == Catch::Approx(-0.25));
}

TEST_CASE("solve_chol: random SPD residual property") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 20;
    SymMatrix S = random_spd(n, rng);
    Vector b(n);
    for (int i = 0; i < n; ++i) b[i] = rng.normal();
    Vector x = solve_chol(cholesky_nugget(S, 0.0), b);
    REQUIRE((S.m * x - b).norm() / b.norm() <= 1e-10);
  }
}

TEST_CASE("solve_chol: dimension mismatch") {
  SymMatrix I(Matrix(Matrix::Identity(3, 3)));
  auto F = cholesky_nugget(I, 0.0);
  Vector b(4);
  b.setOnes();
  REQUIRE_THROWS_AS(solve_chol(F, b), DimensionMismatch);
}

TEST_CASE("solve_kkt: projection onto a constraint") {
  std::vector<SymMatrix> H{SymMatrix(Matrix(Matrix::Identity(2, 2)))};
  Matrix A(1, 2);
  A << 1, 0;
  Vector g = Vector::Zero(2), r(1);
  r << 1;
  auto sol = solve_kkt(H, A, g, r);
  REQUIRE(sol.primal[0] == Catch::Approx(1.0));
  REQUIRE(sol.primal[1] == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("solve_kkt: minimum norm under x1+x2=2") {
  std::vector<SymMatrix> H{SymMatrix(Matrix(Matrix::Identity(2, 2)))};
  Matrix A(1, 2);
  A << 1, 1;
  Vector g = Vector::Zero(2), r(1);
  r << 2;
  auto sol = solve_kkt(H, A, g, r);
  REQUIRE(sol.primal[0] == Catch::Approx(1.0));
  REQUIRE(sol.primal[1] == Catch::Approx(1.0));
}

TEST_CASE("solve_kkt: duplicated constraint rows are singular") {
  std::vector<SymMatrix> H{SymMatrix(Matrix(Matrix::Identity(3, 3)))};
  Matrix A(2, 3);
  A << 1, 0, 1, 1, 0, 1;
  Vector g = Vector::Zero(3), r(2);
  r << 1, 1;
  REQUIRE_THROWS_AS(solve_kkt(H, A, g, r), SingularKkt);
}

TEST_CASE("solve_kkt: residual contract on random instances, vs dense oracle") {
  Rng rng(7);
  for (int n : {20, 120, 500}) {
    const int m = n / 3;
    std::vector<SymMatrix> H;
    H.push_back(random_spd(n / 2, rng, 2.0));
    H.push_back(random_spd(n - n / 2, rng, 2.0));
    Matrix A(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = rng.normal();
    Vector g(n), r(m);
    for (int i = 0; i < n; ++i) g[i] = rng.normal();
    for (int i = 0; i < m; ++i) r[i] = rng.normal();
    auto sol = solve_kkt(H, A, g, r);
    // saddle residual
    Matrix Hfull = Matrix::Zero(n, n);
    Hfull.topLeftCorner(n / 2, n / 2) = H[0].m;
    Hfull.bottomRightCorner(n - n / 2, n - n / 2) = H[1].m;
    const double stat = (Hfull * sol.primal + A.transpose() * sol.multipliers + g).norm() /
                        std::max(1.0, g.norm());
    const double feas = (A * sol.primal - r).norm() / std::max(1.0, r.norm());
    REQUIRE(stat <= 1e-8);
    REQUIRE(feas <= 1e-8);
    auto dense = solve_kkt_dense(H, A, g, r);
    REQUIRE((sol.primal - dense.primal).norm() / dense.primal.norm() <= 1e-8);
  }
}

TEST_CASE("sample_uniform: n = 0 and determinism") {
  Rng a(42), b(42);
  Region box = Region::box2(0, 1, 0, 1);
  REQUIRE(sample_uniform(box, 0, a).empty());
  auto p1 = sample_uniform(box, 50, a);
  Rng c(42);
  sample_uniform(box, 0, c);
  auto p2 = sample_uniform(box, 50, c);
  for (size_t i = 0; i < p1.size(); ++i) {
    REQUIRE(p1[i][0] == p2[i][0]);
    REQUIRE(p1[i][1] == p2[i][1]);
  }
  (void)b;
}

TEST_CASE("sample_uniform: law of large numbers on the unit square") {
  Rng rng(123);
  auto pts = sample_uniform(Region::box2(0, 1, 0, 1), 10000, rng);
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    mx += p[0];
    my += p[1];
  }
  mx /= 1e4;
  my /= 1e4;
  REQUIRE(std::abs(mx - 0.5) < 0.02);
  REQUIRE(std::abs(my - 0.5) < 0.02);
}

TEST_CASE("sample_uniform: boundary faces sampled proportionally to measure") {
  // one face of measure 2 vs one of measure 1
  Region::Face fa;
  fa.fixed_axis = 0;
  fa.fixed_value = 0.0;
  fa.lo = {0, -1, 0};
  fa.hi = {0, 1, 0};
  Region::Face fb;
  fb.fixed_axis = 1;
  fb.fixed_value = 0.0;
  fb.lo = {0, 0, 0};
  fb.hi = {1, 0, 0};
  Region r = Region::face_union(2, {fa, fb});
  Rng rng(9);
  auto pts = sample_uniform(r, 30000, rng);
  int on_a = 0;
  for (const auto& p : pts)
    if (std::abs(p[0]) < 1e-14) ++on_a;
  REQUIRE(std::abs(on_a / 30000.0 - 2.0 / 3.0) < 0.02);
}

TEST_CASE("rng: identical seeds give identical streams, normals are sane") {
  Rng a(987), b(987);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng g(55);
  double mean = 0, var = 0;
  const int n = 20000;
  std::vector<double> xs(n);
  for (auto& x : xs) x = g.normal();
  for (double x : xs) mean += x;
  mean /= n;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n;
  REQUIRE(std::abs(mean) < 0.03);
  REQUIRE(std::abs(var - 1.0) < 0.05);
}
