#pragma once

#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <complex>
#include <cstdio>
#include <fftw3.h>
#include <filesystem>
#include <fstream>
#include <functional>
#include <vector>

#include "gppde/inner_solver.hpp"
#include "gppde/problems.hpp"

namespace gppde {

/// Regular-grid reference field with bilinear interpolation.
struct GridFunction {
  std::array<double, 2> lo{}, hi{};
  std::array<int, 2> res{};  // nodes per axis, endpoints included
  int components = 1;
  std::vector<double> values;  // [comp][i0][i1]

  double& at(int c, int i, int j) {
    return values[(static_cast<size_t>(c) * res[0] + static_cast<size_t>(i)) * res[1] +
                  static_cast<size_t>(j)];
  }
  double at(int c, int i, int j) const {
    return values[(static_cast<size_t>(c) * res[0] + static_cast<size_t>(i)) * res[1] +
                  static_cast<size_t>(j)];
  }
  double interp(int c, const Point& p) const {
    const double fx = (p[0] - lo[0]) / (hi[0] - lo[0]) * (res[0] - 1);
    const double fy = (p[1] - lo[1]) / (hi[1] - lo[1]) * (res[1] - 1);
    int i = std::max(0, std::min(res[0] - 2, static_cast<int>(std::floor(fx))));
    int j = std::max(0, std::min(res[1] - 2, static_cast<int>(std::floor(fy))));
    const double a = fx - i, b = fy - j;
    return (1 - a) * (1 - b) * at(c, i, j) + a * (1 - b) * at(c, i + 1, j) +
           (1 - a) * b * at(c, i, j + 1) + a * b * at(c, i + 1, j + 1);
  }
};

/// Reference solution: a grid plus, where a closed form or pointwise-exact
/// evaluator exists (elliptic solution, Darcy coefficient, Burgers Cole-Hopf),
/// per-component direct evaluators that avoid interpolation error in metrics.
struct Reference {
  GridFunction grid;
  std::array<std::function<double(const Point&)>, 2> exact{};
  double eval(int c, const Point& p) const {
    const auto& fn = exact[static_cast<size_t>(c)];
    return fn ? fn(p) : grid.interp(c, p);
  }
};

namespace oracle {

// ---- cache -----------------------------------------------------------------

inline std::string& cache_dir() {
  static std::string dir = "oracle_cache";
  return dir;
}

inline bool load_grid(const std::string& key, GridFunction& g) {
  const std::filesystem::path path = std::filesystem::path(cache_dir()) / (key + ".bin");
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  char magic[9] = {};
  in.read(magic, 8);
  if (std::string(magic) != "GPPDERF1") return false;
  in.read(reinterpret_cast<char*>(&g.lo), sizeof(g.lo));
  in.read(reinterpret_cast<char*>(&g.hi), sizeof(g.hi));
  in.read(reinterpret_cast<char*>(&g.res), sizeof(g.res));
  in.read(reinterpret_cast<char*>(&g.components), sizeof(g.components));
  size_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  g.values.resize(n);
  in.read(reinterpret_cast<char*>(g.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
  return static_cast<bool>(in);
}

inline void save_grid(const std::string& key, const GridFunction& g) {
  std::filesystem::create_directories(cache_dir());
  const std::filesystem::path path = std::filesystem::path(cache_dir()) / (key + ".bin");
  std::ofstream out(path, std::ios::binary);
  out.write("GPPDERF1", 8);
  out.write(reinterpret_cast<const char*>(&g.lo), sizeof(g.lo));
  out.write(reinterpret_cast<const char*>(&g.hi), sizeof(g.hi));
  out.write(reinterpret_cast<const char*>(&g.res), sizeof(g.res));
  out.write(reinterpret_cast<const char*>(&g.components), sizeof(g.components));
  const size_t n = g.values.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(g.values.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

// ---- Schrodinger: split-step Fourier ---------------------------------------

/// i h_t + 1/2 h_xx + g |h|^2 h = 0 on (0,1) x [-5,5), h(0,x) = 2 sech x.
/// Strang splitting: the nonlinear phase rotation is exact (|h| is conserved
/// by it), the linear half evolves in Fourier space.
inline GridFunction schrodinger_grid(const ProblemSpec& p, int modes, double dt, int tsnaps) {
  const int N = modes;
  const double L = 10.0, x0 = -5.0;
  const double T = 1.0;
  const int steps = static_cast<int>(std::llround(T / dt));
  std::vector<std::complex<double>> h(static_cast<size_t>(N));
  for (int j = 0; j < N; ++j) h[static_cast<size_t>(j)] = p.schrodinger_u0(x0 + L * j / N);

  fftw_complex* buf = fftw_alloc_complex(static_cast<size_t>(N));
  fftw_plan fwd = fftw_plan_dft_1d(N, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  fftw_plan bwd = fftw_plan_dft_1d(N, buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
  std::vector<std::complex<double>> lin_phase(static_cast<size_t>(N));
  for (int j = 0; j < N; ++j) {
    const int m = j <= N / 2 ? j : j - N;
    const double kk = 2.0 * M_PI * m / L;
    lin_phase[static_cast<size_t>(j)] = std::exp(std::complex<double>(0, -0.5 * kk * kk * dt));
  }

  GridFunction g;
  g.lo = {0.0, x0};
  g.hi = {T, x0 + L};
  g.res = {tsnaps, N + 1};
  g.components = 2;
  g.values.assign(static_cast<size_t>(2 * tsnaps * (N + 1)), 0.0);
  auto snapshot = [&](int row) {
    for (int j = 0; j <= N; ++j) {
      const auto v = h[static_cast<size_t>(j % N)];
      g.at(0, row, j) = v.real();
      g.at(1, row, j) = v.imag();
    }
  };
  snapshot(0);
  int next_snap = 1;
  const double gnl = p.constants.g_nl;
  for (int s = 1; s <= steps; ++s) {
    for (auto& v : h) v *= std::exp(std::complex<double>(0, gnl * std::norm(v) * dt / 2));
    for (int j = 0; j < N; ++j) {
      buf[j][0] = h[static_cast<size_t>(j)].real();
      buf[j][1] = h[static_cast<size_t>(j)].imag();
    }
    fftw_execute(fwd);
    for (int j = 0; j < N; ++j) {
      std::complex<double> v(buf[j][0], buf[j][1]);
      v *= lin_phase[static_cast<size_t>(j)] / static_cast<double>(N);
      buf[j][0] = v.real();
      buf[j][1] = v.imag();
    }
    fftw_execute(bwd);
    for (int j = 0; j < N; ++j) h[static_cast<size_t>(j)] = {buf[j][0], buf[j][1]};
    for (auto& v : h) v *= std::exp(std::complex<double>(0, gnl * std::norm(v) * dt / 2));
    while (next_snap < tsnaps &&
           s == static_cast<int>(std::llround(static_cast<double>(next_snap) * steps /
                                              (tsnaps - 1)))) {
      snapshot(next_snap);
      ++next_snap;
    }
  }
  fftw_destroy_plan(fwd);
  fftw_destroy_plan(bwd);
  fftw_free(buf);
  return g;
}

// ---- Gray-Scott: method of lines + Crank-Nicolson --------------------------

/// Block-tridiagonal (2x2 blocks) Thomas solve for the coupled CN/Newton step.
inline void block_thomas(std::vector<Eigen::Matrix2d>& A, std::vector<Eigen::Matrix2d>& B,
                         std::vector<Eigen::Matrix2d>& C, std::vector<Eigen::Vector2d>& d) {
  const size_t n = B.size();
  for (size_t i = 1; i < n; ++i) {
    const Eigen::Matrix2d m = A[i] * B[i - 1].inverse();
    B[i] -= m * C[i - 1];
    d[i] -= m * d[i - 1];
  }
  d[n - 1] = B[n - 1].inverse() * d[n - 1];
  for (size_t i = n - 1; i-- > 0;) d[i] = B[i].inverse() * (d[i] - C[i] * d[i + 1]);
}

inline GridFunction gray_scott_grid(const ProblemSpec& p, int nodes, double dt, int tsnaps) {
  const auto& C = p.constants;
  const int m = nodes;
  const double h = 1.0 / (m - 1);
  const int steps = static_cast<int>(std::llround(1.0 / dt));
  std::vector<double> u(static_cast<size_t>(m)), v(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    u[static_cast<size_t>(i)] = p.gs_u0(i * h);
    v[static_cast<size_t>(i)] = p.gs_v0(i * h);
  }
  GridFunction g;
  g.lo = {0.0, 0.0};
  g.hi = {1.0, 1.0};
  g.res = {tsnaps, m};
  g.components = 2;
  g.values.assign(static_cast<size_t>(2 * tsnaps * m), 0.0);
  auto snapshot = [&](int row) {
    for (int i = 0; i < m; ++i) {
      g.at(0, row, i) = u[static_cast<size_t>(i)];
      g.at(1, row, i) = v[static_cast<size_t>(i)];
    }
  };
  snapshot(0);
  // F(u,v) with homogeneous-Neumann ghost nodes (mirror)
  auto lap = [&](const std::vector<double>& w, int i) {
    const double wm = i == 0 ? w[1] : w[static_cast<size_t>(i - 1)];
    const double wp = i == m - 1 ? w[static_cast<size_t>(m - 2)] : w[static_cast<size_t>(i + 1)];
    return (wm - 2 * w[static_cast<size_t>(i)] + wp) / (h * h);
  };
  std::vector<double> fu(static_cast<size_t>(m)), fv(static_cast<size_t>(m));
  auto eval_f = [&](const std::vector<double>& uu, const std::vector<double>& vv) {
    for (int i = 0; i < m; ++i) {
      const double ui = uu[static_cast<size_t>(i)], vi = vv[static_cast<size_t>(i)];
      fu[static_cast<size_t>(i)] = C.Du * lap(uu, i) - ui * vi * vi + C.F * (1 - ui);
      fv[static_cast<size_t>(i)] = C.Dv * lap(vv, i) + ui * vi * vi - (C.F + C.k) * vi;
    }
  };
  std::vector<double> un(static_cast<size_t>(m)), vn(static_cast<size_t>(m));
  std::vector<double> fold_u(static_cast<size_t>(m)), fold_v(static_cast<size_t>(m));
  std::vector<Eigen::Matrix2d> A(static_cast<size_t>(m)), B(static_cast<size_t>(m)),
      Cc(static_cast<size_t>(m));
  std::vector<Eigen::Vector2d> rhs(static_cast<size_t>(m));
  int next_snap = 1;
  for (int s = 1; s <= steps; ++s) {
    eval_f(u, v);
    fold_u = fu;
    fold_v = fv;
    un = u;
    vn = v;
    for (int newton = 0; newton < 4; ++newton) {
      eval_f(un, vn);
      const double du = C.Du * dt / (2 * h * h), dv = C.Dv * dt / (2 * h * h);
      for (int i = 0; i < m; ++i) {
        const double ui = un[static_cast<size_t>(i)], vi = vn[static_cast<size_t>(i)];
        // residual of the CN system at the current Newton iterate
        rhs[static_cast<size_t>(i)][0] =
            -(ui - u[static_cast<size_t>(i)] -
              dt / 2 * (fu[static_cast<size_t>(i)] + fold_u[static_cast<size_t>(i)]));
        rhs[static_cast<size_t>(i)][1] =
            -(vi - v[static_cast<size_t>(i)] -
              dt / 2 * (fv[static_cast<size_t>(i)] + fold_v[static_cast<size_t>(i)]));
        Eigen::Matrix2d diag;
        diag << 1 + dt / 2 * (vi * vi + C.F) + 2 * du, dt / 2 * (2 * ui * vi),
            -dt / 2 * (vi * vi), 1 - dt / 2 * (2 * ui * vi) + dt / 2 * (C.F + C.k) + 2 * dv;
        B[static_cast<size_t>(i)] = diag;
        Eigen::Matrix2d off = Eigen::Matrix2d::Zero();
        off(0, 0) = -du;
        off(1, 1) = -dv;
        A[static_cast<size_t>(i)] = off;
        Cc[static_cast<size_t>(i)] = off;
      }
      // Neumann mirror: the ghost doubles the inner off-diagonal coupling
      Cc[0] *= 2.0;
      A[static_cast<size_t>(m - 1)] *= 2.0;
      auto Acp = A;
      auto Bcp = B;
      auto Ccp = Cc;
      auto d = rhs;
      block_thomas(Acp, Bcp, Ccp, d);
      double step_norm = 0;
      for (int i = 0; i < m; ++i) {
        un[static_cast<size_t>(i)] += d[static_cast<size_t>(i)][0];
        vn[static_cast<size_t>(i)] += d[static_cast<size_t>(i)][1];
        step_norm = std::max(step_norm, d[static_cast<size_t>(i)].cwiseAbs().maxCoeff());
      }
      if (step_norm < 1e-13) break;
    }
    u = un;
    v = vn;
    while (next_snap < tsnaps &&
           s == static_cast<int>(std::llround(static_cast<double>(next_snap) * steps /
                                              (tsnaps - 1)))) {
      snapshot(next_snap);
      ++next_snap;
    }
  }
  return g;
}

// ---- Eikonal: exponential transform + linear FD solve ----------------------

/// u = -eps log v with -eps^2 Lap v + f v = 0, v = 1 on the boundary.
inline GridFunction eikonal_grid(const ProblemSpec& p, int cells) {
  const double eps = p.constants.eps;
  const int n = cells + 1;  // nodes
  const double h = 1.0 / cells;
  const int ni = n - 2;
  using Sp = Eigen::SparseMatrix<double>;
  Sp A(ni * ni, ni * ni);
  Vector rhs = Vector::Zero(ni * ni);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(5 * ni * ni));
  const double c = eps * eps / (h * h);
  auto idx = [&](int i, int j) { return (i - 1) * ni + (j - 1); };
  for (int i = 1; i <= ni; ++i)
    for (int j = 1; j <= ni; ++j) {
      const int r = idx(i, j);
      trip.emplace_back(r, r, 4 * c + 1.0);  // f == 1
      auto nb = [&](int ii, int jj) {
        if (ii == 0 || ii == n - 1 || jj == 0 || jj == n - 1)
          rhs[r] += c * 1.0;  // v = exp(-u/eps) = 1 on the boundary
        else
          trip.emplace_back(r, idx(ii, jj), -c);
      };
      nb(i - 1, j);
      nb(i + 1, j);
      nb(i, j - 1);
      nb(i, j + 1);
    }
  A.setFromTriplets(trip.begin(), trip.end());
  // Direct sparse Cholesky: the system is an M-matrix and the substitution
  // phases add same-sign terms only, so the tiny interior values of v
  // (v ~ exp(-u/eps) spans ~20 decades) keep componentwise relative accuracy,
  // which -eps*log(v) requires. Iterative solvers only reach absolute
  // accuracy and would cap u near 0.37.
  Eigen::SimplicialLLT<Sp> llt(A);
  if (llt.info() != Eigen::Success) throw OracleNotConverged("eikonal: factorization failed");
  Vector v = llt.solve(rhs);
  GridFunction g;
  g.lo = {0.0, 0.0};
  g.hi = {1.0, 1.0};
  g.res = {n, n};
  g.components = 1;
  g.values.assign(static_cast<size_t>(n * n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double vv = 1.0;
      if (i > 0 && i < n - 1 && j > 0 && j < n - 1) vv = v[idx(i, j)];
      g.at(0, i, j) = -eps * std::log(std::max(vv, 1e-300));
    }
  return g;
}

// ---- Burgers: Cole-Hopf with Gauss-Hermite quadrature ----------------------

struct GaussHermite {
  std::vector<double> nodes, weights;
  explicit GaussHermite(int n) {
    Matrix T = Matrix::Zero(n, n);
    for (int i = 1; i < n; ++i) {
      const double b = std::sqrt(i / 2.0);
      T(i, i - 1) = b;
      T(i - 1, i) = b;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(T);
    nodes.resize(static_cast<size_t>(n));
    weights.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      nodes[static_cast<size_t>(i)] = es.eigenvalues()[i];
      const double v0 = es.eigenvectors()(0, i);
      weights[static_cast<size_t>(i)] = std::sqrt(M_PI) * v0 * v0;
    }
  }
};

/// Whole-line Cole-Hopf solution for u_t + u u_x = nu u_xx with
/// u(x,0) = -sin(pi x); odd periodic symmetry keeps u(+-1, t) = 0 exact.
inline double burgers_cole_hopf(double nu, double t, double x, const GaussHermite& gh) {
  if (t <= 0.0) return -std::sin(M_PI * x);
  const double a = 2.0 * std::sqrt(nu * t);
  const double c = 1.0 / (2.0 * M_PI * nu);
  double num = 0.0, den = 0.0;
  for (size_t q = 0; q < gh.nodes.size(); ++q) {
    const double y = x - a * gh.nodes[q];
    const double w = gh.weights[q] * std::exp(-c * std::cos(M_PI * y));
    num += w * std::sin(M_PI * y);
    den += w;
  }
  return -num / den;
}

// ---- Darcy forward: 5-point FD with harmonic-mean coefficients -------------

inline GridFunction darcy_grid(const ProblemSpec& p, int cells) {
  const int n = cells + 1;
  const double h = 1.0 / cells;
  const int ni = n - 2;
  auto kappa = [&](double x, double y) { return std::exp(p.darcy_log_coeff(Point(x, y))); };
  using Sp = Eigen::SparseMatrix<double>;
  Sp A(ni * ni, ni * ni);
  Vector rhs = Vector::Constant(ni * ni, 1.0);  // f == 1
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(5 * ni * ni));
  auto idx = [&](int i, int j) { return (i - 1) * ni + (j - 1); };
  auto hm = [](double a, double b) { return 2.0 * a * b / (a + b); };
  for (int i = 1; i <= ni; ++i)
    for (int j = 1; j <= ni; ++j) {
      const int r = idx(i, j);
      const double kc = kappa(i * h, j * h);
      const double kw = hm(kc, kappa((i - 1) * h, j * h));
      const double ke = hm(kc, kappa((i + 1) * h, j * h));
      const double ks = hm(kc, kappa(i * h, (j - 1) * h));
      const double kn = hm(kc, kappa(i * h, (j + 1) * h));
      trip.emplace_back(r, r, (kw + ke + ks + kn) / (h * h));
      auto nb = [&](int ii, int jj, double kk) {
        if (ii >= 1 && ii <= ni && jj >= 1 && jj <= ni)
          trip.emplace_back(r, idx(ii, jj), -kk / (h * h));
        // homogeneous Dirichlet: boundary values are zero
      };
      nb(i - 1, j, kw);
      nb(i + 1, j, ke);
      nb(i, j - 1, ks);
      nb(i, j + 1, kn);
    }
  A.setFromTriplets(trip.begin(), trip.end());
  Eigen::SimplicialLLT<Sp> llt(A);
  if (llt.info() != Eigen::Success) throw OracleNotConverged("darcy: factorization failed");
  Vector u = llt.solve(rhs);
  GridFunction g;
  g.lo = {0.0, 0.0};
  g.hi = {1.0, 1.0};
  g.res = {n, n};
  g.components = 1;
  g.values.assign(static_cast<size_t>(n * n), 0.0);
  for (int i = 1; i <= ni; ++i)
    for (int j = 1; j <= ni; ++j) g.at(0, i, j) = u[idx(i, j)];
  return g;
}

inline double compare_on_probes(const GridFunction& coarse, const GridFunction& fine,
                                int comp = -1) {
  double worst = 0.0, scale = 0.0;
  const int nc = comp < 0 ? fine.components : 1;
  for (int cc = 0; cc < nc; ++cc) {
    const int c = comp < 0 ? cc : comp;
    for (int i = 1; i < 20; ++i)
      for (int j = 1; j < 20; ++j) {
        Point q(fine.lo[0] + (fine.hi[0] - fine.lo[0]) * i / 20.0,
                fine.lo[1] + (fine.hi[1] - fine.lo[1]) * j / 20.0);
        const double a = coarse.interp(c, q), b = fine.interp(c, q);
        worst = std::max(worst, std::abs(a - b));
        scale = std::max(scale, std::abs(b));
      }
  }
  return worst / std::max(scale, 1e-30);
}

}  // namespace oracle

/// Reference solution for a problem, converged in the oracle's own refinement
/// study (value change <= 1e-4 relative under resolution doubling) and cached
/// on disk keyed by (problem, constants, resolution).
inline Reference reference_solution(const ProblemSpec& p, int resolution) {
  Reference ref;
  char key[160];
  switch (p.name) {
    case ProblemName::Elliptic: {
      GridFunction g;
      g.lo = {0, 0};
      g.hi = {1, 1};
      g.res = {std::max(65, resolution), std::max(65, resolution)};
      g.components = 1;
      g.values.assign(static_cast<size_t>(g.res[0] * g.res[1]), 0.0);
      for (int i = 0; i < g.res[0]; ++i)
        for (int j = 0; j < g.res[1]; ++j)
          g.at(0, i, j) = p.elliptic_true_solution(
              Point(static_cast<double>(i) / (g.res[0] - 1), static_cast<double>(j) / (g.res[1] - 1)));
      ref.grid = std::move(g);
      ref.exact[0] = [p](const Point& q) { return p.elliptic_true_solution(q); };
      return ref;
    }
    case ProblemName::Schrodinger: {
      std::snprintf(key, sizeof key, "schrodinger_g%g_m%d", p.constants.g_nl, resolution);
      if (!oracle::load_grid(key, ref.grid)) {
        // per-axis refinement study: the focusing peaks demand the spectral
        // and Strang errors be gated separately (doubling the modes at fixed
        // dt, then halving dt at the doubled mode count); the finest run is
        // returned
        const double dt = 2.5e-5;
        GridFunction a = oracle::schrodinger_grid(p, resolution, dt, 257);
        GridFunction b = oracle::schrodinger_grid(p, 2 * resolution, dt, 257);
        if (oracle::compare_on_probes(a, b) > 1e-4)
          throw OracleNotConverged("schrodinger oracle spatial refinement check failed");
        GridFunction c = oracle::schrodinger_grid(p, 2 * resolution, dt / 2, 257);
        if (oracle::compare_on_probes(b, c) > 1e-4)
          throw OracleNotConverged("schrodinger oracle temporal refinement check failed");
        ref.grid = std::move(c);
        oracle::save_grid(key, ref.grid);
      }
      return ref;
    }
    case ProblemName::GrayScott: {
      std::snprintf(key, sizeof key, "gray_scott_ic%d_m%d", p.constants.gs_ic_case, resolution);
      if (!oracle::load_grid(key, ref.grid)) {
        GridFunction fine = oracle::gray_scott_grid(p, resolution + 1, 1e-4, 257);
        GridFunction coarse = oracle::gray_scott_grid(p, resolution / 2 + 1, 2e-4, 129);
        if (oracle::compare_on_probes(coarse, fine) > 1e-4)
          throw OracleNotConverged("gray-scott oracle refinement check failed");
        ref.grid = std::move(fine);
        oracle::save_grid(key, ref.grid);
      }
      return ref;
    }
    case ProblemName::Eikonal: {
      std::snprintf(key, sizeof key, "eikonal_eps%g_m%d", p.constants.eps, resolution);
      if (!oracle::load_grid(key, ref.grid)) {
        // The scheme is second order with an eps-boundary layer; a Richardson
        // pair removes the leading h^2 term (verified by the two-level study).
        auto extrapolated = [&](int cells) {
          GridFunction fine = oracle::eikonal_grid(p, cells);
          GridFunction coarse = oracle::eikonal_grid(p, cells / 2);
          GridFunction out = coarse;
          for (int i = 0; i < out.res[0]; ++i)
            for (int j = 0; j < out.res[1]; ++j)
              out.at(0, i, j) = (4.0 * fine.at(0, 2 * i, 2 * j) - coarse.at(0, i, j)) / 3.0;
          return out;
        };
        GridFunction ext_fine = extrapolated(resolution);
        GridFunction ext_coarse = extrapolated(resolution / 2);
        // The interior ridge (the smoothed distance-function kink) shifts
        // against the grid as h changes, so the study converges at ~2e-3 per
        // doubling rather than the clean h^2 rate of the boundary layer.
        if (oracle::compare_on_probes(ext_coarse, ext_fine) > 3e-3)
          throw OracleNotConverged("eikonal oracle refinement check failed");
        ref.grid = std::move(ext_fine);
        oracle::save_grid(key, ref.grid);
      }
      return ref;
    }
    case ProblemName::Burgers: {
      // pointwise-exact Cole-Hopf; the "resolution" is the quadrature order
      auto gh = std::make_shared<oracle::GaussHermite>(resolution);
      auto gh2 = std::make_shared<oracle::GaussHermite>(resolution / 2);
      const double nu = p.constants.nu;
      double worst = 0.0;
      for (int i = 1; i < 12; ++i)
        for (int j = 1; j < 12; ++j) {
          const double t = i / 12.0, x = -1.0 + 2.0 * j / 12.0;
          worst = std::max(worst, std::abs(oracle::burgers_cole_hopf(nu, t, x, *gh) -
                                           oracle::burgers_cole_hopf(nu, t, x, *gh2)));
        }
      if (worst > 1e-6) throw OracleNotConverged("burgers quadrature refinement check failed");
      GridFunction g;
      g.lo = {0, -1};
      g.hi = {1, 1};
      g.res = {129, 257};
      g.components = 1;
      g.values.assign(static_cast<size_t>(g.res[0] * g.res[1]), 0.0);
      for (int i = 0; i < g.res[0]; ++i)
        for (int j = 0; j < g.res[1]; ++j)
          g.at(0, i, j) = oracle::burgers_cole_hopf(nu, static_cast<double>(i) / (g.res[0] - 1),
                                                    -1.0 + 2.0 * static_cast<double>(j) / (g.res[1] - 1),
                                                    *gh);
      ref.grid = std::move(g);
      ref.exact[0] = [nu, gh](const Point& q) {
        return oracle::burgers_cole_hopf(nu, q[0], q[1], *gh);
      };
      return ref;
    }
    case ProblemName::DarcyInverse: {
      std::snprintf(key, sizeof key, "darcy_m%d", resolution);
      if (!oracle::load_grid(key, ref.grid)) {
        GridFunction fine = oracle::darcy_grid(p, resolution);
        GridFunction coarse = oracle::darcy_grid(p, resolution / 2);
        if (oracle::compare_on_probes(coarse, fine) > 1e-4)
          throw OracleNotConverged("darcy oracle refinement check failed");
        ref.grid = std::move(fine);
        oracle::save_grid(key, ref.grid);
      }
      // component 1 (the log-coefficient) is known in closed form
      ref.exact[1] = [p](const Point& q) { return p.darcy_log_coeff(q); };
      return ref;
    }
  }
  throw std::invalid_argument("reference_solution: unknown problem");
}

struct ErrorMetrics {
  double l2 = 0.0, linf = 0.0;
  double rel_l2 = 0.0, rel_linf = 0.0;
};

/// Discrete L2 (root mean square) and Linf of (state - reference) for one
/// component, on an n x n uniform interior grid (cell centers).
inline ErrorMetrics error_metrics_component(const GnState& s, const ProblemSpec& p,
                                            const std::function<double(const Point&)>& ref_eval,
                                            int component, int n = 100) {
  std::vector<Point> pts;
  pts.reserve(static_cast<size_t>(n) * static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      pts.emplace_back(p.domain.lo[0] + (p.domain.hi[0] - p.domain.lo[0]) * (i + 0.5) / n,
                       p.domain.lo[1] + (p.domain.hi[1] - p.domain.lo[1]) * (j + 0.5) / n);
  const auto vals = values_batch(s, component, pts);
  double sum = 0.0, ref_sum = 0.0;
  ErrorMetrics m;
  double ref_max = 0.0;
  for (size_t i = 0; i < pts.size(); ++i) {
    const double r = ref_eval(pts[i]);
    const double e = vals[i] - r;
    sum += e * e;
    ref_sum += r * r;
    m.linf = std::max(m.linf, std::abs(e));
    ref_max = std::max(ref_max, std::abs(r));
  }
  m.l2 = std::sqrt(sum / static_cast<double>(pts.size()));
  m.rel_l2 = m.l2 / std::max(std::sqrt(ref_sum / static_cast<double>(pts.size())), 1e-300);
  m.rel_linf = m.linf / std::max(ref_max, 1e-300);
  return m;
}

/// Metrics against a grid/exact reference for every component; for two-
/// component complex fields the caller may combine per-component values.
inline std::vector<ErrorMetrics> error_metrics(const GnState& s, const ProblemSpec& p,
                                               const Reference& ref, int n = 100) {
  std::vector<ErrorMetrics> out;
  for (int c = 0; c < p.component_count; ++c) {
    auto eval = [&ref, c](const Point& q) { return ref.eval(c, q); };
    out.push_back(error_metrics_component(s, p, eval, c, n));
  }
  return out;
}

/// Noisy pointwise observations of the Darcy state: values are the reference
/// solution interpolated at the points plus N(0, gamma^2) i.i.d. draws.
inline std::vector<std::pair<Point, double>> generate_observations(
    const Reference& forward_ref, const std::vector<Point>& points, double gamma, Rng& rng) {
  std::vector<std::pair<Point, double>> out;
  out.reserve(points.size());
  for (const auto& q : points)
    out.emplace_back(q, forward_ref.grid.interp(0, q) + gamma * rng.normal());
  return out;
}

inline std::vector<std::pair<Point, double>> generate_observations(const ProblemSpec& p,
                                                                   const Reference& forward_ref,
                                                                   int L, double gamma, Rng& rng) {
  const auto pts = sample_uniform(p.domain, static_cast<size_t>(L), rng);
  return generate_observations(forward_ref, pts, gamma, rng);
}

}  // namespace gppde
