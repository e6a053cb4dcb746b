#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gppde/core.hpp"
#include "gppde/functionals.hpp"
#include "gppde/rng.hpp"

namespace gppde {

enum class ProblemName { Elliptic, Schrodinger, GrayScott, Eikonal, Burgers, DarcyInverse };

inline std::string problem_name_str(ProblemName n) {
  switch (n) {
    case ProblemName::Elliptic: return "elliptic";
    case ProblemName::Schrodinger: return "schrodinger";
    case ProblemName::GrayScott: return "gray_scott";
    case ProblemName::Eikonal: return "eikonal";
    case ProblemName::Burgers: return "burgers";
    case ProblemName::DarcyInverse: return "darcy_inverse";
  }
  return "?";
}

struct ProblemConstants {
  double alpha = 1.0;  // elliptic nonlinearity weight
  int m = 3;           // elliptic power
  double g_nl = 1.0;   // schrodinger focusing coefficient
  double Du = 0.001, Dv = 0.002, F = 0.04, k = 0.06;  // gray-scott
  int gs_ic_case = 0;  // 0: primary initial condition; 1..3: reuse cases A..C
  double eps = 0.01;   // eikonal regularization
  double nu = 0.02;    // burgers viscosity
  double gamma = 1e-3; // darcy observation noise std
};

/// Time is coordinate 0 in space-time problems (documented and fixed).
struct ProblemSpec {
  ProblemName name = ProblemName::Elliptic;
  ProblemConstants constants;
  int dim = 2;
  int component_count = 1;
  int equation_count = 1;
  Region domain;
  std::vector<std::vector<MultiIndex>> features;  // per component

  static ProblemSpec make(ProblemName n, ProblemConstants c = {}) {
    ProblemSpec p;
    p.name = n;
    p.constants = c;
    auto mi = [](int a, int b) { return MultiIndex(2, {a, b}); };
    switch (n) {
      case ProblemName::Elliptic:
        p.component_count = 1;
        p.equation_count = 1;
        p.domain = Region::box2(0, 1, 0, 1);
        p.features = {{mi(0, 0), mi(2, 0), mi(0, 2)}};
        break;
      case ProblemName::Schrodinger:
        p.component_count = 2;
        p.equation_count = 2;
        p.domain = Region::box2(0, 1, -5, 5);
        p.features = {{mi(0, 0), mi(1, 0), mi(0, 2)}, {mi(0, 0), mi(1, 0), mi(0, 2)}};
        break;
      case ProblemName::GrayScott:
        p.component_count = 2;
        p.equation_count = 2;
        p.domain = Region::box2(0, 1, 0, 1);
        p.features = {{mi(0, 0), mi(1, 0), mi(0, 2)}, {mi(0, 0), mi(1, 0), mi(0, 2)}};
        break;
      case ProblemName::Eikonal:
        p.component_count = 1;
        p.equation_count = 1;
        p.domain = Region::box2(0, 1, 0, 1);
        p.features = {{mi(1, 0), mi(0, 1), mi(2, 0), mi(0, 2)}};
        break;
      case ProblemName::Burgers:
        p.component_count = 1;
        p.equation_count = 1;
        p.domain = Region::box2(0, 1, -1, 1);
        p.features = {{mi(0, 0), mi(1, 0), mi(0, 1), mi(0, 2)}};
        break;
      case ProblemName::DarcyInverse:
        p.component_count = 2;  // u = 0, a = 1
        p.equation_count = 1;
        p.domain = Region::box2(0, 1, 0, 1);
        p.features = {{mi(1, 0), mi(0, 1), mi(2, 0), mi(0, 2)},
                      {mi(0, 0), mi(1, 0), mi(0, 1)}};
        break;
    }
    return p;
  }

  /// Interior source term of equation `eq` at x.
  double source(const Point& x, int eq) const {
    switch (name) {
      case ProblemName::Elliptic: return elliptic_f(x);
      case ProblemName::Eikonal: return 1.0;
      case ProblemName::DarcyInverse: return 1.0;
      default: return 0.0;
    }
    (void)eq;
  }

  double elliptic_true_solution(const Point& p) const {
    const double pi = M_PI;
    return std::sin(pi * p[0]) * std::sin(pi * p[1]) +
           4.0 * std::sin(4 * pi * p[0]) * std::sin(4 * pi * p[1]);
  }
  /// f = -Lap u* + alpha (u*)^m for the prescribed u* = sin(pi x) sin(pi y)
  /// + 4 sin(4 pi x) sin(4 pi y): -Lap of the first term is 2 pi^2 times it,
  /// of the second 32 pi^2 times it.
  double elliptic_f(const Point& p) const {
    const double pi = M_PI;
    const double s1 = std::sin(pi * p[0]) * std::sin(pi * p[1]);
    const double s4 = std::sin(4 * pi * p[0]) * std::sin(4 * pi * p[1]);
    const double u = s1 + 4.0 * s4;
    return 2 * pi * pi * s1 + 128 * pi * pi * s4 +
           constants.alpha * std::pow(u, constants.m);
  }

  double gs_u0(double x) const {
    const double pi = M_PI;
    switch (constants.gs_ic_case) {
      case 0: return -std::sin(3 * pi * x + pi / 2);
      case 1: return std::sin(7 * pi * x + pi / 2);
      case 2: return -std::cos(4 * pi * x);
      default: return std::cos(8 * pi * x);
    }
  }
  double gs_v0(double x) const {
    const double pi = M_PI;
    switch (constants.gs_ic_case) {
      case 0: return std::cos(2 * pi * x);
      case 1: return -std::cos(2 * pi * x);
      case 2: return std::sin(5 * pi * x + pi / 2);
      default: return std::cos(5 * pi * x);
    }
  }

  double schrodinger_u0(double x) const { return 2.0 / std::cosh(x); }
  double schrodinger_v0(double) const { return 0.0; }
  double burgers_u0(double x) const { return -std::sin(M_PI * x); }

  double darcy_log_coeff(const Point& p) const {
    const double s = std::sin(2 * M_PI * p[0]) + std::sin(2 * M_PI * p[1]);
    return std::log(std::exp(s) + std::exp(-s));
  }
};

/// Per-component feature values at one point, aligned with spec.features.
struct StateFeatures {
  std::vector<std::vector<double>> values;

  static StateFeatures zeros(const ProblemSpec& p) {
    StateFeatures f;
    f.values.resize(p.features.size());
    for (size_t c = 0; c < p.features.size(); ++c)
      f.values[c].assign(p.features[c].size(), 0.0);
    return f;
  }
  double get(const ProblemSpec& p, int c, const MultiIndex& mi) const {
    const auto& fl = p.features[static_cast<size_t>(c)];
    for (size_t k = 0; k < fl.size(); ++k)
      if (fl[k] == mi) return values[static_cast<size_t>(c)][k];
    throw std::invalid_argument("StateFeatures: feature not declared for this problem");
  }
};

/// One linearized collocation/validation equation: (functional row) u = rhs.
struct LinearizedEquation {
  CompositeRow row;
  double rhs = 0.0;
};

namespace detail {
inline MultiIndex mi2(int a, int b) { return MultiIndex(2, {a, b}); }
}

/// Exact nonlinear residuals P(u)(x) - f(x), one per equation.
inline std::vector<double> residual(const ProblemSpec& p, const StateFeatures& s, const Point& x) {
  using detail::mi2;
  const auto& C = p.constants;
  switch (p.name) {
    case ProblemName::Elliptic: {
      const double u = s.get(p, 0, mi2(0, 0));
      const double lap = s.get(p, 0, mi2(2, 0)) + s.get(p, 0, mi2(0, 2));
      return {-lap + C.alpha * std::pow(u, C.m) - p.source(x, 0)};
    }
    case ProblemName::Schrodinger: {
      const double u = s.get(p, 0, mi2(0, 0)), ut = s.get(p, 0, mi2(1, 0)),
                   uxx = s.get(p, 0, mi2(0, 2));
      const double v = s.get(p, 1, mi2(0, 0)), vt = s.get(p, 1, mi2(1, 0)),
                   vxx = s.get(p, 1, mi2(0, 2));
      const double m2 = u * u + v * v;
      return {-vt + 0.5 * uxx + C.g_nl * m2 * u, ut + 0.5 * vxx + C.g_nl * m2 * v};
    }
    case ProblemName::GrayScott: {
      const double u = s.get(p, 0, mi2(0, 0)), ut = s.get(p, 0, mi2(1, 0)),
                   uxx = s.get(p, 0, mi2(0, 2));
      const double v = s.get(p, 1, mi2(0, 0)), vt = s.get(p, 1, mi2(1, 0)),
                   vxx = s.get(p, 1, mi2(0, 2));
      return {ut - C.Du * uxx + u * v * v - C.F * (1.0 - u),
              vt - C.Dv * vxx - u * v * v + (C.F + C.k) * v};
    }
    case ProblemName::Eikonal: {
      const double ux = s.get(p, 0, mi2(1, 0)), uy = s.get(p, 0, mi2(0, 1));
      const double lap = s.get(p, 0, mi2(2, 0)) + s.get(p, 0, mi2(0, 2));
      return {ux * ux + uy * uy - C.eps * lap - p.source(x, 0)};
    }
    case ProblemName::Burgers: {
      const double u = s.get(p, 0, mi2(0, 0)), ut = s.get(p, 0, mi2(1, 0)),
                   ux = s.get(p, 0, mi2(0, 1)), uxx = s.get(p, 0, mi2(0, 2));
      return {ut + u * ux - C.nu * uxx};
    }
    case ProblemName::DarcyInverse: {
      const double ux = s.get(p, 0, mi2(1, 0)), uy = s.get(p, 0, mi2(0, 1));
      const double lap = s.get(p, 0, mi2(2, 0)) + s.get(p, 0, mi2(0, 2));
      const double a = s.get(p, 1, mi2(0, 0)), ax = s.get(p, 1, mi2(1, 0)),
                   ay = s.get(p, 1, mi2(0, 1));
      return {-std::exp(a) * (ax * ux + ay * uy + lap) - p.source(x, 0)};
    }
  }
  return {};
}

/// Row value on the current state's features (used by the rhs convention).
inline double apply_row_to_features(const ProblemSpec& p, const CompositeRow& row,
                                    const StateFeatures& s) {
  double acc = 0.0;
  for (const auto& part : row.parts)
    for (const auto& t : part.terms) acc += t.coeff * s.get(p, part.component, t.alpha);
  return acc;
}

/// Gauss-Newton linearization of equation `eq` at the state features s:
/// P(u^k) + DP(u^k)(u - u^k) = f rearranged to (row) u = rhs with
/// rhs = row(u^k) - (P(u^k) - f).
inline LinearizedEquation linearize(const ProblemSpec& p, const StateFeatures& s, const Point& x,
                                    int eq) {
  using detail::mi2;
  const auto& C = p.constants;
  CompositeRow row;
  auto part = [&](int comp, std::vector<DiffTerm> terms) {
    DiffFunctional f;
    f.component = comp;
    f.point = x;
    f.terms = std::move(terms);
    row.parts.push_back(std::move(f));
  };
  switch (p.name) {
    case ProblemName::Elliptic: {
      const double u = s.get(p, 0, mi2(0, 0));
      part(0, {{mi2(2, 0), -1.0},
               {mi2(0, 2), -1.0},
               {mi2(0, 0), C.alpha * C.m * std::pow(u, C.m - 1)}});
      break;
    }
    case ProblemName::Schrodinger: {
      const double u = s.get(p, 0, mi2(0, 0));
      const double v = s.get(p, 1, mi2(0, 0));
      if (eq == 0) {
        part(0, {{mi2(0, 2), 0.5}, {mi2(0, 0), C.g_nl * (3 * u * u + v * v)}});
        part(1, {{mi2(1, 0), -1.0}, {mi2(0, 0), C.g_nl * 2 * u * v}});
      } else {
        part(0, {{mi2(1, 0), 1.0}, {mi2(0, 0), C.g_nl * 2 * u * v}});
        part(1, {{mi2(0, 2), 0.5}, {mi2(0, 0), C.g_nl * (u * u + 3 * v * v)}});
      }
      break;
    }
    case ProblemName::GrayScott: {
      const double u = s.get(p, 0, mi2(0, 0));
      const double v = s.get(p, 1, mi2(0, 0));
      if (eq == 0) {
        part(0, {{mi2(1, 0), 1.0}, {mi2(0, 2), -C.Du}, {mi2(0, 0), v * v + C.F}});
        part(1, {{mi2(0, 0), 2 * u * v}});
      } else {
        part(0, {{mi2(0, 0), -v * v}});
        part(1, {{mi2(1, 0), 1.0}, {mi2(0, 2), -C.Dv}, {mi2(0, 0), -2 * u * v + C.F + C.k}});
      }
      break;
    }
    case ProblemName::Eikonal: {
      const double ux = s.get(p, 0, mi2(1, 0)), uy = s.get(p, 0, mi2(0, 1));
      part(0, {{mi2(1, 0), 2 * ux}, {mi2(0, 1), 2 * uy}, {mi2(2, 0), -C.eps}, {mi2(0, 2), -C.eps}});
      break;
    }
    case ProblemName::Burgers: {
      const double u = s.get(p, 0, mi2(0, 0)), ux = s.get(p, 0, mi2(0, 1));
      part(0, {{mi2(1, 0), 1.0}, {mi2(0, 1), u}, {mi2(0, 0), ux}, {mi2(0, 2), -C.nu}});
      break;
    }
    case ProblemName::DarcyInverse: {
      const double ux = s.get(p, 0, mi2(1, 0)), uy = s.get(p, 0, mi2(0, 1));
      const double lap = s.get(p, 0, mi2(2, 0)) + s.get(p, 0, mi2(0, 2));
      const double a = s.get(p, 1, mi2(0, 0)), ax = s.get(p, 1, mi2(1, 0)),
                   ay = s.get(p, 1, mi2(0, 1));
      const double ea = std::exp(a);
      part(0, {{mi2(1, 0), -ea * ax}, {mi2(0, 1), -ea * ay}, {mi2(2, 0), -ea}, {mi2(0, 2), -ea}});
      part(1, {{mi2(0, 0), -ea * (ax * ux + ay * uy + lap)},
               {mi2(1, 0), -ea * ux},
               {mi2(0, 1), -ea * uy}});
      break;
    }
  }
  LinearizedEquation lin;
  lin.rhs = apply_row_to_features(p, row, s) - residual(p, s, x)[static_cast<size_t>(eq)];
  lin.row = std::move(row);
  return lin;
}

/// Boundary/initial rows at one point. These operators are linear, so the same
/// rows serve as both the constraints and their own linearization.
/// `initial_face` is true for t = 0 points of space-time problems.
inline std::vector<LinearizedEquation> boundary_rows(const ProblemSpec& p, const Point& x,
                                                     bool initial_face) {
  using detail::mi2;
  std::vector<LinearizedEquation> out;
  auto dirichlet = [&](int comp, double value) {
    LinearizedEquation le;
    DiffFunctional f;
    f.component = comp;
    f.point = x;
    f.terms = {{mi2(0, 0), 1.0}};
    le.row.parts.push_back(std::move(f));
    le.rhs = value;
    out.push_back(std::move(le));
  };
  auto neumann_x = [&](int comp) {
    LinearizedEquation le;
    DiffFunctional f;
    f.component = comp;
    f.point = x;
    f.terms = {{mi2(0, 1), 1.0}};
    le.row.parts.push_back(std::move(f));
    le.rhs = 0.0;
    out.push_back(std::move(le));
  };
  switch (p.name) {
    case ProblemName::Elliptic:
    case ProblemName::Eikonal:
      dirichlet(0, 0.0);
      break;
    case ProblemName::DarcyInverse:
      dirichlet(0, 0.0);  // only the state u carries boundary data
      break;
    case ProblemName::Schrodinger:
      dirichlet(0, p.schrodinger_u0(x[1]));
      dirichlet(1, p.schrodinger_v0(x[1]));
      break;
    case ProblemName::GrayScott:
      if (initial_face) {
        dirichlet(0, p.gs_u0(x[1]));
        dirichlet(1, p.gs_v0(x[1]));
      } else {
        neumann_x(0);
        neumann_x(1);
      }
      break;
    case ProblemName::Burgers:
      if (initial_face)
        dirichlet(0, p.burgers_u0(x[1]));
      else
        dirichlet(0, 0.0);
      break;
  }
  return out;
}

/// Sampled point sets for one run. `boundary` holds spatial-boundary points,
/// `initial` the t = 0 points of space-time problems.
struct PointSets {
  std::vector<Point> interior, boundary, initial;
  std::vector<Point> validation_interior, validation_boundary, validation_initial;
  std::vector<Point> observations;
};

struct PointCounts {
  int interior = 0, boundary = 0;
  int validation_interior = 0, validation_boundary = 0;
  int observations = 0;
};

inline Region boundary_region(const ProblemSpec& p) {
  using Face = Region::Face;
  const auto& d = p.domain;
  std::vector<Face> faces;
  auto face = [&](int axis, double value) {
    Face f;
    f.fixed_axis = axis;
    f.fixed_value = value;
    f.lo = d.lo;
    f.hi = d.hi;
    return f;
  };
  switch (p.name) {
    case ProblemName::Elliptic:
    case ProblemName::Eikonal:
    case ProblemName::DarcyInverse:
      faces = {face(0, d.lo[0]), face(0, d.hi[0]), face(1, d.lo[1]), face(1, d.hi[1])};
      break;
    case ProblemName::Schrodinger:
      faces = {face(0, 0.0)};  // periodic in space: only the initial slice
      break;
    case ProblemName::GrayScott:
    case ProblemName::Burgers:
      faces = {face(1, d.lo[1]), face(1, d.hi[1]), face(0, 0.0)};
      break;
  }
  return Region::face_union(p.dim, std::move(faces));
}

/// Uniform i.i.d. collocation/validation draws; boundary unions are sampled
/// proportionally to face measure and split into spatial vs t = 0 lists.
inline PointSets collocation_layout(const ProblemSpec& p, const PointCounts& counts, Rng& rng) {
  if (counts.interior < 0 || counts.boundary < 0 || counts.validation_interior < 0 ||
      counts.validation_boundary < 0 || counts.observations < 0)
    throw InvalidCounts("collocation_layout: negative count");
  if (counts.interior == 0) throw InvalidCounts("collocation_layout: interior count required");
  PointSets out;
  out.interior = sample_uniform(p.domain, static_cast<size_t>(counts.interior), rng);
  const Region bnd = boundary_region(p);
  auto split = [&](int n, std::vector<Point>& spatial, std::vector<Point>& initial) {
    auto pts = sample_uniform(bnd, static_cast<size_t>(n), rng);
    const bool spacetime = p.name == ProblemName::Schrodinger ||
                           p.name == ProblemName::GrayScott || p.name == ProblemName::Burgers;
    for (const auto& q : pts) {
      if (spacetime && std::abs(q[0]) < 1e-14)
        initial.push_back(q);
      else
        spatial.push_back(q);
    }
  };
  split(counts.boundary, out.boundary, out.initial);
  out.validation_interior =
      sample_uniform(p.domain, static_cast<size_t>(counts.validation_interior), rng);
  split(counts.validation_boundary, out.validation_boundary, out.validation_initial);
  if (counts.observations > 0)
    out.observations = sample_uniform(p.domain, static_cast<size_t>(counts.observations), rng);
  return out;
}

}  // namespace gppde
