#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "gppde/assemblers.hpp"
#include "gppde/functionals.hpp"
#include "gppde/linalg.hpp"
#include "gppde/problems.hpp"

namespace gppde {

struct InnerRowMeta {
  enum class Kind { Interior, Boundary, Initial, Observation } kind = Kind::Interior;
  int point_index = 0;
  int equation = 0;
};

/// The linearized inner problem: functional set Phi (interior linearized
/// equations plus boundary/initial operators) and right-hand side b with the
/// Phi u^k terms folded in (b = Phi u^k + r^k; r^k is recoverable as
/// b - row(u^k) from the previous state's features).
struct LinearizedInner {
  FunctionalSet Phi;
  Vector b;
  std::vector<InnerRowMeta> meta;
};

/// A solved linearized inner problem, evaluable at any functional.
/// Forward problems: u_c(x) = sum_m z_m (row_m's c-part applied to kappa_c).
/// Inverse problems (Darcy): u expands over fu (constraint u-parts plus
/// observation evaluations) with weights w, a over fa with weights wa.
struct GnState {
  std::vector<KernelSpec> kernels;
  ParamVector theta;
  double nugget = 0.0;

  std::shared_ptr<const FunctionalSet> phi;  // forward expansion set
  Vector z;

  bool inverse = false;
  std::shared_ptr<const FunctionalSet> fu, fa;
  std::vector<int> a_row_of;  // constraint row -> index into fa (-1 if no a-part)
  Vector w, wa, lambda, slack;

  bool is_zero() const { return !phi && !fu; }
};

/// Evaluates a single-component functional against the state.
inline double evaluate(const GnState& s, const DiffFunctional& L) {
  if (s.is_zero()) return 0.0;
  if (!s.inverse) {
    if (L.component >= static_cast<int>(s.kernels.size()))
      throw DimensionMismatch("evaluate: component out of range");
    return cross_row(s.kernels, s.theta, L, *s.phi).dot(s.z);
  }
  if (L.component == 0) return cross_row(s.kernels, s.theta, L, *s.fu).dot(s.w);
  return cross_row(s.kernels, s.theta, L, *s.fa).dot(s.wa);
}

namespace detail {

/// Batched feature extraction: one kernel jet per (evaluation point,
/// expansion atom) yields every required derivative at once. Gibbs point jets
/// are cached per unique point for the state's (fixed) theta.
class StateJetCache {
 public:
  StateJetCache(const KernelSpec& spec, const ParamVector& theta, int comp)
      : spec_(spec), theta_(theta), comp_(comp) {}

  const std::vector<G2>& point_jets(const Point& p) {
    const int64_t key = quantize(p);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    ThetaViewD th{theta_.block(comp_)};
    auto jets = gibbs_point_jets<double, kJetD>(spec_, th, p);
    return cache_.emplace(key, std::move(jets)).first->second;
  }

  J2 pair_jet(const Point& x, const Point& y) {
    if (spec_.variant == KernelSpec::Variant::GibbsMlp) {
      const auto lx = point_jets(x);
      const auto ly = point_jets(y);
      return gibbs_combine<double, kJetD>(lx, ly, x, y);
    }
    ThetaViewD th{theta_.block(comp_)};
    return kernel_jet<double, kJetD>(spec_, th, x, y);
  }

 private:
  static int64_t quantize(const Point& p) {
    int64_t h = 1469598103934665603LL;
    for (int i = 0; i < p.dim; ++i) {
      const auto v = static_cast<int64_t>(std::llround(p[i] * 1e10));
      h = (h ^ v) * 1099511628211LL;
    }
    return h;
  }
  const KernelSpec& spec_;
  const ParamVector& theta_;
  int comp_;
  std::unordered_map<int64_t, std::vector<G2>> cache_;
};

inline void accumulate_extractions(const GnState& s, const FunctionalSet& expansion,
                                   const Vector& coeffs, int only_component,
                                   const std::vector<Point>& pts,
                                   const std::vector<std::vector<MultiIndex>>& wanted,
                                   std::vector<std::vector<std::vector<double>>>& out) {
  std::vector<std::unique_ptr<StateJetCache>> caches;
  for (size_t c = 0; c < s.kernels.size(); ++c)
    caches.push_back(std::make_unique<StateJetCache>(s.kernels[c], s.theta, static_cast<int>(c)));
  // warm Gibbs point caches serially so the parallel loop below only reads
  for (size_t c = 0; c < s.kernels.size(); ++c)
    if (s.kernels[c].variant == KernelSpec::Variant::GibbsMlp) {
      for (const auto& q : expansion.points) caches[c]->point_jets(q);
      for (const auto& q : pts) caches[c]->point_jets(q);
    }
  parallel_for(pts.size(), [&](size_t lo, size_t hi, int) {
    for (size_t ip = lo; ip < hi; ++ip) {
      const Point& x = pts[ip];
      for (size_t m = 0; m < expansion.size(); ++m) {
        for (const auto& part : expansion.rows[m].parts) {
          const int c = part.component;
          if (only_component >= 0 && c != only_component) continue;
          const J2 jet = caches[static_cast<size_t>(c)]->pair_jet(x, part.point);
          const auto& flist = wanted[static_cast<size_t>(c)];
          for (size_t k = 0; k < flist.size(); ++k) {
            double acc = 0.0;
            for (const auto& t : part.terms) acc += t.coeff * jet.deriv(flist[k], t.alpha);
            out[ip][static_cast<size_t>(c)][k] += coeffs[static_cast<Eigen::Index>(m)] * acc;
          }
        }
      }
    }
  });
}

}  // namespace detail

/// Feature values of the state at many points (value/partials per component,
/// exactly the problem's declared feature set).
inline std::vector<StateFeatures> features_batch(const ProblemSpec& p, const GnState& s,
                                                 const std::vector<Point>& pts) {
  std::vector<StateFeatures> out(pts.size(), StateFeatures::zeros(p));
  if (s.is_zero()) return out;
  std::vector<std::vector<std::vector<double>>> buf(
      pts.size(), std::vector<std::vector<double>>(p.features.size()));
  for (size_t ip = 0; ip < pts.size(); ++ip)
    for (size_t c = 0; c < p.features.size(); ++c)
      buf[ip][c].assign(p.features[c].size(), 0.0);
  if (!s.inverse) {
    detail::accumulate_extractions(s, *s.phi, s.z, -1, pts, p.features, buf);
  } else {
    detail::accumulate_extractions(s, *s.fu, s.w, 0, pts, p.features, buf);
    detail::accumulate_extractions(s, *s.fa, s.wa, 1, pts, p.features, buf);
  }
  for (size_t ip = 0; ip < pts.size(); ++ip) out[ip].values = buf[ip];
  return out;
}

/// Component values of the state at many points (one batched pass).
inline std::vector<double> values_batch(const GnState& s, int component,
                                        const std::vector<Point>& pts) {
  std::vector<double> vals(pts.size(), 0.0);
  if (s.is_zero()) return vals;
  const int ncomp = static_cast<int>(s.kernels.size());
  std::vector<std::vector<MultiIndex>> wanted(static_cast<size_t>(ncomp));
  wanted[static_cast<size_t>(component)] = {MultiIndex::zero(2)};
  std::vector<std::vector<std::vector<double>>> buf(
      pts.size(), std::vector<std::vector<double>>(static_cast<size_t>(ncomp)));
  for (size_t ip = 0; ip < pts.size(); ++ip)
    for (int c = 0; c < ncomp; ++c)
      buf[ip][static_cast<size_t>(c)].assign(wanted[static_cast<size_t>(c)].size(), 0.0);
  if (!s.inverse) {
    detail::accumulate_extractions(s, *s.phi, s.z, component, pts, wanted, buf);
  } else {
    if (component == 0)
      detail::accumulate_extractions(s, *s.fu, s.w, 0, pts, wanted, buf);
    else
      detail::accumulate_extractions(s, *s.fa, s.wa, 1, pts, wanted, buf);
  }
  for (size_t ip = 0; ip < pts.size(); ++ip) vals[ip] = buf[ip][static_cast<size_t>(component)][0];
  return vals;
}

inline StateFeatures features_at(const ProblemSpec& p, const GnState& s, const Point& x) {
  return features_batch(p, s, {x})[0];
}

/// Assembles the linearized inner problem at the previous state (ZeroState
/// when prev is null): one linearized equation per interior point per
/// equation, then boundary rows, then initial rows.
inline LinearizedInner assemble(const ProblemSpec& p, const GnState* prev, const PointSets& pts,
                                const std::vector<KernelSpec>& kernels, const ParamVector& theta) {
  (void)kernels;
  (void)theta;
  LinearizedInner li;
  li.Phi.component_count = p.component_count;
  std::vector<StateFeatures> feats;
  if (prev && !prev->is_zero())
    feats = features_batch(p, *prev, pts.interior);
  else
    feats.assign(pts.interior.size(), StateFeatures::zeros(p));
  std::vector<double> b;
  for (size_t i = 0; i < pts.interior.size(); ++i)
    for (int eq = 0; eq < p.equation_count; ++eq) {
      LinearizedEquation le = linearize(p, feats[i], pts.interior[i], eq);
      li.Phi.add_row(std::move(le.row));
      b.push_back(le.rhs);
      li.meta.push_back({InnerRowMeta::Kind::Interior, static_cast<int>(i), eq});
    }
  auto add_bnd = [&](const std::vector<Point>& list, bool initial) {
    for (size_t i = 0; i < list.size(); ++i)
      for (auto& le : boundary_rows(p, list[i], initial)) {
        li.Phi.add_row(std::move(le.row));
        b.push_back(le.rhs);
        li.meta.push_back({initial ? InnerRowMeta::Kind::Initial : InnerRowMeta::Kind::Boundary,
                           static_cast<int>(i), 0});
      }
  };
  add_bnd(pts.boundary, false);
  add_bnd(pts.initial, true);
  li.b = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
  return li;
}

/// z = (K_Phi + eta I)^{-1} b. NotPositiveDefinite surfaces to the outer loop
/// as RejectedTheta.
inline GnState solve(const LinearizedInner& li, const std::vector<KernelSpec>& kernels,
                     const ParamVector& theta, double nugget) {
  Assembler as = Assembler::make_gram(kernels, li.Phi);
  as.set_theta(theta);
  SymMatrix K = as.assemble_sym();
  CholFactor F;
  try {
    F = cholesky_nugget(K, nugget);
  } catch (const NotPositiveDefinite& e) {
    throw RejectedTheta(e.what());
  }
  GnState s;
  s.kernels = kernels;
  s.theta = theta;
  s.nugget = nugget;
  s.phi = std::make_shared<FunctionalSet>(li.Phi);
  s.z = F.solve(li.b);
  return s;
}

/// Split of the Darcy-style inner problem into the u-side expansion set
/// (constraint u-parts + observation evaluations), the a-side set, and the
/// embedding of a-rows into constraint rows.
struct InverseSets {
  FunctionalSet fu, fa;
  std::vector<int> a_row_of;
};

inline InverseSets split_inverse_sets(const LinearizedInner& li,
                                      const std::vector<Point>& obs_points) {
  InverseSets out;
  out.fu.component_count = 1;
  out.fa.component_count = 2;
  for (const auto& row : li.Phi.rows) {
    const DiffFunctional* up = nullptr;
    const DiffFunctional* ap = nullptr;
    for (const auto& part : row.parts) {
      if (part.component == 0) up = &part;
      if (part.component == 1) ap = &part;
    }
    if (!up) throw std::invalid_argument("inverse solve: every constraint row needs a u-part");
    out.fu.add_atom(*up);
    if (ap) {
      out.fa.add_atom(*ap);
      out.a_row_of.push_back(static_cast<int>(out.fa.size()) - 1);
    } else {
      out.a_row_of.push_back(-1);
    }
  }
  for (const auto& q : obs_points) out.fu.add_atom(DiffFunctional::eval_at(0, q));
  return out;
}

/// Reduced SPD route for the observation-augmented inner problem: with
/// slack variables every Gram occurrence is linear, and eliminating the
/// block-PD Hessian leaves (Ku + embed(Ka) + gamma^2 Sel Sel^T) lambda = -2c.
/// Identical algebra to solve_kkt's Schur complement (property-tested).
inline GnState solve_with_observations_reduced(const LinearizedInner& li,
                                               const std::vector<Point>& obs_points,
                                               const Vector& obs_values, double gamma,
                                               const std::vector<KernelSpec>& kernels,
                                               const ParamVector& theta, double nugget) {
  const int M = static_cast<int>(li.Phi.size());
  const int L = static_cast<int>(obs_points.size());
  InverseSets sets = split_inverse_sets(li, obs_points);

  Assembler au = Assembler::make_gram(kernels, sets.fu);
  au.set_theta(theta);
  SymMatrix Ku = au.assemble_sym();
  Ku.m.diagonal().array() += nugget;
  SymMatrix Ka(static_cast<Eigen::Index>(sets.fa.size()));
  if (!sets.fa.rows.empty()) {
    Assembler aa = Assembler::make_gram(kernels, sets.fa);
    aa.set_theta(theta);
    Ka = aa.assemble_sym();
    Ka.m.diagonal().array() += nugget;
  }

  Matrix G = Ku.m;
  for (int r = 0; r < M; ++r) {
    if (sets.a_row_of[static_cast<size_t>(r)] < 0) continue;
    for (int q = 0; q < M; ++q) {
      const int rq = sets.a_row_of[static_cast<size_t>(q)];
      if (rq < 0) continue;
      G(r, q) += Ka.m(sets.a_row_of[static_cast<size_t>(r)], rq);
    }
  }
  for (int l = 0; l < L; ++l) G(M + l, M + l) += gamma * gamma;

  Vector c(M + L);
  c.head(M) = li.b;
  c.tail(L) = obs_values;

  CholFactor F;
  try {
    F = cholesky_nugget(SymMatrix(std::move(G)), 0.0);
  } catch (const NotPositiveDefinite& e) {
    throw RejectedTheta(e.what());
  }
  Vector lam = F.solve(Vector(-2.0 * c));

  GnState s;
  s.kernels = kernels;
  s.theta = theta;
  s.nugget = nugget;
  s.inverse = true;
  s.fu = std::make_shared<FunctionalSet>(std::move(sets.fu));
  s.fa = std::make_shared<FunctionalSet>(std::move(sets.fa));
  s.a_row_of = sets.a_row_of;
  s.lambda = lam;
  s.w = -0.5 * lam;
  s.wa = Vector::Zero(static_cast<Eigen::Index>(s.fa->size()));
  for (int r = 0; r < M; ++r)
    if (s.a_row_of[static_cast<size_t>(r)] >= 0)
      s.wa[s.a_row_of[static_cast<size_t>(r)]] = -0.5 * lam[r];
  s.slack = 0.5 * gamma * gamma * lam.tail(L);
  return s;
}

/// Observation-augmented inner solve via the generic KKT contract:
/// minimize |u|^2 + |a|^2 + (1/gamma^2) sum |u(x_l) - u_l|^2 subject to the
/// linearized equality rows. With an empty observation list (or the
/// 1/gamma^2 = 0 limit) this reduces to the plain constrained solve over the
/// joint space.
inline GnState solve_with_observations(const LinearizedInner& li,
                                       const std::vector<std::pair<Point, double>>& obs,
                                       double gamma, const std::vector<KernelSpec>& kernels,
                                       const ParamVector& theta, double nugget,
                                       bool zero_data_weight = false) {
  const int M = static_cast<int>(li.Phi.size());
  const int L = zero_data_weight ? 0 : static_cast<int>(obs.size());
  std::vector<Point> obs_pts;
  Vector obs_vals(L);
  for (int l = 0; l < L; ++l) {
    obs_pts.push_back(obs[static_cast<size_t>(l)].first);
    obs_vals[l] = obs[static_cast<size_t>(l)].second;
  }
  InverseSets sets = split_inverse_sets(li, obs_pts);
  const int Nu = M + L;
  const int Na = static_cast<int>(sets.fa.size());
  (void)Nu;

  Assembler au = Assembler::make_gram(kernels, sets.fu);
  au.set_theta(theta);
  SymMatrix Ku = au.assemble_sym();
  Ku.m.diagonal().array() += nugget;
  SymMatrix Ka(static_cast<Eigen::Index>(Na));
  if (Na > 0) {
    Assembler aa = Assembler::make_gram(kernels, sets.fa);
    aa.set_theta(theta);
    Ka = aa.assemble_sym();
    Ka.m.diagonal().array() += nugget;
  }

  // primal (w, wa, e); constraints: PDE rows then observation rows
  std::vector<SymMatrix> H;
  {
    SymMatrix Hu(Ku.m * 2.0);
    H.push_back(std::move(Hu));
    if (Na > 0) {
      SymMatrix Ha(Ka.m * 2.0);
      H.push_back(std::move(Ha));
    }
    if (L > 0) {
      SymMatrix He(Matrix((2.0 / (gamma * gamma)) * Matrix::Identity(L, L)));
      H.push_back(std::move(He));
    }
  }
  Matrix A = Matrix::Zero(M + L, Nu + Na + L);
  A.block(0, 0, M + L, Nu) = Ku.m;
  for (int r = 0; r < M; ++r) {
    const int ra = sets.a_row_of[static_cast<size_t>(r)];
    if (ra < 0) continue;
    for (int q = 0; q < Na; ++q) A(r, Nu + q) = Ka.m(ra, q);
  }
  for (int l = 0; l < L; ++l) A(M + l, Nu + Na + l) = -1.0;
  Vector r(M + L);
  r.head(M) = li.b;
  r.tail(L) = obs_vals;

  KktSolution sol;
  try {
    sol = solve_kkt(H, A, Vector::Zero(Nu + Na + L), r);
  } catch (const SingularKkt& e) {
    throw RejectedTheta(e.what());
  } catch (const NotPositiveDefinite& e) {
    throw RejectedTheta(e.what());
  }

  GnState s;
  s.kernels = kernels;
  s.theta = theta;
  s.nugget = nugget;
  s.inverse = true;
  s.fu = std::make_shared<FunctionalSet>(std::move(sets.fu));
  s.fa = std::make_shared<FunctionalSet>(std::move(sets.fa));
  s.a_row_of = sets.a_row_of;
  s.w = sol.primal.head(Nu);
  s.wa = sol.primal.segment(Nu, Na);
  s.slack = sol.primal.tail(L);
  s.lambda = sol.multipliers;
  return s;
}

/// Max row residual of the solved state against the (nuggeted) system,
/// i.e. the linear-system consistency of the representer solve.
inline double constraint_residual(const LinearizedInner& li, const GnState& s) {
  if (!s.inverse) {
    Assembler as = Assembler::make_gram(s.kernels, li.Phi);
    as.set_theta(s.theta);
    SymMatrix K = as.assemble_sym();
    Vector resid = K.m * s.z + s.nugget * s.z - li.b;
    return resid.cwiseAbs().maxCoeff();
  }
  const int M = static_cast<int>(li.Phi.size());
  if (M == 0) return 0.0;
  Assembler au = Assembler::make_gram(s.kernels, *s.fu);
  au.set_theta(s.theta);
  SymMatrix Ku = au.assemble_sym();
  Ku.m.diagonal().array() += s.nugget;
  SymMatrix Ka(static_cast<Eigen::Index>(s.fa->size()));
  if (!s.fa->rows.empty()) {
    Assembler aa = Assembler::make_gram(s.kernels, *s.fa);
    aa.set_theta(s.theta);
    Ka = aa.assemble_sym();
    Ka.m.diagonal().array() += s.nugget;
  }
  Vector resid = (Ku.m * s.w).head(M);
  for (int r = 0; r < M; ++r) {
    const int ra = s.a_row_of[static_cast<size_t>(r)];
    if (ra >= 0) resid[r] += Ka.m.row(ra).dot(s.wa);
  }
  resid -= li.b;
  return resid.cwiseAbs().maxCoeff();
}

}  // namespace gppde
