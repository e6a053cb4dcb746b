#pragma once

#include <cstdint>
#include <map>
#include <unordered_map>
#include <vector>

#include "gppde/functionals.hpp"
#include "gppde/kernels.hpp"
#include "gppde/linalg.hpp"
#include "gppde/threading.hpp"

namespace gppde {

// Batched Gram / cross-row assembly. Values and derivatives are defined by the
// same jet propagation as kernels.hpp; for the stationary families the theta
// dependence factors out of the (theta-independent) Taylor tables of the
// exponent, so per-pair tables are baked once per linearization and each
// hyperparameter step costs an exp plus a short polynomial per entry. The
// Gibbs kernel keeps the full jet evaluation per entry with per-point MLP
// jets cached per theta. Equivalence with the reference path in
// functionals.hpp is property-tested.

namespace detail {

constexpr int kJetD = 2;
using J2 = Jet<double, kJetD>;
using G2 = GJet<double, kJetD>;

enum class PairKind : int16_t { Iso, TwoFactor, AdditivePoly, Gibbs };

struct Job {
  int32_t r = 0, c = 0;       // row/col indices (gram: r <= c)
  int16_t comp = 0;
  PairKind kind = PairKind::Iso;
  int32_t off = 0;            // arena offset (stationary kinds)
  int32_t tp_off = 0, tp_len = 0;  // term-pair slice (gibbs)
  int32_t px = -1, py = -1;   // point registry ids (gibbs)
};

struct TermPairRef {
  int32_t idx;   // flat jet index ia*Q+ib
  double coeff;  // c1*c2*alpha!*beta!
};

/// Per-component per-theta scalars of each stationary family.
struct CompTheta {
  double w0 = 0, w1 = 0;       // exponent coefficients
  double s2 = 1;               // additive sigma^2
  double c = 0, a = 0;         // additive free parameters
};

inline CompTheta comp_theta(const KernelSpec& spec, const double* raw) {
  CompTheta t;
  switch (spec.variant) {
    case KernelSpec::Variant::RbfIso: {
      const double l = std::exp(raw[0]);
      t.w0 = -0.5 / (l * l);
      break;
    }
    case KernelSpec::Variant::RbfAniso: {
      const double l0 = std::exp(raw[0]), l1 = std::exp(raw[1]);
      t.w0 = -0.5 / (l0 * l0);
      t.w1 = -0.5 / (l1 * l1);
      break;
    }
    case KernelSpec::Variant::PeriodicTimeSpace: {
      const double lt = std::exp(raw[0]), lx = std::exp(raw[1]);
      t.w0 = -0.5 / (lt * lt);
      t.w1 = -2.0 / (lx * lx);
      break;
    }
    case KernelSpec::Variant::AdditiveRbfPoly: {
      const double sigma = std::exp(raw[0]), l = std::exp(raw[1]);
      t.s2 = sigma * sigma;
      t.w0 = -0.5 / (l * l);
      t.c = raw[2];
      t.a = raw[3];
      break;
    }
    case KernelSpec::Variant::GibbsMlp: break;
  }
  return t;
}

struct IsoEval {
  double value;
  double d_dw;  // also d/d(s2-scaled pre-factor) handled by caller
  double poly;  // the polynomial part alone (for additive sigma^2 chain)
};

inline IsoEval eval_iso(const double* d, double w) {
  // d = {e0, A0..A4}
  const double e0 = d[0];
  const double* A = d + 1;
  const double P = (((A[4] * w + A[3]) * w + A[2]) * w + A[1]) * w + A[0];
  const double Pp = ((4.0 * A[4] * w + 3.0 * A[3]) * w + 2.0 * A[2]) * w + A[1];
  const double E = std::exp(w * e0);
  return {E * P, E * (e0 * P + Pp), E * P};
}

struct TwoFactorEval {
  double value;
  double d_dw0, d_dw1;
};

// triangular index for the (k0, k1), k0+k1 <= 4 table
inline constexpr int kTwoFactorOff[5] = {0, 5, 9, 12, 14};
inline constexpr int kTwoFactorLen = 15;

inline TwoFactorEval eval_two_factor(const double* d, double w0, double w1) {
  // d = {e0, e1, A[tri(k0,k1)] for k0+k1<=4}
  const double e0 = d[0], e1 = d[1];
  const double* A = d + 2;
  double p0[5] = {1, w0, w0 * w0, w0 * w0 * w0, w0 * w0 * w0 * w0};
  double p1[5] = {1, w1, w1 * w1, w1 * w1 * w1, w1 * w1 * w1 * w1};
  double S = 0, S0 = 0, S1 = 0;
  for (int k0 = 0; k0 <= 4; ++k0)
    for (int k1 = 0; k1 + k0 <= 4; ++k1) {
      const double a = A[kTwoFactorOff[k0] + k1];
      if (a == 0.0) continue;
      S += a * p0[k0] * p1[k1];
      if (k0 > 0) S0 += a * k0 * p0[k0 - 1] * p1[k1];
      if (k1 > 0) S1 += a * k1 * p0[k0] * p1[k1 - 1];
    }
  const double E = std::exp(w0 * e0 + w1 * e1);
  return {E * S, E * (e0 * S + S0), E * (e1 * S + S1)};
}

}  // namespace detail

class Assembler {
 public:
  /// Gram mode over Phi (pairs i <= j, both orientations identical by
  /// construction, which realizes the symmetrization contract exactly).
  static Assembler make_gram(const std::vector<KernelSpec>& specs, const FunctionalSet& Phi) {
    Assembler a(specs);
    a.gram_mode_ = true;
    a.ncols_ = static_cast<int>(Phi.size());
    a.nrows_ = a.ncols_;
    a.points_ = Phi.points;
    for (size_t i = 0; i < Phi.size(); ++i)
      for (size_t j = i; j < Phi.size(); ++j)
        a.bake_pair(static_cast<int>(i), static_cast<int>(j), Phi.rows[i], Phi.rows[j], Phi);
    a.finalize_rows();
    return a;
  }

  /// Cross mode: given row functionals against the columns Phi.
  static Assembler make_cross(const std::vector<KernelSpec>& specs,
                              const std::vector<CompositeRow>& rows, const FunctionalSet& Phi) {
    Assembler a(specs);
    a.gram_mode_ = false;
    a.ncols_ = static_cast<int>(Phi.size());
    a.nrows_ = static_cast<int>(rows.size());
    a.points_ = Phi.points;
    for (size_t r = 0; r < rows.size(); ++r) {
      CompositeRow row = rows[r];
      for (auto& part : row.parts) part.point_id = a.register_point(part.point);
      for (size_t m = 0; m < Phi.size(); ++m)
        a.bake_pair(static_cast<int>(r), static_cast<int>(m), row, Phi.rows[m], Phi);
    }
    a.finalize_rows();
    return a;
  }

  int rows() const { return nrows_; }
  int cols() const { return ncols_; }

  /// Computes per-component scalars and (for Gibbs components) the per-point
  /// lengthscale jets at this theta. Must be called before the passes below.
  void set_theta(const ParamVector& theta) {
    theta_ = theta;
    comp_theta_.resize(specs_.size());
    for (size_t c = 0; c < specs_.size(); ++c)
      comp_theta_[c] = detail::comp_theta(specs_[c], theta.block(static_cast<int>(c)));
    for (size_t c = 0; c < specs_.size(); ++c) {
      if (specs_[c].variant != KernelSpec::Variant::GibbsMlp) continue;
      auto& jets = gibbs_jets_[static_cast<int>(c)];
      jets.assign(points_.size(), {});
      detail::ThetaViewD th{theta.block(static_cast<int>(c))};
      const auto& spec = specs_[c];
      parallel_for(points_.size(), [&](size_t lo, size_t hi, int) {
        for (size_t p = lo; p < hi; ++p) {
          MlpJetTrace<double, detail::kJetD> tr;
          mlp_forward_jet<double, detail::kJetD>(spec.mlp, th, points_[p], &tr);
          jets[p] = tr.outputs;
        }
      });
    }
  }

  /// Gram values at the current theta.
  SymMatrix assemble_sym() const {
    SymMatrix K(nrows_);
    run_rows(all_rows(), [&](const detail::Job& jb, double v) {
      K.m(jb.r, jb.c) += v;
    });
    for (int i = 0; i < nrows_; ++i)
      for (int j = i + 1; j < ncols_; ++j) K.m(j, i) = K.m(i, j);
    return K;
  }

  /// Cross values for the listed rows (in the given order).
  Matrix assemble_rows(const std::vector<int>& active) const {
    Matrix R = Matrix::Zero(static_cast<Eigen::Index>(active.size()), ncols_);
    std::vector<int> pos(static_cast<size_t>(nrows_), -1);
    for (size_t k = 0; k < active.size(); ++k) pos[static_cast<size_t>(active[k])] = static_cast<int>(k);
    run_rows(active, [&](const detail::Job& jb, double v) {
      R(pos[static_cast<size_t>(jb.r)], jb.c) += v;
    });
    return R;
  }

  /// For each direction: (dK z) in gram mode, or per-row (dR z) for the listed
  /// rows in cross mode. Stationary-only (the bilevel tangent mode guards out
  /// MLP kernels).
  std::vector<Vector> tangent_times(const std::vector<ParamVector>& dirs, const Vector& z,
                                    const std::vector<int>& active) const {
    const size_t nd = dirs.size();
    if (nd == 0) return {};
    std::vector<Vector> out(nd, Vector::Zero(gram_mode_ ? ncols_ : static_cast<int>(active.size())));
    std::vector<int> pos;
    if (!gram_mode_) {
      pos.assign(static_cast<size_t>(nrows_), -1);
      for (size_t k = 0; k < active.size(); ++k) pos[static_cast<size_t>(active[k])] = static_cast<int>(k);
    }
    const int nt = std::max(1, global_thread_count());
    std::vector<std::vector<Vector>> partial(
        static_cast<size_t>(nt), std::vector<Vector>(nd, Vector::Zero(out[0].size())));
    const auto& rows_list = gram_mode_ ? all_rows() : active;
    const double corrupt = param_grad_corruption();
    parallel_for(rows_list.size(), [&](size_t lo, size_t hi, int t) {
      auto& acc = partial[static_cast<size_t>(t)];
      for (size_t rr = lo; rr < hi; ++rr) {
        const int r = rows_list[rr];
        for (size_t k = row_off_[static_cast<size_t>(r)]; k < row_off_[static_cast<size_t>(r) + 1]; ++k) {
          const auto& jb = jobs_[k];
          double dloc[4];
          const int nloc = local_grads(jb, dloc);
          for (size_t d = 0; d < nd; ++d) {
            double dv = 0.0;
            map_direction(jb, dirs[d], dloc, nloc, dv);
            dv *= corrupt;
            if (dv == 0.0) continue;
            if (gram_mode_) {
              acc[d][jb.r] += dv * z[jb.c];
              if (jb.r != jb.c) acc[d][jb.c] += dv * z[jb.r];
            } else {
              acc[d][pos[static_cast<size_t>(jb.r)]] += dv * z[jb.c];
            }
          }
        }
      }
    });
    for (int t = 0; t < nt; ++t)
      for (size_t d = 0; d < nd; ++d) out[d] += partial[static_cast<size_t>(t)][d];
    return out;
  }

  /// theta_bar += sum_{i<=j} wbar_ij dK_ij/dtheta with wbar from the rank-two
  /// cotangent -sym(mu z^T) (gram) — pass scale=-1 — or any (u v^T) structure.
  void vjp_gram(const Vector& mu, const Vector& z, double scale, Vector& theta_bar) const {
    vjp_impl(all_rows(),
             [&](const detail::Job& jb) {
               return jb.r == jb.c ? scale * mu[jb.r] * z[jb.r]
                                   : scale * (mu[jb.r] * z[jb.c] + mu[jb.c] * z[jb.r]);
             },
             theta_bar);
  }

  /// theta_bar += sum over listed rows of rbar_r z_m dR_(r,m)/dtheta.
  void vjp_cross(const std::vector<int>& active, const Vector& rbar, const Vector& z,
                 Vector& theta_bar) const {
    std::vector<int> pos(static_cast<size_t>(nrows_), -1);
    for (size_t k = 0; k < active.size(); ++k) pos[static_cast<size_t>(active[k])] = static_cast<int>(k);
    vjp_impl(active,
             [&](const detail::Job& jb) { return rbar[pos[static_cast<size_t>(jb.r)]] * z[jb.c]; },
             theta_bar);
  }

 private:
  explicit Assembler(std::vector<KernelSpec> specs) : specs_(std::move(specs)) {}

  int register_point(const Point& p) {
    int64_t key = 1469598103934665603LL;
    for (int i = 0; i < p.dim; ++i) {
      const auto v = static_cast<int64_t>(std::llround(p[i] * 1e10));
      key = (key ^ v) * 1099511628211LL;
    }
    if (point_lookup_.empty() && !points_.empty())
      for (size_t i = 0; i < points_.size(); ++i) {
        int64_t k2 = 1469598103934665603LL;
        for (int d = 0; d < points_[i].dim; ++d) {
          const auto v = static_cast<int64_t>(std::llround(points_[i][d] * 1e10));
          k2 = (k2 ^ v) * 1099511628211LL;
        }
        point_lookup_[k2].push_back(static_cast<int>(i));
      }
    for (int idx : point_lookup_[key])
      if (sq_dist(points_[static_cast<size_t>(idx)], p) < 1e-24) return idx;
    points_.push_back(p);
    const int idx = static_cast<int>(points_.size()) - 1;
    point_lookup_[key].push_back(idx);
    return idx;
  }

  static detail::J2 coordinate_sq_jet(const Point& x, const Point& y, int i) {
    detail::J2 d = detail::diff_jet<double, detail::kJetD>(x, y, i);
    return jmul(d, d);
  }

  void bake_pair(int r, int c, const CompositeRow& A, const CompositeRow& B,
                 const FunctionalSet& /*Phi*/) {
    for (const auto& pa : A.parts)
      for (const auto& pb : B.parts) {
        if (pa.component != pb.component) continue;
        bake_atom_pair(r, c, pa, pb);
      }
  }

  void bake_atom_pair(int r, int c, const DiffFunctional& pa, const DiffFunctional& pb) {
    using detail::J2;
    const auto comp = pa.component;
    const auto& spec = specs_[static_cast<size_t>(comp)];
    detail::Job jb;
    jb.r = r;
    jb.c = c;
    jb.comp = static_cast<int16_t>(comp);
    const Point& x = pa.point;
    const Point& y = pb.point;

    auto termpair_sum = [&](const J2& jet) {
      double s = 0.0;
      for (const auto& t1 : pa.terms)
        for (const auto& t2 : pb.terms) s += t1.coeff * t2.coeff * jet.deriv(t1.alpha, t2.alpha);
      return s;
    };

    switch (spec.variant) {
      case KernelSpec::Variant::RbfIso:
      case KernelSpec::Variant::AdditiveRbfPoly: {
        const bool additive = spec.variant == KernelSpec::Variant::AdditiveRbfPoly;
        jb.kind = additive ? detail::PairKind::AdditivePoly : detail::PairKind::Iso;
        jb.off = static_cast<int32_t>(arena_.size());
        J2 S = coordinate_sq_jet(x, y, 0);
        S += coordinate_sq_jet(x, y, 1);
        const double e0 = S.c[0];
        J2 q = S;
        q.c[0] = 0.0;
        arena_.push_back(e0);
        J2 p = J2::constant(1.0);
        double kfact = 1.0;
        for (int k = 0; k <= 4; ++k) {
          if (k > 0) {
            p = jmul(p, q);
            kfact *= k;
          }
          arena_.push_back(termpair_sum(p) / kfact);
        }
        if (additive) {
          J2 P;
          for (int i = 0; i < detail::kJetD; ++i) {
            J2 xi = J2::x_var(x[i], i);
            J2 yi = J2::y_var(y[i], i);
            P += jmul(xi, yi);
          }
          arena_.push_back(termpair_sum(J2::constant(1.0)));
          arena_.push_back(termpair_sum(P));
          arena_.push_back(termpair_sum(jmul(P, P)));
        }
        break;
      }
      case KernelSpec::Variant::RbfAniso:
      case KernelSpec::Variant::PeriodicTimeSpace: {
        jb.kind = detail::PairKind::TwoFactor;
        jb.off = static_cast<int32_t>(arena_.size());
        J2 S0 = coordinate_sq_jet(x, y, 0);
        J2 S1;
        if (spec.variant == KernelSpec::Variant::RbfAniso) {
          S1 = coordinate_sq_jet(x, y, 1);
        } else {
          J2 w = detail::diff_jet<double, detail::kJetD>(x, y, 1);
          w.scale(3.14159265358979323846 / spec.period);
          J2 sw = jsin(w);
          S1 = jmul(sw, sw);
        }
        arena_.push_back(S0.c[0]);
        arena_.push_back(S1.c[0]);
        J2 q0 = S0, q1 = S1;
        q0.c[0] = 0.0;
        q1.c[0] = 0.0;
        std::array<J2, 5> pw0, pw1;
        pw0[0] = J2::constant(1.0);
        pw1[0] = J2::constant(1.0);
        for (int k = 1; k <= 4; ++k) {
          pw0[static_cast<size_t>(k)] = jmul(pw0[static_cast<size_t>(k - 1)], q0);
          pw1[static_cast<size_t>(k)] = jmul(pw1[static_cast<size_t>(k - 1)], q1);
        }
        double f0 = 1.0;
        for (int k0 = 0; k0 <= 4; ++k0) {
          if (k0 > 0) f0 *= k0;
          double f1 = 1.0;
          for (int k1 = 0; k1 + k0 <= 4; ++k1) {
            if (k1 > 0) f1 *= k1;
            const J2 prod = (k0 == 0) ? pw1[static_cast<size_t>(k1)]
                            : (k1 == 0) ? pw0[static_cast<size_t>(k0)]
                                        : jmul(pw0[static_cast<size_t>(k0)],
                                               pw1[static_cast<size_t>(k1)]);
            arena_.push_back(termpair_sum(prod) / (f0 * f1));
          }
        }
        break;
      }
      case KernelSpec::Variant::GibbsMlp: {
        jb.kind = detail::PairKind::Gibbs;
        jb.px = pa.point_id >= 0 ? pa.point_id : register_point(pa.point);
        jb.py = pb.point_id >= 0 ? pb.point_id : register_point(pb.point);
        jb.tp_off = static_cast<int32_t>(termpairs_.size());
        const auto& g = Monos<detail::kJetD>::get();
        for (const auto& t1 : pa.terms)
          for (const auto& t2 : pb.terms) {
            const int ia = g.index_of(t1.alpha), ib = g.index_of(t2.alpha);
            const double f = g.mono[static_cast<size_t>(ia)].factorial *
                             g.mono[static_cast<size_t>(ib)].factorial;
            termpairs_.push_back(
                {ia * Monos<detail::kJetD>::Q + ib, t1.coeff * t2.coeff * f});
          }
        jb.tp_len = static_cast<int32_t>(termpairs_.size()) - jb.tp_off;
        gibbs_jets_[comp];  // ensure the slot exists
        break;
      }
    }
    jobs_.push_back(jb);
  }

  void finalize_rows() {
    std::vector<std::vector<detail::Job>> by_row(static_cast<size_t>(nrows_));
    for (const auto& jb : jobs_) by_row[static_cast<size_t>(jb.r)].push_back(jb);
    jobs_.clear();
    row_off_.assign(static_cast<size_t>(nrows_) + 1, 0);
    for (int r = 0; r < nrows_; ++r) {
      row_off_[static_cast<size_t>(r)] = jobs_.size();
      for (const auto& jb : by_row[static_cast<size_t>(r)]) jobs_.push_back(jb);
    }
    row_off_[static_cast<size_t>(nrows_)] = jobs_.size();
    all_rows_.resize(static_cast<size_t>(nrows_));
    for (int r = 0; r < nrows_; ++r) all_rows_[static_cast<size_t>(r)] = r;
  }

  const std::vector<int>& all_rows() const { return all_rows_; }

  double job_value(const detail::Job& jb) const {
    const auto& ct = comp_theta_[static_cast<size_t>(jb.comp)];
    switch (jb.kind) {
      case detail::PairKind::Iso:
        return detail::eval_iso(&arena_[static_cast<size_t>(jb.off)], ct.w0).value;
      case detail::PairKind::TwoFactor:
        return detail::eval_two_factor(&arena_[static_cast<size_t>(jb.off)], ct.w0, ct.w1).value;
      case detail::PairKind::AdditivePoly: {
        const double* d = &arena_[static_cast<size_t>(jb.off)];
        const auto e = detail::eval_iso(d, ct.w0);
        const double pd = d[6], p1 = d[7], p2 = d[8];
        return ct.s2 * e.value + ct.c * ct.c * pd + 2.0 * ct.c * ct.a * p1 + ct.a * ct.a * p2;
      }
      case detail::PairKind::Gibbs: {
        const auto& jets = gibbs_jets_.at(jb.comp);
        detail::J2 jet = detail::gibbs_combine<double, detail::kJetD>(
            jets[static_cast<size_t>(jb.px)], jets[static_cast<size_t>(jb.py)],
            points_[static_cast<size_t>(jb.px)], points_[static_cast<size_t>(jb.py)]);
        double v = 0.0;
        for (int k = 0; k < jb.tp_len; ++k) {
          const auto& tp = termpairs_[static_cast<size_t>(jb.tp_off + k)];
          v += tp.coeff * jet.c[static_cast<size_t>(tp.idx)];
        }
        return v;
      }
    }
    return 0.0;
  }

  template <class Sink>
  void run_rows(const std::vector<int>& rows_list, const Sink& sink) const {
    parallel_for(rows_list.size(), [&](size_t lo, size_t hi, int) {
      for (size_t rr = lo; rr < hi; ++rr) {
        const int r = rows_list[rr];
        for (size_t k = row_off_[static_cast<size_t>(r)]; k < row_off_[static_cast<size_t>(r) + 1];
             ++k)
          sink(jobs_[k], job_value(jobs_[k]));
      }
    });
  }

  /// Derivatives of the entry w.r.t. the component's local scalars:
  /// Iso/TwoFactor: (w0[, w1]); Additive: (w0, s2, c, a). Returns the count.
  int local_grads(const detail::Job& jb, double* out) const {
    const auto& ct = comp_theta_[static_cast<size_t>(jb.comp)];
    switch (jb.kind) {
      case detail::PairKind::Iso: {
        const auto e = detail::eval_iso(&arena_[static_cast<size_t>(jb.off)], ct.w0);
        out[0] = e.d_dw;
        return 1;
      }
      case detail::PairKind::TwoFactor: {
        const auto e = detail::eval_two_factor(&arena_[static_cast<size_t>(jb.off)], ct.w0, ct.w1);
        out[0] = e.d_dw0;
        out[1] = e.d_dw1;
        return 2;
      }
      case detail::PairKind::AdditivePoly: {
        const double* d = &arena_[static_cast<size_t>(jb.off)];
        const auto e = detail::eval_iso(d, ct.w0);
        const double pd = d[6], p1 = d[7], p2 = d[8];
        out[0] = ct.s2 * e.d_dw;                        // d/dw
        out[1] = e.poly;                                // d/ds2
        out[2] = 2.0 * ct.c * pd + 2.0 * ct.a * p1;     // d/dc
        out[3] = 2.0 * ct.c * p1 + 2.0 * ct.a * p2;     // d/dalpha
        return 4;
      }
      case detail::PairKind::Gibbs:
        throw UnsupportedOrder("tangent assembly is not available for MLP kernels; use adjoint");
    }
    return 0;
  }

  /// Chains local-scalar partial derivatives to a raw-theta direction.
  void map_direction(const detail::Job& jb, const ParamVector& dir, const double* dloc, int nloc,
                     double& dv) const {
    const auto& ct = comp_theta_[static_cast<size_t>(jb.comp)];
    const double* draw = dir.block(jb.comp);
    const auto& spec = specs_[static_cast<size_t>(jb.comp)];
    switch (spec.variant) {
      case KernelSpec::Variant::RbfIso:
        dv += dloc[0] * (-2.0 * ct.w0) * draw[0];
        break;
      case KernelSpec::Variant::RbfAniso:
      case KernelSpec::Variant::PeriodicTimeSpace:
        dv += dloc[0] * (-2.0 * ct.w0) * draw[0] + dloc[1] * (-2.0 * ct.w1) * draw[1];
        break;
      case KernelSpec::Variant::AdditiveRbfPoly:
        dv += dloc[1] * (2.0 * ct.s2) * draw[0];  // sigma
        dv += dloc[0] * (-2.0 * ct.w0) * draw[1];  // lengthscale
        dv += dloc[2] * draw[2] + dloc[3] * draw[3];
        break;
      case KernelSpec::Variant::GibbsMlp:
        break;
    }
    (void)nloc;
  }

  /// Accumulates wbar * dentry/draw into theta_bar for one stationary job.
  void vjp_stationary(const detail::Job& jb, double wbar, Vector& theta_bar) const {
    const auto& ct = comp_theta_[static_cast<size_t>(jb.comp)];
    const auto& spec = specs_[static_cast<size_t>(jb.comp)];
    const int off = theta_.offsets[static_cast<size_t>(jb.comp)];
    double dloc[4];
    local_grads(jb, dloc);
    switch (spec.variant) {
      case KernelSpec::Variant::RbfIso:
        theta_bar[off] += wbar * dloc[0] * (-2.0 * ct.w0);
        break;
      case KernelSpec::Variant::RbfAniso:
      case KernelSpec::Variant::PeriodicTimeSpace:
        theta_bar[off] += wbar * dloc[0] * (-2.0 * ct.w0);
        theta_bar[off + 1] += wbar * dloc[1] * (-2.0 * ct.w1);
        break;
      case KernelSpec::Variant::AdditiveRbfPoly:
        theta_bar[off] += wbar * dloc[1] * (2.0 * ct.s2);
        theta_bar[off + 1] += wbar * dloc[0] * (-2.0 * ct.w0);
        theta_bar[off + 2] += wbar * dloc[2];
        theta_bar[off + 3] += wbar * dloc[3];
        break;
      case KernelSpec::Variant::GibbsMlp:
        break;
    }
  }

  template <class WbarFn>
  void vjp_impl(const std::vector<int>& rows_list, const WbarFn& wbar_of,
                Vector& theta_bar) const {
    const int nt = std::max(1, global_thread_count());
    const double corrupt = param_grad_corruption();
    std::vector<Vector> partial(static_cast<size_t>(nt), Vector::Zero(theta_.total()));
    // per-thread Gibbs lengthscale-jet cotangent buffers, per component
    struct GibbsBuf {
      std::vector<std::array<detail::G2, 2>> lbar;  // per point
      bool used = false;
    };
    std::vector<std::map<int, GibbsBuf>> gbuf(static_cast<size_t>(nt));

    parallel_for(rows_list.size(), [&](size_t lo, size_t hi, int t) {
      auto& tb = partial[static_cast<size_t>(t)];
      auto& gb = gbuf[static_cast<size_t>(t)];
      for (size_t rr = lo; rr < hi; ++rr) {
        const int r = rows_list[rr];
        for (size_t k = row_off_[static_cast<size_t>(r)]; k < row_off_[static_cast<size_t>(r) + 1];
             ++k) {
          const auto& jb = jobs_[k];
          const double wbar = wbar_of(jb) * corrupt;
          if (wbar == 0.0) continue;
          if (jb.kind != detail::PairKind::Gibbs) {
            vjp_stationary(jb, wbar, tb);
            continue;
          }
          const auto& jets = gibbs_jets_.at(jb.comp);
          detail::GibbsTrace<detail::kJetD> trace;
          trace.forward(jets[static_cast<size_t>(jb.px)], jets[static_cast<size_t>(jb.py)],
                        points_[static_cast<size_t>(jb.px)], points_[static_cast<size_t>(jb.py)]);
          detail::J2 valbar;
          for (int q = 0; q < jb.tp_len; ++q) {
            const auto& tp = termpairs_[static_cast<size_t>(jb.tp_off + q)];
            valbar.c[static_cast<size_t>(tp.idx)] += wbar * tp.coeff;
          }
          std::vector<detail::G2> lxbar, lybar;
          trace.backward(valbar, lxbar, lybar);
          auto& buf = gb[jb.comp];
          if (!buf.used) {
            buf.lbar.assign(points_.size(), {});
            buf.used = true;
          }
          for (size_t o = 0; o < lxbar.size(); ++o) {
            buf.lbar[static_cast<size_t>(jb.px)][o] += lxbar[o];
            buf.lbar[static_cast<size_t>(jb.py)][o] += lybar[o];
          }
        }
      }
    });
    for (int t = 0; t < nt; ++t) theta_bar += partial[static_cast<size_t>(t)];
    // reduce Gibbs buffers in thread order, then one MLP backward per point
    std::map<int, GibbsBuf> total;
    for (int t = 0; t < nt; ++t)
      for (auto& [comp, buf] : gbuf[static_cast<size_t>(t)]) {
        if (!buf.used) continue;
        auto& dst = total[comp];
        if (!dst.used) {
          dst.lbar.assign(points_.size(), {});
          dst.used = true;
        }
        for (size_t p = 0; p < points_.size(); ++p)
          for (size_t o = 0; o < 2; ++o) dst.lbar[p][o] += buf.lbar[p][o];
      }
    for (auto& [comp, buf] : total) {
      const auto& spec = specs_[static_cast<size_t>(comp)];
      const int off = theta_.offsets[static_cast<size_t>(comp)];
      const int np = theta_.counts[static_cast<size_t>(comp)];
      std::vector<double> th(theta_.block(comp), theta_.block(comp) + np);
      std::vector<double> grad(static_cast<size_t>(np), 0.0);
      detail::ThetaViewD thv{theta_.block(comp)};
      const int out_n = spec.mlp.out;
      for (size_t p = 0; p < points_.size(); ++p) {
        bool nonzero = false;
        for (int o = 0; o < out_n; ++o)
          for (const auto& cc : buf.lbar[p][static_cast<size_t>(o)].c)
            if (cc != 0.0) nonzero = true;
        if (!nonzero) continue;
        MlpJetTrace<double, detail::kJetD> tr;
        mlp_forward_jet<double, detail::kJetD>(spec.mlp, thv, points_[p], &tr);
        std::vector<detail::G2> cot(static_cast<size_t>(out_n));
        for (int o = 0; o < out_n; ++o) cot[static_cast<size_t>(o)] = buf.lbar[p][static_cast<size_t>(o)];
        mlp_backward_jet<detail::kJetD>(spec.mlp, th, 0, tr, cot, grad, 0);
      }
      for (int i = 0; i < np; ++i) theta_bar[off + i] += grad[static_cast<size_t>(i)];
    }
  }

  std::vector<KernelSpec> specs_;
  bool gram_mode_ = true;
  int nrows_ = 0, ncols_ = 0;
  std::vector<Point> points_;
  std::vector<detail::Job> jobs_;
  std::vector<size_t> row_off_;
  std::vector<int> all_rows_;
  std::vector<double> arena_;
  std::vector<detail::TermPairRef> termpairs_;
  ParamVector theta_;
  std::vector<detail::CompTheta> comp_theta_;
  std::map<int, std::vector<std::vector<detail::G2>>> gibbs_jets_;
  std::unordered_map<int64_t, std::vector<int>> point_lookup_;
};

}  // namespace gppde
