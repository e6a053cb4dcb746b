#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "gppde/core.hpp"
#include "gppde/kernels.hpp"
#include "gppde/linalg.hpp"

namespace gppde {

struct DiffTerm {
  MultiIndex alpha;
  double coeff = 0.0;
};

/// A linear functional phi = sum_j c_j (d^{alpha_j} at `point`), acting on one
/// GP component. Rows of coupled systems are lists of these, one per component.
struct DiffFunctional {
  int component = 0;
  Point point;
  std::vector<DiffTerm> terms;
  int point_id = -1;  // index into the owning set's point registry

  static DiffFunctional eval_at(int comp, const Point& p) {
    return {comp, p, {DiffTerm{MultiIndex::zero(p.dim), 1.0}}};
  }
  void validate() const {
    if (terms.empty()) throw std::invalid_argument("DiffFunctional: empty term list");
    for (const auto& t : terms) {
      if (t.alpha.total() > 2) throw UnsupportedOrder("DiffFunctional: order > 2");
      if (!std::isfinite(t.coeff)) throw std::invalid_argument("DiffFunctional: non-finite coeff");
    }
  }
};

/// One equation row: a sum of per-component functionals (a single functional
/// for scalar problems; u- and v-parts for coupled systems).
struct CompositeRow {
  std::vector<DiffFunctional> parts;
};

/// Ordered functional set Phi. Indices into `rows` are the coordinates of the
/// residual vector, the right-hand side b, and the representer coefficients z.
struct FunctionalSet {
  int component_count = 1;
  std::vector<CompositeRow> rows;
  std::vector<Point> points;  // unique points referenced by the rows

  size_t size() const { return rows.size(); }

  int register_point(const Point& p) {
    const int64_t key = quantize(p);
    auto it = point_index_.find(key);
    if (it != point_index_.end()) {
      for (int idx : it->second)
        if (sq_dist(points[static_cast<size_t>(idx)], p) < 1e-24) return idx;
    }
    points.push_back(p);
    const int idx = static_cast<int>(points.size()) - 1;
    point_index_[key].push_back(idx);
    return idx;
  }

  /// Appends a row; throws on duplicated rows (same structure at the same
  /// point within 1e-12), which would make the Gram matrix singular beyond
  /// nugget repair.
  void add_row(CompositeRow row) {
    for (auto& part : row.parts) {
      part.validate();
      part.point_id = register_point(part.point);
    }
    const uint64_t h = row_hash(row);
    auto it = row_hash_.find(h);
    if (it != row_hash_.end()) {
      for (size_t ri : it->second)
        if (rows_equal(rows[ri], row))
          throw std::invalid_argument("FunctionalSet: duplicate collocation row");
    }
    row_hash_[h].push_back(rows.size());
    rows.push_back(std::move(row));
  }

  void add_atom(DiffFunctional f) { add_row(CompositeRow{{std::move(f)}}); }

 private:
  static int64_t quantize(const Point& p) {
    int64_t h = 1469598103934665603LL;
    for (int i = 0; i < p.dim; ++i) {
      const auto v = static_cast<int64_t>(std::llround(p[i] * 1e10));
      h = (h ^ v) * 1099511628211LL;
    }
    return h;
  }
  static uint64_t row_hash(const CompositeRow& row) {
    uint64_t h = 14695981039346656037ULL;
    for (const auto& part : row.parts) {
      h = (h ^ static_cast<uint64_t>(part.component)) * 1099511628211ULL;
      h = (h ^ static_cast<uint64_t>(quantize(part.point))) * 1099511628211ULL;
      for (const auto& t : part.terms)
        for (int i = 0; i < t.alpha.dim; ++i)
          h = (h ^ static_cast<uint64_t>(t.alpha[i] + 7)) * 1099511628211ULL;
    }
    return h;
  }
  static bool rows_equal(const CompositeRow& a, const CompositeRow& b) {
    if (a.parts.size() != b.parts.size()) return false;
    for (size_t p = 0; p < a.parts.size(); ++p) {
      const auto& x = a.parts[p];
      const auto& y = b.parts[p];
      if (x.component != y.component || x.terms.size() != y.terms.size()) return false;
      if (sq_dist(x.point, y.point) >= 1e-24) return false;
      for (size_t t = 0; t < x.terms.size(); ++t) {
        if (!(x.terms[t].alpha == y.terms[t].alpha)) return false;
        if (std::abs(x.terms[t].coeff - y.terms[t].coeff) >
            1e-12 * (1.0 + std::abs(x.terms[t].coeff)))
          return false;
      }
    }
    return true;
  }
  std::unordered_map<int64_t, std::vector<int>> point_index_;
  std::unordered_map<uint64_t, std::vector<size_t>> row_hash_;
};

/// Gram entry between two single-component functionals: zero across components
/// (independent GPs, block-diagonal kernel), otherwise the double sum of mixed
/// kernel derivatives weighted by the term coefficients.
inline double apply_to_kernel(const std::vector<KernelSpec>& kernels, const ParamVector& theta,
                              const DiffFunctional& phi, const DiffFunctional& psi) {
  if (phi.component != psi.component) return 0.0;
  const auto& spec = kernels[static_cast<size_t>(phi.component)];
  double acc = 0.0;
  for (const auto& t1 : phi.terms)
    for (const auto& t2 : psi.terms)
      acc += t1.coeff * t2.coeff *
             kernel_mixed_deriv(spec, theta, phi.component, phi.point, t1.alpha, psi.point,
                                t2.alpha);
  return acc;
}

inline double apply_rows(const std::vector<KernelSpec>& kernels, const ParamVector& theta,
                         const CompositeRow& a, const CompositeRow& b) {
  double acc = 0.0;
  for (const auto& pa : a.parts)
    for (const auto& pb : b.parts)
      if (pa.component == pb.component) acc += apply_to_kernel(kernels, theta, pa, pb);
  return acc;
}

/// kappa(Phi, Phi), symmetrized by averaging to kill roundoff asymmetry.
/// Reference path; the hot loops use assemblers.hpp, which is property-tested
/// against this.
inline SymMatrix gram(const std::vector<KernelSpec>& kernels, const ParamVector& theta,
                      const FunctionalSet& Phi) {
  const auto n = static_cast<Eigen::Index>(Phi.size());
  if (n == 0) throw std::invalid_argument("gram: empty functional set");
  SymMatrix K(n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j) {
      const double vij = apply_rows(kernels, theta, Phi.rows[static_cast<size_t>(i)],
                                    Phi.rows[static_cast<size_t>(j)]);
      const double vji = apply_rows(kernels, theta, Phi.rows[static_cast<size_t>(j)],
                                    Phi.rows[static_cast<size_t>(i)]);
      const double v = 0.5 * (vij + vji);
      K.m(i, j) = v;
      K.m(j, i) = v;
    }
  return K;
}

/// kappa(L, Phi): the length-M vector of apply_to_kernel against each row.
inline Vector cross_row(const std::vector<KernelSpec>& kernels, const ParamVector& theta,
                        const CompositeRow& L, const FunctionalSet& Phi) {
  Vector r(static_cast<Eigen::Index>(Phi.size()));
  for (size_t m = 0; m < Phi.size(); ++m)
    r[static_cast<Eigen::Index>(m)] = apply_rows(kernels, theta, L, Phi.rows[m]);
  return r;
}

inline Vector cross_row(const std::vector<KernelSpec>& kernels, const ParamVector& theta,
                        const DiffFunctional& L, const FunctionalSet& Phi) {
  return cross_row(kernels, theta, CompositeRow{{L}}, Phi);
}

}  // namespace gppde
