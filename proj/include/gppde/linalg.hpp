#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "gppde/core.hpp"

namespace gppde {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Dense symmetric matrix; entries must agree with their transpose within
/// 1e-12 absolute after assembly (symmetrize() enforces this exactly).
struct SymMatrix {
  Matrix m;

  SymMatrix() = default;
  explicit SymMatrix(Eigen::Index n) : m(Matrix::Zero(n, n)) {}
  explicit SymMatrix(Matrix mat) : m(std::move(mat)) {}
  Eigen::Index n() const { return m.rows(); }

  /// Averages (i,j) and (j,i) to kill roundoff asymmetry.
  void symmetrize() {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = i + 1; j < m.cols(); ++j) {
        const double a = 0.5 * (m(i, j) + m(j, i));
        m(i, j) = a;
        m(j, i) = a;
      }
  }
  double max_asymmetry() const {
    double w = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = i + 1; j < m.cols(); ++j)
        w = std::max(w, std::abs(m(i, j) - m(j, i)));
    return w;
  }
};

/// Lower-triangular Cholesky factor of (S + nugget*I).
struct CholFactor {
  Matrix L;
  double nugget = 0.0;

  Eigen::Index n() const { return L.rows(); }
  Vector solve(const Vector& b) const {
    if (b.size() != L.rows()) throw DimensionMismatch("solve_chol: rhs size mismatch");
    Vector x = L.triangularView<Eigen::Lower>().solve(b);
    return L.transpose().triangularView<Eigen::Upper>().solve(x);
  }
  Matrix solve(const Matrix& B) const {
    if (B.rows() != L.rows()) throw DimensionMismatch("solve_chol: rhs rows mismatch");
    Matrix X = L.triangularView<Eigen::Lower>().solve(B);
    return L.transpose().triangularView<Eigen::Upper>().solve(X);
  }
};

/// Cholesky of S + eta*I. Throws NotPositiveDefinite when a pivot fails to be
/// strictly positive (finite) even after the nugget, which the outer loop maps
/// to RejectedTheta.
inline CholFactor cholesky_nugget(const SymMatrix& S, double eta) {
  if (eta < 0.0) throw std::invalid_argument("cholesky_nugget: eta must be >= 0");
  if (S.n() == 0) return {};  // empty block (e.g. an absent coefficient side)
  Matrix M = S.m;
  M.diagonal().array() += eta;
  Eigen::LLT<Matrix> llt(M);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefinite("cholesky_nugget: factorization failed");
  CholFactor f;
  f.L = llt.matrixL();
  f.nugget = eta;
  const double dmin = f.L.diagonal().minCoeff();
  if (!(dmin > 0.0) || !std::isfinite(f.L.diagonal().maxCoeff()))
    throw NotPositiveDefinite("cholesky_nugget: nonpositive pivot");
  return f;
}

inline Vector solve_chol(const CholFactor& F, const Vector& b) { return F.solve(b); }

struct KktSolution {
  Vector primal;
  Vector multipliers;
};

/// Equality-constrained quadratic minimizer:
///   min 1/2 x^T H x + g^T x  s.t.  A x = r,
/// i.e. [[H, A^T],[A, 0]] [x; lambda] = [-g; r]. H is given as PD diagonal
/// blocks (callers nugget them first); the solve eliminates x through the
/// block factors and factorizes the Schur complement A H^-1 A^T, which fails
/// (SingularKkt) exactly when the constraints are rank deficient.
inline KktSolution solve_kkt(const std::vector<SymMatrix>& H_blocks, const Matrix& A,
                             const Vector& g, const Vector& r) {
  Eigen::Index n = 0;
  for (const auto& B : H_blocks) n += B.n();
  if (A.cols() != n) throw DimensionMismatch("solve_kkt: A column count mismatch");
  if (g.size() != n) throw DimensionMismatch("solve_kkt: g size mismatch");
  if (r.size() != A.rows()) throw DimensionMismatch("solve_kkt: r size mismatch");
  const Eigen::Index m = A.rows();

  std::vector<CholFactor> fac;
  fac.reserve(H_blocks.size());
  for (const auto& B : H_blocks) fac.push_back(cholesky_nugget(B, 0.0));

  // Y = H^-1 A^T and h = H^-1 g, block by block.
  Matrix Y(n, m);
  Vector h(n);
  Eigen::Index off = 0;
  for (size_t k = 0; k < H_blocks.size(); ++k) {
    const Eigen::Index nb = H_blocks[k].n();
    Y.middleRows(off, nb) = fac[k].solve(Matrix(A.middleCols(off, nb).transpose()));
    h.segment(off, nb) = fac[k].solve(Vector(g.segment(off, nb)));
    off += nb;
  }
  Matrix S = A * Y;  // Schur complement, symmetric PSD
  SymMatrix Ssym(std::move(S));
  Ssym.symmetrize();
  const double sdiag_max = Ssym.m.diagonal().maxCoeff();
  CholFactor sf;
  try {
    sf = cholesky_nugget(Ssym, 0.0);
  } catch (const NotPositiveDefinite&) {
    throw SingularKkt("solve_kkt: rank-deficient constraints");
  }
  // duplicated/dependent rows survive LLT with a roundoff-level pivot; flag
  // them with a rank test on the squared pivot against the matrix scale
  const double pmin = sf.L.diagonal().minCoeff();
  if (pmin * pmin <= 64.0 * static_cast<double>(m) *
                         std::numeric_limits<double>::epsilon() * sdiag_max)
    throw SingularKkt("solve_kkt: rank-deficient constraints (pivot underflow)");
  KktSolution sol;
  sol.multipliers = sf.solve(Vector(-(A * h) - r));
  sol.primal = -h - Y * sol.multipliers;
  return sol;
}

/// Independent route: forms the dense saddle matrix and LU-solves it.
/// Used as the oracle for solve_kkt in tests.
inline KktSolution solve_kkt_dense(const std::vector<SymMatrix>& H_blocks, const Matrix& A,
                                   const Vector& g, const Vector& r) {
  Eigen::Index n = 0;
  for (const auto& B : H_blocks) n += B.n();
  const Eigen::Index m = A.rows();
  Matrix K = Matrix::Zero(n + m, n + m);
  Eigen::Index off = 0;
  for (const auto& B : H_blocks) {
    K.block(off, off, B.n(), B.n()) = B.m;
    off += B.n();
  }
  K.block(n, 0, m, n) = A;
  K.block(0, n, n, m) = A.transpose();
  Vector rhs(n + m);
  rhs.head(n) = -g;
  rhs.tail(m) = r;
  Eigen::PartialPivLU<Matrix> lu(K);
  Vector sol = lu.solve(rhs);
  const double resid = (K * sol - rhs).norm() / std::max(1.0, rhs.norm());
  if (!std::isfinite(resid) || resid > 1e-6)
    throw SingularKkt("solve_kkt_dense: singular saddle system");
  KktSolution out;
  out.primal = sol.head(n);
  out.multipliers = sol.tail(m);
  return out;
}

}  // namespace gppde
