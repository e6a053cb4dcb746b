#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "gppde/core.hpp"
#include "gppde/dual.hpp"

namespace gppde {

// Truncated Taylor-polynomial ("nested dual number") arithmetic for mixed
// kernel derivatives. A Jet tracks the expansion of a scalar function of two
// point arguments x, y in the offsets (dx_1..dx_D, dy_1..dy_D), truncated at
// total degree <= 2 *per argument*. Extracting the coefficient of
// dx^alpha dy^beta (times alpha! beta!) yields d^alpha_x d^beta_y f exactly.

/// Monomial table for one argument group of dimension D, degrees 0..2.
template <int D>
struct Monos {
  static constexpr int Q = 1 + D + D * (D + 1) / 2;

  struct Entry {
    std::array<int, D> expo{};
    double factorial = 1.0;
  };
  std::array<Entry, Q> mono;
  // Flattened within-group convolution table: out <- a * b.
  struct Triple {
    int out, a, b;
  };
  std::vector<Triple> splits;

  Monos() {
    int idx = 0;
    mono[idx++] = Entry{};
    for (int i = 0; i < D; ++i) {
      Entry e;
      e.expo[static_cast<size_t>(i)] = 1;
      mono[idx++] = e;
    }
    for (int i = 0; i < D; ++i)
      for (int j = i; j < D; ++j) {
        Entry e;
        e.expo[static_cast<size_t>(i)] += 1;
        e.expo[static_cast<size_t>(j)] += 1;
        e.factorial = (i == j) ? 2.0 : 1.0;
        mono[idx++] = e;
      }
    for (int a = 0; a < Q; ++a)
      for (int b = 0; b < Q; ++b) {
        std::array<int, D> s{};
        int tot = 0;
        for (int i = 0; i < D; ++i) {
          s[static_cast<size_t>(i)] =
              mono[a].expo[static_cast<size_t>(i)] + mono[b].expo[static_cast<size_t>(i)];
          tot += s[static_cast<size_t>(i)];
        }
        if (tot > 2) continue;
        for (int m = 0; m < Q; ++m)
          if (mono[m].expo == s) {
            splits.push_back({m, a, b});
            break;
          }
      }
  }

  int index_of(const MultiIndex& mi) const {
    for (int m = 0; m < Q; ++m) {
      bool ok = true;
      for (int i = 0; i < D; ++i)
        if (mono[m].expo[static_cast<size_t>(i)] != mi[i]) ok = false;
      if (ok) return m;
    }
    throw UnsupportedOrder("multi-index exceeds order 2");
  }

  static const Monos& get() {
    static const Monos tbl;
    return tbl;
  }
};

/// Combined x-by-y product table (pairs of within-group triples).
template <int D>
struct PairTable {
  struct Triple {
    int out, a, b;
  };
  std::vector<Triple> triples;  // indices into the Q*Q coefficient array

  PairTable() {
    const auto& g = Monos<D>::get();
    constexpr int Q = Monos<D>::Q;
    for (const auto& sx : g.splits)
      for (const auto& sy : g.splits)
        triples.push_back({sx.out * Q + sy.out, sx.a * Q + sy.a, sx.b * Q + sy.b});
  }
  static const PairTable& get() {
    static const PairTable tbl;
    return tbl;
  }
};

/// One-argument-group jet (used for lengthscale fields evaluated at a single
/// point): coefficients of monomials of degree <= 2 in that group's offsets.
template <class T, int D>
struct GJet {
  static constexpr int Q = Monos<D>::Q;
  std::array<T, Q> c{};

  static GJet constant(const T& v) {
    GJet j;
    j.c[0] = v;
    return j;
  }
  /// Seeds coordinate i: value + offset monomial.
  static GJet variable(const T& v, int i) {
    GJet j;
    j.c[0] = v;
    j.c[static_cast<size_t>(1 + i)] = T(1.0);
    return j;
  }
  GJet& operator+=(const GJet& o) {
    for (int i = 0; i < Q; ++i) c[static_cast<size_t>(i)] += o.c[static_cast<size_t>(i)];
    return *this;
  }
};

template <class T, int D>
inline GJet<T, D> gmul(const GJet<T, D>& a, const GJet<T, D>& b) {
  GJet<T, D> r;
  for (const auto& t : Monos<D>::get().splits)
    fmadd(r.c[static_cast<size_t>(t.out)], a.c[static_cast<size_t>(t.a)],
          b.c[static_cast<size_t>(t.b)]);
  return r;
}

/// Accumulates the multiplication adjoints: given cbar for c = a*b, adds
/// the contributions into abar (and the caller can swap roles for bbar).
template <class T, int D>
inline void gmul_adjoint_left(GJet<T, D>& abar, const GJet<T, D>& b, const GJet<T, D>& cbar) {
  for (const auto& t : Monos<D>::get().splits)
    fmadd(abar.c[static_cast<size_t>(t.a)], b.c[static_cast<size_t>(t.b)],
          cbar.c[static_cast<size_t>(t.out)]);
}

/// Two-argument jet: Q*Q coefficients, x-monomial major.
template <class T, int D>
struct Jet {
  static constexpr int Q = Monos<D>::Q;
  static constexpr int QQ = Q * Q;
  std::array<T, QQ> c{};

  static Jet constant(const T& v) {
    Jet j;
    j.c[0] = v;
    return j;
  }
  static Jet from_x(const GJet<T, D>& g) {
    Jet j;
    for (int i = 0; i < Q; ++i) j.c[static_cast<size_t>(i * Q)] = g.c[static_cast<size_t>(i)];
    return j;
  }
  static Jet from_y(const GJet<T, D>& g) {
    Jet j;
    for (int i = 0; i < Q; ++i) j.c[static_cast<size_t>(i)] = g.c[static_cast<size_t>(i)];
    return j;
  }
  /// x-coordinate i seeded: value v, d/dx_i = 1.
  static Jet x_var(const T& v, int i) {
    Jet j;
    j.c[0] = v;
    j.c[static_cast<size_t>((1 + i) * Q)] = T(1.0);
    return j;
  }
  static Jet y_var(const T& v, int i) {
    Jet j;
    j.c[0] = v;
    j.c[static_cast<size_t>(1 + i)] = T(1.0);
    return j;
  }

  Jet& operator+=(const Jet& o) {
    for (int i = 0; i < QQ; ++i) c[static_cast<size_t>(i)] += o.c[static_cast<size_t>(i)];
    return *this;
  }
  Jet& operator-=(const Jet& o) {
    for (int i = 0; i < QQ; ++i) c[static_cast<size_t>(i)] -= o.c[static_cast<size_t>(i)];
    return *this;
  }
  Jet operator-() const {
    Jet r;
    for (int i = 0; i < QQ; ++i) r.c[static_cast<size_t>(i)] = -c[static_cast<size_t>(i)];
    return r;
  }
  Jet& scale(const T& s) {
    for (int i = 0; i < QQ; ++i) c[static_cast<size_t>(i)] = c[static_cast<size_t>(i)] * s;
    return *this;
  }

  /// alpha! beta! times the coefficient of dx^alpha dy^beta.
  T deriv(const MultiIndex& alpha, const MultiIndex& beta) const {
    const auto& g = Monos<D>::get();
    const int ia = g.index_of(alpha);
    const int ib = g.index_of(beta);
    const double f = g.mono[static_cast<size_t>(ia)].factorial *
                     g.mono[static_cast<size_t>(ib)].factorial;
    return c[static_cast<size_t>(ia * Q + ib)] * f;
  }
};

template <class T, int D>
inline Jet<T, D> operator+(Jet<T, D> a, const Jet<T, D>& b) { return a += b; }

template <class T, int D>
inline Jet<T, D> jmul(const Jet<T, D>& a, const Jet<T, D>& b) {
  Jet<T, D> r;
  for (const auto& t : PairTable<D>::get().triples)
    fmadd(r.c[static_cast<size_t>(t.out)], a.c[static_cast<size_t>(t.a)],
          b.c[static_cast<size_t>(t.b)]);
  return r;
}

/// abar += d(a*b)/da^T cbar; call twice with swapped arguments for bbar.
template <class T, int D>
inline void jmul_adjoint_left(Jet<T, D>& abar, const Jet<T, D>& b, const Jet<T, D>& cbar) {
  for (const auto& t : PairTable<D>::get().triples)
    fmadd(abar.c[static_cast<size_t>(t.a)], b.c[static_cast<size_t>(t.b)],
          cbar.c[static_cast<size_t>(t.out)]);
}

/// Outer product of an x-group jet and a y-group jet (exact, no truncation).
template <class T, int D>
inline Jet<T, D> jmul_xy(const GJet<T, D>& a, const GJet<T, D>& b) {
  constexpr int Q = Monos<D>::Q;
  Jet<T, D> r;
  for (int i = 0; i < Q; ++i)
    for (int j = 0; j < Q; ++j)
      fmadd(r.c[static_cast<size_t>(i * Q + j)], a.c[static_cast<size_t>(i)],
            b.c[static_cast<size_t>(j)]);
  return r;
}

namespace detail {

/// out = sum_k coeff[k] * q^k where q = x with its constant removed.
/// coeff[k] must be f^(k)(x0)/k! — the standard analytic composition rule.
/// coeff has six entries: the extra order feeds the derivative series below.
template <class T, int D>
inline Jet<T, D> jcompose(const std::array<T, 6>& coeff, const Jet<T, D>& x) {
  Jet<T, D> q = x;
  q.c[0] = T(0.0);
  Jet<T, D> out = Jet<T, D>::constant(coeff[0]);
  Jet<T, D> p = q;
  for (int k = 1; k <= 4; ++k) {
    Jet<T, D> term = p;
    term.scale(coeff[static_cast<size_t>(k)]);
    out += term;
    if (k < 4) p = jmul(p, q);
  }
  return out;
}

/// Composition derivative series D = sum_{k<=4} (k+1) coeff[k+1] q^k, so that
/// d(compose)/d(input) is jet-multiplication by D: the truncated product
/// restricts the top q^4 term to the constant-coefficient direction, which is
/// exactly where it belongs. Used by reverse passes.
template <class T, int D>
inline Jet<T, D> jcompose_dseries(const std::array<T, 6>& coeff, const Jet<T, D>& x) {
  Jet<T, D> q = x;
  q.c[0] = T(0.0);
  Jet<T, D> out = Jet<T, D>::constant(coeff[1]);
  Jet<T, D> p = q;
  for (int k = 1; k <= 4; ++k) {
    Jet<T, D> term = p;
    term.scale((k + 1.0) * coeff[static_cast<size_t>(k + 1)]);
    out += term;
    if (k < 4) p = jmul(p, q);
  }
  return out;
}

template <class T>
inline std::array<T, 6> exp_coeffs(const T& v) {
  using std::exp;
  const T e = exp(v);
  return {e, e, e * 0.5, e * (1.0 / 6.0), e * (1.0 / 24.0), e * (1.0 / 120.0)};
}
template <class T>
inline std::array<T, 6> recip_coeffs(const T& v) {
  const T r = T(1.0) / v;
  const T r2 = r * r;
  const T r3 = r2 * r;
  return {r, -r2, r3, -(r2 * r2), r2 * r3, -(r3 * r3)};
}
template <class T>
inline std::array<T, 6> sqrt_coeffs(const T& v) {
  using std::sqrt;
  const T s = sqrt(v);
  const T iv = T(1.0) / v;
  const T siv = s * iv;
  const T siv2 = siv * iv;
  const T siv3 = siv2 * iv;
  const T siv4 = siv3 * iv;
  return {s, siv * 0.5, -siv2 * 0.125, siv3 * 0.0625, -siv4 * (5.0 / 128.0),
          siv4 * iv * (7.0 / 256.0)};
}
template <class T>
inline std::array<T, 6> sin_coeffs(const T& v) {
  using std::cos;
  using std::sin;
  const T s = sin(v), c = cos(v);
  return {s, c, -s * 0.5, -c * (1.0 / 6.0), s * (1.0 / 24.0), c * (1.0 / 120.0)};
}
template <class T>
inline std::array<T, 6> cos_coeffs(const T& v) {
  using std::cos;
  using std::sin;
  const T s = sin(v), c = cos(v);
  return {c, -s, -c * 0.5, s * (1.0 / 6.0), c * (1.0 / 24.0), -s * (1.0 / 120.0)};
}
template <class T>
inline std::array<T, 6> tanh_coeffs(const T& v) {
  using std::tanh;
  const T t = tanh(v);
  const T d1 = T(1.0) - t * t;
  const T d2 = -2.0 * (t * d1);
  const T d3 = -2.0 * (d1 * d1 + t * d2);
  const T d4 = -6.0 * (d1 * d2) - 2.0 * (t * d3);
  const T d5 = -6.0 * (d2 * d2) - 8.0 * (d1 * d3) - 2.0 * (t * d4);
  return {t, d1, d2 * 0.5, d3 * (1.0 / 6.0), d4 * (1.0 / 24.0), d5 * (1.0 / 120.0)};
}
template <class T>
inline std::array<T, 6> softplus_coeffs(const T& v) {
  using std::exp;
  const T sp = softplus(v);
  const T s = T(1.0) / (T(1.0) + exp(-v));
  const T s1 = s * (T(1.0) - s);
  const T s2 = s1 * (T(1.0) - 2.0 * s);
  const T s3 = s2 * (T(1.0) - 2.0 * s) - 2.0 * (s1 * s1);
  const T s4 = s3 * (T(1.0) - 2.0 * s) - 6.0 * (s1 * s2);
  return {sp, s, s1 * 0.5, s2 * (1.0 / 6.0), s3 * (1.0 / 24.0), s4 * (1.0 / 120.0)};
}

inline double softplus_scalar(double v) { return softplus(v); }

}  // namespace detail

template <class T, int D>
inline Jet<T, D> jexp(const Jet<T, D>& x) { return detail::jcompose(detail::exp_coeffs(x.c[0]), x); }
template <class T, int D>
inline Jet<T, D> jreciprocal(const Jet<T, D>& x) { return detail::jcompose(detail::recip_coeffs(x.c[0]), x); }
template <class T, int D>
inline Jet<T, D> jsqrt(const Jet<T, D>& x) { return detail::jcompose(detail::sqrt_coeffs(x.c[0]), x); }
template <class T, int D>
inline Jet<T, D> jsin(const Jet<T, D>& x) { return detail::jcompose(detail::sin_coeffs(x.c[0]), x); }
template <class T, int D>
inline Jet<T, D> jcos(const Jet<T, D>& x) { return detail::jcompose(detail::cos_coeffs(x.c[0]), x); }

// GJet versions (within one argument group, same composition rule).
template <class T, int D>
inline GJet<T, D> gcompose(const std::array<T, 6>& coeff, const GJet<T, D>& x) {
  GJet<T, D> q = x;
  q.c[0] = T(0.0);
  GJet<T, D> out;
  out.c[0] = coeff[0];
  GJet<T, D> p = q;
  for (int k = 1; k <= 2; ++k) {  // one group: degree <= 2 suffices
    for (int i = 0; i < GJet<T, D>::Q; ++i)
      out.c[static_cast<size_t>(i)] += p.c[static_cast<size_t>(i)] * coeff[static_cast<size_t>(k)];
    if (k < 2) p = gmul(p, q);
  }
  return out;
}
template <class T, int D>
inline GJet<T, D> gtanh(const GJet<T, D>& x) { return gcompose(detail::tanh_coeffs(x.c[0]), x); }
template <class T, int D>
inline GJet<T, D> gsoftplus(const GJet<T, D>& x) { return gcompose(detail::softplus_coeffs(x.c[0]), x); }

/// d(gcompose)/d(input) as a multiplication series: f1 + 2 f2 q + 3 f3 q^2
/// (the q^2 term is restricted to the constant direction by truncation).
template <class T, int D>
inline GJet<T, D> gcompose_dseries(const std::array<T, 6>& coeff, const GJet<T, D>& x) {
  GJet<T, D> q = x;
  q.c[0] = T(0.0);
  GJet<T, D> q2 = gmul(q, q);
  GJet<T, D> out;
  out.c[0] = coeff[1];
  for (int i = 0; i < GJet<T, D>::Q; ++i) {
    out.c[static_cast<size_t>(i)] += 2.0 * (q.c[static_cast<size_t>(i)] * coeff[2]);
    out.c[static_cast<size_t>(i)] += 3.0 * (q2.c[static_cast<size_t>(i)] * coeff[3]);
  }
  return out;
}

}  // namespace gppde
