#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gppde/core.hpp"
#include "gppde/jet.hpp"
#include "gppde/linalg.hpp"
#include "gppde/mlp.hpp"
#include "gppde/rng.hpp"

namespace gppde {

// Test hook: scales analytic parameter-derivative paths (tangent/vjp) so the
// gradcheck command can prove it detects a corrupted derivative. Value paths
// are unaffected, so finite differences stay truthful. Always 1.0 in normal
// operation.
inline double& param_grad_corruption() {
  static double f = 1.0;
  return f;
}

struct KernelSpec {
  enum class Variant { RbfIso, RbfAniso, PeriodicTimeSpace, AdditiveRbfPoly, GibbsMlp };
  Variant variant = Variant::RbfIso;
  int dim = 2;
  double period = 10.0;  // PeriodicTimeSpace: fixed structural constant, not learned
  MlpSpec mlp;           // GibbsMlp: hidden activation tanh, softplus output map

  static KernelSpec rbf_iso(int d) { return {Variant::RbfIso, d}; }
  static KernelSpec rbf_aniso(int d) { return {Variant::RbfAniso, d}; }
  static KernelSpec periodic_time_space(double p) {
    KernelSpec k{Variant::PeriodicTimeSpace, 2};
    k.period = p;
    return k;
  }
  static KernelSpec additive_rbf_poly(int d) { return {Variant::AdditiveRbfPoly, d}; }
  static KernelSpec gibbs_mlp(int d, std::vector<int> hidden, int out) {
    KernelSpec k{Variant::GibbsMlp, d};
    k.mlp.in = d;
    k.mlp.hidden = std::move(hidden);
    k.mlp.out = out;
    return k;
  }

  int param_count() const {
    switch (variant) {
      case Variant::RbfIso: return 1;
      case Variant::RbfAniso: return dim;
      case Variant::PeriodicTimeSpace: return 2;
      case Variant::AdditiveRbfPoly: return 4;
      case Variant::GibbsMlp: return mlp.param_count();
    }
    return 0;
  }
  /// true for entries stored in log space (exp transform to the positive value).
  bool log_scale(int i) const {
    switch (variant) {
      case Variant::RbfIso:
      case Variant::RbfAniso:
      case Variant::PeriodicTimeSpace: return true;
      case Variant::AdditiveRbfPoly: return i < 2;  // sigma, l; c and alpha are free
      case Variant::GibbsMlp: return false;
    }
    return false;
  }
  std::string param_name(int i) const {
    switch (variant) {
      case Variant::RbfIso: return "lengthscale";
      case Variant::RbfAniso: return "lengthscale_" + std::to_string(i);
      case Variant::PeriodicTimeSpace: return i == 0 ? "lengthscale_t" : "lengthscale_x";
      case Variant::AdditiveRbfPoly:
        return std::array<const char*, 4>{"sigma", "lengthscale", "c", "alpha"}[static_cast<size_t>(i)];
      case Variant::GibbsMlp: return "w" + std::to_string(i);
    }
    return "";
  }
};

/// Unconstrained hyperparameter vector for a set of per-component kernels.
/// Positive parameters (lengthscales, sigma) live in log space; the additive
/// kernel's c, alpha and MLP weights are free.
struct ParamVector {
  Vector raw;
  std::vector<int> offsets;  // per component
  std::vector<int> counts;

  int total() const { return static_cast<int>(raw.size()); }
  int components() const { return static_cast<int>(offsets.size()); }
  const double* block(int c) const { return raw.data() + offsets[static_cast<size_t>(c)]; }
  double* block(int c) { return raw.data() + offsets[static_cast<size_t>(c)]; }
  int block_size(int c) const { return counts[static_cast<size_t>(c)]; }

  static ParamVector zeros(const std::vector<KernelSpec>& specs) {
    ParamVector p;
    int n = 0;
    for (const auto& s : specs) {
      p.offsets.push_back(n);
      p.counts.push_back(s.param_count());
      n += s.param_count();
    }
    p.raw = Vector::Zero(n);
    return p;
  }
  /// Constrained (physical) values, applying each entry's transform.
  Vector constrained(const std::vector<KernelSpec>& specs) const {
    Vector v = raw;
    for (size_t c = 0; c < specs.size(); ++c)
      for (int i = 0; i < counts[c]; ++i)
        if (specs[c].log_scale(i)) v[offsets[c] + i] = std::exp(raw[offsets[c] + i]);
    return v;
  }
  /// Sets one component's parameter from its physical value.
  void set_value(const std::vector<KernelSpec>& specs, int comp, int i, double value) {
    raw[offsets[static_cast<size_t>(comp)] + i] =
        specs[static_cast<size_t>(comp)].log_scale(i) ? std::log(value) : value;
  }
};

namespace detail {

/// Access to one kernel's raw parameter block with scalar type T; Dual-typed
/// views carry tangent seeds so the positivity transform's chain rule is
/// propagated automatically.
struct ThetaViewD {
  const double* raw;
  double operator()(int i) const { return raw[i]; }
};
struct ThetaViewTan {
  const double* raw;
  const double* dir;
  Dual<1> operator()(int i) const { return Dual<1>::seeded(raw[i], 0, dir[i]); }
};
template <int N>
struct ThetaViewSlots {
  const double* raw;
  Dual<N> operator()(int i) const {
    // one tangent slot per parameter; only usable when param_count <= N
    return Dual<N>::seeded(raw[i], i, 1.0);
  }
};

template <class T, int D>
inline Jet<T, D> diff_jet(const Point& x, const Point& y, int i) {
  Jet<T, D> xi = Jet<T, D>::x_var(T(x[i]), i);
  Jet<T, D> yi = Jet<T, D>::y_var(T(y[i]), i);
  xi -= yi;
  return xi;
}

template <class T, int D, class Theta>
inline Jet<T, D> rbf_iso_jet(const Theta& th, const Point& x, const Point& y) {
  using std::exp;
  const T l = exp(th(0));
  Jet<T, D> s;
  for (int i = 0; i < D; ++i) {
    Jet<T, D> d = diff_jet<T, D>(x, y, i);
    s += jmul(d, d);
  }
  s.scale(T(-0.5) / (l * l));
  return jexp(s);
}

template <class T, int D, class Theta>
inline Jet<T, D> rbf_aniso_jet(const Theta& th, const Point& x, const Point& y) {
  using std::exp;
  Jet<T, D> s;
  for (int i = 0; i < D; ++i) {
    const T l = exp(th(i));
    Jet<T, D> d = diff_jet<T, D>(x, y, i);
    Jet<T, D> d2 = jmul(d, d);
    d2.scale(T(-0.5) / (l * l));
    s += d2;
  }
  return jexp(s);
}

template <class T, int D, class Theta>
inline Jet<T, D> periodic_jet(const KernelSpec& spec, const Theta& th, const Point& x,
                              const Point& y) {
  using std::exp;
  static_assert(true);
  const T lt = exp(th(0));
  const T lx = exp(th(1));
  Jet<T, D> dt = diff_jet<T, D>(x, y, 0);
  Jet<T, D> arg = jmul(dt, dt);
  arg.scale(T(-0.5) / (lt * lt));
  Jet<T, D> w = diff_jet<T, D>(x, y, 1);
  w.scale(T(3.14159265358979323846 / spec.period));
  Jet<T, D> sw = jsin(w);
  Jet<T, D> s2 = jmul(sw, sw);
  s2.scale(T(-2.0) / (lx * lx));
  arg += s2;
  return jexp(arg);
}

template <class T, int D, class Theta>
inline Jet<T, D> additive_jet(const Theta& th, const Point& x, const Point& y) {
  using std::exp;
  const T sigma = exp(th(0));
  const T l = exp(th(1));
  const T c = th(2);
  const T alpha = th(3);
  Jet<T, D> s;
  Jet<T, D> dot;
  for (int i = 0; i < D; ++i) {
    Jet<T, D> d = diff_jet<T, D>(x, y, i);
    s += jmul(d, d);
    Jet<T, D> xi = Jet<T, D>::x_var(T(x[i]), i);
    Jet<T, D> yi = Jet<T, D>::y_var(T(y[i]), i);
    dot += jmul(xi, yi);
  }
  s.scale(T(-0.5) / (l * l));
  Jet<T, D> rbf = jexp(s);
  rbf.scale(sigma * sigma);
  dot.scale(alpha);
  dot.c[0] += c;
  Jet<T, D> poly = jmul(dot, dot);
  rbf += poly;
  return rbf;
}

/// Gibbs kernel with spatially varying lengthscales l_i(x) given as one-group
/// jets (value plus derivatives of the field at each point). out == 1 shares
/// one lengthscale over both coordinates; out == 2 is the anisotropic form.
template <class T, int D>
inline Jet<T, D> gibbs_combine(const std::vector<GJet<T, D>>& lx, const std::vector<GJet<T, D>>& ly,
                               const Point& x, const Point& y) {
  static_assert(true);
  const int out = static_cast<int>(lx.size());
  Jet<T, D> eacc;
  Jet<T, D> pref;
  if (out == 1) {
    GJet<T, D> lx2 = gmul(lx[0], lx[0]);
    GJet<T, D> ly2 = gmul(ly[0], ly[0]);
    Jet<T, D> s = Jet<T, D>::from_x(lx2);
    s += Jet<T, D>::from_y(ly2);
    Jet<T, D> inv = jreciprocal(s);
    Jet<T, D> pref2 = jmul_xy(lx[0], ly[0]);
    pref2.scale(T(2.0));
    Jet<T, D> prefsq = jmul(pref2, inv);  // 2 l(x) l(y) / s per coordinate
    Jet<T, D> d2sum;
    for (int i = 0; i < D; ++i) {
      Jet<T, D> d = diff_jet<T, D>(x, y, i);
      d2sum += jmul(d, d);
    }
    eacc = jmul(d2sum, inv);
    if (D == 2) {
      pref = prefsq;  // sqrt(prefsq)^2
    } else {
      Jet<T, D> acc = prefsq;
      for (int i = 1; i < D; ++i) acc = jmul(acc, prefsq);
      pref = jsqrt(acc);
    }
  } else {
    Jet<T, D> prefprod = Jet<T, D>::constant(T(1.0));
    for (int i = 0; i < D; ++i) {
      const int k = i < out ? i : out - 1;
      GJet<T, D> lx2 = gmul(lx[static_cast<size_t>(k)], lx[static_cast<size_t>(k)]);
      GJet<T, D> ly2 = gmul(ly[static_cast<size_t>(k)], ly[static_cast<size_t>(k)]);
      Jet<T, D> s = Jet<T, D>::from_x(lx2);
      s += Jet<T, D>::from_y(ly2);
      Jet<T, D> inv = jreciprocal(s);
      Jet<T, D> pref2 = jmul_xy(lx[static_cast<size_t>(k)], ly[static_cast<size_t>(k)]);
      pref2.scale(T(2.0));
      prefprod = jmul(prefprod, jmul(pref2, inv));
      Jet<T, D> d = diff_jet<T, D>(x, y, i);
      eacc += jmul(jmul(d, d), inv);
    }
    pref = jsqrt(prefprod);
  }
  return jmul(pref, jexp(-eacc));
}

template <class T, int D, class Theta>
inline std::vector<GJet<T, D>> gibbs_point_jets(const KernelSpec& spec, const Theta& th,
                                                const Point& p) {
  MlpJetTrace<T, D> trace;
  mlp_forward_jet<T, D>(spec.mlp, th, p, &trace);
  return trace.outputs;
}

template <class T, int D, class Theta>
inline Jet<T, D> kernel_jet(const KernelSpec& spec, const Theta& th, const Point& x,
                            const Point& y) {
  switch (spec.variant) {
    case KernelSpec::Variant::RbfIso: return rbf_iso_jet<T, D>(th, x, y);
    case KernelSpec::Variant::RbfAniso: return rbf_aniso_jet<T, D>(th, x, y);
    case KernelSpec::Variant::PeriodicTimeSpace: return periodic_jet<T, D>(spec, th, x, y);
    case KernelSpec::Variant::AdditiveRbfPoly: return additive_jet<T, D>(th, x, y);
    case KernelSpec::Variant::GibbsMlp: {
      auto lx = gibbs_point_jets<T, D>(spec, th, x);
      auto ly0 = gibbs_point_jets<T, D>(spec, th, y);
      // re-place y-point jets on the y argument group
      std::vector<GJet<T, D>> ly = ly0;
      return gibbs_combine<T, D>(lx, ly, x, y);
    }
  }
  throw VariantMismatch("unknown kernel variant");
}

template <class Fn>
inline auto dispatch_dim(int d, Fn&& fn) {
  switch (d) {
    case 1: return fn(std::integral_constant<int, 1>{});
    case 2: return fn(std::integral_constant<int, 2>{});
    case 3: return fn(std::integral_constant<int, 3>{});
    default: throw DimensionMismatch("kernel dimension must be 1..3");
  }
}

inline void check_orders(const MultiIndex& a, const MultiIndex& b) {
  if (a.total() > 2 || b.total() > 2)
    throw UnsupportedOrder("derivative order exceeds 2 per argument");
}

}  // namespace detail

/// kappa_theta(x, y); symmetric in (x, y) by construction of each formula.
inline double kernel_eval(const KernelSpec& spec, const ParamVector& theta, int comp,
                          const Point& x, const Point& y) {
  return detail::dispatch_dim(spec.dim, [&](auto dc) {
    constexpr int D = decltype(dc)::value;
    detail::ThetaViewD th{theta.block(comp)};
    return detail::kernel_jet<double, D>(spec, th, x, y).c[0];
  });
}

/// d^alpha_x d^beta_y kappa_theta(x, y), exact via jet propagation.
inline double kernel_mixed_deriv(const KernelSpec& spec, const ParamVector& theta, int comp,
                                 const Point& x, const MultiIndex& alpha, const Point& y,
                                 const MultiIndex& beta) {
  detail::check_orders(alpha, beta);
  return detail::dispatch_dim(spec.dim, [&](auto dc) {
    constexpr int D = decltype(dc)::value;
    detail::ThetaViewD th{theta.block(comp)};
    return detail::kernel_jet<double, D>(spec, th, x, y).deriv(alpha, beta);
  });
}

/// Directional derivative d/de [d^alpha_x d^beta_y kappa_{theta+e*dtheta}] at
/// e = 0, in the unconstrained parameterization (transform chain rule included).
inline double kernel_param_tangent(const KernelSpec& spec, const ParamVector& theta,
                                   const ParamVector& dtheta, int comp, const Point& x,
                                   const MultiIndex& alpha, const Point& y,
                                   const MultiIndex& beta) {
  detail::check_orders(alpha, beta);
  return detail::dispatch_dim(spec.dim, [&](auto dc) {
    constexpr int D = decltype(dc)::value;
    detail::ThetaViewTan th{theta.block(comp), dtheta.block(comp)};
    const Dual<1> v = detail::kernel_jet<Dual<1>, D>(spec, th, x, y).deriv(alpha, beta);
    return v.d[0] * param_grad_corruption();
  });
}

std::vector<double> kernel_param_vjp_block(const KernelSpec& spec, const ParamVector& theta,
                                           int comp, const Point& x, const MultiIndex& alpha,
                                           const Point& y, const MultiIndex& beta, double wbar);

/// wbar * grad_theta [d^alpha_x d^beta_y kappa], full block gradient.
inline ParamVector kernel_param_vjp(const std::vector<KernelSpec>& specs, const ParamVector& theta,
                                    int comp, const Point& x, const MultiIndex& alpha,
                                    const Point& y, const MultiIndex& beta, double wbar) {
  ParamVector g = ParamVector::zeros(specs);
  const auto block =
      kernel_param_vjp_block(specs[static_cast<size_t>(comp)], theta, comp, x, alpha, y, beta, wbar);
  for (size_t i = 0; i < block.size(); ++i)
    g.raw[g.offsets[static_cast<size_t>(comp)] + static_cast<int>(i)] = block[i];
  return g;
}

/// l(x) for GibbsMlp: one shared value (out == 1) or per-coordinate values.
inline std::vector<double> lengthscale_field(const KernelSpec& spec, const ParamVector& theta,
                                             int comp, const Point& x) {
  if (spec.variant != KernelSpec::Variant::GibbsMlp)
    throw VariantMismatch("lengthscale_field requires a GibbsMlp kernel");
  std::vector<double> th(theta.block(comp), theta.block(comp) + theta.block_size(comp));
  return mlp_forward_scalar(spec.mlp, th, 0, x);
}

}  // namespace gppde

#include "gppde/detail/kernels_vjp_impl.hpp"
