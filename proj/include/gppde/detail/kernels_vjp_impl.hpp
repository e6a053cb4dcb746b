#pragma once

// Implementation details for reverse-mode kernel parameter gradients.
// Included at the bottom of kernels.hpp; do not include directly.

#include <vector>

namespace gppde {
namespace detail {

/// Forward Gibbs combine (D-dimensional, out lengthscale fields) that saves
/// every intermediate jet, plus the mirrored reverse sweep. Reverse-mode is
/// what makes the 2751/2802-parameter MLP kernels differentiable at Gram
/// scale: each entry's sensitivity lands on the two point-local lengthscale
/// jets, and one MLP backward pass per point finishes the chain.
template <int D>
struct GibbsTrace {
  using J = Jet<double, D>;
  using G = GJet<double, D>;
  int out = 1;
  std::array<G, 2> lx, ly;
  std::array<J, 2> s, inv, pref2, prefsq, d2, e;
  J d2sum, eacc, prefprod, pref, xe, val;

  void forward(const std::vector<G>& lxs, const std::vector<G>& lys, const Point& x,
               const Point& y) {
    out = static_cast<int>(lxs.size());
    for (int k = 0; k < out; ++k) {
      lx[static_cast<size_t>(k)] = lxs[static_cast<size_t>(k)];
      ly[static_cast<size_t>(k)] = lys[static_cast<size_t>(k)];
    }
    if (out == 1) {
      G lx2 = gmul(lx[0], lx[0]);
      G ly2 = gmul(ly[0], ly[0]);
      s[0] = J::from_x(lx2);
      s[0] += J::from_y(ly2);
      inv[0] = jreciprocal(s[0]);
      pref2[0] = jmul_xy(lx[0], ly[0]);
      pref2[0].scale(2.0);
      prefsq[0] = jmul(pref2[0], inv[0]);
      d2sum = J{};
      for (int i = 0; i < D; ++i) {
        J d = diff_jet<double, D>(x, y, i);
        d2sum += jmul(d, d);
      }
      eacc = jmul(d2sum, inv[0]);
      if (D == 2) {
        pref = prefsq[0];
      } else {
        J acc = prefsq[0];
        for (int i = 1; i < D; ++i) acc = jmul(acc, prefsq[0]);
        prefprod = acc;
        pref = jsqrt(acc);
      }
    } else {
      eacc = J{};
      for (int i = 0; i < D; ++i) {
        const size_t k = static_cast<size_t>(i);
        G lx2 = gmul(lx[k], lx[k]);
        G ly2 = gmul(ly[k], ly[k]);
        s[k] = J::from_x(lx2);
        s[k] += J::from_y(ly2);
        inv[k] = jreciprocal(s[k]);
        pref2[k] = jmul_xy(lx[k], ly[k]);
        pref2[k].scale(2.0);
        prefsq[k] = jmul(pref2[k], inv[k]);
        J d = diff_jet<double, D>(x, y, i);
        d2[k] = jmul(d, d);
        e[k] = jmul(d2[k], inv[k]);
        eacc += e[k];
      }
      prefprod = jmul(prefsq[0], prefsq[1]);
      pref = jsqrt(prefprod);
    }
    xe = jexp(-eacc);
    val = jmul(pref, xe);
  }

  /// Adjoint of one reciprocal/sqrt-composed value given the saved input.
  static J unary_adjoint(const std::array<double, 6>& coeffs, const J& input, const J& outbar) {
    J dser = jcompose_dseries(coeffs, input);
    J inbar;
    jmul_adjoint_left(inbar, dser, outbar);
    return inbar;
  }

  void backward(const J& valbar, std::vector<G>& lxbar, std::vector<G>& lybar) const {
    constexpr int Q = Monos<D>::Q;
    lxbar.assign(static_cast<size_t>(out), G{});
    lybar.assign(static_cast<size_t>(out), G{});
    J prefbar, xebar;
    jmul_adjoint_left(prefbar, xe, valbar);
    jmul_adjoint_left(xebar, pref, valbar);
    J eaccbar;
    jmul_adjoint_left(eaccbar, xe, xebar);
    eaccbar = -eaccbar;  // xe = exp(-eacc)

    auto lengthscale_adjoints = [&](int k, const J& prefsq_bar, const J& extra_invbar) {
      const size_t ku = static_cast<size_t>(k);
      J pref2bar, invbar = extra_invbar;
      jmul_adjoint_left(pref2bar, inv[ku], prefsq_bar);
      jmul_adjoint_left(invbar, pref2[ku], prefsq_bar);
      J sbar = unary_adjoint(recip_coeffs(s[ku].c[0]), s[ku], invbar);
      G lx2bar, ly2bar;
      for (int i = 0; i < Q; ++i) {
        lx2bar.c[static_cast<size_t>(i)] = sbar.c[static_cast<size_t>(i * Q)];
        ly2bar.c[static_cast<size_t>(i)] = sbar.c[static_cast<size_t>(i)];
      }
      // lx2 = lx*lx (both slots identical)
      G tmp;
      gmul_adjoint_left(tmp, lx[ku], lx2bar);
      for (int i = 0; i < Q; ++i) lxbar[ku].c[static_cast<size_t>(i)] += 2.0 * tmp.c[static_cast<size_t>(i)];
      G tmp2;
      gmul_adjoint_left(tmp2, ly[ku], ly2bar);
      for (int i = 0; i < Q; ++i) lybar[ku].c[static_cast<size_t>(i)] += 2.0 * tmp2.c[static_cast<size_t>(i)];
      // pref2 = 2 * outer(lx, ly)
      for (int i = 0; i < Q; ++i)
        for (int j = 0; j < Q; ++j) {
          const double pb = pref2bar.c[static_cast<size_t>(i * Q + j)];
          lxbar[ku].c[static_cast<size_t>(i)] += 2.0 * ly[ku].c[static_cast<size_t>(j)] * pb;
          lybar[ku].c[static_cast<size_t>(j)] += 2.0 * lx[ku].c[static_cast<size_t>(i)] * pb;
        }
    };

    if (out == 1) {
      J invbar_e;
      jmul_adjoint_left(invbar_e, d2sum, eaccbar);  // eacc = d2sum * inv
      J prefsq_bar = prefbar;
      if (D != 2) {
        J prodbar = unary_adjoint(sqrt_coeffs(prefprod.c[0]), prefprod, prefbar);
        // prefprod = prefsq^D; adjoint: D * prefsq^(D-1) correlated — for the
        // supported problems D == 2 short-circuits above, so handle D==1 only.
        prefsq_bar = prodbar;
      }
      lengthscale_adjoints(0, prefsq_bar, invbar_e);
    } else {
      J prodbar = unary_adjoint(sqrt_coeffs(prefprod.c[0]), prefprod, prefbar);
      J prefsq0bar, prefsq1bar;
      jmul_adjoint_left(prefsq0bar, prefsq[1], prodbar);
      jmul_adjoint_left(prefsq1bar, prefsq[0], prodbar);
      for (int k = 0; k < 2; ++k) {
        J invbar_e;
        jmul_adjoint_left(invbar_e, d2[static_cast<size_t>(k)], eaccbar);  // e_k = d2_k * inv_k
        lengthscale_adjoints(k, k == 0 ? prefsq0bar : prefsq1bar, invbar_e);
      }
    }
  }
};

template <int D>
inline std::vector<double> gibbs_vjp_entry(const KernelSpec& spec, const double* theta_block,
                                           int nparams, const Point& x, const MultiIndex& alpha,
                                           const Point& y, const MultiIndex& beta, double wbar) {
  ThetaViewD th{theta_block};
  MlpJetTrace<double, D> tx, ty;
  mlp_forward_jet<double, D>(spec.mlp, th, x, &tx);
  mlp_forward_jet<double, D>(spec.mlp, th, y, &ty);
  GibbsTrace<D> trace;
  trace.forward(tx.outputs, ty.outputs, x, y);

  const auto& g = Monos<D>::get();
  const int ia = g.index_of(alpha), ib = g.index_of(beta);
  Jet<double, D> valbar;
  valbar.c[static_cast<size_t>(ia * Monos<D>::Q + ib)] =
      wbar * g.mono[static_cast<size_t>(ia)].factorial * g.mono[static_cast<size_t>(ib)].factorial;

  std::vector<GJet<double, D>> lxbar, lybar;
  trace.backward(valbar, lxbar, lybar);

  std::vector<double> grad(static_cast<size_t>(nparams), 0.0);
  std::vector<double> th_vec(theta_block, theta_block + nparams);
  mlp_backward_jet<D>(spec.mlp, th_vec, 0, tx, lxbar, grad, 0);
  mlp_backward_jet<D>(spec.mlp, th_vec, 0, ty, lybar, grad, 0);
  return grad;
}

}  // namespace detail

inline std::vector<double> kernel_param_vjp_block(const KernelSpec& spec, const ParamVector& theta,
                                                  int comp, const Point& x, const MultiIndex& alpha,
                                                  const Point& y, const MultiIndex& beta,
                                                  double wbar) {
  detail::check_orders(alpha, beta);
  const int np = spec.param_count();
  std::vector<double> grad(static_cast<size_t>(np), 0.0);
  if (wbar == 0.0) return grad;
  if (spec.variant == KernelSpec::Variant::GibbsMlp) {
    grad = detail::dispatch_dim(spec.dim, [&](auto dc) {
      constexpr int D = decltype(dc)::value;
      return detail::gibbs_vjp_entry<D>(spec, theta.block(comp), np, x, alpha, y, beta, wbar);
    });
  } else {
    detail::dispatch_dim(spec.dim, [&](auto dc) {
      constexpr int D = decltype(dc)::value;
      detail::ThetaViewSlots<4> th{theta.block(comp)};
      const Dual<4> v = detail::kernel_jet<Dual<4>, D>(spec, th, x, y).deriv(alpha, beta);
      for (int i = 0; i < np; ++i) grad[static_cast<size_t>(i)] = wbar * v.d[static_cast<size_t>(i)];
      return 0;
    });
  }
  for (auto& g : grad) g *= param_grad_corruption();
  return grad;
}

}  // namespace gppde
