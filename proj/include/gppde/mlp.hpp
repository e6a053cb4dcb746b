#pragma once

#include <vector>

#include "gppde/core.hpp"
#include "gppde/jet.hpp"
#include "gppde/rng.hpp"

namespace gppde {

/// Fully connected tanh network mapping a point to `out` lengthscale values
/// (positivity is applied by the caller through softplus). Parameters are the
/// flattened [W1|b1|W2|b2|...] vector in declaration order.
struct MlpSpec {
  int in = 2;
  std::vector<int> hidden{50, 50};
  int out = 1;

  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }
  int layer_in(int l) const { return l == 0 ? in : hidden[static_cast<size_t>(l - 1)]; }
  int layer_out(int l) const {
    return l == layer_count() - 1 ? out : hidden[static_cast<size_t>(l)];
  }
  int param_count() const {
    int n = 0;
    for (int l = 0; l < layer_count(); ++l) n += layer_out(l) * (layer_in(l) + 1);
    return n;
  }
  int weight_offset(int l) const {
    int off = 0;
    for (int k = 0; k < l; ++k) off += layer_out(k) * (layer_in(k) + 1);
    return off;
  }
  int bias_offset(int l) const { return weight_offset(l) + layer_out(l) * layer_in(l); }
};

/// Glorot-uniform weights, zero biases; the stream comes from the run seed.
inline std::vector<double> glorot_init(const MlpSpec& spec, Rng& rng) {
  std::vector<double> w(static_cast<size_t>(spec.param_count()), 0.0);
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int ni = spec.layer_in(l), no = spec.layer_out(l);
    const double bound = std::sqrt(6.0 / (ni + no));
    const int off = spec.weight_offset(l);
    for (int k = 0; k < ni * no; ++k)
      w[static_cast<size_t>(off + k)] = rng.uniform(-bound, bound);
  }
  return w;
}

/// Forward pass with jet-valued signals. WeightFn maps a flat parameter index
/// to the coefficient scalar type (double for plain evaluation, Dual<1> for
/// hyperparameter tangents). Activations are stored for the reverse pass.
template <class T, int D>
struct MlpJetTrace {
  std::vector<std::vector<GJet<T, D>>> inputs;   // per layer, pre-affine signals
  std::vector<std::vector<GJet<T, D>>> preacts;  // per layer, pre-activation signals
  std::vector<GJet<T, D>> outputs;               // post-softplus lengthscale jets
};

template <class T, int D, class WeightFn>
inline void mlp_forward_jet(const MlpSpec& spec, const WeightFn& weight, const Point& p,
                            MlpJetTrace<T, D>* trace) {
  const int L = spec.layer_count();
  trace->inputs.assign(static_cast<size_t>(L), {});
  trace->preacts.assign(static_cast<size_t>(L), {});
  std::vector<GJet<T, D>> sig(static_cast<size_t>(spec.in));
  for (int i = 0; i < spec.in; ++i) sig[static_cast<size_t>(i)] = GJet<T, D>::variable(T(p[i]), i);
  for (int l = 0; l < L; ++l) {
    const int ni = spec.layer_in(l), no = spec.layer_out(l);
    trace->inputs[static_cast<size_t>(l)] = sig;
    std::vector<GJet<T, D>> z(static_cast<size_t>(no));
    const int woff = spec.weight_offset(l), boff = spec.bias_offset(l);
    for (int o = 0; o < no; ++o) {
      GJet<T, D> acc;
      acc.c[0] = weight(boff + o);
      for (int i = 0; i < ni; ++i) {
        const T w = weight(woff + o * ni + i);
        for (int q = 0; q < GJet<T, D>::Q; ++q)
          acc.c[static_cast<size_t>(q)] += sig[static_cast<size_t>(i)].c[static_cast<size_t>(q)] * w;
      }
      z[static_cast<size_t>(o)] = acc;
    }
    trace->preacts[static_cast<size_t>(l)] = z;
    if (l + 1 < L) {
      sig.resize(static_cast<size_t>(no));
      for (int o = 0; o < no; ++o) sig[static_cast<size_t>(o)] = gtanh(z[static_cast<size_t>(o)]);
    } else {
      trace->outputs.resize(static_cast<size_t>(no));
      for (int o = 0; o < no; ++o)
        trace->outputs[static_cast<size_t>(o)] = gsoftplus(z[static_cast<size_t>(o)]);
    }
  }
}

/// Reverse pass for double-coefficient traces: given cotangents of the output
/// lengthscale jets, accumulates parameter gradients into grad (flat layout).
template <int D>
inline void mlp_backward_jet(const MlpSpec& spec, const std::vector<double>& theta, int theta_off,
                             const MlpJetTrace<double, D>& trace,
                             const std::vector<GJet<double, D>>& out_cotangents,
                             std::vector<double>& grad, int grad_off) {
  const int L = spec.layer_count();
  std::vector<GJet<double, D>> bar(static_cast<size_t>(spec.out));
  // softplus adjoint: zbar = D_series(softplus, z) (.)multiplied with outbar
  for (int o = 0; o < spec.out; ++o) {
    const auto& z = trace.preacts[static_cast<size_t>(L - 1)][static_cast<size_t>(o)];
    GJet<double, D> dser = gcompose_dseries(detail::softplus_coeffs(z.c[0]), z);
    GJet<double, D> zbar;
    gmul_adjoint_left(zbar, dser, out_cotangents[static_cast<size_t>(o)]);
    bar[static_cast<size_t>(o)] = zbar;
  }
  for (int l = L - 1; l >= 0; --l) {
    const int ni = spec.layer_in(l), no = spec.layer_out(l);
    const int woff = spec.weight_offset(l), boff = spec.bias_offset(l);
    const auto& in = trace.inputs[static_cast<size_t>(l)];
    std::vector<GJet<double, D>> inbar(static_cast<size_t>(ni));
    for (int o = 0; o < no; ++o) {
      const auto& zb = bar[static_cast<size_t>(o)];
      grad[static_cast<size_t>(grad_off + boff + o)] += zb.c[0];
      for (int i = 0; i < ni; ++i) {
        double dot = 0.0;
        const double w = theta[static_cast<size_t>(theta_off + woff + o * ni + i)];
        for (int q = 0; q < GJet<double, D>::Q; ++q) {
          dot += zb.c[static_cast<size_t>(q)] * in[static_cast<size_t>(i)].c[static_cast<size_t>(q)];
          inbar[static_cast<size_t>(i)].c[static_cast<size_t>(q)] += w * zb.c[static_cast<size_t>(q)];
        }
        grad[static_cast<size_t>(grad_off + woff + o * ni + i)] += dot;
      }
    }
    if (l > 0) {
      // chain through the previous layer's tanh
      const int prev_no = spec.layer_out(l - 1);
      std::vector<GJet<double, D>> prev_bar(static_cast<size_t>(prev_no));
      for (int o = 0; o < prev_no; ++o) {
        const auto& z = trace.preacts[static_cast<size_t>(l - 1)][static_cast<size_t>(o)];
        GJet<double, D> dser = gcompose_dseries(detail::tanh_coeffs(z.c[0]), z);
        gmul_adjoint_left(prev_bar[static_cast<size_t>(o)], dser, inbar[static_cast<size_t>(o)]);
      }
      bar = std::move(prev_bar);
    }
  }
}

/// Plain scalar forward; returns the post-softplus lengthscale values.
inline std::vector<double> mlp_forward_scalar(const MlpSpec& spec, const std::vector<double>& theta,
                                              int theta_off, const Point& p) {
  const int L = spec.layer_count();
  std::vector<double> sig(static_cast<size_t>(spec.in));
  for (int i = 0; i < spec.in; ++i) sig[static_cast<size_t>(i)] = p[i];
  for (int l = 0; l < L; ++l) {
    const int ni = spec.layer_in(l), no = spec.layer_out(l);
    const int woff = spec.weight_offset(l), boff = spec.bias_offset(l);
    std::vector<double> z(static_cast<size_t>(no));
    for (int o = 0; o < no; ++o) {
      double acc = theta[static_cast<size_t>(theta_off + boff + o)];
      for (int i = 0; i < ni; ++i)
        acc += theta[static_cast<size_t>(theta_off + woff + o * ni + i)] * sig[static_cast<size_t>(i)];
      z[static_cast<size_t>(o)] = acc;
    }
    if (l + 1 < L) {
      sig.resize(static_cast<size_t>(no));
      for (int o = 0; o < no; ++o) sig[static_cast<size_t>(o)] = std::tanh(z[static_cast<size_t>(o)]);
    } else {
      for (auto& v : z) v = softplus(v);
      return z;
    }
  }
  return {};
}

}  // namespace gppde
