#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gppde/assemblers.hpp"
#include "gppde/inner_solver.hpp"
#include "gppde/problems.hpp"

namespace gppde {

enum class RunMode { DTO, OTD };
enum class GradientMode { Tangent, Adjoint, FD };

struct RunConfig {
  RunMode mode = RunMode::DTO;
  int gn_iters = 30;
  int adam_steps = 50;
  double learning_rate = 1e-2;
  int batch_interior = 200;
  int batch_boundary = 200;  // per boundary/initial group, capped at pool size
  double nugget = 1e-10;
  uint64_t seed = 0;
  double lambda_reg = 0.0;
  double tol = 0.0;  // early stop on ||theta_{k+1} - theta_k||_inf (constrained values)
  GradientMode gradient_mode = GradientMode::Tangent;
  double eta_boundary = 0.0;  // weight of boundary/initial validation terms
  double eta_data = 0.0;      // Darcy eta2 (per-observation weight, summed)
  double gamma = 1e-3;        // Darcy observation noise level
  int max_consecutive_rejects = 10;
  double fd_step = 1e-5;
  int tangent_param_limit = 16;
  int fd_param_limit = 64;
};

struct AdamState {
  Vector m, v;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState zeros(int n) {
    AdamState a;
    a.m = Vector::Zero(n);
    a.v = Vector::Zero(n);
    return a;
  }
};

/// Standard bias-corrected Adam update in the unconstrained parameterization.
/// Returns false (moments and theta untouched) on a non-finite gradient.
inline bool adam_step(AdamState& a, ParamVector& theta, const Vector& grad, double lr) {
  if (!grad.allFinite()) return false;
  a.t += 1;
  a.m = a.beta1 * a.m + (1.0 - a.beta1) * grad;
  a.v = a.beta2 * a.v + (1.0 - a.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(a.t));
  const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(a.t));
  Vector mhat = a.m / c1;
  Vector vhat = a.v / c2;
  theta.raw -= lr * mhat.cwiseQuotient(vhat.cwiseSqrt().array().matrix() +
                                       Vector::Constant(vhat.size(), a.eps));
  return true;
}

struct IterationRecord {
  Vector theta_constrained;
  double batch_loss = 0.0;        // linearized mini-batch loss at the last step
  double full_loss = 0.0;         // linearized loss on the full validation pool
  double nonlinear_loss = 0.0;    // nonlinear residual loss of the updated state
  double inner_residual = 0.0;    // linear-system residual of the state solve
  double seconds = 0.0;
  int rejected_steps = 0;
};

struct RunReport {
  std::vector<IterationRecord> iters;
  ParamVector theta0, theta_final;
  Vector theta0_constrained, theta_final_constrained;
  uint64_t seed = 0;
  double wall_seconds = 0.0;
  bool aborted = false;
  std::string abort_reason;
  int total_rejected = 0;
  // recorded modeling choices for the MLP kernels
  std::string mlp_init = "glorot_uniform";
  std::string mlp_output_map = "softplus";
  std::string adam_moments = "persist_across_gn_iterations";
};

namespace detail {

struct LossRowInfo {
  int group = 0;  // 0 interior, 1 boundary, 2 initial, 3 observation
  double y = 0.0;
  int a_row = -1;  // inverse problems: index into the a-side cross assembler
};

struct Batch {
  std::vector<int> rows;  // loss-row indices
  Vector weights;         // per row
};

}  // namespace detail

/// Everything frozen within one Gauss-Newton iteration: the linearized inner
/// system at the previous state and the linearized validation rows, with
/// assemblers baked once so each hyperparameter step costs an exponential-
/// polynomial pass plus a Cholesky.
class OuterContext {
 public:
  OuterContext(const ProblemSpec& p, std::vector<KernelSpec> kernels, const GnState* prev,
               const PointSets& pts, const RunConfig& cfg,
               const std::vector<std::pair<Point, double>>& observations)
      : problem_(p), kernels_(std::move(kernels)), cfg_(cfg), pts_(&pts) {
    li_ = assemble(p, prev, pts, kernels_, ParamVector::zeros(kernels_));
    inverse_ = p.name == ProblemName::DarcyInverse;
    build_loss_rows(p, prev, pts, observations);
    if (!inverse_) {
      gram_ = std::make_unique<Assembler>(Assembler::make_gram(kernels_, li_.Phi));
      cross_ = std::make_unique<Assembler>(Assembler::make_cross(kernels_, u_rows_, li_.Phi));
    } else {
      obs_values_ = Vector::Zero(static_cast<Eigen::Index>(observations.size()));
      for (size_t l = 0; l < observations.size(); ++l) {
        obs_points_.push_back(observations[l].first);
        obs_values_[static_cast<Eigen::Index>(l)] = observations[l].second;
      }
      sets_ = split_inverse_sets(li_, obs_points_);
      gram_ = std::make_unique<Assembler>(Assembler::make_gram(kernels_, sets_.fu));
      gram_a_ = std::make_unique<Assembler>(Assembler::make_gram(kernels_, sets_.fa));
      cross_ = std::make_unique<Assembler>(Assembler::make_cross(kernels_, u_rows_, sets_.fu));
      if (!a_rows_.empty())
        cross_a_ = std::make_unique<Assembler>(Assembler::make_cross(kernels_, a_rows_, sets_.fa));
    }
  }

  const LinearizedInner& inner() const { return li_; }
  int loss_row_count() const { return static_cast<int>(rows_info_.size()); }
  int pool_points(int group) const { return static_cast<int>(group_points_[static_cast<size_t>(group)].size()); }

  /// Mini-batch of point draws (without replacement) per group, plus all
  /// observation rows; weights follow the empirical-loss normalization.
  detail::Batch make_batch(Rng& rng) const {
    detail::Batch b;
    std::vector<int> counts(4, 0);
    std::vector<std::vector<int>> chosen(4);
    for (int g = 0; g < 3; ++g) {
      const auto& pool = group_points_[static_cast<size_t>(g)];
      if (pool.empty()) continue;
      const int want = g == 0 ? cfg_.batch_interior : cfg_.batch_boundary;
      const size_t take = std::min<size_t>(pool.size(), static_cast<size_t>(std::max(1, want)));
      auto idx = sample_without_replacement(pool.size(), take, rng);
      for (auto i : idx) chosen[static_cast<size_t>(g)].push_back(static_cast<int>(i));
      counts[static_cast<size_t>(g)] = static_cast<int>(take);
    }
    for (int g = 0; g < 3; ++g)
      for (int pi : chosen[static_cast<size_t>(g)])
        for (int r : group_points_[static_cast<size_t>(g)][static_cast<size_t>(pi)])
          b.rows.push_back(r);
    for (int r : obs_rows_) b.rows.push_back(r);
    b.weights = Vector::Zero(static_cast<Eigen::Index>(b.rows.size()));
    for (size_t k = 0; k < b.rows.size(); ++k) {
      const auto& info = rows_info_[static_cast<size_t>(b.rows[k])];
      double wgt = 0.0;
      if (info.group == 0) wgt = 1.0 / counts[0];
      else if (info.group == 3) wgt = cfg_.eta_data;
      else wgt = cfg_.eta_boundary / std::max(1, counts[static_cast<size_t>(info.group)]);
      b.weights[static_cast<Eigen::Index>(k)] = wgt;
    }
    return b;
  }

  /// The full-pool batch (every loss row with its pool normalization).
  detail::Batch full_batch() const {
    detail::Batch b;
    int n_int = pool_points(0), n_b = pool_points(1), n_c = pool_points(2);
    for (int r = 0; r < loss_row_count(); ++r) b.rows.push_back(r);
    b.weights = Vector::Zero(loss_row_count());
    for (int r = 0; r < loss_row_count(); ++r) {
      const auto& info = rows_info_[static_cast<size_t>(r)];
      double wgt = 0.0;
      if (info.group == 0) wgt = 1.0 / std::max(1, n_int);
      else if (info.group == 1) wgt = cfg_.eta_boundary / std::max(1, n_b);
      else if (info.group == 2) wgt = cfg_.eta_boundary / std::max(1, n_c);
      else wgt = cfg_.eta_data;
      b.weights[r] = wgt;
    }
    return b;
  }

  struct Eval {
    bool rejected = false;
    double loss = std::numeric_limits<double>::infinity();
    Vector grad;  // empty unless a gradient mode was requested
  };

  /// Linearized outer loss (and optional hypergradient) at theta on a batch.
  Eval evaluate(const ParamVector& theta, const detail::Batch& batch,
                std::optional<GradientMode> grad_mode) const {
    Eval out;
    if (grad_mode && *grad_mode == GradientMode::FD) {
      out = evaluate(theta, batch, std::nullopt);
      if (out.rejected) return out;
      out.grad = fd_grad(theta, batch, all_params(theta));
      return out;
    }
    return inverse_ ? eval_inverse(theta, batch, grad_mode) : eval_forward(theta, batch, grad_mode);
  }

  Vector fd_grad(const ParamVector& theta, const detail::Batch& batch,
                 const std::vector<int>& coords, double step = 0.0) const {
    const double h = step > 0.0 ? step : cfg_.fd_step;
    Vector g = Vector::Zero(theta.total());
    for (int i : coords) {
      ParamVector tp = theta, tm = theta;
      tp.raw[i] += h;
      tm.raw[i] -= h;
      const Eval ep = evaluate(tp, batch, std::nullopt);
      const Eval em = evaluate(tm, batch, std::nullopt);
      g[i] = (ep.loss - em.loss) / (2.0 * h);
    }
    return g;
  }

  /// Pi_k(theta): the inner state at theta for this iteration's linearization.
  GnState solve_state(const ParamVector& theta) const {
    if (!inverse_) {
      gram_->set_theta(theta);
      SymMatrix K = gram_->assemble_sym();
      CholFactor F;
      try {
        F = cholesky_nugget(K, cfg_.nugget);
      } catch (const NotPositiveDefinite& e) {
        throw RejectedTheta(e.what());
      }
      GnState s;
      s.kernels = kernels_;
      s.theta = theta;
      s.nugget = cfg_.nugget;
      s.phi = std::make_shared<FunctionalSet>(li_.Phi);
      s.z = F.solve(li_.b);
      return s;
    }
    auto fac = factorize_inverse(theta);
    GnState s;
    s.kernels = kernels_;
    s.theta = theta;
    s.nugget = cfg_.nugget;
    s.inverse = true;
    s.fu = std::make_shared<FunctionalSet>(sets_.fu);
    s.fa = std::make_shared<FunctionalSet>(sets_.fa);
    s.a_row_of = sets_.a_row_of;
    s.lambda = fac.lambda;
    s.w = -0.5 * fac.lambda;
    s.wa = Vector::Zero(static_cast<Eigen::Index>(sets_.fa.size()));
    const int M = static_cast<int>(li_.Phi.size());
    for (int r = 0; r < M; ++r)
      if (sets_.a_row_of[static_cast<size_t>(r)] >= 0)
        s.wa[sets_.a_row_of[static_cast<size_t>(r)]] = -0.5 * fac.lambda[r];
    s.slack = 0.5 * cfg_.gamma * cfg_.gamma * fac.lambda.tail(static_cast<int>(obs_points_.size()));
    return s;
  }

  /// Nonlinear (non-linearized) residual loss of a state on the full pools;
  /// stored per iteration for interpretability.
  double nonlinear_loss(const GnState& s) const {
    const auto& p = problem_;
    double acc = 0.0;
    const auto& vi = pts_->validation_interior;
    if (!vi.empty()) {
      auto feats = features_batch(p, s, vi);
      double sum = 0.0;
      for (size_t i = 0; i < vi.size(); ++i) {
        for (double rv : residual(p, feats[i], vi[i])) sum += rv * rv;
      }
      acc += sum / static_cast<double>(vi.size());
    }
    if (cfg_.eta_boundary > 0.0) {
      for (int g = 1; g <= 2; ++g) {
        const auto& pool = g == 1 ? pts_->validation_boundary : pts_->validation_initial;
        if (pool.empty()) continue;
        double sum = 0.0;
        for (const auto& q : pool)
          for (const auto& le : boundary_rows(p, q, g == 2)) {
            double v = 0.0;
            for (const auto& part : le.row.parts) v += gppde::evaluate(s, part);
            sum += (v - le.rhs) * (v - le.rhs);
          }
        acc += cfg_.eta_boundary * sum / static_cast<double>(pool.size());
      }
    }
    if (inverse_ && cfg_.eta_data > 0.0) {
      for (size_t l = 0; l < obs_points_.size(); ++l) {
        const double v = gppde::evaluate(s, DiffFunctional::eval_at(0, obs_points_[l]));
        acc += cfg_.eta_data * (v - obs_values_[static_cast<Eigen::Index>(l)]) *
               (v - obs_values_[static_cast<Eigen::Index>(l)]);
      }
    }
    return acc;
  }

 private:
  struct InverseFactorization {
    CholFactor G;
    Vector lambda;
  };

  std::vector<int> all_params(const ParamVector& theta) const {
    std::vector<int> idx(static_cast<size_t>(theta.total()));
    for (int i = 0; i < theta.total(); ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
  }

  void build_loss_rows(const ProblemSpec& p, const GnState* prev, const PointSets& pts,
                       const std::vector<std::pair<Point, double>>& observations) {
    group_points_.assign(4, {});
    auto add_interior = [&](const std::vector<Point>& pool) {
      std::vector<StateFeatures> feats;
      if (prev && !prev->is_zero())
        feats = features_batch(p, *prev, pool);
      else
        feats.assign(pool.size(), StateFeatures::zeros(p));
      for (size_t i = 0; i < pool.size(); ++i) {
        std::vector<int> rows_of_point;
        for (int eq = 0; eq < p.equation_count; ++eq) {
          LinearizedEquation le = linearize(p, feats[i], pool[i], eq);
          rows_of_point.push_back(add_loss_row(le, 0));
        }
        group_points_[0].push_back(std::move(rows_of_point));
      }
    };
    add_interior(pts.validation_interior);
    if (cfg_.eta_boundary > 0.0) {
      auto add_bnd = [&](const std::vector<Point>& pool, int group) {
        for (const auto& q : pool) {
          std::vector<int> rows_of_point;
          for (auto& le : boundary_rows(p, q, group == 2))
            rows_of_point.push_back(add_loss_row(le, group));
          group_points_[static_cast<size_t>(group)].push_back(std::move(rows_of_point));
        }
      };
      add_bnd(pts.validation_boundary, 1);
      add_bnd(pts.validation_initial, 2);
    }
    if (inverse_) {
      for (const auto& [q, val] : observations) {
        LinearizedEquation le;
        DiffFunctional f = DiffFunctional::eval_at(0, q);
        le.row.parts.push_back(std::move(f));
        le.rhs = val;
        obs_rows_.push_back(add_loss_row(le, 3));
      }
    }
  }

  int add_loss_row(const LinearizedEquation& le, int group) {
    detail::LossRowInfo info;
    info.group = group;
    info.y = le.rhs;
    if (!inverse_) {
      u_rows_.push_back(le.row);
    } else {
      CompositeRow ur, ar;
      for (const auto& part : le.row.parts) {
        if (part.component == 0) ur.parts.push_back(part);
        if (part.component == 1) ar.parts.push_back(part);
      }
      if (ur.parts.empty())
        throw std::invalid_argument("inverse loss rows must involve the state u");
      u_rows_.push_back(std::move(ur));
      if (!ar.parts.empty()) {
        info.a_row = static_cast<int>(a_rows_.size());
        a_rows_.push_back(std::move(ar));
      }
    }
    rows_info_.push_back(info);
    return static_cast<int>(rows_info_.size()) - 1;
  }

  Eval eval_forward(const ParamVector& theta, const detail::Batch& batch,
                    std::optional<GradientMode> grad_mode) const {
    Eval out;
    gram_->set_theta(theta);
    SymMatrix K = gram_->assemble_sym();
    CholFactor F;
    try {
      F = cholesky_nugget(K, cfg_.nugget);
    } catch (const NotPositiveDefinite&) {
      out.rejected = true;
      return out;
    }
    const Vector z = F.solve(li_.b);
    cross_->set_theta(theta);
    const Matrix R = cross_->assemble_rows(batch.rows);
    Vector resid(R.rows());
    for (Eigen::Index r = 0; r < R.rows(); ++r)
      resid[r] = R.row(r).dot(z) - rows_info_[static_cast<size_t>(batch.rows[static_cast<size_t>(r)])].y;
    out.loss = batch.weights.dot(resid.cwiseProduct(resid)) +
               cfg_.lambda_reg * theta.raw.squaredNorm();
    if (!grad_mode) return out;
    const Vector rbar = 2.0 * batch.weights.cwiseProduct(resid);
    if (*grad_mode == GradientMode::Tangent) {
      std::vector<ParamVector> dirs;
      for (int pi = 0; pi < theta.total(); ++pi) {
        ParamVector d = ParamVector::zeros(kernels_);
        d.raw[pi] = 1.0;
        dirs.push_back(std::move(d));
      }
      const auto dKz = gram_->tangent_times(dirs, z, {});
      const auto dRz = cross_->tangent_times(dirs, z, batch.rows);
      out.grad = Vector::Zero(theta.total());
      for (int pi = 0; pi < theta.total(); ++pi) {
        const Vector dz = -F.solve(dKz[static_cast<size_t>(pi)]);
        out.grad[pi] = rbar.dot(dRz[static_cast<size_t>(pi)] + R * dz);
      }
    } else {
      const Vector zbar = R.transpose() * rbar;
      const Vector mu = F.solve(zbar);
      out.grad = Vector::Zero(theta.total());
      gram_->vjp_gram(mu, z, -1.0, out.grad);
      cross_->vjp_cross(batch.rows, rbar, z, out.grad);
    }
    out.grad += 2.0 * cfg_.lambda_reg * theta.raw;
    return out;
  }

  InverseFactorization factorize_inverse(const ParamVector& theta) const {
    gram_->set_theta(theta);
    SymMatrix Ku = gram_->assemble_sym();
    Ku.m.diagonal().array() += cfg_.nugget;
    gram_a_->set_theta(theta);
    SymMatrix Ka = gram_a_->assemble_sym();
    Ka.m.diagonal().array() += cfg_.nugget;
    const int M = static_cast<int>(li_.Phi.size());
    const int L = static_cast<int>(obs_points_.size());
    Matrix G = Ku.m;
    for (int r = 0; r < M; ++r) {
      const int ra = sets_.a_row_of[static_cast<size_t>(r)];
      if (ra < 0) continue;
      for (int q = 0; q < M; ++q) {
        const int qa = sets_.a_row_of[static_cast<size_t>(q)];
        if (qa >= 0) G(r, q) += Ka.m(ra, qa);
      }
    }
    for (int l = 0; l < L; ++l) G(M + l, M + l) += cfg_.gamma * cfg_.gamma;
    CholFactor F;
    try {
      F = cholesky_nugget(SymMatrix(std::move(G)), 0.0);
    } catch (const NotPositiveDefinite& e) {
      throw RejectedTheta(e.what());
    }
    Vector c(M + L);
    c.head(M) = li_.b;
    c.tail(L) = obs_values_;
    InverseFactorization fac;
    fac.G = F;
    fac.lambda = F.solve(Vector(-2.0 * c));
    return fac;
  }

  Eval eval_inverse(const ParamVector& theta, const detail::Batch& batch,
                    std::optional<GradientMode> grad_mode) const {
    Eval out;
    InverseFactorization fac;
    try {
      fac = factorize_inverse(theta);
    } catch (const RejectedTheta&) {
      out.rejected = true;
      return out;
    }
    const int M = static_cast<int>(li_.Phi.size());
    const Vector w = -0.5 * fac.lambda;
    Vector wa = Vector::Zero(static_cast<Eigen::Index>(sets_.fa.size()));
    for (int r = 0; r < M; ++r)
      if (sets_.a_row_of[static_cast<size_t>(r)] >= 0)
        wa[sets_.a_row_of[static_cast<size_t>(r)]] = -0.5 * fac.lambda[r];

    cross_->set_theta(theta);
    const Matrix Ru = cross_->assemble_rows(batch.rows);
    std::vector<int> a_batch;
    std::vector<int> a_pos(batch.rows.size(), -1);
    for (size_t k = 0; k < batch.rows.size(); ++k) {
      const int ar = rows_info_[static_cast<size_t>(batch.rows[k])].a_row;
      if (ar >= 0) {
        a_pos[k] = static_cast<int>(a_batch.size());
        a_batch.push_back(ar);
      }
    }
    Matrix Ra;
    if (cross_a_ && !a_batch.empty()) {
      cross_a_->set_theta(theta);
      Ra = cross_a_->assemble_rows(a_batch);
    }
    Vector resid(static_cast<Eigen::Index>(batch.rows.size()));
    for (size_t k = 0; k < batch.rows.size(); ++k) {
      double v = Ru.row(static_cast<Eigen::Index>(k)).dot(w);
      if (a_pos[k] >= 0) v += Ra.row(a_pos[k]).dot(wa);
      resid[static_cast<Eigen::Index>(k)] = v - rows_info_[static_cast<size_t>(batch.rows[k])].y;
    }
    out.loss = batch.weights.dot(resid.cwiseProduct(resid)) +
               cfg_.lambda_reg * theta.raw.squaredNorm();
    if (!grad_mode) return out;
    const Vector rbar = 2.0 * batch.weights.cwiseProduct(resid);

    if (*grad_mode == GradientMode::Tangent) {
      std::vector<ParamVector> dirs;
      for (int pi = 0; pi < theta.total(); ++pi) {
        ParamVector d = ParamVector::zeros(kernels_);
        d.raw[pi] = 1.0;
        dirs.push_back(std::move(d));
      }
      Vector lam_a = Vector::Zero(static_cast<Eigen::Index>(sets_.fa.size()));
      for (int r = 0; r < M; ++r)
        if (sets_.a_row_of[static_cast<size_t>(r)] >= 0)
          lam_a[sets_.a_row_of[static_cast<size_t>(r)]] = fac.lambda[r];
      const auto dKu_l = gram_->tangent_times(dirs, fac.lambda, {});
      const auto dKa_l = gram_a_->tangent_times(dirs, lam_a, {});
      const auto dRu_w = cross_->tangent_times(dirs, w, batch.rows);
      std::vector<Vector> dRa_wa;
      if (cross_a_ && !a_batch.empty()) dRa_wa = cross_a_->tangent_times(dirs, wa, a_batch);
      out.grad = Vector::Zero(theta.total());
      for (int pi = 0; pi < theta.total(); ++pi) {
        Vector dGl = dKu_l[static_cast<size_t>(pi)];
        for (int r = 0; r < M; ++r)
          if (sets_.a_row_of[static_cast<size_t>(r)] >= 0)
            dGl[r] += dKa_l[static_cast<size_t>(pi)][sets_.a_row_of[static_cast<size_t>(r)]];
        const Vector dlam = -fac.G.solve(dGl);
        const Vector dw = -0.5 * dlam;
        Vector dwa = Vector::Zero(wa.size());
        for (int r = 0; r < M; ++r)
          if (sets_.a_row_of[static_cast<size_t>(r)] >= 0)
            dwa[sets_.a_row_of[static_cast<size_t>(r)]] = -0.5 * dlam[r];
        double g = 0.0;
        for (size_t k = 0; k < batch.rows.size(); ++k) {
          double dv = dRu_w[static_cast<size_t>(pi)][static_cast<Eigen::Index>(k)] +
                      Ru.row(static_cast<Eigen::Index>(k)).dot(dw);
          if (a_pos[k] >= 0)
            dv += dRa_wa[static_cast<size_t>(pi)][a_pos[k]] + Ra.row(a_pos[k]).dot(dwa);
          g += rbar[static_cast<Eigen::Index>(k)] * dv;
        }
        out.grad[pi] = g;
      }
    } else {
      Vector wbar = Ru.transpose() * rbar;
      Vector wabar = Vector::Zero(wa.size());
      if (cross_a_ && !a_batch.empty()) {
        Vector rbar_a = Vector::Zero(static_cast<Eigen::Index>(a_batch.size()));
        for (size_t k = 0; k < batch.rows.size(); ++k)
          if (a_pos[k] >= 0) rbar_a[a_pos[k]] = rbar[static_cast<Eigen::Index>(k)];
        wabar = Ra.transpose() * rbar_a;
        out.grad = Vector::Zero(theta.total());
        cross_a_->vjp_cross(a_batch, rbar_a, wa, out.grad);
      } else {
        out.grad = Vector::Zero(theta.total());
      }
      cross_->vjp_cross(batch.rows, rbar, w, out.grad);
      Vector lambar = -0.5 * wbar;
      for (int r = 0; r < M; ++r)
        if (sets_.a_row_of[static_cast<size_t>(r)] >= 0)
          lambar[r] -= 0.5 * wabar[sets_.a_row_of[static_cast<size_t>(r)]];
      const Vector mu = fac.G.solve(lambar);
      gram_->vjp_gram(mu, fac.lambda, -1.0, out.grad);
      Vector mu_a = Vector::Zero(static_cast<Eigen::Index>(sets_.fa.size()));
      Vector lam_a = Vector::Zero(static_cast<Eigen::Index>(sets_.fa.size()));
      for (int r = 0; r < M; ++r)
        if (sets_.a_row_of[static_cast<size_t>(r)] >= 0) {
          mu_a[sets_.a_row_of[static_cast<size_t>(r)]] = mu[r];
          lam_a[sets_.a_row_of[static_cast<size_t>(r)]] = fac.lambda[r];
        }
      gram_a_->vjp_gram(mu_a, lam_a, -1.0, out.grad);
    }
    out.grad += 2.0 * cfg_.lambda_reg * theta.raw;
    return out;
  }

  ProblemSpec problem_;
  std::vector<KernelSpec> kernels_;
  RunConfig cfg_;
  const PointSets* pts_;
  LinearizedInner li_;
  bool inverse_ = false;
  InverseSets sets_;
  std::vector<Point> obs_points_;
  Vector obs_values_ = Vector::Zero(0);
  std::vector<CompositeRow> u_rows_, a_rows_;
  std::vector<detail::LossRowInfo> rows_info_;
  std::vector<std::vector<std::vector<int>>> group_points_;  // group -> point -> row indices
  std::vector<int> obs_rows_;
  std::unique_ptr<Assembler> gram_, gram_a_, cross_, cross_a_;
};

// ---- spec-level operations -------------------------------------------------

/// Linearized empirical outer loss at theta for a given previous state.
inline double outer_loss(const ProblemSpec& p, const std::vector<KernelSpec>& kernels,
                         const GnState* prev, const PointSets& pts, const RunConfig& cfg,
                         const ParamVector& theta,
                         const std::vector<std::pair<Point, double>>& observations = {}) {
  OuterContext ctx(p, kernels, prev, pts, cfg, observations);
  const auto ev = ctx.evaluate(theta, ctx.full_batch(), std::nullopt);
  return ev.loss;
}

inline Vector hypergrad_tangent(const OuterContext& ctx, const ParamVector& theta,
                                const detail::Batch& batch, const RunConfig& cfg) {
  if (theta.total() > cfg.tangent_param_limit)
    throw std::invalid_argument("hypergrad_tangent: parameter count exceeds the guard; use adjoint");
  auto ev = ctx.evaluate(theta, batch, GradientMode::Tangent);
  if (ev.rejected) throw RejectedTheta("hypergrad_tangent: inner solve rejected");
  return ev.grad;
}

inline Vector hypergrad_adjoint(const OuterContext& ctx, const ParamVector& theta,
                                const detail::Batch& batch) {
  auto ev = ctx.evaluate(theta, batch, GradientMode::Adjoint);
  if (ev.rejected) throw RejectedTheta("hypergrad_adjoint: inner solve rejected");
  return ev.grad;
}

inline Vector hypergrad_fd(const OuterContext& ctx, const ParamVector& theta,
                           const detail::Batch& batch, const RunConfig& cfg,
                           std::vector<int> coords = {}) {
  if (coords.empty()) {
    if (theta.total() > cfg.fd_param_limit)
      throw std::invalid_argument("hypergrad_fd: parameter count exceeds the guard");
    for (int i = 0; i < theta.total(); ++i) coords.push_back(i);
  }
  return ctx.fd_grad(theta, batch, coords, cfg.fd_step);
}

/// The bilevel Gauss-Newton loop. Owns the collocation/validation draws and
/// the per-iteration contexts; deterministic given (config, seed).
class BilevelDriver {
 public:
  BilevelDriver(ProblemSpec p, std::vector<KernelSpec> kernels, RunConfig cfg, PointSets pts,
                std::vector<std::pair<Point, double>> observations = {})
      : problem_(std::move(p)), kernels_(std::move(kernels)), cfg_(cfg), pts_(std::move(pts)),
        observations_(std::move(observations)) {}

  const PointSets& points() const { return pts_; }
  const GnState& state() const { return state_; }
  const ProblemSpec& problem() const { return problem_; }

  /// Builds the frozen context for the previous state (the current one after
  /// run()); used by the landscape scan and gradcheck.
  std::unique_ptr<OuterContext> make_context(const GnState* prev) const {
    return std::make_unique<OuterContext>(problem_, kernels_, prev, pts_, cfg_, observations_);
  }

  RunReport run(const ParamVector& theta0) {
    const auto t_start = std::chrono::steady_clock::now();
    RunReport rep;
    rep.seed = cfg_.seed;
    rep.theta0 = theta0;
    rep.theta0_constrained = theta0.constrained(kernels_);
    ParamVector theta = theta0;
    AdamState adam = AdamState::zeros(theta.total());
    GnState prev;  // zero state
    int consecutive_rejects = 0;
    long global_step = 0;
    Vector last_theta_c = rep.theta0_constrained;

    for (int k = 0; k < cfg_.gn_iters; ++k) {
      const auto t_iter = std::chrono::steady_clock::now();
      if (cfg_.mode == RunMode::OTD) resample_validation(k);
      OuterContext ctx(problem_, kernels_, prev.is_zero() ? nullptr : &prev, pts_, cfg_,
                       observations_);
      IterationRecord rec;
      rec.rejected_steps = 0;
      double last_batch_loss = std::numeric_limits<double>::quiet_NaN();
      for (int s = 0; s < cfg_.adam_steps; ++s, ++global_step) {
        Rng brng(derive_seed(cfg_.seed, 0xBA7C4, static_cast<uint64_t>(global_step)));
        const auto batch = ctx.make_batch(brng);
        const auto ev = ctx.evaluate(theta, batch, gradient_mode_for(theta));
        if (ev.rejected || !std::isfinite(ev.loss)) {
          ++rec.rejected_steps;
          ++rep.total_rejected;
          ++consecutive_rejects;
          if (consecutive_rejects > cfg_.max_consecutive_rejects) {
            rep.aborted = true;
            rep.abort_reason = "consecutive rejected hyperparameter steps";
            break;
          }
          continue;
        }
        consecutive_rejects = 0;
        last_batch_loss = ev.loss;
        if (!adam_step(adam, theta, ev.grad, cfg_.learning_rate)) {
          ++rec.rejected_steps;  // non-finite gradient: step skipped, moments kept
          ++rep.total_rejected;
        }
      }
      if (rep.aborted) break;
      // state update u^{k+1} = Pi_k(theta^{k+1})
      try {
        GnState next = ctx.solve_state(theta);
        rec.inner_residual = constraint_residual(ctx.inner(), next);
        prev = std::move(next);
      } catch (const RejectedTheta&) {
        ++rep.total_rejected;
        if (++consecutive_rejects > cfg_.max_consecutive_rejects) {
          rep.aborted = true;
          rep.abort_reason = "state update rejected";
          break;
        }
      }
      rec.theta_constrained = theta.constrained(kernels_);
      rec.batch_loss = last_batch_loss;
      const auto full_ev = ctx.evaluate(theta, ctx.full_batch(), std::nullopt);
      rec.full_loss = full_ev.loss;
      if (!prev.is_zero()) rec.nonlinear_loss = ctx.nonlinear_loss(prev);
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_iter).count();
      rep.iters.push_back(rec);
      const double dtheta = (rec.theta_constrained - last_theta_c).cwiseAbs().maxCoeff();
      last_theta_c = rec.theta_constrained;
      if (cfg_.tol > 0.0 && dtheta <= cfg_.tol) break;
    }
    state_ = prev;
    rep.theta_final = theta;
    rep.theta_final_constrained = theta.constrained(kernels_);
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return rep;
  }

 private:
  GradientMode gradient_mode_for(const ParamVector& theta) const {
    if (cfg_.gradient_mode == GradientMode::Tangent && theta.total() > cfg_.tangent_param_limit)
      return GradientMode::Adjoint;
    return cfg_.gradient_mode;
  }

  void resample_validation(int k) {
    Rng r(derive_seed(cfg_.seed, 0x07D0, static_cast<uint64_t>(k)));
    pts_.validation_interior =
        sample_uniform(problem_.domain, pts_.validation_interior.size(), r);
    if (!pts_.validation_boundary.empty() || !pts_.validation_initial.empty()) {
      const size_t n = pts_.validation_boundary.size() + pts_.validation_initial.size();
      auto pts = sample_uniform(boundary_region(problem_), n, r);
      pts_.validation_boundary.clear();
      pts_.validation_initial.clear();
      const bool spacetime = problem_.name == ProblemName::Schrodinger ||
                             problem_.name == ProblemName::GrayScott ||
                             problem_.name == ProblemName::Burgers;
      for (const auto& q : pts) {
        if (spacetime && std::abs(q[0]) < 1e-14)
          pts_.validation_initial.push_back(q);
        else
          pts_.validation_boundary.push_back(q);
      }
    }
  }

  ProblemSpec problem_;
  std::vector<KernelSpec> kernels_;
  RunConfig cfg_;
  PointSets pts_;
  std::vector<std::pair<Point, double>> observations_;
  GnState state_;
};

/// Fixed-theta GP-PDE solve: successive Gauss-Newton linearizations from the
/// zero state. Records the nonlinear interior residual RMS per iteration and
/// flags divergence (non-finite or exploding residuals).
struct FromScratchResult {
  GnState state;
  std::vector<double> residual_rms;
  bool diverged = false;
};

inline FromScratchResult from_scratch_solve(const ProblemSpec& p,
                                            const std::vector<KernelSpec>& kernels,
                                            const ParamVector& theta, const PointSets& pts,
                                            int gn_iters, double nugget, double gamma = 1e-3,
                                            const std::vector<std::pair<Point, double>>& obs = {}) {
  FromScratchResult out;
  GnState prev;
  for (int k = 0; k < gn_iters; ++k) {
    LinearizedInner li = assemble(p, prev.is_zero() ? nullptr : &prev, pts, kernels, theta);
    GnState next;
    try {
      if (p.name == ProblemName::DarcyInverse) {
        std::vector<Point> op;
        Vector ov(static_cast<Eigen::Index>(obs.size()));
        for (size_t l = 0; l < obs.size(); ++l) {
          op.push_back(obs[l].first);
          ov[static_cast<Eigen::Index>(l)] = obs[l].second;
        }
        next = solve_with_observations_reduced(li, op, ov, gamma, kernels, theta, nugget);
      } else {
        next = solve(li, kernels, theta, nugget);
      }
    } catch (const RejectedTheta&) {
      out.diverged = true;
      break;
    }
    auto feats = features_batch(p, next, pts.interior);
    double sum = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < pts.interior.size(); ++i)
      for (double rv : residual(p, feats[i], pts.interior[i])) {
        sum += rv * rv;
        ++n;
      }
    const double rms = std::sqrt(sum / static_cast<double>(n));
    out.residual_rms.push_back(rms);
    if (!std::isfinite(rms) || rms > 1e8) {
      out.diverged = true;
      out.state = std::move(next);
      return out;
    }
    prev = std::move(next);
  }
  out.state = std::move(prev);
  return out;
}

}  // namespace gppde
