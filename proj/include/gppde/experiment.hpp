#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gppde/bilevel.hpp"
#include "gppde/reference.hpp"

namespace gppde {

using nlohmann::json;

struct KernelConfig {
  std::string variant = "rbf_iso";
  std::map<std::string, double> init;  // physical (constrained) initial values
  std::vector<int> hidden{50, 50};
  int outputs = 1;
  double period = 10.0;
};

struct FinalSolveConfig {
  std::string points = "union";  // union | fresh | collocation
  int gn_iters = 10;
  double nugget = 1e-12;
  int fresh_interior = 0;
  int fresh_boundary = 0;
};

struct SweepConfig {
  std::vector<double> lengthscales;
  std::vector<int> sizes;
  int gn_iters = 8;
  double nugget = 1e-10;
  double boundary_ratio = 1.0 / 3.0;
};

struct ExperimentConfig {
  std::string problem_name = "elliptic";
  ProblemConstants constants;
  std::vector<KernelConfig> kernels;
  PointCounts points;
  RunConfig run;
  FinalSolveConfig final_solve;
  int eval_grid = 100;
  int reference_resolution = 0;  // 0: per-problem default
  std::string out_dir = "runs/out";
  SweepConfig sweep;
};

namespace cfgdetail {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
inline void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace cfgdetail

inline ProblemName problem_from_string(const std::string& s) {
  if (s == "elliptic") return ProblemName::Elliptic;
  if (s == "schrodinger") return ProblemName::Schrodinger;
  if (s == "gray_scott") return ProblemName::GrayScott;
  if (s == "eikonal") return ProblemName::Eikonal;
  if (s == "burgers") return ProblemName::Burgers;
  if (s == "darcy_inverse") return ProblemName::DarcyInverse;
  throw ConfigError("unknown problem name: " + s);
}

inline ExperimentConfig parse_config(const json& j) {
  using cfgdetail::check_keys;
  using cfgdetail::get_if;
  check_keys(j, {"problem", "kernels", "points", "run", "final_solve", "eval", "output", "sweep"},
             "config");
  ExperimentConfig c;
  {
    const auto& p = j.at("problem");
    check_keys(p, {"name", "constants"}, "problem");
    c.problem_name = p.at("name").get<std::string>();
    problem_from_string(c.problem_name);
    if (p.contains("constants")) {
      const auto& k = p.at("constants");
      check_keys(k,
                 {"alpha", "m", "g_nl", "Du", "Dv", "F", "k", "gs_ic_case", "eps", "nu", "gamma"},
                 "problem.constants");
      get_if(k, "alpha", c.constants.alpha);
      get_if(k, "m", c.constants.m);
      get_if(k, "g_nl", c.constants.g_nl);
      get_if(k, "Du", c.constants.Du);
      get_if(k, "Dv", c.constants.Dv);
      get_if(k, "F", c.constants.F);
      get_if(k, "k", c.constants.k);
      get_if(k, "gs_ic_case", c.constants.gs_ic_case);
      get_if(k, "eps", c.constants.eps);
      get_if(k, "nu", c.constants.nu);
      get_if(k, "gamma", c.constants.gamma);
    }
  }
  for (const auto& kj : j.at("kernels")) {
    check_keys(kj, {"variant", "init", "hidden", "outputs", "period"}, "kernels[]");
    KernelConfig kc;
    kc.variant = kj.at("variant").get<std::string>();
    if (kj.contains("init"))
      for (auto it = kj.at("init").begin(); it != kj.at("init").end(); ++it)
        kc.init[it.key()] = it.value().get<double>();
    get_if(kj, "hidden", kc.hidden);
    get_if(kj, "outputs", kc.outputs);
    get_if(kj, "period", kc.period);
    c.kernels.push_back(std::move(kc));
  }
  {
    const auto& p = j.at("points");
    check_keys(p, {"interior", "boundary", "validation_interior", "validation_boundary",
                   "observations"},
               "points");
    get_if(p, "interior", c.points.interior);
    get_if(p, "boundary", c.points.boundary);
    get_if(p, "validation_interior", c.points.validation_interior);
    get_if(p, "validation_boundary", c.points.validation_boundary);
    get_if(p, "observations", c.points.observations);
  }
  {
    const auto& r = j.at("run");
    check_keys(r,
               {"mode", "gn_iters", "adam_steps", "learning_rate", "batch_interior",
                "batch_boundary", "nugget", "seed", "lambda_reg", "tol", "gradient_mode",
                "eta_boundary", "eta_data", "gamma", "fd_step"},
               "run");
    std::string mode = "dto", gmode = "tangent";
    get_if(r, "mode", mode);
    get_if(r, "gradient_mode", gmode);
    if (mode != "dto" && mode != "otd") throw ConfigError("run.mode must be dto or otd");
    c.run.mode = mode == "dto" ? RunMode::DTO : RunMode::OTD;
    if (gmode == "tangent") c.run.gradient_mode = GradientMode::Tangent;
    else if (gmode == "adjoint") c.run.gradient_mode = GradientMode::Adjoint;
    else if (gmode == "fd") c.run.gradient_mode = GradientMode::FD;
    else throw ConfigError("run.gradient_mode must be tangent, adjoint or fd");
    get_if(r, "gn_iters", c.run.gn_iters);
    get_if(r, "adam_steps", c.run.adam_steps);
    get_if(r, "learning_rate", c.run.learning_rate);
    get_if(r, "batch_interior", c.run.batch_interior);
    get_if(r, "batch_boundary", c.run.batch_boundary);
    get_if(r, "nugget", c.run.nugget);
    get_if(r, "seed", c.run.seed);
    get_if(r, "lambda_reg", c.run.lambda_reg);
    get_if(r, "tol", c.run.tol);
    get_if(r, "eta_boundary", c.run.eta_boundary);
    get_if(r, "eta_data", c.run.eta_data);
    get_if(r, "gamma", c.run.gamma);
    get_if(r, "fd_step", c.run.fd_step);
    if (c.run.gn_iters < 0 || c.run.adam_steps < 0)
      throw ConfigError("run: iteration counts must be nonnegative");
  }
  if (j.contains("final_solve")) {
    const auto& f = j.at("final_solve");
    check_keys(f, {"points", "gn_iters", "nugget", "fresh_interior", "fresh_boundary"},
               "final_solve");
    get_if(f, "points", c.final_solve.points);
    get_if(f, "gn_iters", c.final_solve.gn_iters);
    get_if(f, "nugget", c.final_solve.nugget);
    get_if(f, "fresh_interior", c.final_solve.fresh_interior);
    get_if(f, "fresh_boundary", c.final_solve.fresh_boundary);
    if (c.final_solve.points != "union" && c.final_solve.points != "fresh" &&
        c.final_solve.points != "collocation")
      throw ConfigError("final_solve.points must be union, fresh or collocation");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, {"grid", "reference_resolution"}, "eval");
    get_if(e, "grid", c.eval_grid);
    get_if(e, "reference_resolution", c.reference_resolution);
  }
  if (j.contains("output")) {
    const auto& o = j.at("output");
    check_keys(o, {"dir"}, "output");
    get_if(o, "dir", c.out_dir);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    check_keys(s, {"lengthscales", "sizes", "gn_iters", "nugget", "boundary_ratio"}, "sweep");
    get_if(s, "lengthscales", c.sweep.lengthscales);
    get_if(s, "sizes", c.sweep.sizes);
    get_if(s, "gn_iters", c.sweep.gn_iters);
    get_if(s, "nugget", c.sweep.nugget);
    get_if(s, "boundary_ratio", c.sweep.boundary_ratio);
  }
  return c;
}

inline json serialize_config(const ExperimentConfig& c) {
  json j;
  j["problem"]["name"] = c.problem_name;
  auto& k = j["problem"]["constants"];
  k["alpha"] = c.constants.alpha;
  k["m"] = c.constants.m;
  k["g_nl"] = c.constants.g_nl;
  k["Du"] = c.constants.Du;
  k["Dv"] = c.constants.Dv;
  k["F"] = c.constants.F;
  k["k"] = c.constants.k;
  k["gs_ic_case"] = c.constants.gs_ic_case;
  k["eps"] = c.constants.eps;
  k["nu"] = c.constants.nu;
  k["gamma"] = c.constants.gamma;
  j["kernels"] = json::array();
  for (const auto& kc : c.kernels) {
    json kj;
    kj["variant"] = kc.variant;
    kj["init"] = kc.init;
    kj["hidden"] = kc.hidden;
    kj["outputs"] = kc.outputs;
    kj["period"] = kc.period;
    j["kernels"].push_back(kj);
  }
  auto& p = j["points"];
  p["interior"] = c.points.interior;
  p["boundary"] = c.points.boundary;
  p["validation_interior"] = c.points.validation_interior;
  p["validation_boundary"] = c.points.validation_boundary;
  p["observations"] = c.points.observations;
  auto& r = j["run"];
  r["mode"] = c.run.mode == RunMode::DTO ? "dto" : "otd";
  r["gn_iters"] = c.run.gn_iters;
  r["adam_steps"] = c.run.adam_steps;
  r["learning_rate"] = c.run.learning_rate;
  r["batch_interior"] = c.run.batch_interior;
  r["batch_boundary"] = c.run.batch_boundary;
  r["nugget"] = c.run.nugget;
  r["seed"] = c.run.seed;
  r["lambda_reg"] = c.run.lambda_reg;
  r["tol"] = c.run.tol;
  r["gradient_mode"] = c.run.gradient_mode == GradientMode::Tangent ? "tangent"
                       : c.run.gradient_mode == GradientMode::Adjoint ? "adjoint"
                                                                      : "fd";
  r["eta_boundary"] = c.run.eta_boundary;
  r["eta_data"] = c.run.eta_data;
  r["gamma"] = c.run.gamma;
  r["fd_step"] = c.run.fd_step;
  auto& f = j["final_solve"];
  f["points"] = c.final_solve.points;
  f["gn_iters"] = c.final_solve.gn_iters;
  f["nugget"] = c.final_solve.nugget;
  f["fresh_interior"] = c.final_solve.fresh_interior;
  f["fresh_boundary"] = c.final_solve.fresh_boundary;
  j["eval"]["grid"] = c.eval_grid;
  j["eval"]["reference_resolution"] = c.reference_resolution;
  j["output"]["dir"] = c.out_dir;
  if (!c.sweep.lengthscales.empty() || !c.sweep.sizes.empty()) {
    auto& s = j["sweep"];
    s["lengthscales"] = c.sweep.lengthscales;
    s["sizes"] = c.sweep.sizes;
    s["gn_iters"] = c.sweep.gn_iters;
    s["nugget"] = c.sweep.nugget;
    s["boundary_ratio"] = c.sweep.boundary_ratio;
  }
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return parse_config(j);
}

/// Kernel specs plus the initial unconstrained parameter vector (MLP weights
/// are Glorot-initialized from the run seed and recorded in the report).
inline std::pair<std::vector<KernelSpec>, ParamVector> build_kernels(const ExperimentConfig& c) {
  std::vector<KernelSpec> specs;
  const int d = 2;
  for (const auto& kc : c.kernels) {
    if (kc.variant == "rbf_iso") specs.push_back(KernelSpec::rbf_iso(d));
    else if (kc.variant == "rbf_aniso") specs.push_back(KernelSpec::rbf_aniso(d));
    else if (kc.variant == "periodic_time_space")
      specs.push_back(KernelSpec::periodic_time_space(kc.period));
    else if (kc.variant == "additive_rbf_poly") specs.push_back(KernelSpec::additive_rbf_poly(d));
    else if (kc.variant == "gibbs_mlp")
      specs.push_back(KernelSpec::gibbs_mlp(d, kc.hidden, kc.outputs));
    else throw ConfigError("unknown kernel variant: " + kc.variant);
  }
  ParamVector theta = ParamVector::zeros(specs);
  for (size_t comp = 0; comp < specs.size(); ++comp) {
    const auto& kc = c.kernels[comp];
    const auto& spec = specs[comp];
    if (spec.variant == KernelSpec::Variant::GibbsMlp) {
      Rng rng(derive_seed(c.run.seed, 0x317A11, comp));
      auto w = glorot_init(spec.mlp, rng);
      for (size_t i = 0; i < w.size(); ++i)
        theta.raw[theta.offsets[comp] + static_cast<int>(i)] = w[i];
      continue;
    }
    for (int i = 0; i < spec.param_count(); ++i) {
      const std::string name = spec.param_name(i);
      auto it = kc.init.find(name);
      double value = spec.log_scale(i) ? 1.0 : (name == "c" || name == "alpha" ? 1.0 : 1.0);
      if (it != kc.init.end()) value = it->second;
      theta.set_value(specs, static_cast<int>(comp), i, value);
    }
  }
  return {std::move(specs), std::move(theta)};
}

inline ProblemSpec build_problem(const ExperimentConfig& c) {
  return ProblemSpec::make(problem_from_string(c.problem_name), c.constants);
}

inline int default_reference_resolution(ProblemName n) {
  switch (n) {
    case ProblemName::Elliptic: return 256;
    case ProblemName::Schrodinger: return 1024;
    case ProblemName::GrayScott: return 1024;
    case ProblemName::Eikonal: return 500;
    case ProblemName::Burgers: return 128;  // quadrature order
    case ProblemName::DarcyInverse: return 512;
  }
  return 256;
}

struct ComponentErrors {
  std::string component;
  ErrorMetrics m;
};

/// Pointwise-combined metrics over two components (complex-field magnitude),
/// used for the Schrodinger tables.
inline ErrorMetrics combined_metrics(const GnState& s, const ProblemSpec& p, const Reference& ref,
                                     int n) {
  std::vector<Point> pts;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      pts.emplace_back(p.domain.lo[0] + (p.domain.hi[0] - p.domain.lo[0]) * (i + 0.5) / n,
                       p.domain.lo[1] + (p.domain.hi[1] - p.domain.lo[1]) * (j + 0.5) / n);
  const auto vu = values_batch(s, 0, pts);
  const auto vv = values_batch(s, 1, pts);
  ErrorMetrics m;
  double sum = 0, ref_sum = 0, ref_max = 0;
  for (size_t i = 0; i < pts.size(); ++i) {
    const double ru = ref.eval(0, pts[i]), rv = ref.eval(1, pts[i]);
    const double e2 = (vu[i] - ru) * (vu[i] - ru) + (vv[i] - rv) * (vv[i] - rv);
    sum += e2;
    ref_sum += ru * ru + rv * rv;
    m.linf = std::max(m.linf, std::sqrt(e2));
    ref_max = std::max(ref_max, std::sqrt(ru * ru + rv * rv));
  }
  m.l2 = std::sqrt(sum / static_cast<double>(pts.size()));
  m.rel_l2 = m.l2 / std::max(std::sqrt(ref_sum / static_cast<double>(pts.size())), 1e-300);
  m.rel_linf = m.linf / std::max(ref_max, 1e-300);
  return m;
}

struct ExperimentResult {
  ExperimentConfig config;
  RunReport report;
  FromScratchResult final_solve;
  std::vector<ComponentErrors> errors;
  std::vector<std::pair<Point, double>> observations;
  double wall_seconds = 0.0;
};

inline PointSets final_solve_points(const ExperimentConfig& cfg, const ProblemSpec& p,
                                    const PointSets& pts) {
  PointSets out;
  if (cfg.final_solve.points == "collocation") {
    out = pts;
  } else if (cfg.final_solve.points == "union") {
    out = pts;
    out.interior.insert(out.interior.end(), pts.validation_interior.begin(),
                        pts.validation_interior.end());
  } else {
    Rng rng(derive_seed(cfg.run.seed, 0xF1A5));
    PointCounts counts;
    counts.interior = cfg.final_solve.fresh_interior > 0 ? cfg.final_solve.fresh_interior
                                                         : cfg.points.interior;
    counts.boundary = cfg.final_solve.fresh_boundary > 0 ? cfg.final_solve.fresh_boundary
                                                         : cfg.points.boundary;
    counts.validation_interior = 1;
    out = collocation_layout(p, counts, rng);
  }
  out.validation_interior.clear();
  out.validation_boundary.clear();
  out.validation_initial.clear();
  return out;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentResult res;
  res.config = cfg;
  ProblemSpec p = build_problem(cfg);
  auto [kernels, theta0] = build_kernels(cfg);
  if (static_cast<int>(kernels.size()) != p.component_count)
    throw ConfigError("kernel count must match the problem's component count");

  Rng layout_rng(derive_seed(cfg.run.seed, 0x1A10));
  PointSets pts = collocation_layout(p, cfg.points, layout_rng);

  const int ref_res = cfg.reference_resolution > 0 ? cfg.reference_resolution
                                                   : default_reference_resolution(p.name);
  Reference ref = reference_solution(p, ref_res);

  std::vector<std::pair<Point, double>> obs;
  if (p.name == ProblemName::DarcyInverse) {
    Rng obs_rng(derive_seed(cfg.run.seed, 0x0B5));
    obs = generate_observations(ref, pts.observations, cfg.run.gamma, obs_rng);
    res.observations = obs;
  }

  BilevelDriver driver(p, kernels, cfg.run, pts, obs);
  res.report = driver.run(theta0);

  const PointSets fpts = final_solve_points(cfg, p, pts);
  res.final_solve = from_scratch_solve(p, kernels, res.report.theta_final, fpts,
                                       cfg.final_solve.gn_iters, cfg.final_solve.nugget,
                                       cfg.run.gamma, obs);

  if (!res.final_solve.diverged && !res.final_solve.state.is_zero()) {
    auto ms = error_metrics(res.final_solve.state, p, ref, cfg.eval_grid);
    for (int c = 0; c < p.component_count; ++c) {
      std::string name = "u";
      if (p.name == ProblemName::Schrodinger) name = c == 0 ? "u" : "v";
      else if (p.name == ProblemName::GrayScott) name = c == 0 ? "u" : "v";
      else if (p.name == ProblemName::DarcyInverse) name = c == 0 ? "u" : "a";
      res.errors.push_back({name, ms[static_cast<size_t>(c)]});
    }
    if (p.name == ProblemName::Schrodinger)
      res.errors.push_back({"combined", combined_metrics(res.final_solve.state, p, ref, cfg.eval_grid)});
  }
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---- persistence -------------------------------------------------------------

inline json report_to_json(const ExperimentResult& res) {
  json j;
  j["version"] = kVersion;
  j["seed"] = res.config.run.seed;
  j["config"] = serialize_config(res.config);
  auto vec = [](const Vector& v) {
    std::vector<double> out(v.data(), v.data() + v.size());
    return out;
  };
  j["theta0"] = vec(res.report.theta0.raw);
  j["theta0_constrained"] = vec(res.report.theta0_constrained);
  j["theta_final"] = vec(res.report.theta_final.raw);
  j["theta_final_constrained"] = vec(res.report.theta_final_constrained);
  j["aborted"] = res.report.aborted;
  j["abort_reason"] = res.report.abort_reason;
  j["total_rejected"] = res.report.total_rejected;
  j["mlp_init"] = res.report.mlp_init;
  j["mlp_output_map"] = res.report.mlp_output_map;
  j["adam_moments"] = res.report.adam_moments;
  j["trajectory"] = json::array();
  for (const auto& it : res.report.iters) {
    json row;
    row["theta"] = vec(it.theta_constrained);
    row["batch_loss"] = it.batch_loss;
    row["full_loss"] = it.full_loss;
    row["nonlinear_loss"] = it.nonlinear_loss;
    row["inner_residual"] = it.inner_residual;
    row["rejected_steps"] = it.rejected_steps;
    j["trajectory"].push_back(row);
  }
  j["final_solve"]["diverged"] = res.final_solve.diverged;
  j["final_solve"]["residual_rms"] = res.final_solve.residual_rms;
  j["final_solve"]["gn_iters"] = res.config.final_solve.gn_iters;
  j["final_solve"]["nugget"] = res.config.final_solve.nugget;
  j["errors"] = json::array();
  for (const auto& e : res.errors) {
    json row;
    row["component"] = e.component;
    row["l2"] = e.m.l2;
    row["linf"] = e.m.linf;
    row["rel_l2"] = e.m.rel_l2;
    row["rel_linf"] = e.m.rel_linf;
    j["errors"].push_back(row);
  }
  json timings;
  timings["wall_seconds"] = res.wall_seconds;
  timings["run_seconds"] = res.report.wall_seconds;
  std::vector<double> iter_secs;
  for (const auto& it : res.report.iters) iter_secs.push_back(it.seconds);
  timings["iteration_seconds"] = iter_secs;
  j["timings"] = timings;
  return j;
}

inline std::string csv_header(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "# gppde " << kVersion << " seed=" << cfg.run.seed << "\n";
  os << "# config " << serialize_config(cfg).dump() << "\n";
  return os.str();
}

inline void write_outputs(const ExperimentResult& res, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "report.json");
    out << report_to_json(res).dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "trajectory.csv");
    out << csv_header(res.config);
    out << "k";
    const int nt = res.report.theta0_constrained.size() <= 16
                       ? static_cast<int>(res.report.theta0_constrained.size())
                       : 0;
    for (int i = 0; i < nt; ++i) out << ",theta" << i;
    out << ",batch_loss,full_loss,nonlinear_loss\n";
    out << std::setprecision(17);
    for (size_t k = 0; k < res.report.iters.size(); ++k) {
      const auto& it = res.report.iters[k];
      out << k;
      for (int i = 0; i < nt; ++i) out << "," << it.theta_constrained[i];
      out << "," << it.batch_loss << "," << it.full_loss << "," << it.nonlinear_loss << "\n";
    }
  }
  {
    std::ofstream out(fs::path(dir) / "errors.csv");
    out << csv_header(res.config);
    out << "component,l2,linf,rel_l2,rel_linf\n";
    out << std::setprecision(17);
    for (const auto& e : res.errors)
      out << e.component << "," << e.m.l2 << "," << e.m.linf << "," << e.m.rel_l2 << ","
          << e.m.rel_linf << "\n";
  }
  if (!res.observations.empty()) {
    std::ofstream out(fs::path(dir) / "observations.csv");
    out << csv_header(res.config);
    out << "x0,x1,value\n";
    out << std::setprecision(17);
    for (const auto& [q, v] : res.observations) out << q[0] << "," << q[1] << "," << v << "\n";
  }
}

// ---- sweep -------------------------------------------------------------------

struct SweepCell {
  double lengthscale = 0.0;
  int size = 0;
  double l2 = 0.0, linf = 0.0;
  bool diverged = false;
};

/// Fixed-theta error landscape over (lengthscale, training size): one
/// from-scratch solve per cell, each with its own seed derived from
/// (master seed, cell index).
inline std::vector<SweepCell> run_sweep(const ExperimentConfig& cfg) {
  ProblemSpec p = build_problem(cfg);
  if (cfg.sweep.lengthscales.empty() || cfg.sweep.sizes.empty())
    throw ConfigError("sweep requires lengthscales and sizes");
  const int ref_res = cfg.reference_resolution > 0 ? cfg.reference_resolution
                                                   : default_reference_resolution(p.name);
  Reference ref = reference_solution(p, ref_res);
  std::vector<SweepCell> cells;
  for (double l : cfg.sweep.lengthscales)
    for (int M : cfg.sweep.sizes) cells.push_back({l, M, 0, 0, false});

  for (size_t ci = 0; ci < cells.size(); ++ci) {
    auto& cell = cells[ci];
    Rng rng(derive_seed(cfg.run.seed, 0x5EEB, ci));
    PointCounts counts;
    counts.interior = cell.size;
    counts.boundary = std::max(1, static_cast<int>(std::lround(cell.size * cfg.sweep.boundary_ratio)));
    counts.validation_interior = 1;
    PointSets pts = collocation_layout(p, counts, rng);
    std::vector<KernelSpec> ks{KernelSpec::rbf_iso(2)};
    ParamVector th = ParamVector::zeros(ks);
    th.set_value(ks, 0, 0, cell.lengthscale);
    auto fs = from_scratch_solve(p, ks, th, pts, cfg.sweep.gn_iters, cfg.sweep.nugget);
    cell.diverged = fs.diverged;
    if (!fs.state.is_zero()) {
      auto m = error_metrics_component(
          fs.state, p, [&](const Point& q) { return ref.eval(0, q); }, 0, cfg.eval_grid);
      cell.l2 = m.l2;
      cell.linf = m.linf;
    } else {
      cell.l2 = std::numeric_limits<double>::infinity();
      cell.linf = std::numeric_limits<double>::infinity();
    }
  }
  return cells;
}

inline void write_sweep(const std::vector<SweepCell>& cells, const ExperimentConfig& cfg,
                        const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(std::filesystem::path(dir) / "sweep.csv");
  out << csv_header(cfg);
  out << "lengthscale,M,l2,linf\n";
  out << std::setprecision(17);
  for (const auto& c : cells)
    out << c.lengthscale << "," << c.size << "," << c.l2 << "," << c.linf << "\n";
}

// ---- gradcheck -----------------------------------------------------------------

struct GradCheckResult {
  double tangent_vs_adjoint = 0.0;  // max relative discrepancy (analytic kernels)
  double analytic_vs_fd = 0.0;      // adjoint (or tangent) vs central differences
  bool mlp_sampled = false;
  bool pass = false;
};

inline double rel_inf(const Vector& a, const Vector& b) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-300);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

/// Tangent vs adjoint vs central-difference comparison on the configured
/// problem at the initial hyperparameters (zero-state linearization).
inline GradCheckResult run_gradcheck(const ExperimentConfig& cfg, std::ostream& log) {
  ProblemSpec p = build_problem(cfg);
  auto [kernels, theta0] = build_kernels(cfg);
  Rng layout_rng(derive_seed(cfg.run.seed, 0x1A10));
  PointSets pts = collocation_layout(p, cfg.points, layout_rng);
  std::vector<std::pair<Point, double>> obs;
  if (p.name == ProblemName::DarcyInverse) {
    Reference ref = reference_solution(p, cfg.reference_resolution > 0
                                              ? cfg.reference_resolution
                                              : default_reference_resolution(p.name));
    Rng obs_rng(derive_seed(cfg.run.seed, 0x0B5));
    obs = generate_observations(ref, pts.observations, cfg.run.gamma, obs_rng);
  }
  OuterContext ctx(p, kernels, nullptr, pts, cfg.run, obs);
  Rng brng(derive_seed(cfg.run.seed, 0xBA7C4, 0));
  const auto batch = ctx.make_batch(brng);

  GradCheckResult out;
  const bool mlp = theta0.total() > cfg.run.tangent_param_limit;
  out.mlp_sampled = mlp;
  if (!mlp) {
    const Vector gt = hypergrad_tangent(ctx, theta0, batch, cfg.run);
    const Vector ga = hypergrad_adjoint(ctx, theta0, batch);
    const Vector gf = hypergrad_fd(ctx, theta0, batch, cfg.run);
    out.tangent_vs_adjoint = rel_inf(gt, ga);
    out.analytic_vs_fd = rel_inf(gt, gf);
    out.pass = out.tangent_vs_adjoint <= 1e-8 && out.analytic_vs_fd <= 1e-5;
    log << "gradcheck: params=" << theta0.total() << " tangent-vs-adjoint=" << out.tangent_vs_adjoint
        << " analytic-vs-fd=" << out.analytic_vs_fd << (out.pass ? " PASS" : " FAIL") << "\n";
  } else {
    const Vector ga = hypergrad_adjoint(ctx, theta0, batch);
    Rng crng(derive_seed(cfg.run.seed, 0xC003D));
    std::vector<int> coords;
    auto picks = sample_without_replacement(static_cast<size_t>(theta0.total()), 20, crng);
    for (auto i : picks) coords.push_back(static_cast<int>(i));
    const Vector gf = hypergrad_fd(ctx, theta0, batch, cfg.run, coords);
    double worst = 0.0;
    const double scale = ga.cwiseAbs().maxCoeff();
    for (int i : coords) worst = std::max(worst, std::abs(ga[i] - gf[i]) / std::max(scale, 1e-300));
    out.analytic_vs_fd = worst;
    out.pass = worst <= 1e-4;
    log << "gradcheck: params=" << theta0.total() << " (MLP, 20 sampled coords)"
        << " adjoint-vs-fd=" << out.analytic_vs_fd << (out.pass ? " PASS" : " FAIL") << "\n";
  }
  return out;
}

// ---- report aggregation ----------------------------------------------------

/// Aggregates one or more run directories into a comparison table
/// (learned-vs-fixed style): CSV plus aligned text.
inline int aggregate_reports(const std::vector<std::string>& dirs, std::ostream& csv,
                             std::ostream& text) {
  if (dirs.empty()) return 1;
  csv << "run,problem,seed,theta_summary,component,l2,linf,rel_l2,rel_linf\n";
  text << std::left << std::setw(28) << "run" << std::setw(14) << "problem" << std::setw(24)
       << "theta" << std::setw(6) << "comp" << std::setw(13) << "l2" << std::setw(13) << "linf"
       << "\n";
  for (const auto& dir : dirs) {
    std::ifstream in(std::filesystem::path(dir) / "report.json");
    if (!in) return 1;
    json j;
    in >> j;
    const std::string name = std::filesystem::path(dir).filename().string();
    const std::string prob = j.at("config").at("problem").at("name").get<std::string>();
    std::ostringstream th;
    const auto& tf = j.at("theta_final_constrained");
    if (tf.size() <= 6) {
      th << std::setprecision(4);
      for (size_t i = 0; i < tf.size(); ++i) th << (i ? "," : "") << tf[i].get<double>();
    } else {
      th << tf.size() << " params";
    }
    for (const auto& e : j.at("errors")) {
      csv << name << "," << prob << "," << j.at("seed").get<uint64_t>() << ",\"" << th.str()
          << "\"," << e.at("component").get<std::string>() << "," << std::setprecision(17)
          << e.at("l2").get<double>() << "," << e.at("linf").get<double>() << ","
          << e.at("rel_l2").get<double>() << "," << e.at("rel_linf").get<double>() << "\n";
      std::ostringstream l2s, lis;
      l2s << std::scientific << std::setprecision(3) << e.at("l2").get<double>();
      lis << std::scientific << std::setprecision(3) << e.at("linf").get<double>();
      text << std::left << std::setw(28) << name << std::setw(14) << prob << std::setw(24)
           << th.str() << std::setw(6) << e.at("component").get<std::string>() << std::setw(13)
           << l2s.str() << std::setw(13) << lis.str() << "\n";
    }
  }
  return 0;
}

}  // namespace gppde
