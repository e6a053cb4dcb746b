// Command-line experiment runner: configuration-driven bilevel kernel
// learning for GP collocation PDE solvers, plus gradient checks, the
// fixed-kernel error-landscape sweep, and report aggregation.

#include <CLI11.hpp>
#include <iostream>

#include "gppde/experiment.hpp"

using namespace gppde;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  bool deterministic = true;
};

ExperimentConfig load_with_overrides(const CommonOpts& opt) {
  ExperimentConfig cfg = load_config(opt.config_path);
  if (opt.seed_set) cfg.run.seed = opt.seed;
  if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
  if (opt.threads > 0) global_thread_count() = opt.threads;
  deterministic_mode() = opt.deterministic;
  return cfg;
}

void add_common(CLI::App* app, CommonOpts& opt) {
  app->add_option("--config", opt.config_path, "experiment configuration (JSON)")->required();
  app->add_option("--out", opt.out_dir, "output directory (overrides the config)");
  app->add_option("--seed", opt.seed, "seed override")->each([&](const std::string&) {
    opt.seed_set = true;
  });
  app->add_option("--threads", opt.threads, "worker threads (default: hardware)");
  app->add_flag("--deterministic,!--fast", opt.deterministic,
                "bitwise-reproducible scheduling (default on)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GP collocation PDE solving with bilevel kernel hyperparameter learning"};
  app.require_subcommand(1);

  CommonOpts run_opt, grad_opt, sweep_opt;
  auto* cmd_run = app.add_subcommand("run", "run one experiment end to end");
  add_common(cmd_run, run_opt);
  auto* cmd_gradcheck = app.add_subcommand("gradcheck", "compare hypergradient routes");
  add_common(cmd_gradcheck, grad_opt);
  bool corrupt_hook = false;
  cmd_gradcheck->add_flag("--corrupt-derivative-hook", corrupt_hook,
                          "test hook: perturb analytic parameter derivatives");
  auto* cmd_sweep = app.add_subcommand("sweep", "fixed-kernel (lengthscale x size) error sweep");
  add_common(cmd_sweep, sweep_opt);
  std::vector<double> sweep_ls;
  std::vector<int> sweep_sizes;
  cmd_sweep->add_option("--lengthscales", sweep_ls, "grid of lengthscales (overrides config)");
  cmd_sweep->add_option("--sizes", sweep_sizes, "grid of interior point counts");

  std::vector<std::string> report_dirs;
  std::string report_out;
  auto* cmd_report = app.add_subcommand("report", "aggregate run directories into tables");
  cmd_report->add_option("dirs", report_dirs, "run directories containing report.json");
  cmd_report->add_option("--out", report_out, "write the CSV here (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_run->parsed()) {
      ExperimentConfig cfg = load_with_overrides(run_opt);
      ExperimentResult res = run_experiment(cfg);
      write_outputs(res, cfg.out_dir);
      if (res.report.aborted) {
        std::cerr << "run aborted: " << res.report.abort_reason << "\n";
        return 2;
      }
      std::cout << "run complete: " << cfg.out_dir << "\n";
      for (const auto& e : res.errors)
        std::cout << "  " << e.component << ": l2=" << e.m.l2 << " linf=" << e.m.linf << "\n";
      return 0;
    }
    if (cmd_gradcheck->parsed()) {
      ExperimentConfig cfg = load_with_overrides(grad_opt);
      if (corrupt_hook) param_grad_corruption() = 1.0 + 1e-3;
      const auto res = run_gradcheck(cfg, std::cout);
      return res.pass ? 0 : 3;
    }
    if (cmd_sweep->parsed()) {
      ExperimentConfig cfg = load_with_overrides(sweep_opt);
      if (!sweep_ls.empty()) cfg.sweep.lengthscales = sweep_ls;
      if (!sweep_sizes.empty()) cfg.sweep.sizes = sweep_sizes;
      const auto cells = run_sweep(cfg);
      write_sweep(cells, cfg, cfg.out_dir);
      std::cout << "sweep complete: " << cells.size() << " cells -> " << cfg.out_dir
                << "/sweep.csv\n";
      return 0;
    }
    if (cmd_report->parsed()) {
      std::ostringstream csv;
      std::ostringstream text;
      if (aggregate_reports(report_dirs, csv, text) != 0) {
        std::cerr << "report: no readable run directories given\n";
        return 1;
      }
      if (!report_out.empty()) {
        std::ofstream out(report_out);
        out << csv.str();
      } else {
        std::cout << csv.str() << "\n";
      }
      std::cout << text.str();
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const AbortedRun& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
