// epical: command-line driver for the calibration pipeline.
//
//   epical all       --config configs/default.json
//   epical calibrate --config configs/default.json --set calibrate.t_obs=25
//
// Exit status: 0 success, 1 invalid input or configuration, 2 numerical failure.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "epical/pipeline.hpp"

namespace {

namespace pl = epical::pipeline;

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::size_t jobs = 0;
};

void add_common(CLI::App* cmd, Options& opt) {
  cmd->add_option("-c,--config", opt.config, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", opt.overrides,
                  "Override a config value, e.g. --set train.epochs=50 (repeatable)")
      ->type_name("SECTION.KEY=VALUE");
  cmd->add_option("-j,--jobs", opt.jobs, "Worker threads for evaluation (overrides config jobs)")
      ->check(CLI::PositiveNumber);
}

pl::PipelineConfig load(const Options& opt) {
  auto overrides = opt.overrides;
  if (opt.jobs > 0) overrides.push_back("jobs=" + std::to_string(opt.jobs));
  return pl::load_config(opt.config, overrides);
}

void print_report(const epical::EvalReport& report) {
  std::printf("%-11s %5s  %-22s %-22s %-22s\n", "method", "T_obs", "curve RMSE (permille)",
              "INFECTED RMSE", "TRANSPROP RMSE");
  for (const auto& c : report.cells)
    std::printf("%-11s %5zu  %9.4f +- %-9.4f %9.4f +- %-9.4f %9.4f +- %-9.4f\n",
                std::string(epical::to_string(c.method)).c_str(), c.t_obs, c.curve_rmse.mean,
                c.curve_rmse.std, c.infected_rmse.mean, c.infected_rmse.std,
                c.transprop_rmse.mean, c.transprop_rmse.std);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surrogate-based calibration of a regional epidemic simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pl::kVersion);

  Options opt;
  auto* ensemble = app.add_subcommand("ensemble", "Sample parameters and simulate every MSA");
  auto* pca = app.add_subcommand("pca", "Fit the curve basis on TRAIN curves");
  auto* train = app.add_subcommand("train", "Train the surrogate network");
  auto* calibrate = app.add_subcommand("calibrate", "Estimate posterior samples for the configured MSAs");
  auto* eval = app.add_subcommand("eval", "Benchmark all methods on planted test curves");
  auto* all = app.add_subcommand("all", "Run every stage in order");
  for (auto* cmd : {ensemble, pca, train, calibrate, eval, all}) add_common(cmd, opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const auto cfg = load(opt);
    if (ensemble->parsed()) {
      const auto ds = pl::cmd_ensemble(cfg);
      std::cout << "wrote " << ds.records.size() << " records to " << cfg.at(cfg.paths.dataset).string() << "\n";
    } else if (pca->parsed()) {
      const auto basis = pl::cmd_pca(cfg);
      std::cout << "wrote " << basis.k() << "-component basis to " << cfg.at(cfg.paths.basis).string() << "\n";
    } else if (train->parsed()) {
      const auto model = pl::cmd_train(cfg);
      std::cout << "trained " << model.summary.epochs << " epochs; train loss "
                << model.summary.final_train_loss << ", validation loss "
                << model.summary.final_validation_loss << "\n";
    } else if (calibrate->parsed()) {
      pl::cmd_calibrate(cfg);
      std::cout << "wrote posteriors to " << cfg.at(cfg.paths.posteriors).string() << "\n";
    } else if (eval->parsed()) {
      print_report(pl::cmd_eval(cfg));
    } else if (all->parsed()) {
      pl::cmd_ensemble(cfg);
      pl::cmd_pca(cfg);
      pl::cmd_train(cfg);
      pl::cmd_calibrate(cfg);
      print_report(pl::cmd_eval(cfg));
    }
  } catch (const epical::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
