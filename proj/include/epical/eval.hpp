#pragma once

// Benchmark protocol: calibrate planted-truth test curves with each method,
// re-run the top posterior samples through the simulator, and score curve
// fit (per mille of population) and recovery of INFECTED / TRANSPROP.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "epical/calibrate.hpp"
#include "epical/ensemble.hpp"
#include "epical/error.hpp"
#include "epical/io.hpp"
#include "epical/mvn.hpp"
#include "epical/pca.hpp"
#include "epical/simcore.hpp"
#include "epical/surrogate.hpp"

namespace epical {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  ///< sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  out.n = v.size();
  if (v.empty()) return out;
  double sum = 0.0;
  for (double x : v) sum += x;
  out.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return out;
}

struct OracleEvaluation {
  EpiParams params;
  std::vector<double> daily;  ///< simulator output, persons per day
};

/// Simulates the top_k posterior samples (already ranked by surrogate GOF).
inline std::vector<OracleEvaluation> oracle_reevaluate(const PosteriorSamples& samples,
                                                       const MsaProfile& msa, int horizon,
                                                       std::size_t top_k) {
  if (top_k < 1 || top_k > samples.size())
    throw ArgumentError("oracle_reevaluate: top_k=" + std::to_string(top_k) +
                        " must lie in [1, " + std::to_string(samples.size()) + "]");
  std::vector<OracleEvaluation> out;
  out.reserve(top_k);
  for (std::size_t i = 0; i < top_k; ++i) {
    const auto p = EpiParams::from_array(samples.sample(i));
    out.push_back({p, simulate(p, msa, horizon).values});
  }
  return out;
}

/// Per-candidate RMSE in persons, divided by population and multiplied by 1e3.
inline MeanStd curve_rmse_pct(const std::vector<double>& truth,
                              const std::vector<std::vector<double>>& candidates,
                              double population) {
  if (!(population > 0.0)) throw DomainError("curve_rmse_pct: population must be positive");
  if (candidates.empty()) throw ArgumentError("curve_rmse_pct: no candidates");
  std::vector<double> per;
  per.reserve(candidates.size());
  for (const auto& c : candidates) {
    if (c.size() != truth.size()) throw ArgumentError("curve_rmse_pct: length mismatch");
    double ss = 0.0;
    for (std::size_t t = 0; t < c.size(); ++t) ss += (c[t] - truth[t]) * (c[t] - truth[t]);
    per.push_back(std::sqrt(ss / static_cast<double>(c.size())) / population * 1e3);
  }
  return mean_std(per);
}

/// RMSE of each requested parameter across samples, against the truth.
inline std::vector<double> param_rmse(const EpiParams& truth, const Eigen::MatrixXd& samples,
                                      const std::vector<std::size_t>& indices = {kInfected,
                                                                                 kTransProb}) {
  if (samples.rows() < 1) throw ArgumentError("param_rmse: no samples");
  const auto t = truth.to_array();
  std::vector<double> out;
  for (auto idx : indices) {
    if (idx >= kNumParams) throw ArgumentError("param_rmse: index out of range");
    const auto col = samples.col(static_cast<Eigen::Index>(idx)).array() - t[idx];
    out.push_back(std::sqrt(col.square().mean()));
  }
  return out;
}

inline std::vector<double> cumulative_of(const std::vector<double>& daily) {
  std::vector<double> out(daily.size());
  std::partial_sum(daily.begin(), daily.end(), out.begin());
  return out;
}

struct BenchmarkConfig {
  std::vector<Method> methods{Method::Naive, Method::Opt, Method::OptKld, Method::OptGlobal};
  std::vector<std::size_t> t_obs_list{10, 20, 25};
  std::size_t n_test_curves = 15;
  std::string target_msa;                ///< TEST MSA whose runs provide planted truths
  std::vector<std::string> partner_msas; ///< co-calibrated MSAs for OPT_GLOBAL
  std::size_t top_k = 100;
  std::size_t jobs = 1;
  OptimizerConfig optimizer;
};

/// Raw per-curve results of one (method, T_obs) cell.
struct CurveResult {
  std::size_t curve = 0;  ///< run index in the target MSA
  double curve_rmse = 0.0;
  double infected_rmse = 0.0;
  double transprop_rmse = 0.0;
  std::size_t samples = 0;
};

struct EvalCell {
  Method method = Method::Naive;
  std::size_t t_obs = 0;
  MeanStd curve_rmse;      ///< across test curves
  MeanStd infected_rmse;
  MeanStd transprop_rmse;
  std::size_t n_curves = 0;
  std::size_t n_samples = 0;  ///< samples scored per curve
  std::vector<CurveResult> raw;
};

struct EvalReport {
  std::vector<EvalCell> cells;

  const EvalCell& cell(Method m, std::size_t t_obs) const {
    for (const auto& c : cells)
      if (c.method == m && c.t_obs == t_obs) return c;
    throw ArgumentError("report has no cell " + std::string(to_string(m)) + " / " +
                        std::to_string(t_obs));
  }
};

/// Observation set of one planted test curve: the target plus partners that
/// share the target's global parameters.
struct PlantedCase {
  EpiParams truth;
  std::vector<double> truth_daily;
  std::vector<CalibrationProblem> problems;  ///< target first
};

inline PlantedCase make_planted_case(const EnsembleDataset& ds, const BenchmarkConfig& cfg,
                                     std::size_t run, std::size_t t_obs) {
  const auto target_recs = ds.records_of(cfg.target_msa);
  if (run >= target_recs.size())
    throw ArgumentError("benchmark: target MSA has only " + std::to_string(target_recs.size()) +
                        " runs");
  const auto& rec = *target_recs[run];
  PlantedCase pc;
  pc.truth = rec.params;
  pc.truth_daily = rec.raw;
  pc.problems.push_back(
      CalibrationProblem::from_curve(ds.msa(cfg.target_msa), rec.normalized, t_obs));
  const auto truth = rec.params.to_array();
  for (const auto& partner : cfg.partner_msas) {
    const auto prec = ds.records_of(partner);
    if (run >= prec.size()) throw ArgumentError("benchmark: partner MSA lacks run " + std::to_string(run));
    auto p = prec[run]->params.to_array();
    for (std::size_t d = kNumLocal; d < kNumParams; ++d) p[d] = truth[d];
    const auto planted = make_record(ds.msa(partner), ds.msa_index(partner), run,
                                     EpiParams::from_array(p), ds.horizon);
    pc.problems.push_back(
        CalibrationProblem::from_curve(ds.msa(partner), planted.normalized, t_obs));
  }
  return pc;
}

/// Posterior for the target problem of a planted case.
inline PosteriorSamples run_method(Method method, const PlantedCase& pc,
                                   const SurrogateModel& model, const PcaBasis& basis,
                                   const MvnModel& prior, const ParameterBox& box,
                                   const BenchmarkConfig& cfg, std::vector<TraceRow>* trace = nullptr) {
  switch (method) {
    case Method::Naive:
      return naive_posterior(model, basis, prior, pc.problems.front(), box, cfg.optimizer,
                             cfg.top_k);
    case Method::Truth: {
      PosteriorSamples p;
      p.msa_id = pc.problems.front().msa.id;
      p.method = Method::Truth;
      p.samples.resize(static_cast<Eigen::Index>(cfg.top_k), kNumParams);
      const auto t = pc.truth.to_array();
      for (Eigen::Index i = 0; i < p.samples.rows(); ++i)
        for (std::size_t d = 0; d < kNumParams; ++d) p.samples(i, static_cast<Eigen::Index>(d)) = t[d];
      p.gof.assign(cfg.top_k, 0.0);
      return p;
    }
    case Method::Opt:
    case Method::OptKld: {
      auto run = optimize_posterior({pc.problems.front()}, model, basis, prior, box, cfg.optimizer,
                                    flags_for(method));
      if (trace) *trace = run.trace;
      return std::move(run.posteriors.front());
    }
    case Method::OptGlobal: {
      if (pc.problems.size() < 2)
        throw ArgumentError("OPT_GLOBAL needs at least one partner MSA");
      auto run = optimize_posterior(pc.problems, model, basis, prior, box, cfg.optimizer,
                                    flags_for(method));
      if (trace) *trace = run.trace;
      return std::move(run.posteriors.front());
    }
  }
  throw ArgumentError("unknown method");
}

inline CurveResult score_posterior(const PosteriorSamples& post, const PlantedCase& pc,
                                   const MsaProfile& msa, int horizon, std::size_t top_k,
                                   std::size_t run) {
  const std::size_t k = std::min(top_k, post.size());
  const auto evals = oracle_reevaluate(post, msa, horizon, k);
  std::vector<std::vector<double>> curves;
  for (const auto& e : evals) curves.push_back(cumulative_of(e.daily));
  CurveResult r;
  r.curve = run;
  r.samples = k;
  r.curve_rmse = curve_rmse_pct(cumulative_of(pc.truth_daily), curves, msa.population).mean;
  const auto pr = param_rmse(pc.truth, post.samples.topRows(static_cast<Eigen::Index>(k)));
  r.infected_rmse = pr[0];
  r.transprop_rmse = pr[1];
  return r;
}

/// Full cross of methods x T_obs over the first n_test_curves runs of the target MSA.
/// Work is spread over cfg.jobs threads; results do not depend on the thread count.
inline EvalReport run_benchmark(const EnsembleDataset& ds, const SurrogateModel& model,
                                const PcaBasis& basis, const MvnModel& prior,
                                const BenchmarkConfig& cfg) {
  if (cfg.methods.empty() || cfg.t_obs_list.empty() || cfg.n_test_curves < 1)
    throw ArgumentError("benchmark: empty methods, T_obs list or curve count");
  if (ds.split_of(cfg.target_msa) != Split::Test)
    throw ValidationError("benchmark: target MSA '" + cfg.target_msa + "' is not a TEST MSA");
  for (const auto& p : cfg.partner_msas) ds.msa(p);
  for (auto t : cfg.t_obs_list)
    if (t < 1 || t > static_cast<std::size_t>(ds.horizon))
      throw ArgumentError("benchmark: T_obs=" + std::to_string(t) + " outside the horizon");

  EvalReport report;
  for (auto t : cfg.t_obs_list)
    for (auto m : cfg.methods) {
      EvalCell c;
      c.method = m;
      c.t_obs = t;
      c.raw.resize(cfg.n_test_curves);
      report.cells.push_back(std::move(c));
    }

  struct Task {
    std::size_t cell;
    std::size_t curve;
  };
  std::vector<Task> tasks;
  for (std::size_t c = 0; c < report.cells.size(); ++c)
    for (std::size_t r = 0; r < cfg.n_test_curves; ++r) tasks.push_back({c, r});

  const auto& target = ds.msa(cfg.target_msa);
  auto run_task = [&](const Task& task) {
    auto& cell = report.cells[task.cell];
    const auto pc = make_planted_case(ds, cfg, task.curve, cell.t_obs);
    BenchmarkConfig local = cfg;
    local.optimizer.seed = derive_seed(cfg.optimizer.seed, task.curve, cell.t_obs);
    const auto post = run_method(cell.method, pc, model, basis, prior, ds.box, local);
    cell.raw[task.curve] = score_posterior(post, pc, target, ds.horizon, cfg.top_k, task.curve);
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, tasks.size()));
  if (jobs == 1) {
    for (const auto& t : tasks) run_task(t);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::exception_ptr failure;
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w)
      workers.emplace_back([&] {
        while (true) {
          std::size_t i;
          {
            std::lock_guard lock(mu);
            if (next >= tasks.size() || failure) return;
            i = next++;
          }
          try {
            run_task(tasks[i]);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    for (auto& w : workers) w.join();
    if (failure) std::rethrow_exception(failure);
  }

  for (auto& cell : report.cells) {
    std::vector<double> cr, ir, tr;
    for (const auto& r : cell.raw) {
      cr.push_back(r.curve_rmse);
      ir.push_back(r.infected_rmse);
      tr.push_back(r.transprop_rmse);
    }
    cell.curve_rmse = mean_std(cr);
    cell.infected_rmse = mean_std(ir);
    cell.transprop_rmse = mean_std(tr);
    cell.n_curves = cell.raw.size();
    cell.n_samples = cell.raw.empty() ? 0 : cell.raw.front().samples;
  }
  return report;
}

/// Columns: method,t_obs,metric,mean,std,n
inline std::string report_csv(const EvalReport& report) {
  std::string out = "method,t_obs,metric,mean,std,n\n";
  for (const auto& c : report.cells) {
    auto row = [&](const char* metric, const MeanStd& v) {
      out += std::string(to_string(c.method)) + ',' + std::to_string(c.t_obs) + ',' + metric +
             ',' + io::fmt(v.mean) + ',' + io::fmt(v.std) + ',' + std::to_string(v.n) + '\n';
    };
    row("curve_rmse_permille", c.curve_rmse);
    row("infected_rmse", c.infected_rmse);
    row("transprop_rmse", c.transprop_rmse);
  }
  return out;
}

inline std::string cell_csv(const EvalCell& c) {
  std::string out = "curve,curve_rmse_permille,infected_rmse,transprop_rmse,samples\n";
  for (const auto& r : c.raw)
    out += std::to_string(r.curve) + ',' + io::fmt(r.curve_rmse) + ',' + io::fmt(r.infected_rmse) +
           ',' + io::fmt(r.transprop_rmse) + ',' + std::to_string(r.samples) + '\n';
  return out;
}

/// report.csv plus cells/<METHOD>_t<T_obs>.csv
inline void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  io::write_file(dir / "report.csv", report_csv(report));
  for (const auto& c : report.cells)
    io::write_file(dir / "cells" /
                       (std::string(to_string(c.method)) + "_t" + std::to_string(c.t_obs) + ".csv"),
                   cell_csv(c));
}

}  // namespace epical
