#pragma once

// Posterior estimation over EpiParams from an observed curve prefix.
//
// Naive: draw many prior samples, keep the K best by squared error on the
// observed days.
// Optimized: start n seeds from the prior and run projected Adam on
//
//   L = sum_j mean_i ||r_obs(x_i^(j))||_2
//     + lambda_kld    * sum_j KL(moments(X^(j)) || prior)
//     + lambda_global * sum_j sum_{k != j} KL(g(X^(j)) || g(X^(k)))
//
// where g() is the Gaussian marginal over the global parameters (3..5).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "epical/ensemble.hpp"
#include "epical/error.hpp"
#include "epical/mvn.hpp"
#include "epical/pca.hpp"
#include "epical/rng.hpp"
#include "epical/simcore.hpp"
#include "epical/surrogate.hpp"

namespace epical {

enum class Method { Naive, Opt, OptKld, OptGlobal, Truth };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::Naive: return "NAIVE";
    case Method::Opt: return "OPT";
    case Method::OptKld: return "OPT_KLD";
    case Method::OptGlobal: return "OPT_GLOBAL";
    case Method::Truth: return "TRUTH";
  }
  return "?";
}

inline Method method_from_string(std::string_view s) {
  for (auto m : {Method::Naive, Method::Opt, Method::OptKld, Method::OptGlobal, Method::Truth})
    if (s == to_string(m)) return m;
  throw ValidationError("unknown method '" + std::string(s) +
                        "' (expected NAIVE, OPT, OPT_KLD, OPT_GLOBAL or TRUTH)");
}

enum class KldScope { All, Target };

/// Per-sample residual measure on the observed days.
enum class ResidualNorm {
  MeanSquared,  ///< (1/T_obs) * ||r||^2, the GOF
  L2,           ///< ||r||_2
};

/// How per-sample residual measures combine within one region.
enum class SeedReduction { Mean, Sum };

struct OptimizerConfig {
  std::size_t n_seeds = 1000;
  std::size_t n_init_naive = 200000;
  std::size_t top_k = 100;
  std::size_t max_steps = 25000;
  double step_size = 1e-2;
  double lambda_kld = 1e-6;
  double lambda_global = 1e-4;
  double jitter = 1e-8;
  std::size_t convergence_window = 200;
  double convergence_tol = 1e-7;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  KldScope kld_scope = KldScope::All;
  ResidualNorm residual_norm = ResidualNorm::L2;
  SeedReduction seed_reduction = SeedReduction::Mean;
  std::size_t target = 0;      ///< problem index used when kld_scope == Target
  std::size_t trace_every = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_seeds < 2) throw ArgumentError("OptimizerConfig: n_seeds must be >= 2");
    if (n_init_naive < 1) throw ArgumentError("OptimizerConfig: n_init_naive must be >= 1");
    if (top_k < 1) throw ArgumentError("OptimizerConfig: top_k must be >= 1");
    if (max_steps < 1) throw ArgumentError("OptimizerConfig: max_steps must be >= 1");
    if (!(step_size > 0.0)) throw ArgumentError("OptimizerConfig: step_size must be > 0");
    if (!(lambda_kld >= 0.0) || !(lambda_global >= 0.0))
      throw ArgumentError("OptimizerConfig: lambdas must be >= 0");
    if (!(jitter > 0.0)) throw ArgumentError("OptimizerConfig: jitter must be > 0");
    if (convergence_window < 1) throw ArgumentError("OptimizerConfig: convergence_window must be >= 1");
    if (!(convergence_tol >= 0.0)) throw ArgumentError("OptimizerConfig: convergence_tol must be >= 0");
    if (trace_every < 1) throw ArgumentError("OptimizerConfig: trace_every must be >= 1");
  }
};

/// One region's observation: the first t_obs days of a normalized cumulative curve.
struct CalibrationProblem {
  MsaProfile msa;
  Eigen::VectorXd y_obs;
  std::size_t horizon = 28;

  std::size_t t_obs() const { return static_cast<std::size_t>(y_obs.size()); }

  void validate() const {
    if (t_obs() < 1 || t_obs() > horizon)
      throw ArgumentError("calibration problem '" + msa.id + "': need 1 <= T_obs <= horizon");
    EpidemicCurve{msa.id, std::vector<double>(y_obs.data(), y_obs.data() + y_obs.size()),
                  CurveKind::CumulativeNormalized}
        .validate();
  }

  static CalibrationProblem from_curve(const MsaProfile& msa,
                                       const std::vector<double>& normalized, std::size_t t_obs) {
    if (t_obs < 1 || t_obs > normalized.size())
      throw ArgumentError("T_obs=" + std::to_string(t_obs) + " outside [1, " +
                          std::to_string(normalized.size()) + "]");
    CalibrationProblem p;
    p.msa = msa;
    p.horizon = normalized.size();
    p.y_obs = Eigen::Map<const Eigen::VectorXd>(normalized.data(),
                                                static_cast<Eigen::Index>(t_obs));
    p.validate();
    return p;
  }
};

struct TraceSummary {
  std::size_t steps = 0;
  bool converged = false;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Samples sorted by surrogate GOF (MSE over observed days), best first.
struct PosteriorSamples {
  std::string msa_id;
  Method method = Method::Naive;
  Eigen::MatrixXd samples;  ///< n x 6
  std::vector<double> gof;
  TraceSummary trace;

  std::size_t size() const { return static_cast<std::size_t>(samples.rows()); }
  ParamVector sample(std::size_t i) const {
    ParamVector v{};
    for (std::size_t d = 0; d < kNumParams; ++d)
      v[d] = samples(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d));
    return v;
  }
};

struct TraceRow {
  std::size_t step = 0;
  double total = 0.0;
  double data = 0.0;
  double kld = 0.0;
  double global = 0.0;
};

struct CalibrationRun {
  std::vector<PosteriorSamples> posteriors;  ///< one per problem
  std::vector<TraceRow> trace;
};

struct LossTerms {
  double total = 0.0;
  double data = 0.0;
  double kld = 0.0;     ///< unweighted sum of KL terms
  double global = 0.0;  ///< unweighted sum of consistency terms
};

struct ObjectiveFlags {
  bool use_kld = false;
  bool use_global = false;
};

/// Prior over parameters: moments of the TRAIN inputs.
inline MvnModel fit_prior(const EnsembleDataset& ds, double jitter) {
  const auto recs = ds.records_in(Split::Train);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(recs.size()), kNumParams);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto p = recs[i]->params.to_array();
    for (std::size_t d = 0; d < kNumParams; ++d)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = p[d];
  }
  return fit_mvn(x, jitter);
}

/// Squared error of every candidate (rows of `candidates`) summed over the observed days.
inline Eigen::VectorXd naive_scores(const SurrogateModel& model, const PcaBasis& basis,
                                    const CalibrationProblem& problem,
                                    const Eigen::MatrixXd& candidates) {
  problem.validate();
  const auto t_obs = static_cast<Eigen::Index>(problem.t_obs());
  const Eigen::Index n = candidates.rows();
  Eigen::VectorXd scores(n);
  constexpr Eigen::Index chunk = 4096;
  for (Eigen::Index start = 0; start < n; start += chunk) {
    const Eigen::Index len = std::min(chunk, n - start);
    const Eigen::MatrixXd curves =
        predict_curves(model, basis, candidates.middleRows(start, len).transpose());
    scores.segment(start, len) =
        (curves.topRows(t_obs).colwise() - problem.y_obs).colwise().squaredNorm().transpose();
  }
  return scores;
}

/// Top-K candidates by observed-window squared error; ties broken by candidate index.
inline PosteriorSamples naive_posterior_from(const SurrogateModel& model, const PcaBasis& basis,
                                             const CalibrationProblem& problem,
                                             const Eigen::MatrixXd& candidates, std::size_t k) {
  const auto n = static_cast<std::size_t>(candidates.rows());
  if (k < 1 || k > n)
    throw ArgumentError("naive_posterior: K=" + std::to_string(k) + " must lie in [1, " +
                        std::to_string(n) + "]");
  const Eigen::VectorXd scores = naive_scores(model, basis, problem, candidates);
  std::vector<Eigen::Index> idx(n);
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](Eigen::Index a, Eigen::Index b) {
                      return scores(a) < scores(b) || (scores(a) == scores(b) && a < b);
                    });
  idx.resize(k);

  PosteriorSamples out;
  out.msa_id = problem.msa.id;
  out.method = Method::Naive;
  out.samples = candidates(idx, Eigen::all);
  const auto t_obs = static_cast<double>(problem.t_obs());
  for (auto i : idx) out.gof.push_back(scores(i) / t_obs);
  return out;
}

/// Candidate pool of the naive method: n_init_naive clamped prior draws.
inline Eigen::MatrixXd naive_candidates(const MvnModel& prior, const ParameterBox& box,
                                        const OptimizerConfig& cfg) {
  return sample_mvn(prior, cfg.n_init_naive, derive_seed(cfg.seed, 0x4e41), &box);
}

inline PosteriorSamples naive_posterior(const SurrogateModel& model, const PcaBasis& basis,
                                        const MvnModel& prior, const CalibrationProblem& problem,
                                        const ParameterBox& box, const OptimizerConfig& cfg,
                                        std::size_t k) {
  if (k > cfg.n_init_naive)
    throw ArgumentError("naive_posterior: K exceeds n_init_naive");
  return naive_posterior_from(model, basis, problem, naive_candidates(prior, box, cfg), k);
}

/// Loss and gradient of the calibration objective for a set of sample matrices.
class CalibrationObjective {
 public:
  CalibrationObjective(const std::vector<CalibrationProblem>& problems,
                       const SurrogateModel& model, const PcaBasis& basis, const MvnModel& prior,
                       const OptimizerConfig& cfg, ObjectiveFlags flags)
      : problems_(problems), model_(model), basis_(basis), prior_(prior), cfg_(cfg),
        flags_(flags) {
    if (problems_.empty()) throw ArgumentError("calibration: no problems");
    if (flags_.use_global && problems_.size() < 2)
      throw ArgumentError("calibration: the global consistency term needs >= 2 problems");
    if (flags_.use_kld && cfg_.kld_scope == KldScope::Target && cfg_.target >= problems_.size())
      throw ArgumentError("calibration: target index out of range");
    if (prior_.dim() != static_cast<Eigen::Index>(kNumParams))
      throw ArgumentError("calibration: prior must be 6-D");
    detail::require_eval(model_, "calibration");
    for (const auto& p : problems_) {
      p.validate();
      check_length(basis_, static_cast<Eigen::Index>(p.horizon), "calibration");
    }
  }

  std::size_t size() const { return problems_.size(); }
  const CalibrationProblem& problem(std::size_t j) const { return problems_[j]; }

  /// Per-sample MSE over the observed days for problem j.
  Eigen::VectorXd sample_gof(std::size_t j, const Eigen::MatrixXd& x) const {
    const auto& p = problems_[j];
    const auto t_obs = static_cast<Eigen::Index>(p.t_obs());
    const Eigen::MatrixXd curves = predict_curves(model_, basis_, x.transpose());
    return (curves.topRows(t_obs).colwise() - p.y_obs).colwise().squaredNorm().transpose() /
           static_cast<double>(t_obs);
  }

  /// Evaluates the loss; fills `grad` (same shapes as x) when non-null.
  LossTerms evaluate(const std::vector<Eigen::MatrixXd>& x,
                     std::vector<Eigen::MatrixXd>* grad) const {
    if (x.size() != problems_.size()) throw ArgumentError("calibration: wrong number of sample sets");
    LossTerms loss;
    if (grad) grad->assign(x.size(), Eigen::MatrixXd());

    std::vector<MvnModel> moments;
    std::vector<Eigen::VectorXd> d_mean;
    std::vector<Eigen::MatrixXd> d_cov;
    const bool need_moments = flags_.use_kld || flags_.use_global;

    for (std::size_t j = 0; j < x.size(); ++j) {
      const auto& p = problems_[j];
      const Eigen::MatrixXd& xj = x[j];
      const auto n = static_cast<double>(xj.rows());
      const auto t_obs = static_cast<Eigen::Index>(p.t_obs());

      const Eigen::MatrixXd xt = xj.transpose();
      detail::check_inputs(model_, xt);
      const auto pass = detail::eval_pass(model_, xt);
      const Eigen::MatrixXd curves = (basis_.components.transpose() * pass.z).colwise() + basis_.mean;
      const Eigen::MatrixXd resid = curves.topRows(t_obs).colwise() - p.y_obs;
      const double weight = cfg_.seed_reduction == SeedReduction::Mean ? 1.0 / n : 1.0;
      Eigen::MatrixXd d_curve;
      if (cfg_.residual_norm == ResidualNorm::MeanSquared) {
        loss.data += weight * resid.squaredNorm() / static_cast<double>(t_obs);
        if (grad) d_curve = resid * (2.0 * weight / static_cast<double>(t_obs));
      } else {
        const Eigen::RowVectorXd norms = resid.colwise().norm();
        loss.data += weight * norms.sum();
        if (grad) {
          // The norm is not differentiable at a zero residual; use 0 there.
          const Eigen::RowVectorXd inv =
              norms.unaryExpr([weight](double v) { return v > 0.0 ? weight / v : 0.0; });
          d_curve = resid.array().rowwise() * inv.array();
        }
      }

      if (grad) {
        const Eigen::MatrixXd grad_z = basis_.components.leftCols(t_obs) * d_curve;
        (*grad)[j] = detail::backward_from_pass(model_, pass, grad_z).transpose();
      }
      if (need_moments) {
        moments.push_back(sample_moments(xj, cfg_.jitter));
        d_mean.push_back(Eigen::VectorXd::Zero(kNumParams));
        d_cov.push_back(Eigen::MatrixXd::Zero(kNumParams, kNumParams));
      }
    }

    if (flags_.use_kld) {
      for (std::size_t j = 0; j < x.size(); ++j) {
        if (cfg_.kld_scope == KldScope::Target && j != cfg_.target) continue;
        const auto g = kl_mvn_gradient(moments[j], prior_);
        loss.kld += g.value;
        d_mean[j] += cfg_.lambda_kld * g.d_mean_p;
        d_cov[j] += cfg_.lambda_kld * g.d_cov_p;
      }
    }

    if (flags_.use_global) {
      constexpr Eigen::Index first = kNumLocal;
      constexpr Eigen::Index count = kNumParams - kNumLocal;
      std::vector<MvnModel> globals;
      for (const auto& m : moments) globals.push_back(marginal(m, first, count));
      for (std::size_t j = 0; j < x.size(); ++j) {
        for (std::size_t k = 0; k < x.size(); ++k) {
          if (j == k) continue;
          const auto g = kl_mvn_gradient(globals[j], globals[k]);
          loss.global += g.value;
          d_mean[j].segment(first, count) += cfg_.lambda_global * g.d_mean_p;
          d_cov[j].block(first, first, count, count) += cfg_.lambda_global * g.d_cov_p;
          d_mean[k].segment(first, count) += cfg_.lambda_global * g.d_mean_q;
          d_cov[k].block(first, first, count, count) += cfg_.lambda_global * g.d_cov_q;
        }
      }
    }

    if (grad && need_moments)
      for (std::size_t j = 0; j < x.size(); ++j)
        (*grad)[j] += sample_moments_backward(x[j], d_mean[j], d_cov[j]);

    loss.total = loss.data + (flags_.use_kld ? cfg_.lambda_kld * loss.kld : 0.0) +
                 (flags_.use_global ? cfg_.lambda_global * loss.global : 0.0);
    return loss;
  }

 private:
  std::vector<CalibrationProblem> problems_;
  const SurrogateModel& model_;
  const PcaBasis& basis_;
  MvnModel prior_;
  OptimizerConfig cfg_;
  ObjectiveFlags flags_;
};

inline void project_into_box(Eigen::MatrixXd& x, const ParameterBox& box) {
  for (Eigen::Index d = 0; d < x.cols(); ++d) {
    const auto i = static_cast<std::size_t>(d);
    x.col(d) = x.col(d).cwiseMax(box.low[i]).cwiseMin(box.high[i]);
  }
}

/// Initial seeds: one clamped prior draw shared by every problem.
inline Eigen::MatrixXd initial_seeds(const MvnModel& prior, const ParameterBox& box,
                                     const OptimizerConfig& cfg) {
  return sample_mvn(prior, cfg.n_seeds, derive_seed(cfg.seed, 0x5eed5), &box);
}

/// Projected Adam on the calibration objective, starting from `init` for every problem.
inline CalibrationRun optimize_posterior_from(const std::vector<CalibrationProblem>& problems,
                                              const SurrogateModel& model, const PcaBasis& basis,
                                              const MvnModel& prior, const ParameterBox& box,
                                              const OptimizerConfig& cfg, ObjectiveFlags flags,
                                              const Eigen::MatrixXd& init) {
  cfg.validate();
  box.validate();
  const CalibrationObjective objective(problems, model, basis, prior, cfg, flags);
  if (init.cols() != static_cast<Eigen::Index>(kNumParams) || init.rows() < 2)
    throw ArgumentError("optimize_posterior: initial seeds must be n x 6 with n >= 2");

  std::vector<Eigen::MatrixXd> x(problems.size(), init);
  for (auto& xj : x) project_into_box(xj, box);
  std::vector<Eigen::MatrixXd> m1(problems.size(), Eigen::MatrixXd::Zero(init.rows(), init.cols()));
  std::vector<Eigen::MatrixXd> m2 = m1;
  std::vector<Eigen::MatrixXd> grad;
  std::vector<double> history;
  history.reserve(cfg.max_steps + 1);

  CalibrationRun run;
  TraceSummary summary;
  auto record = [&](std::size_t step, const LossTerms& l) {
    run.trace.push_back({step, l.total, l.data, l.kld, l.global});
  };

  std::size_t step = 0;
  for (; step < cfg.max_steps; ++step) {
    const LossTerms loss = objective.evaluate(x, &grad);
    if (!std::isfinite(loss.total))
      throw NumericError("calibration loss is not finite at step " + std::to_string(step));
    if (step == 0) summary.initial_loss = loss.total;
    history.push_back(loss.total);
    if (step % cfg.trace_every == 0) record(step, loss);

    if (step >= cfg.convergence_window) {
      const double before = history[step - cfg.convergence_window];
      if (before - loss.total <= cfg.convergence_tol * std::max(std::abs(before), 1e-300)) {
        summary.converged = true;
        break;
      }
    }

    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (std::size_t j = 0; j < x.size(); ++j) {
      m1[j] = cfg.adam_beta1 * m1[j] + (1.0 - cfg.adam_beta1) * grad[j];
      m2[j] = cfg.adam_beta2 * m2[j] + (1.0 - cfg.adam_beta2) * grad[j].cwiseProduct(grad[j]);
      x[j].array() -= cfg.step_size * (m1[j].array() / c1) /
                      ((m2[j].array() / c2).sqrt() + cfg.adam_epsilon);
      project_into_box(x[j], box);
    }
  }

  const LossTerms final_loss = objective.evaluate(x, nullptr);
  if (!std::isfinite(final_loss.total))
    throw NumericError("calibration loss is not finite after step " + std::to_string(step));
  summary.steps = step;
  summary.final_loss = final_loss.total;
  if (run.trace.empty() || run.trace.back().step != step) record(step, final_loss);

  const Method method = flags.use_global ? Method::OptGlobal
                        : flags.use_kld  ? Method::OptKld
                                         : Method::Opt;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const Eigen::VectorXd gof = objective.sample_gof(j, x[j]);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(gof.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return gof(a) < gof(b); });
    PosteriorSamples post;
    post.msa_id = problems[j].msa.id;
    post.method = method;
    post.samples = x[j](order, Eigen::all);
    for (auto i : order) post.gof.push_back(gof(i));
    post.trace = summary;
    run.posteriors.push_back(std::move(post));
  }
  return run;
}

inline CalibrationRun optimize_posterior(const std::vector<CalibrationProblem>& problems,
                                         const SurrogateModel& model, const PcaBasis& basis,
                                         const MvnModel& prior, const ParameterBox& box,
                                         const OptimizerConfig& cfg, ObjectiveFlags flags) {
  cfg.validate();
  return optimize_posterior_from(problems, model, basis, prior, box, cfg, flags,
                                 initial_seeds(prior, box, cfg));
}

inline ObjectiveFlags flags_for(Method m) {
  switch (m) {
    case Method::Opt: return {false, false};
    case Method::OptKld: return {true, false};
    case Method::OptGlobal: return {true, true};
    default: throw ArgumentError("method " + std::string(to_string(m)) + " is not an optimizer");
  }
}

}  // namespace epical
