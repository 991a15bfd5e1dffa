#include <gtest/gtest.h>

#include "epical/calibrate.hpp"
#include "support.hpp"

using namespace epical;
using epical::testing::rel_error;
using epical::testing::Setup;
using epical::testing::small_setup;

namespace {

CalibrationProblem problem_from(const Setup& s, const std::string& msa, std::size_t run, std::size_t t_obs) {
  return CalibrationProblem::from_curve(s.ds.msa(msa), s.ds.records_of(msa)[run]->normalized, t_obs);
}

/// Independent selection oracle: full sort of (score, index) pairs.
std::vector<Eigen::Index> exhaustive_top_k(const Eigen::VectorXd& scores, std::size_t k) {
  std::vector<std::pair<double, Eigen::Index>> all;
  for (Eigen::Index i = 0; i < scores.size(); ++i) all.emplace_back(scores(i), i);
  std::sort(all.begin(), all.end());
  std::vector<Eigen::Index> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

Eigen::MatrixXd uniform_candidates(std::size_t n, std::uint64_t seed) {
  const auto box = ParameterBox::ensemble_default();
  Rng rng(seed);
  Eigen::MatrixXd c(static_cast<Eigen::Index>(n), kNumParams);
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (std::size_t d = 0; d < kNumParams; ++d)
      c(i, static_cast<Eigen::Index>(d)) = rng.uniform(box.low[d], box.high[d]);
  return c;
}

bool away_from_kinks(const SurrogateModel& m, const Eigen::MatrixXd& x, double gap) {
  const auto pass = detail::eval_pass(m, x.transpose());
  return pass.u1.cwiseAbs().minCoeff() > gap && pass.u2.cwiseAbs().minCoeff() > gap;
}

/// The setup basis with a steep ramp added to its mean, so surrogate curves are
/// nonnegative and nondecreasing and can serve as exact observations.
PcaBasis ramped_basis(const Setup& s) {
  PcaBasis b = s.basis;
  for (Eigen::Index t = 0; t < b.mean.size(); ++t) b.mean(t) += 0.02 * static_cast<double>(t + 1);
  return b;
}

/// First training parameter vector whose surrogate curve is a valid observation.
ParamVector realizable_params(const Setup& s, const PcaBasis& basis, std::size_t skip) {
  for (const auto* r : s.ds.records_in(Split::Train)) {
    const Eigen::VectorXd y = predict_curve(s.model, basis, r->params.to_array());
    bool ok = y(0) >= 0.0 && y.maxCoeff() <= 1.0;
    for (Eigen::Index t = 1; t < y.size(); ++t) ok = ok && y(t) >= y(t - 1);
    if (ok && skip-- == 0) return r->params.to_array();
  }
  throw std::runtime_error("no realizable parameters in setup");
}

}  // namespace

TEST(NaiveScores, MatchDirectEvaluation) {
  const auto& s = small_setup();
  const auto prob = problem_from(s, "MSA012", 3, 20);
  const auto cand = uniform_candidates(50, 1);
  const auto scores = naive_scores(s.model, s.basis, prob, cand);
  for (Eigen::Index i = 0; i < cand.rows(); ++i) {
    ParamVector x{};
    for (std::size_t d = 0; d < kNumParams; ++d) x[d] = cand(i, static_cast<Eigen::Index>(d));
    const Eigen::VectorXd y = predict_curve(s.model, s.basis, x).head(20);
    EXPECT_NEAR(scores(i), (y - prob.y_obs).squaredNorm(), 1e-12 * (1.0 + scores(i)));
  }
}

TEST(NaivePosterior, EqualsExhaustiveSortOracle) {
  const auto& s = small_setup();
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const std::size_t n = 1000 + 1800 * seed;
    Eigen::MatrixXd cand = uniform_candidates(n, seed);
    // Duplicated rows create exact ties that must resolve by index.
    for (Eigen::Index i = 0; i < 40; ++i) cand.row(static_cast<Eigen::Index>(n) - 1 - i) = cand.row(i * 3);
    const auto prob = problem_from(s, "MSA011", seed, 10 + seed * 3);
    const std::size_t k = seed % 2 ? 100 : 10;
    const auto post = naive_posterior_from(s.model, s.basis, prob, cand, k);
    const auto scores = naive_scores(s.model, s.basis, prob, cand);
    const auto oracle = exhaustive_top_k(scores, k);
    ASSERT_EQ(post.size(), k);
    for (std::size_t r = 0; r < k; ++r) {
      EXPECT_EQ(post.samples.row(static_cast<Eigen::Index>(r)), cand.row(oracle[r])) << "rank " << r;
      EXPECT_EQ(post.gof[r], scores(oracle[r]) / static_cast<double>(prob.t_obs()));
    }
  }
}

TEST(NaivePosterior, PlantedCandidateRanksFirst) {
  const auto& s = small_setup();
  auto cand = uniform_candidates(500, 4);
  const auto basis = ramped_basis(s);
  const ParamVector truth = realizable_params(s, basis, 0);
  for (std::size_t d = 0; d < kNumParams; ++d) cand(217, static_cast<Eigen::Index>(d)) = truth[d];
  CalibrationProblem prob;
  prob.msa = s.ds.msa("MSA013");
  prob.y_obs = predict_curve(s.model, basis, truth).head(20);
  const auto post = naive_posterior_from(s.model, basis, prob, cand, 5);
  EXPECT_EQ(post.samples.row(0), cand.row(217));
  EXPECT_EQ(post.gof[0], 0.0);
}

TEST(NaivePosterior, KEqualsNReturnsAllSorted) {
  const auto& s = small_setup();
  const auto cand = uniform_candidates(64, 5);
  const auto post = naive_posterior_from(s.model, s.basis, problem_from(s, "MSA014", 0, 25), cand, 64);
  ASSERT_EQ(post.size(), 64u);
  EXPECT_TRUE(std::is_sorted(post.gof.begin(), post.gof.end()));
}

TEST(NaivePosterior, Errors) {
  const auto& s = small_setup();
  OptimizerConfig cfg;
  cfg.n_init_naive = 50;
  EXPECT_THROW(naive_posterior(s.model, s.basis, s.prior, problem_from(s, "MSA011", 0, 20),
                               s.ds.box, cfg, 51),
               ArgumentError);
  EXPECT_THROW(naive_posterior_from(s.model, s.basis, problem_from(s, "MSA011", 0, 20),
                                    uniform_candidates(5, 1), 0),
               ArgumentError);
}

TEST(CalibrationProblem, Validation) {
  const auto& s = small_setup();
  const auto& curve = s.ds.records_of("MSA011")[0]->normalized;
  EXPECT_THROW(CalibrationProblem::from_curve(s.ds.msa("MSA011"), curve, 0), ArgumentError);
  EXPECT_THROW(CalibrationProblem::from_curve(s.ds.msa("MSA011"), curve, 29), ArgumentError);
  auto bad = curve;
  bad[3] = -0.1;
  EXPECT_THROW(CalibrationProblem::from_curve(s.ds.msa("MSA011"), bad, 10), DomainError);
}

class ObjectiveForms : public ::testing::TestWithParam<std::pair<ResidualNorm, SeedReduction>> {};

// The data term against a per-sample loop written out directly.
TEST_P(ObjectiveForms, DataTermMatchesDirectSum) {
  const auto& s = small_setup();
  OptimizerConfig cfg;
  cfg.residual_norm = GetParam().first;
  cfg.seed_reduction = GetParam().second;
  const std::vector<CalibrationProblem> probs{problem_from(s, "MSA011", 1, 12), problem_from(s, "MSA012", 2, 20)};
  const CalibrationObjective obj(probs, s.model, s.basis, s.prior, cfg, {});
  const std::vector<Eigen::MatrixXd> x{uniform_candidates(9, 1), uniform_candidates(9, 2)};
  double expect = 0.0;
  for (std::size_t j = 0; j < 2; ++j) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < 9; ++i) {
      ParamVector v{};
      for (std::size_t d = 0; d < kNumParams; ++d) v[d] = x[j](i, static_cast<Eigen::Index>(d));
      const Eigen::VectorXd r =
          predict_curve(s.model, s.basis, v).head(static_cast<Eigen::Index>(probs[j].t_obs())) - probs[j].y_obs;
      acc += cfg.residual_norm == ResidualNorm::L2 ? r.norm()
                                                   : r.squaredNorm() / static_cast<double>(probs[j].t_obs());
    }
    expect += cfg.seed_reduction == SeedReduction::Mean ? acc / 9.0 : acc;
  }
  const auto loss = obj.evaluate(x, nullptr);
  EXPECT_NEAR(loss.data, expect, 1e-12 * expect);
  EXPECT_EQ(loss.total, loss.data);
}

// Full loss gradient, all regularizers on, against central differences.
TEST_P(ObjectiveForms, GradientMatchesCentralDifferences) {
  int checked = 0;
  for (std::uint64_t seed = 1; checked < 20; ++seed) {
    ASSERT_LT(seed, 300u);
    const auto model = epical::testing::random_model(seed);
    const auto basis = epical::testing::random_basis(seed + 77, 10, 28);
    Rng rng(seed);
    std::vector<CalibrationProblem> probs;
    std::vector<Eigen::MatrixXd> x;
    for (int j = 0; j < 3; ++j) {
      CalibrationProblem p;
      p.msa = epical::testing::fixture_msa();
      std::vector<double> y(28);
      double acc = 0.0;
      for (auto& v : y) v = (acc += rng.uniform(0.0, 0.002));
      p.y_obs = Eigen::Map<const Eigen::VectorXd>(y.data(), 15 + 4 * j);
      probs.push_back(p);
      x.push_back(uniform_candidates(8, seed * 10 + static_cast<std::uint64_t>(j)));
    }
    bool ok = true;
    for (const auto& xj : x) ok = ok && away_from_kinks(model, xj, 1e-3);
    if (!ok) continue;

    Eigen::MatrixXd prior_samples = uniform_candidates(200, seed + 5);
    const auto prior = fit_mvn(prior_samples, 1e-8);
    OptimizerConfig cfg;
    cfg.residual_norm = GetParam().first;
    cfg.seed_reduction = GetParam().second;
    cfg.lambda_kld = 0.05;
    cfg.lambda_global = 0.1;
    const CalibrationObjective obj(probs, model, basis, prior, cfg, {true, true});
    std::vector<Eigen::MatrixXd> grad;
    obj.evaluate(x, &grad);
    double scale = 0.0;
    for (const auto& g : grad) scale = std::max(scale, g.cwiseAbs().maxCoeff());

    const double h = 1e-5;
    for (std::size_t j = 0; j < x.size(); ++j)
      for (Eigen::Index i = 0; i < x[j].rows(); ++i)
        for (Eigen::Index d = 0; d < x[j].cols(); ++d) {
          auto xp = x, xm = x;
          xp[j](i, d) += h;
          xm[j](i, d) -= h;
          const double fd = (obj.evaluate(xp, nullptr).total - obj.evaluate(xm, nullptr).total) / (2 * h);
          EXPECT_LT(rel_error(grad[j](i, d), fd, 1e-6 * scale), 1e-4)
              << "seed " << seed << " problem " << j << " sample " << i << " param " << d;
        }
    ++checked;
  }
}

INSTANTIATE_TEST_SUITE_P(, ObjectiveForms,
                         ::testing::Values(std::pair{ResidualNorm::MeanSquared, SeedReduction::Mean},
                                           std::pair{ResidualNorm::L2, SeedReduction::Sum}));

TEST(Objective, KldScopeTargetCountsOnlyTarget) {
  const auto& s = small_setup();
  OptimizerConfig cfg;
  const std::vector<CalibrationProblem> probs{problem_from(s, "MSA011", 1, 12), problem_from(s, "MSA012", 2, 20)};
  const std::vector<Eigen::MatrixXd> x{uniform_candidates(30, 1), uniform_candidates(30, 2)};
  const double all = CalibrationObjective(probs, s.model, s.basis, s.prior, cfg, {true, false}).evaluate(x, nullptr).kld;
  cfg.kld_scope = KldScope::Target;
  cfg.target = 1;
  const double one = CalibrationObjective(probs, s.model, s.basis, s.prior, cfg, {true, false}).evaluate(x, nullptr).kld;
  EXPECT_NEAR(one, kl_mvn(sample_moments(x[1], cfg.jitter), s.prior), 1e-12);
  EXPECT_NEAR(all, one + kl_mvn(sample_moments(x[0], cfg.jitter), s.prior), 1e-12);
  cfg.target = 2;
  EXPECT_THROW(CalibrationObjective(probs, s.model, s.basis, s.prior, cfg, {true, false}), ArgumentError);
}

TEST(OptimizePosterior, Errors) {
  const auto& s = small_setup();
  OptimizerConfig cfg;
  cfg.n_seeds = 8;
  cfg.max_steps = 2;
  EXPECT_THROW(optimize_posterior({}, s.model, s.basis, s.prior, s.ds.box, cfg, {}), ArgumentError);
  EXPECT_THROW(optimize_posterior({problem_from(s, "MSA011", 0, 20)}, s.model, s.basis, s.prior,
                                  s.ds.box, cfg, {true, true}),
               ArgumentError);
  cfg.n_seeds = 1;
  EXPECT_THROW(optimize_posterior({problem_from(s, "MSA011", 0, 20)}, s.model, s.basis, s.prior,
                                  s.ds.box, cfg, {}),
               ArgumentError);
}

TEST(OptimizePosterior, RealizableTargetIsFit) {
  const auto& s = small_setup();
  const auto basis = ramped_basis(s);
  const ParamVector truth = realizable_params(s, basis, 1);
  CalibrationProblem prob;
  prob.msa = s.ds.msa("MSA015");
  prob.y_obs = predict_curve(s.model, basis, truth);
  OptimizerConfig cfg;
  cfg.n_seeds = 32;
  cfg.max_steps = 3000;
  const auto run = optimize_posterior({prob}, s.model, basis, s.prior, s.ds.box, cfg, {});
  EXPECT_LT(run.posteriors.front().gof.front(), 1e-6);
}

TEST(OptimizePosterior, BestNeverWorseThanBestSeedAndStaysInBox) {
  const auto& s = small_setup();
  for (std::size_t run_idx = 0; run_idx < 4; ++run_idx) {
    const auto prob = problem_from(s, "MSA013", run_idx, 28);
    OptimizerConfig cfg;
    cfg.n_seeds = 24;
    cfg.max_steps = 300;
    cfg.seed = run_idx;
    const auto init = initial_seeds(s.prior, s.ds.box, cfg);
    const CalibrationObjective obj({prob}, s.model, s.basis, s.prior, cfg, {});
    const double best_init = obj.sample_gof(0, init).minCoeff();
    const auto run = optimize_posterior({prob}, s.model, s.basis, s.prior, s.ds.box, cfg, {});
    const auto& post = run.posteriors.front();
    EXPECT_LE(post.gof.front(), best_init);
    EXPECT_TRUE(std::is_sorted(post.gof.begin(), post.gof.end()));
    for (std::size_t i = 0; i < post.size(); ++i) EXPECT_TRUE(s.ds.box.contains(post.sample(i)));
    EXPECT_FALSE(run.trace.empty());
    EXPECT_EQ(run.trace.front().step, 0u);
  }
}

TEST(OptimizePosterior, LargeKldWeightKeepsMomentsNearPrior) {
  const auto& s = small_setup();
  OptimizerConfig cfg;
  cfg.n_seeds = 200;
  cfg.max_steps = 2000;
  cfg.lambda_kld = 1e3;
  const auto run = optimize_posterior({problem_from(s, "MSA011", 5, 20)}, s.model, s.basis, s.prior,
                                      s.ds.box, cfg, {true, false});
  EXPECT_LT(kl_mvn(sample_moments(run.posteriors.front().samples, cfg.jitter), s.prior), 0.01);
}

TEST(OptimizePosterior, Deterministic) {
  const auto& s = small_setup();
  OptimizerConfig cfg;
  cfg.n_seeds = 16;
  cfg.max_steps = 50;
  cfg.seed = 9;
  const std::vector<CalibrationProblem> probs{problem_from(s, "MSA011", 0, 20), problem_from(s, "MSA014", 0, 20)};
  const auto a = optimize_posterior(probs, s.model, s.basis, s.prior, s.ds.box, cfg, {true, true});
  const auto b = optimize_posterior(probs, s.model, s.basis, s.prior, s.ds.box, cfg, {true, true});
  for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(a.posteriors[j].samples, b.posteriors[j].samples);
  EXPECT_EQ(a.posteriors[0].method, Method::OptGlobal);
}

TEST(Method, StringRoundTrip) {
  for (auto m : {Method::Naive, Method::Opt, Method::OptKld, Method::OptGlobal, Method::Truth})
    EXPECT_EQ(method_from_string(to_string(m)), m);
  EXPECT_THROW(method_from_string("BEST"), ValidationError);
}
