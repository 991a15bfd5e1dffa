#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

#include "epical/io.hpp"
#include "epical/surrogate.hpp"
#include "support.hpp"

using namespace epical;
using epical::testing::rel_error;

namespace {

double half_weighted_sse(const SurrogateModel& m, const PcaBasis& b, const ParamVector& x,
                         const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  return 0.5 * (w.array() * (predict_curve(m, b, x) - y).array()).matrix().squaredNorm();
}

/// True when every hidden pre-activation is at least `gap` away from the kink.
bool away_from_kinks(const SurrogateModel& m, const ParamVector& x, double gap) {
  const auto pass = detail::eval_pass(m, Eigen::Map<const Eigen::VectorXd>(x.data(), kNumParams));
  return pass.u1.cwiseAbs().minCoeff() > gap && pass.u2.cwiseAbs().minCoeff() > gap;
}

}  // namespace

TEST(Forward, EvalModeIsPureAndBatchInvariant) {
  const auto& s = epical::testing::small_setup();
  Rng rng(1);
  Eigen::MatrixXd x(kNumParams, 7);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(0.1, 0.9);
  const Eigen::MatrixXd batch = forward_batch(s.model, x);
  EXPECT_EQ(batch, forward_batch(s.model, x));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const Eigen::MatrixXd single = forward_batch(s.model, x.col(j));
    EXPECT_LT((single - batch.col(j)).cwiseAbs().maxCoeff(), 1e-15);
  }
  EXPECT_EQ(batch.rows(), 10);
  EXPECT_TRUE(batch.allFinite());
}

TEST(Forward, Errors) {
  const auto& s = epical::testing::small_setup();
  Eigen::MatrixXd x = Eigen::MatrixXd::Constant(kNumParams, 1, 0.5);
  x(2, 0) = std::nan("");
  EXPECT_THROW(forward_batch(s.model, x), DomainError);
  EXPECT_THROW(forward_batch(s.model, Eigen::MatrixXd::Zero(5, 1)), ArgumentError);
  auto training = s.model;
  training.mode = Mode::Train;
  EXPECT_THROW(forward(training, ParamVector{}), StateError);
  EXPECT_THROW(input_gradient(training, s.basis, ParamVector{}, s.basis.mean,
                              Eigen::VectorXd::Ones(28)),
               StateError);
}

TEST(Forward, TracksTrainingCodes) {
  const auto& s = epical::testing::small_setup();
  double err = 0.0;
  const auto recs = s.ds.records_in(Split::Train);
  for (const auto* r : recs) {
    const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(r->normalized.data(), 28);
    err += (predict_curve(s.model, s.basis, r->params.to_array()) - y).cwiseAbs().mean();
  }
  err /= static_cast<double>(recs.size());
  const auto& last = s.model.summary;
  EXPECT_LT(err, 5e-3);
  EXPECT_GT(last.train_loss.front(), last.train_loss.back());
}

TEST(InputGradient, MatchesCentralDifferences) {
  int checked = 0;
  for (std::uint64_t seed = 1; checked < 20; ++seed) {
    ASSERT_LT(seed, 200u) << "too many samples rejected near kinks";
    const auto model = epical::testing::random_model(seed);
    const auto basis = epical::testing::random_basis(seed + 1000, 10, 28);
    Rng rng(seed * 7);
    ParamVector x{};
    for (auto& v : x) v = rng.uniform(0.1, 0.9);
    if (!away_from_kinks(model, x, 1e-3)) continue;
    const Eigen::VectorXd y =
        Eigen::VectorXd::NullaryExpr(28, [&] { return rng.uniform(0.0, 0.02); });
    const Eigen::VectorXd w = Eigen::VectorXd::NullaryExpr(28, [&] { return rng.uniform(0.0, 2.0); });
    const auto g = input_gradient(model, basis, x, y, w);
    double scale = 0.0;
    for (double v : g) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < kNumParams; ++i) {
      auto xp = x, xm = x;
      xp[i] += 1e-5;
      xm[i] -= 1e-5;
      const double fd =
          (half_weighted_sse(model, basis, xp, y, w) - half_weighted_sse(model, basis, xm, y, w)) / 2e-5;
      EXPECT_LT(rel_error(g[i], fd, 1e-6 * scale), 1e-4) << "seed " << seed << " coord " << i;
    }
    ++checked;
  }
}

TEST(InputGradient, ZeroWeightsGiveZero) {
  const auto& s = epical::testing::small_setup();
  const auto g = input_gradient(s.model, s.basis, {0.5, 0.1, 0.5, 0.3, 0.4, 0.5},
                                Eigen::VectorXd::Zero(28), Eigen::VectorXd::Zero(28));
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(InputGradient, VanishesAtExactFit) {
  const auto& s = epical::testing::small_setup();
  const ParamVector x{0.4, 0.1, 0.6, 0.25, 0.3, 0.7};
  const auto g = input_gradient(s.model, s.basis, x, predict_curve(s.model, s.basis, x),
                                Eigen::VectorXd::Ones(28));
  double norm = 0.0;
  for (double v : g) norm += v * v;
  EXPECT_LT(std::sqrt(norm), 1e-6);
}

TEST(Train, MemorizesSinglePoint) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Constant(kNumParams, 1, 0.3);
  Eigen::MatrixXd z(3, 1);
  z << 0.2, -0.1, 0.05;
  TrainConfig cfg;
  cfg.epochs = 3000;
  cfg.learning_rate = 1e-2;
  cfg.hidden1 = cfg.hidden2 = 8;
  cfg.seed = 2;
  const auto m = train_surrogate(x, z, cfg);
  EXPECT_LT((forward_batch(m, x) - z).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Train, SeedDeterminesSerializedWeights) {
  const auto& s = epical::testing::small_setup();
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 17;
  const auto a = serialize_model(train_surrogate(s.ds, s.basis, cfg));
  EXPECT_EQ(a, serialize_model(train_surrogate(s.ds, s.basis, cfg)));
  cfg.seed = 18;
  EXPECT_NE(a, serialize_model(train_surrogate(s.ds, s.basis, cfg)));
}

TEST(Train, ConfigValidation) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Constant(kNumParams, 4, 0.3);
  const Eigen::MatrixXd z = Eigen::MatrixXd::Zero(2, 4);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(train_surrogate(x, z, cfg), ArgumentError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(train_surrogate(x, z, cfg), ArgumentError);
  EXPECT_THROW(train_surrogate(x, Eigen::MatrixXd::Zero(2, 3), TrainConfig{}), ArgumentError);
}

TEST(Train, NonFiniteLossReportsEpoch) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Constant(kNumParams, 4, 0.3);
  x(0, 1) = 0.5;
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(2, 4);
  z.row(1).setConstant(1e200);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.validation_fraction = 0.25;
  try {
    train_surrogate(x, z, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos) << e.what();
  }
  z(0, 0) = std::nan("");
  EXPECT_THROW(train_surrogate(x, z, cfg), DomainError);
}

TEST(Serialization, RoundTripIsExact) {
  const auto& s = epical::testing::small_setup();
  const auto path = std::filesystem::temp_directory_path() / "epical_test_model.txt";
  write_model(s.model, path);
  const auto back = read_model(path);
  EXPECT_EQ(serialize_model(back), serialize_model(s.model));
  const ParamVector x{0.2, 0.05, 0.3, 0.4, 0.5, 0.6};
  EXPECT_EQ(forward(back, x), forward(s.model, x));

  auto text = io::read_file(path);
  const auto pos = text.find("w2 ");
  text[pos + 12] = text[pos + 12] == '3' ? '4' : '3';
  io::write_file(path, text);
  EXPECT_THROW(read_model(path), ValidationError);
  std::filesystem::remove(path);
}

// Sanity properties on the default-size dataset and training settings.
// Minibatch noise makes 5-epoch averages jitter on the plateau, so the loss
// trend is checked on 25-epoch block means.
TEST(Train, DefaultScaleLossTrendAndFit) {
  const auto ds = generate_ensemble(epical::testing::test_msas(), 500, ParameterBox::ensemble_default(), 28,
                                    20200622, 10);
  const auto basis = fit_pca(epical::testing::train_matrix(ds), 10);
  TrainConfig cfg;
  cfg.seed = 1;
  const auto model = train_surrogate(ds, basis, cfg);
  const auto& loss = model.summary.train_loss;
  ASSERT_EQ(loss.size(), 500u);
  std::vector<double> blocks;
  for (std::size_t b = 0; b < 20; ++b)
    blocks.push_back(std::accumulate(loss.begin() + 25 * b, loss.begin() + 25 * (b + 1), 0.0) / 25.0);
  int violations = 0;
  for (std::size_t i = 1; i < blocks.size(); ++i) violations += blocks[i] > blocks[i - 1] ? 1 : 0;
  EXPECT_LE(violations, 1);

  // Typical training input lands within the training error of its PCA code.
  std::vector<double> sq;
  for (const auto* r : ds.records_in(Split::Train)) {
    const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(r->normalized.data(), 28);
    sq.push_back((forward(model, r->params.to_array()) - project(basis, y)).squaredNorm() / 10.0);
  }
  std::nth_element(sq.begin(), sq.begin() + static_cast<std::ptrdiff_t>(sq.size() / 2), sq.end());
  EXPECT_LE(sq[sq.size() / 2], model.summary.final_train_loss);
}
