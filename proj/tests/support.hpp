#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include <Eigen/Dense>

#include "epical/calibrate.hpp"
#include "epical/ensemble.hpp"
#include "epical/pca.hpp"
#include "epical/rng.hpp"
#include "epical/surrogate.hpp"

namespace epical::testing {

inline std::filesystem::path source_path(const std::string& rel) {
  return std::filesystem::path(EPICAL_SOURCE_DIR) / rel;
}

inline const std::vector<MsaProfile>& test_msas() {
  static const auto msas = load_msa_profiles(source_path("configs/msas.json"));
  return msas;
}

inline MsaProfile fixture_msa() {
  return {"FIX", 1e6, 500.0, 1.0, 3.0};
}

inline Eigen::MatrixXd train_matrix(const EnsembleDataset& ds) {
  const auto recs = ds.records_in(Split::Train);
  Eigen::MatrixXd curves(static_cast<Eigen::Index>(recs.size()), ds.horizon);
  for (std::size_t i = 0; i < recs.size(); ++i)
    curves.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(recs[i]->normalized.data(), ds.horizon);
  return curves;
}

/// Small dataset, basis and briefly trained surrogate shared across tests.
struct Setup {
  EnsembleDataset ds;
  PcaBasis basis;
  SurrogateModel model;
  MvnModel prior;
};

inline const Setup& small_setup() {
  static const Setup s = [] {
    Setup out;
    out.ds = generate_ensemble(test_msas(), 40, ParameterBox::ensemble_default(), 28, 99, 10);
    out.basis = fit_pca(train_matrix(out.ds), 10);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.seed = 4;
    out.model = train_surrogate(out.ds, out.basis, cfg);
    out.prior = fit_prior(out.ds, 1e-8);
    return out;
  }();
  return s;
}

/// A network fitted for a few epochs to random targets: arbitrary but well-conditioned weights.
inline SurrogateModel random_model(std::uint64_t seed, Eigen::Index n_out = 10) {
  Rng rng(seed);
  const Eigen::Index n = 48;
  Eigen::MatrixXd x(kNumParams, n), z(n_out, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, j) = rng.uniform(0.05, 0.95);
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
  }
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.hidden1 = 12;
  cfg.hidden2 = 9;
  cfg.seed = seed;
  return train_surrogate(x, z, cfg);
}

/// Orthonormal k x T basis with a random mean.
inline PcaBasis random_basis(std::uint64_t seed, Eigen::Index k, Eigen::Index horizon) {
  Rng rng(seed);
  Eigen::MatrixXd a(horizon, k);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(horizon, k);
  PcaBasis b;
  b.components = q.transpose();
  b.mean = Eigen::VectorXd::NullaryExpr(horizon, [&] { return rng.uniform(0.0, 0.01); });
  b.explained_variance = Eigen::VectorXd::Ones(k);
  return b;
}

/// |a - b| relative to the larger magnitude, with an absolute floor.
inline double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace epical::testing
