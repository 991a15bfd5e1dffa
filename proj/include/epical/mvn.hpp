#pragma once

// Multivariate normal helpers used for prior initialization and the KL
// regularizers. Sample matrices hold one sample per row.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "epical/error.hpp"
#include "epical/io.hpp"
#include "epical/rng.hpp"
#include "epical/simcore.hpp"

namespace epical {

struct MvnModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  ///< includes jitter * I
  double jitter = 0.0;

  Eigen::Index dim() const { return mean.size(); }
};

/// Mean and unbiased covariance of the rows of x, plus jitter * I. No checks
/// beyond shape; used inside the optimization loss.
inline MvnModel sample_moments(const Eigen::MatrixXd& x, double jitter) {
  const Eigen::Index n = x.rows();
  if (n < 2) throw ArgumentError("sample_moments: need at least 2 samples");
  MvnModel m;
  m.jitter = jitter;
  m.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - m.mean.transpose();
  m.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  m.cov.diagonal().array() += jitter;
  return m;
}

/// Backpropagates dL/dmean and dL/dcov of sample_moments(x) to dL/dx.
inline Eigen::MatrixXd sample_moments_backward(const Eigen::MatrixXd& x,
                                               const Eigen::VectorXd& d_mean,
                                               const Eigen::MatrixXd& d_cov) {
  const Eigen::Index n = x.rows();
  const Eigen::VectorXd mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd sym = 0.5 * (d_cov + d_cov.transpose());
  Eigen::MatrixXd grad = (x.rowwise() - mu.transpose()) * sym * (2.0 / static_cast<double>(n - 1));
  grad.rowwise() += d_mean.transpose() / static_cast<double>(n);
  return grad;
}

inline std::string condition_report(const Eigen::MatrixXd& cov) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
  return "eigenvalues in [" + io::fmt(eig.eigenvalues().minCoeff()) + ", " +
         io::fmt(eig.eigenvalues().maxCoeff()) + "]";
}

inline Eigen::LLT<Eigen::MatrixXd> checked_cholesky(const Eigen::MatrixXd& cov, const char* who) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success || !llt.matrixLLT().allFinite() ||
      (llt.matrixLLT().diagonal().array() <= 0.0).any())
    throw NumericError(std::string(who) + ": covariance is not positive definite (" +
                       condition_report(cov) + ")");
  return llt;
}

/// Validated moments of the rows of x (n >= 2, finite, positive definite).
inline MvnModel fit_mvn(const Eigen::MatrixXd& x, double jitter) {
  if (x.rows() < 2) throw ArgumentError("fit_mvn: need at least 2 samples");
  if (!(jitter >= 0.0)) throw ArgumentError("fit_mvn: jitter must be >= 0");
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    if (!x.row(i).allFinite())
      throw DomainError("fit_mvn: row " + std::to_string(i) + " is not finite");
  auto m = sample_moments(x, jitter);
  checked_cholesky(m.cov, "fit_mvn");
  return m;
}

/// Cholesky draws, each coordinate clamped into `box` when one is given.
inline Eigen::MatrixXd sample_mvn(const MvnModel& model, std::size_t n, std::uint64_t seed,
                                  const ParameterBox* box = nullptr) {
  const Eigen::Index d = model.dim();
  if (box && d != static_cast<Eigen::Index>(kNumParams))
    throw ArgumentError("sample_mvn: box clamping needs a 6-D model");
  const auto llt = checked_cholesky(model.cov, "sample_mvn");
  const Eigen::MatrixXd lower = llt.matrixL();
  Rng rng(seed);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), d);
  Eigen::VectorXd eps(d);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) eps(j) = rng.normal();
    out.row(i) = (model.mean + lower * eps).transpose();
    if (box)
      for (Eigen::Index j = 0; j < d; ++j)
        out(i, j) = box->clamp(static_cast<std::size_t>(j), out(i, j));
  }
  return out;
}

/// Log density; used by the Monte-Carlo checks.
inline double log_density(const MvnModel& model, const Eigen::VectorXd& x) {
  const auto llt = checked_cholesky(model.cov, "log_density");
  const Eigen::VectorXd w = llt.matrixL().solve(x - model.mean);
  const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (w.squaredNorm() + log_det +
                 static_cast<double>(model.dim()) * std::log(2.0 * 3.14159265358979323846));
}

struct KlGradient {
  double value = 0.0;
  Eigen::VectorXd d_mean_p, d_mean_q;
  Eigen::MatrixXd d_cov_p, d_cov_q;
};

namespace detail {

inline void check_pair(const MvnModel& p, const MvnModel& q) {
  if (p.dim() != q.dim() || p.cov.rows() != p.dim() || q.cov.rows() != q.dim())
    throw ArgumentError("kl_mvn: dimension mismatch");
}

}  // namespace detail

/// KL(p || q) in closed form via Cholesky log-determinants and triangular solves.
inline double kl_mvn(const MvnModel& p, const MvnModel& q) {
  detail::check_pair(p, q);
  const auto lp = checked_cholesky(p.cov, "kl_mvn (p)");
  const auto lq = checked_cholesky(q.cov, "kl_mvn (q)");
  const double logdet_p = 2.0 * lp.matrixLLT().diagonal().array().log().sum();
  const double logdet_q = 2.0 * lq.matrixLLT().diagonal().array().log().sum();
  const Eigen::MatrixXd lower_p = lp.matrixL();
  const double trace = lq.matrixL().solve(lower_p).squaredNorm();
  const double maha = lq.matrixL().solve(q.mean - p.mean).squaredNorm();
  return 0.5 * (logdet_q - logdet_p - static_cast<double>(p.dim()) + trace + maha);
}

/// KL(p || q) and its gradients with respect to both means and covariances.
inline KlGradient kl_mvn_gradient(const MvnModel& p, const MvnModel& q) {
  detail::check_pair(p, q);
  const Eigen::Index d = p.dim();
  const auto lp = checked_cholesky(p.cov, "kl_mvn (p)");
  const auto lq = checked_cholesky(q.cov, "kl_mvn (q)");
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd p_inv = lp.solve(eye);
  const Eigen::MatrixXd q_inv = lq.solve(eye);
  const Eigen::VectorXd delta = q.mean - p.mean;
  const Eigen::VectorXd q_inv_delta = q_inv * delta;

  KlGradient g;
  g.value = kl_mvn(p, q);
  g.d_mean_p = -q_inv_delta;
  g.d_mean_q = q_inv_delta;
  g.d_cov_p = 0.5 * (q_inv - p_inv);
  g.d_cov_q = 0.5 * (q_inv - q_inv * p.cov * q_inv - q_inv_delta * q_inv_delta.transpose());
  return g;
}

/// Marginal over a contiguous block of coordinates.
inline MvnModel marginal(const MvnModel& m, Eigen::Index first, Eigen::Index count) {
  if (first < 0 || count < 1 || first + count > m.dim())
    throw ArgumentError("marginal: index range out of bounds");
  return {m.mean.segment(first, count), m.cov.block(first, first, count, count), m.jitter};
}

}  // namespace epical
