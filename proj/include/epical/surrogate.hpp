#pragma once

// Universal emulator: 6 parameters -> k PCA coefficients.
//
//   x -> standardize -> D1 -> BN1 -> LeakyReLU -> D2 -> BN2 -> LeakyReLU -> D3 -> scale -> z
//
// Matrices hold one sample per column.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "epical/ensemble.hpp"
#include "epical/error.hpp"
#include "epical/io.hpp"
#include "epical/pca.hpp"
#include "epical/rng.hpp"
#include "epical/simcore.hpp"

namespace epical {

enum class Mode { Train, Eval };

struct TrainConfig {
  std::size_t hidden1 = 64;
  std::size_t hidden2 = 64;
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::size_t epochs = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double validation_fraction = 0.1;
  double leaky_slope = 0.01;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (hidden1 < 1 || hidden2 < 1) throw ArgumentError("TrainConfig: hidden widths must be >= 1");
    if (!(learning_rate > 0.0)) throw ArgumentError("TrainConfig: learning_rate must be > 0");
    if (batch_size < 1) throw ArgumentError("TrainConfig: batch_size must be >= 1");
    if (epochs < 1) throw ArgumentError("TrainConfig: epochs must be >= 1");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
      throw ArgumentError("TrainConfig: Adam moment coefficients must lie in (0, 1)");
    if (!(epsilon > 0.0)) throw ArgumentError("TrainConfig: epsilon must be > 0");
    if (!(validation_fraction > 0.0 && validation_fraction <= 0.5))
      throw ArgumentError("TrainConfig: validation_fraction must lie in (0, 0.5]");
    if (!(leaky_slope > 0.0)) throw ArgumentError("TrainConfig: leaky_slope must be > 0");
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0))
      throw ArgumentError("TrainConfig: bn_momentum must lie in (0, 1]");
  }
};

struct TrainingSummary {
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  double final_train_loss = 0.0;       ///< MSE in PCA units
  double final_validation_loss = 0.0;  ///< MSE in PCA units; 0 without a validation split
  std::vector<double> train_loss;      ///< per epoch
  std::vector<double> validation_loss;
};

struct BatchNorm {
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
  Eigen::VectorXd running_mean;
  Eigen::VectorXd running_var;
  double eps = 1e-5;

  explicit BatchNorm(Eigen::Index width = 0)
      : gamma(Eigen::VectorXd::Ones(width)),
        beta(Eigen::VectorXd::Zero(width)),
        running_mean(Eigen::VectorXd::Zero(width)),
        running_var(Eigen::VectorXd::Ones(width)) {}

  /// Frozen statistics make the layer affine: u = scale * h + shift.
  Eigen::VectorXd eval_scale() const {
    return gamma.array() / (running_var.array() + eps).sqrt();
  }
  Eigen::VectorXd eval_shift() const {
    return beta.array() - eval_scale().array() * running_mean.array();
  }
};

struct SurrogateModel {
  Eigen::VectorXd input_shift;  ///< per-parameter standardization
  Eigen::VectorXd input_scale;
  double output_scale = 1.0;    ///< codes are predicted in units of output_scale
  Eigen::MatrixXd w1, w2, w3;
  Eigen::VectorXd b1, b2, b3;
  BatchNorm bn1, bn2;
  double leaky_slope = 0.01;
  Mode mode = Mode::Train;
  TrainingSummary summary;

  Eigen::Index inputs() const { return w1.cols(); }
  Eigen::Index outputs() const { return w3.rows(); }
};

namespace detail {

inline Eigen::MatrixXd leaky(const Eigen::MatrixXd& u, double slope) {
  return u.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
}

inline Eigen::MatrixXd leaky_grad(const Eigen::MatrixXd& u, double slope) {
  return u.unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; });
}

inline Eigen::MatrixXd standardize(const SurrogateModel& m, const Eigen::MatrixXd& x) {
  return (x.colwise() - m.input_shift).array().colwise() / m.input_scale.array();
}

/// Eval-mode activations kept for the reverse pass.
struct EvalPass {
  Eigen::MatrixXd u1, u2, z;
};

inline EvalPass eval_pass(const SurrogateModel& m, const Eigen::MatrixXd& x) {
  EvalPass p;
  const Eigen::MatrixXd xn = standardize(m, x);
  Eigen::MatrixXd h1 = (m.w1 * xn).colwise() + m.b1;
  p.u1 = (h1.array().colwise() * m.bn1.eval_scale().array()).colwise() +
         m.bn1.eval_shift().array();
  Eigen::MatrixXd h2 = (m.w2 * leaky(p.u1, m.leaky_slope)).colwise() + m.b2;
  p.u2 = (h2.array().colwise() * m.bn2.eval_scale().array()).colwise() +
         m.bn2.eval_shift().array();
  p.z = ((m.w3 * leaky(p.u2, m.leaky_slope)).colwise() + m.b3) * m.output_scale;
  return p;
}

inline void require_eval(const SurrogateModel& m, const char* what) {
  if (m.mode != Mode::Eval)
    throw StateError(std::string(what) + " requires a model in EVAL mode");
}

inline void check_inputs(const SurrogateModel& m, const Eigen::MatrixXd& x) {
  if (x.rows() != m.inputs())
    throw ArgumentError("surrogate expects " + std::to_string(m.inputs()) + " inputs, got " +
                        std::to_string(x.rows()));
  if (!x.allFinite()) throw DomainError("surrogate input is not finite");
}

}  // namespace detail

/// Batched eval-mode forward: x is 6 x n, result is k x n.
inline Eigen::MatrixXd forward_batch(const SurrogateModel& m, const Eigen::MatrixXd& x) {
  detail::require_eval(m, "forward");
  detail::check_inputs(m, x);
  return detail::eval_pass(m, x).z;
}

inline Eigen::VectorXd forward(const SurrogateModel& m, const ParamVector& x) {
  return forward_batch(m, Eigen::Map<const Eigen::VectorXd>(x.data(), kNumParams));
}

namespace detail {

inline Eigen::MatrixXd backward_from_pass(const SurrogateModel& m, const EvalPass& pass,
                                          const Eigen::MatrixXd& grad_z) {
  Eigen::MatrixXd g = m.w3.transpose() * (grad_z * m.output_scale);
  g.array() *= leaky_grad(pass.u2, m.leaky_slope).array();
  g.array().colwise() *= m.bn2.eval_scale().array();
  g = m.w2.transpose() * g;
  g.array() *= leaky_grad(pass.u1, m.leaky_slope).array();
  g.array().colwise() *= m.bn1.eval_scale().array();
  g = m.w1.transpose() * g;
  g.array().colwise() /= m.input_scale.array();
  return g;
}

}  // namespace detail

/// Reverse pass in eval mode: given dL/dz (k x n) at inputs x (6 x n), returns dL/dx (6 x n).
inline Eigen::MatrixXd input_backward(const SurrogateModel& m, const Eigen::MatrixXd& x,
                                      const Eigen::MatrixXd& grad_z) {
  detail::require_eval(m, "input gradient");
  detail::check_inputs(m, x);
  if (grad_z.rows() != m.outputs() || grad_z.cols() != x.cols())
    throw ArgumentError("input_backward: gradient shape does not match outputs");
  return detail::backward_from_pass(m, detail::eval_pass(m, x), grad_z);
}

/// Cumulative normalized curve: reconstruct(basis, forward(x)).
inline Eigen::VectorXd predict_curve(const SurrogateModel& m, const PcaBasis& basis,
                                     const ParamVector& x) {
  return reconstruct(basis, forward(m, x));
}

/// Curves for every column of x; result is T x n.
inline Eigen::MatrixXd predict_curves(const SurrogateModel& m, const PcaBasis& basis,
                                      const Eigen::MatrixXd& x) {
  if (m.outputs() != static_cast<Eigen::Index>(basis.k()))
    throw ArgumentError("surrogate outputs do not match basis size");
  return (basis.components.transpose() * forward_batch(m, x)).colwise() + basis.mean;
}

/// Gradient of 1/2 || w .* (predict_curve(x) - y_obs) ||^2 with respect to x.
inline ParamVector input_gradient(const SurrogateModel& m, const PcaBasis& basis,
                                  const ParamVector& x, const Eigen::VectorXd& y_obs,
                                  const Eigen::VectorXd& weights) {
  detail::require_eval(m, "input_gradient");
  check_length(basis, y_obs.size(), "input_gradient");
  check_length(basis, weights.size(), "input_gradient");
  const Eigen::Map<const Eigen::VectorXd> xv(x.data(), kNumParams);
  const Eigen::VectorXd residual = predict_curve(m, basis, x) - y_obs;
  const Eigen::VectorXd grad_z =
      basis.components * (weights.array().square() * residual.array()).matrix();
  const Eigen::MatrixXd g = input_backward(m, xv, grad_z);
  ParamVector out{};
  for (std::size_t i = 0; i < kNumParams; ++i) out[i] = g(static_cast<Eigen::Index>(i), 0);
  return out;
}

namespace detail {

struct AdamSlot {
  Eigen::MatrixXd m, v;
  explicit AdamSlot(const Eigen::MatrixXd& like)
      : m(Eigen::MatrixXd::Zero(like.rows(), like.cols())),
        v(Eigen::MatrixXd::Zero(like.rows(), like.cols())) {}

  template <class Param>
  void step(Param& p, const Eigen::MatrixXd& g, const TrainConfig& cfg, double c1, double c2) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
  }
};

struct BnCache {
  Eigen::MatrixXd xhat;
  Eigen::VectorXd inv_std;
};

inline Eigen::MatrixXd bn_train_forward(BatchNorm& bn, const Eigen::MatrixXd& h, double momentum,
                                        BnCache& cache) {
  const auto batch = static_cast<double>(h.cols());
  const Eigen::VectorXd mu = h.rowwise().mean();
  const Eigen::MatrixXd centered = h.colwise() - mu;
  const Eigen::VectorXd var = centered.array().square().rowwise().sum() / batch;
  cache.inv_std = (var.array() + bn.eps).rsqrt();
  cache.xhat = centered.array().colwise() * cache.inv_std.array();
  bn.running_mean = (1.0 - momentum) * bn.running_mean + momentum * mu;
  if (h.cols() > 1)
    bn.running_var = (1.0 - momentum) * bn.running_var + momentum * var * (batch / (batch - 1.0));
  return (cache.xhat.array().colwise() * bn.gamma.array()).colwise() + bn.beta.array();
}

/// Returns dL/dh; fills gradients for gamma and beta.
inline Eigen::MatrixXd bn_train_backward(const BatchNorm& bn, const BnCache& cache,
                                         const Eigen::MatrixXd& gu, Eigen::VectorXd& dgamma,
                                         Eigen::VectorXd& dbeta) {
  const auto batch = static_cast<double>(gu.cols());
  dgamma = (gu.array() * cache.xhat.array()).rowwise().sum();
  dbeta = gu.rowwise().sum();
  const Eigen::MatrixXd dxhat = gu.array().colwise() * bn.gamma.array();
  const Eigen::VectorXd sum_d = dxhat.rowwise().sum();
  const Eigen::VectorXd sum_dx = (dxhat.array() * cache.xhat.array()).rowwise().sum();
  Eigen::MatrixXd dh = (batch * dxhat.array()).colwise() - sum_d.array();
  dh.array() -= cache.xhat.array().colwise() * sum_dx.array();
  dh.array().colwise() *= cache.inv_std.array() / batch;
  return dh;
}

inline Eigen::MatrixXd init_dense(Rng& rng, Eigen::Index out, Eigen::Index in, double limit) {
  Eigen::MatrixXd w(out, in);
  for (Eigen::Index c = 0; c < in; ++c)
    for (Eigen::Index r = 0; r < out; ++r) w(r, c) = rng.uniform(-limit, limit);
  return w;
}

/// Sets batch-norm statistics to the full-data statistics under final weights.
inline void recalibrate_batch_norm(SurrogateModel& m, const Eigen::MatrixXd& x) {
  const auto n = static_cast<double>(x.cols());
  auto population_stats = [n](BatchNorm& bn, const Eigen::MatrixXd& h) {
    bn.running_mean = h.rowwise().mean();
    const Eigen::VectorXd ss = (h.colwise() - bn.running_mean).array().square().rowwise().sum();
    bn.running_var = (n > 1.0 ? Eigen::VectorXd(ss / (n - 1.0)) : Eigen::VectorXd(ss))
                         .cwiseMax(1e-12);
  };
  const Eigen::MatrixXd h1 = (m.w1 * standardize(m, x)).colwise() + m.b1;
  population_stats(m.bn1, h1);
  const Eigen::MatrixXd u1 =
      (h1.array().colwise() * m.bn1.eval_scale().array()).colwise() + m.bn1.eval_shift().array();
  const Eigen::MatrixXd h2 = (m.w2 * leaky(u1, m.leaky_slope)).colwise() + m.b2;
  population_stats(m.bn2, h2);
}

}  // namespace detail

/// Fits the surrogate by minibatch Adam on MSE in PCA space.
/// `inputs` is 6 x n, `codes` is k x n (PCA projections of normalized curves).
inline SurrogateModel train_surrogate(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& codes,
                                      const TrainConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = inputs.cols();
  if (n < 1) throw ArgumentError("train_surrogate: empty training set");
  if (inputs.rows() != static_cast<Eigen::Index>(kNumParams))
    throw ArgumentError("train_surrogate: inputs must have 6 rows");
  if (codes.cols() != n) throw ArgumentError("train_surrogate: inputs and codes differ in count");
  if (!inputs.allFinite() || !codes.allFinite())
    throw DomainError("train_surrogate: non-finite training data");

  const auto h1 = static_cast<Eigen::Index>(cfg.hidden1);
  const auto h2 = static_cast<Eigen::Index>(cfg.hidden2);
  const Eigen::Index k = codes.rows();

  // Validation rows are a seeded random subset; the remaining rows train.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng split_rng(derive_seed(cfg.seed, 0xa1));
  split_rng.shuffle(order.begin(), order.end());
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * n));
  const std::vector<Eigen::Index> val_idx(order.begin(), order.begin() + n_val);
  std::vector<Eigen::Index> train_idx(order.begin() + n_val, order.end());
  std::sort(train_idx.begin(), train_idx.end());
  const Eigen::MatrixXd x_train = inputs(Eigen::all, train_idx);
  const Eigen::MatrixXd x_val = inputs(Eigen::all, val_idx);

  SurrogateModel m;
  m.leaky_slope = cfg.leaky_slope;
  m.input_shift = x_train.rowwise().mean();
  m.input_scale =
      ((x_train.colwise() - m.input_shift).array().square().rowwise().mean()).sqrt().matrix();
  for (auto& s : m.input_scale) s = s > 1e-12 ? s : 1.0;
  const Eigen::MatrixXd codes_train = codes(Eigen::all, train_idx);
  const double code_rms = std::sqrt(codes_train.row(0).squaredNorm() /
                                    static_cast<double>(codes_train.cols()));
  m.output_scale = code_rms > 1e-12 ? code_rms : 1.0;
  const Eigen::MatrixXd z_train = codes_train / m.output_scale;
  const Eigen::MatrixXd z_val = codes(Eigen::all, val_idx) / m.output_scale;

  Rng init_rng(derive_seed(cfg.seed, 0xb2));
  const double gain = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
  m.w1 = detail::init_dense(init_rng, h1, kNumParams, gain * std::sqrt(3.0 / kNumParams));
  m.w2 = detail::init_dense(init_rng, h2, h1, gain * std::sqrt(3.0 / static_cast<double>(h1)));
  m.w3 = detail::init_dense(init_rng, k, h2, std::sqrt(6.0 / static_cast<double>(h2 + k)));
  m.b1 = Eigen::VectorXd::Zero(h1);
  m.b2 = Eigen::VectorXd::Zero(h2);
  m.b3 = Eigen::VectorXd::Zero(k);
  m.bn1 = BatchNorm(h1);
  m.bn2 = BatchNorm(h2);

  detail::AdamSlot s_w1(m.w1), s_b1(m.b1), s_g1(m.bn1.gamma), s_be1(m.bn1.beta);
  detail::AdamSlot s_w2(m.w2), s_b2(m.b2), s_g2(m.bn2.gamma), s_be2(m.bn2.beta);
  detail::AdamSlot s_w3(m.w3), s_b3(m.b3);

  const double unscale = m.output_scale * m.output_scale;
  const auto n_train = static_cast<std::size_t>(x_train.cols());
  const std::size_t batch = std::min(cfg.batch_size, n_train);
  std::vector<Eigen::Index> perm(n_train);
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  Rng shuffle_rng(derive_seed(cfg.seed, 0xc3));
  std::uint64_t t = 0;
  detail::BnCache c1, c2;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(perm.begin(), perm.end());
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < n_train; start += batch) {
      const std::size_t stop = std::min(start + batch, n_train);
      // A trailing single-sample batch carries no batch statistics.
      if (stop - start < 2 && n_train > 1) continue;
      const std::vector<Eigen::Index> idx(perm.begin() + static_cast<std::ptrdiff_t>(start),
                                          perm.begin() + static_cast<std::ptrdiff_t>(stop));
      const Eigen::MatrixXd xb = detail::standardize(m, x_train(Eigen::all, idx));
      const Eigen::MatrixXd zb = z_train(Eigen::all, idx);
      const auto bsz = static_cast<double>(idx.size());

      const Eigen::MatrixXd hh1 = (m.w1 * xb).colwise() + m.b1;
      const Eigen::MatrixXd u1 = detail::bn_train_forward(m.bn1, hh1, cfg.bn_momentum, c1);
      const Eigen::MatrixXd a1 = detail::leaky(u1, m.leaky_slope);
      const Eigen::MatrixXd hh2 = (m.w2 * a1).colwise() + m.b2;
      const Eigen::MatrixXd u2 = detail::bn_train_forward(m.bn2, hh2, cfg.bn_momentum, c2);
      const Eigen::MatrixXd a2 = detail::leaky(u2, m.leaky_slope);
      const Eigen::MatrixXd out = (m.w3 * a2).colwise() + m.b3;

      const Eigen::MatrixXd diff = out - zb;
      const double loss = diff.squaredNorm() / (bsz * static_cast<double>(k));
      if (!std::isfinite(loss))
        throw NumericError("training loss is not finite at epoch " + std::to_string(epoch) +
                           ", batch starting at " + std::to_string(start));
      loss_sum += loss * bsz;
      loss_count += idx.size();

      const Eigen::MatrixXd g_out = diff * (2.0 / (bsz * static_cast<double>(k)));
      const Eigen::MatrixXd g_w3 = g_out * a2.transpose();
      const Eigen::VectorXd g_b3 = g_out.rowwise().sum();
      Eigen::MatrixXd g = m.w3.transpose() * g_out;
      g.array() *= detail::leaky_grad(u2, m.leaky_slope).array();
      Eigen::VectorXd g_gamma2, g_beta2;
      g = detail::bn_train_backward(m.bn2, c2, g, g_gamma2, g_beta2);
      const Eigen::MatrixXd g_w2 = g * a1.transpose();
      const Eigen::VectorXd g_b2 = g.rowwise().sum();
      g = m.w2.transpose() * g;
      g.array() *= detail::leaky_grad(u1, m.leaky_slope).array();
      Eigen::VectorXd g_gamma1, g_beta1;
      g = detail::bn_train_backward(m.bn1, c1, g, g_gamma1, g_beta1);
      const Eigen::MatrixXd g_w1 = g * xb.transpose();
      const Eigen::VectorXd g_b1 = g.rowwise().sum();

      ++t;
      const double b1c = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
      const double b2c = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
      s_w1.step(m.w1, g_w1, cfg, b1c, b2c);
      s_b1.step(m.b1, g_b1, cfg, b1c, b2c);
      s_g1.step(m.bn1.gamma, g_gamma1, cfg, b1c, b2c);
      s_be1.step(m.bn1.beta, g_beta1, cfg, b1c, b2c);
      s_w2.step(m.w2, g_w2, cfg, b1c, b2c);
      s_b2.step(m.b2, g_b2, cfg, b1c, b2c);
      s_g2.step(m.bn2.gamma, g_gamma2, cfg, b1c, b2c);
      s_be2.step(m.bn2.beta, g_beta2, cfg, b1c, b2c);
      s_w3.step(m.w3, g_w3, cfg, b1c, b2c);
      s_b3.step(m.b3, g_b3, cfg, b1c, b2c);
    }
    m.summary.train_loss.push_back(loss_count ? unscale * loss_sum / loss_count : 0.0);
    if (x_val.cols() > 0) {
      const Eigen::MatrixXd zv = detail::eval_pass(m, x_val).z / m.output_scale;
      m.summary.validation_loss.push_back(unscale * (zv - z_val).squaredNorm() /
                                          static_cast<double>(zv.size()));
    }
  }

  detail::recalibrate_batch_norm(m, x_train);
  m.mode = Mode::Eval;
  m.summary.epochs = cfg.epochs;
  m.summary.seed = cfg.seed;
  const Eigen::MatrixXd fit = detail::eval_pass(m, x_train).z;
  m.summary.final_train_loss = (fit - codes_train).squaredNorm() / static_cast<double>(fit.size());
  if (x_val.cols() > 0) {
    const Eigen::MatrixXd fv = detail::eval_pass(m, x_val).z;
    m.summary.final_validation_loss =
        (fv - codes(Eigen::all, val_idx)).squaredNorm() / static_cast<double>(fv.size());
  }
  return m;
}

/// Trains on the TRAIN split of a dataset, targets projected through `basis`.
inline SurrogateModel train_surrogate(const EnsembleDataset& ds, const PcaBasis& basis,
                                      const TrainConfig& cfg) {
  const auto recs = ds.records_in(Split::Train);
  if (recs.empty()) throw ArgumentError("train_surrogate: dataset has no TRAIN records");
  check_length(basis, ds.horizon, "train_surrogate");
  Eigen::MatrixXd x(kNumParams, static_cast<Eigen::Index>(recs.size()));
  Eigen::MatrixXd curves(static_cast<Eigen::Index>(recs.size()), ds.horizon);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto p = recs[i]->params.to_array();
    const auto col = static_cast<Eigen::Index>(i);
    for (std::size_t d = 0; d < kNumParams; ++d) x(static_cast<Eigen::Index>(d), col) = p[d];
    curves.row(col) = Eigen::Map<const Eigen::RowVectorXd>(recs[i]->normalized.data(), ds.horizon);
  }
  return train_surrogate(x, project_rows(basis, curves).transpose(), cfg);
}

// File format:
//   epical-surrogate v1 checksum=<fnv1a of the remaining bytes>
//   <json header>
//   <name> <rows> <cols> <values, column-major>   (one line per array)
namespace detail {

inline void put_array(std::string& body, const char* name, const Eigen::MatrixXd& a) {
  body += name;
  body += ' ' + std::to_string(a.rows()) + ' ' + std::to_string(a.cols());
  for (Eigen::Index i = 0; i < a.size(); ++i) body += ' ' + io::fmt(a.data()[i]);
  body += '\n';
}

}  // namespace detail

inline std::string serialize_model(const SurrogateModel& m) {
  nlohmann::json header;
  header["inputs"] = m.inputs();
  header["hidden1"] = m.w1.rows();
  header["hidden2"] = m.w2.rows();
  header["outputs"] = m.outputs();
  header["leaky_slope"] = io::fmt(m.leaky_slope);
  header["bn_eps"] = io::fmt(m.bn1.eps);
  header["output_scale"] = io::fmt(m.output_scale);
  header["mode"] = m.mode == Mode::Eval ? "EVAL" : "TRAIN";
  header["epochs"] = m.summary.epochs;
  header["seed"] = m.summary.seed;
  header["final_train_loss"] = io::fmt(m.summary.final_train_loss);
  header["final_validation_loss"] = io::fmt(m.summary.final_validation_loss);

  std::string body = header.dump() + "\n";
  detail::put_array(body, "input_shift", m.input_shift);
  detail::put_array(body, "input_scale", m.input_scale);
  detail::put_array(body, "w1", m.w1);
  detail::put_array(body, "b1", m.b1);
  detail::put_array(body, "bn1_gamma", m.bn1.gamma);
  detail::put_array(body, "bn1_beta", m.bn1.beta);
  detail::put_array(body, "bn1_mean", m.bn1.running_mean);
  detail::put_array(body, "bn1_var", m.bn1.running_var);
  detail::put_array(body, "w2", m.w2);
  detail::put_array(body, "b2", m.b2);
  detail::put_array(body, "bn2_gamma", m.bn2.gamma);
  detail::put_array(body, "bn2_beta", m.bn2.beta);
  detail::put_array(body, "bn2_mean", m.bn2.running_mean);
  detail::put_array(body, "bn2_var", m.bn2.running_var);
  detail::put_array(body, "w3", m.w3);
  detail::put_array(body, "b3", m.b3);
  return "epical-surrogate v1 checksum=" + io::hex64(io::fnv1a(body)) + "\n" + body;
}

inline SurrogateModel deserialize_model(const std::string& text) {
  const auto nl = text.find('\n');
  if (nl == std::string::npos) throw ValidationError("model file is empty");
  const std::string first = text.substr(0, nl);
  const std::string body = text.substr(nl + 1);
  const std::string prefix = "epical-surrogate v1 checksum=";
  if (first.rfind(prefix, 0) != 0) throw ValidationError("model file: unrecognized header");
  if (first.substr(prefix.size()) != io::hex64(io::fnv1a(body)))
    throw ValidationError("model file: checksum mismatch");

  const auto body_lines = io::lines(body);
  if (body_lines.empty()) throw ValidationError("model file: missing header");
  SurrogateModel m;
  try {
    const auto header = nlohmann::json::parse(body_lines[0]);
    m.leaky_slope = io::parse_double(header.at("leaky_slope").get<std::string>());
    m.output_scale = io::parse_double(header.at("output_scale").get<std::string>());
    const double eps = io::parse_double(header.at("bn_eps").get<std::string>());
    m.bn1.eps = m.bn2.eps = eps;
    m.mode = header.at("mode").get<std::string>() == "EVAL" ? Mode::Eval : Mode::Train;
    m.summary.epochs = header.at("epochs").get<std::size_t>();
    m.summary.seed = header.at("seed").get<std::uint64_t>();
    m.summary.final_train_loss =
        io::parse_double(header.at("final_train_loss").get<std::string>());
    m.summary.final_validation_loss =
        io::parse_double(header.at("final_validation_loss").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model file header: ") + e.what());
  }

  auto read_array = [](std::string_view line, std::string_view expect) {
    const auto cols = io::split(line, ' ');
    if (cols.size() < 3 || cols[0] != expect)
      throw ValidationError("model file: expected array '" + std::string(expect) + "'");
    const auto rows = io::parse_int(cols[1]);
    const auto ncols = io::parse_int(cols[2]);
    if (rows < 0 || ncols < 0 || static_cast<std::size_t>(rows * ncols) != cols.size() - 3)
      throw ValidationError("model file: array '" + std::string(expect) + "' has wrong size");
    Eigen::MatrixXd a(rows, ncols);
    for (Eigen::Index i = 0; i < a.size(); ++i)
      a.data()[i] = io::parse_double(cols[3 + static_cast<std::size_t>(i)]);
    return a;
  };
  static constexpr const char* kNames[] = {
      "input_shift", "input_scale", "w1",       "b1",      "bn1_gamma", "bn1_beta",
      "bn1_mean",    "bn1_var",     "w2",       "b2",      "bn2_gamma", "bn2_beta",
      "bn2_mean",    "bn2_var",     "w3",       "b3"};
  if (body_lines.size() != 1 + std::size(kNames))
    throw ValidationError("model file: wrong number of arrays");
  std::vector<Eigen::MatrixXd> a;
  for (std::size_t i = 0; i < std::size(kNames); ++i)
    a.push_back(read_array(body_lines[i + 1], kNames[i]));
  m.input_shift = a[0];
  m.input_scale = a[1];
  m.w1 = a[2];
  m.b1 = a[3];
  m.bn1.gamma = a[4];
  m.bn1.beta = a[5];
  m.bn1.running_mean = a[6];
  m.bn1.running_var = a[7];
  m.w2 = a[8];
  m.b2 = a[9];
  m.bn2.gamma = a[10];
  m.bn2.beta = a[11];
  m.bn2.running_mean = a[12];
  m.bn2.running_var = a[13];
  m.w3 = a[14];
  m.b3 = a[15];
  if (m.w1.cols() != static_cast<Eigen::Index>(kNumParams) || m.w2.cols() != m.w1.rows() ||
      m.w3.cols() != m.w2.rows() || m.b3.size() != m.w3.rows())
    throw ValidationError("model file: inconsistent layer shapes");
  if ((m.bn1.running_var.array() <= 0.0).any() || (m.bn2.running_var.array() <= 0.0).any())
    throw ValidationError("model file: batch-norm variances must be positive");
  return m;
}

inline void write_model(const SurrogateModel& m, const std::filesystem::path& path) {
  io::write_file(path, serialize_model(m));
}

inline SurrogateModel read_model(const std::filesystem::path& path) {
  return deserialize_model(io::read_file(path));
}

}  // namespace epical
