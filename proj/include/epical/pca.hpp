#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "epical/error.hpp"
#include "epical/io.hpp"

namespace epical {

/// Mean-centered linear basis. Rows of `components` are orthonormal.
struct PcaBasis {
  Eigen::VectorXd mean;                ///< length T
  Eigen::MatrixXd components;          ///< k x T
  Eigen::VectorXd explained_variance;  ///< length k, nonincreasing

  std::size_t k() const { return static_cast<std::size_t>(components.rows()); }
  std::size_t horizon() const { return static_cast<std::size_t>(components.cols()); }
};

/// Fits the top-k principal directions of the rows of `curves` (n x T).
/// Each component's largest-magnitude entry is made positive.
inline PcaBasis fit_pca(const Eigen::MatrixXd& curves, std::size_t k) {
  const auto n = static_cast<std::size_t>(curves.rows());
  const auto horizon = static_cast<std::size_t>(curves.cols());
  if (k < 1) throw ArgumentError("fit_pca: k must be >= 1");
  if (n <= k)
    throw ArgumentError("fit_pca: need more curves than components (n=" + std::to_string(n) +
                        ", k=" + std::to_string(k) + ")");
  if (k > horizon)
    throw ArgumentError("fit_pca: k=" + std::to_string(k) + " exceeds curve length " +
                        std::to_string(horizon));
  if (!curves.allFinite()) throw DomainError("fit_pca: non-finite curve values");

  PcaBasis basis;
  basis.mean = curves.colwise().mean().transpose();
  const Eigen::MatrixXd centered = curves.rowwise() - basis.mean.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("fit_pca: eigendecomposition failed");

  // Eigen returns ascending eigenvalues.
  std::vector<Eigen::Index> order(horizon);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return eig.eigenvalues()(a) > eig.eigenvalues()(b);
  });

  basis.components.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(horizon));
  basis.explained_variance.resize(static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < k; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(order[c]);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    basis.components.row(static_cast<Eigen::Index>(c)) = v.transpose();
    basis.explained_variance(static_cast<Eigen::Index>(c)) =
        std::max(0.0, eig.eigenvalues()(order[c]));
  }
  return basis;
}

inline void check_length(const PcaBasis& basis, Eigen::Index n, const char* what) {
  if (n != static_cast<Eigen::Index>(basis.horizon()))
    throw ArgumentError(std::string(what) + ": curve length " + std::to_string(n) +
                        " does not match basis horizon " + std::to_string(basis.horizon()));
}

/// z = Pi (c - mean)
inline Eigen::VectorXd project(const PcaBasis& basis, const Eigen::VectorXd& curve) {
  check_length(basis, curve.size(), "project");
  return basis.components * (curve - basis.mean);
}

/// Projects every row of an n x T matrix; returns n x k.
inline Eigen::MatrixXd project_rows(const PcaBasis& basis, const Eigen::MatrixXd& curves) {
  check_length(basis, curves.cols(), "project_rows");
  return (curves.rowwise() - basis.mean.transpose()) * basis.components.transpose();
}

/// c = Pi^T z + mean
inline Eigen::VectorXd reconstruct(const PcaBasis& basis, const Eigen::VectorXd& z) {
  if (z.size() != static_cast<Eigen::Index>(basis.k()))
    throw ArgumentError("reconstruct: code length " + std::to_string(z.size()) +
                        " does not match k=" + std::to_string(basis.k()));
  return basis.components.transpose() * z + basis.mean;
}

/// Root-mean-square reconstruction error over all entries of `curves`.
inline double reconstruction_rmse(const PcaBasis& basis, const Eigen::MatrixXd& curves) {
  const Eigen::MatrixXd codes = project_rows(basis, curves);
  const Eigen::MatrixXd recon =
      (codes * basis.components).rowwise() + basis.mean.transpose();
  return std::sqrt((recon - curves).squaredNorm() / static_cast<double>(curves.size()));
}

/// Keeps the first k components of a fitted basis.
inline PcaBasis truncate(const PcaBasis& basis, std::size_t k) {
  if (k < 1 || k > basis.k()) throw ArgumentError("truncate: bad k");
  const auto kk = static_cast<Eigen::Index>(k);
  return {basis.mean, basis.components.topRows(kk), basis.explained_variance.head(kk)};
}

// Text format:
//   epical-pca k=<k> T=<T> checksum=<fnv1a of body>
//   body: line "mean", line "variance", then k component rows.
inline std::string basis_body(const PcaBasis& basis) {
  std::string body;
  auto row = [&](const char* tag, const Eigen::VectorXd& v) {
    body += tag;
    for (Eigen::Index i = 0; i < v.size(); ++i) body += ' ' + io::fmt(v(i));
    body += '\n';
  };
  row("mean", basis.mean);
  row("variance", basis.explained_variance);
  for (Eigen::Index c = 0; c < basis.components.rows(); ++c)
    row("component", basis.components.row(c).transpose());
  return body;
}

inline void write_basis(const PcaBasis& basis, const std::filesystem::path& path) {
  const auto body = basis_body(basis);
  io::write_file(path, "epical-pca k=" + std::to_string(basis.k()) + " T=" +
                           std::to_string(basis.horizon()) +
                           " checksum=" + io::hex64(io::fnv1a(body)) + "\n" + body);
}

inline PcaBasis read_basis(const std::filesystem::path& path) {
  const auto text = io::read_file(path);
  const auto nl = text.find('\n');
  if (nl == std::string::npos) throw ValidationError("basis file '" + path.string() + "' is empty");
  const std::string header = text.substr(0, nl);
  const std::string body = text.substr(nl + 1);

  unsigned long k = 0, horizon = 0;
  char sum[17] = {};
  if (std::sscanf(header.c_str(), "epical-pca k=%lu T=%lu checksum=%16s", &k, &horizon, sum) != 3)
    throw ValidationError("basis file '" + path.string() + "': malformed header");
  if (io::hex64(io::fnv1a(body)) != sum)
    throw ValidationError("basis file '" + path.string() + "': checksum mismatch");

  PcaBasis basis;
  basis.components.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(horizon));
  std::size_t comp = 0;
  for (auto line : io::lines(body)) {
    const auto cols = io::split(line, ' ');
    const auto tag = cols.front();
    Eigen::VectorXd v(static_cast<Eigen::Index>(cols.size() - 1));
    for (std::size_t i = 1; i < cols.size(); ++i)
      v(static_cast<Eigen::Index>(i - 1)) = io::parse_double(cols[i]);
    if (tag == "mean") {
      basis.mean = v;
    } else if (tag == "variance") {
      basis.explained_variance = v;
    } else if (tag == "component" && comp < k && v.size() == static_cast<Eigen::Index>(horizon)) {
      basis.components.row(static_cast<Eigen::Index>(comp++)) = v.transpose();
    } else {
      throw ValidationError("basis file '" + path.string() + "': unexpected line");
    }
  }
  if (comp != k || basis.mean.size() != static_cast<Eigen::Index>(horizon) ||
      basis.explained_variance.size() != static_cast<Eigen::Index>(k))
    throw ValidationError("basis file '" + path.string() + "': dimensions do not match header");
  return basis;
}

}  // namespace epical
