#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "nsgp/error.hpp"
#include "nsgp/grid.hpp"
#include "nsgp/params.hpp"

namespace nsgp {

/// Addresses one covariance parameter: process 0 is the global process,
/// process k >= 1 the local process of segment k.
struct ParamId {
  int process = 0;
  Param param = Param::sigma2;

  int flat() const { return kParamsPerProcess * process + static_cast<int>(param); }
  static ParamId from_flat(int k) { return {k / kParamsPerProcess, static_cast<Param>(k % kParamsPerProcess)}; }
  bool operator==(const ParamId&) const = default;
};

/// Y(s) = X(s) beta + Z0(s) + sum_k w_k(s) Z_k(s) with indicator weights
/// w_k from the partition. When `theta` is empty the covariance holds the
/// global process only (the partition still defines the mean blocks).
struct NonStatModel {
  GridGeometry grid;
  EmbeddingGeometry embed;
  Partition partition;
  QuasiMaternParams theta0;
  std::vector<QuasiMaternParams> theta;
  Eigen::VectorXd beta;
  int n_covariates = 0;
  bool has_mean = true;
  /// Local variances are read as sigma_k^2 = phi_k * sigma0^2 by the fitter.
  bool sigma0_link = true;

  int q_local() const { return static_cast<int>(theta.size()); }
  int n_processes() const { return 1 + q_local(); }
  int n_cov_params() const { return kParamsPerProcess * n_processes(); }
  int n_obs() const { return grid.n_obs(); }
  int p_mean() const { return has_mean ? partition.q * (1 + n_covariates) : 0; }

  const QuasiMaternParams& process(int k) const { return k == 0 ? theta0 : theta.at(k - 1); }
  QuasiMaternParams& process(int k) { return k == 0 ? theta0 : theta.at(k - 1); }

  double phi(int k) const { return theta.at(k - 1).sigma2 / theta0.sigma2; }

  void validate() const {
    partition.validate(grid);
    if (embed.m1 < grid.n1() || embed.m2 < grid.n2()) {
      throw validation_error("invalid-parameter", "embedding lattice smaller than the observation grid");
    }
    theta0.validate("global process");
    if (!theta.empty() && q_local() != partition.q) {
      throw validation_error("dimension-mismatch", "need one local parameter set per segment (" +
                                                       std::to_string(partition.q) + "), got " +
                                                       std::to_string(q_local()));
    }
    for (int k = 1; k <= q_local(); ++k) theta[k - 1].validate("segment " + std::to_string(k));
    if (beta.size() != 0 && beta.size() != p_mean()) {
      throw validation_error("dimension-mismatch", "beta has " + std::to_string(beta.size()) +
                                                       " entries, model needs " + std::to_string(p_mean()));
    }
  }

  /// Model with default embedding (smooth lattice >= factor * n).
  static NonStatModel make(const GridGeometry& grid, const Partition& partition, const QuasiMaternParams& theta0,
                           std::vector<QuasiMaternParams> theta, double expansion_factor = 1.25,
                           int n_covariates = 0, bool has_mean = true) {
    NonStatModel m;
    m.grid = grid;
    m.embed = embed_dims(grid.n1(), grid.n2(), expansion_factor);
    m.partition = partition;
    m.theta0 = theta0;
    m.theta = std::move(theta);
    m.n_covariates = n_covariates;
    m.has_mean = has_mean;
    m.beta = Eigen::VectorXd::Zero(m.p_mean());
    m.validate();
    return m;
  }
};

/// Columns are {segment indicator} x {1, covariate_1, ...}, segment-major.
/// The global process carries no mean.
inline Eigen::MatrixXd build_design_matrix(const NonStatModel& model, const DataField& data) {
  const auto& grid = model.grid;
  if (!grid.same_shape(data.grid)) throw validation_error("grid-mismatch", "data grid differs from model grid");
  if (static_cast<int>(data.covariates.size()) != model.n_covariates) {
    throw validation_error("dimension-mismatch", "model expects " + std::to_string(model.n_covariates) +
                                                     " covariates, data has " +
                                                     std::to_string(data.covariates.size()));
  }
  const int n = grid.n_obs();
  const int width = 1 + model.n_covariates;
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, model.p_mean());
  if (!model.has_mean) return x;

  const auto sizes = model.partition.segment_sizes();
  for (int k = 1; k <= model.partition.q; ++k) {
    if (sizes[k] <= width) {
      throw validation_error("rank-deficient-design", "segment " + std::to_string(k) + " has " +
                                                          std::to_string(sizes[k]) + " observations for " +
                                                          std::to_string(width) + " mean coefficients");
    }
  }
  for (int i = 0; i < n; ++i) {
    const int pix = grid.pixel_of(i);
    const int col0 = (model.partition.label(pix) - 1) * width;
    x(i, col0) = 1.0;
    for (int c = 0; c < model.n_covariates; ++c) x(i, col0 + 1 + c) = data.covariates[c][pix];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < x.cols()) {
    throw validation_error("rank-deficient-design", "design matrix has rank " + std::to_string(qr.rank()) +
                                                        " < " + std::to_string(x.cols()));
  }
  return x;
}

}  // namespace nsgp
