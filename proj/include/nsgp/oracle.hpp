#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nsgp/circulant.hpp"
#include "nsgp/error.hpp"
#include "nsgp/layout.hpp"
#include "nsgp/model.hpp"
#include "nsgp/quasi_newton.hpp"
#include "nsgp/spectral.hpp"

namespace nsgp {

/// Dense computations are refused above this many observations.
inline constexpr int kOracleCap = 4096;

namespace detail {

inline void check_cap(int n, int cap) {
  if (n > cap) {
    throw validation_error("too-large", std::to_string(n) + " observations exceed the dense oracle cap of " +
                                            std::to_string(cap));
  }
}

/// Sum over processes of w_k(a) w_k(b) C_k(s_a - s_b), each C_k a lag table.
inline Eigen::MatrixXd assemble(const NonStatModel& model, const std::vector<const LagTable*>& tables) {
  const auto& grid = model.grid;
  const int n = grid.n_obs();
  std::vector<int> row(n), col(n), seg(n);
  for (int i = 0; i < n; ++i) {
    row[i] = grid.row_of(i);
    col[i] = grid.col_of(i);
    seg[i] = model.partition.label(grid.pixel_of(i));
  }
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(n, n);
  for (int b = 0; b < n; ++b) {
    for (int a = b; a < n; ++a) {
      double v = 0.0;
      if (tables[0]) v += tables[0]->at(row[a] - row[b], col[a] - col[b]);
      if (seg[a] == seg[b] && static_cast<std::size_t>(seg[a]) < tables.size() && tables[seg[a]]) {
        v += tables[seg[a]]->at(row[a] - row[b], col[a] - col[b]);
      }
      k(a, b) = v;
      k(b, a) = v;
    }
  }
  return k;
}

}  // namespace detail

/// Dense covariance K = K0 + sum_k W_k K_k W_k built from lag tables.
inline Eigen::MatrixXd dense_covariance(const NonStatModel& model, int cap = kOracleCap) {
  detail::check_cap(model.n_obs(), cap);
  const LatticeDims dims = model.embed.dims();
  std::vector<LagTable> tables;
  for (int k = 0; k < model.n_processes(); ++k) tables.push_back(covariance_from_density(qm_density(model.process(k), dims)));
  std::vector<const LagTable*> ptr;
  for (const auto& t : tables) ptr.push_back(&t);
  return detail::assemble(model, ptr);
}

/// Dense dK/dtheta for one natural-scale parameter.
inline Eigen::MatrixXd dense_dcov(const NonStatModel& model, ParamId id, int cap = kOracleCap) {
  detail::check_cap(model.n_obs(), cap);
  if (id.process < 0 || id.process > model.q_local()) {
    throw validation_error("unknown-parameter", "process " + std::to_string(id.process) + " does not exist");
  }
  const auto grads = qm_density_grad(model.process(id.process), model.embed.dims());
  const LagTable table = covariance_from_density(grads[static_cast<int>(id.param)]);
  std::vector<const LagTable*> ptr(model.n_processes(), nullptr);
  ptr[id.process] = &table;
  return detail::assemble(model, ptr);
}

/// Dense version of the spectral preconditioner `kind`.
inline Eigen::MatrixXd dense_precond(const NonStatModel& model, Precond kind, int cap = kOracleCap) {
  detail::check_cap(model.n_obs(), cap);
  const int n = model.n_obs();
  if (kind == Precond::none) return Eigen::MatrixXd::Identity(n, n);
  const CirculantOperator op(model);
  std::vector<LagTable> tables;
  std::vector<const LagTable*> ptr(model.n_processes(), nullptr);
  tables.reserve(model.n_processes());
  const bool local = model.q_local() > 0;
  const bool use_global = kind == Precond::g1 || kind == Precond::g3 || kind == Precond::g4 ||
                          (kind == Precond::g2 && !local);
  const bool use_local = local && (kind == Precond::g2 || kind == Precond::g3);
  if (use_global) {
    tables.push_back(covariance_from_density(op.precond_density(kind == Precond::g2 ? Precond::g1 : kind)));
    ptr[0] = &tables.back();
  }
  if (use_local) {
    for (int k = 1; k <= model.q_local(); ++k) {
      tables.push_back(covariance_from_density(op.precond_density(Precond::g2, k)));
      ptr[k] = &tables.back();
    }
  }
  return detail::assemble(model, ptr);
}

/// Observed values minus the model mean X beta.
inline Eigen::VectorXd mean_residual(const NonStatModel& model, const DataField& data) {
  const auto y = data.observed_values();
  Eigen::VectorXd y0 = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  if (model.p_mean() > 0 && model.beta.size() == model.p_mean()) y0 -= build_design_matrix(model, data) * model.beta;
  return y0;
}

/// Assembled covariance, design and data with a cached Cholesky factor.
struct DenseProblem {
  Eigen::MatrixXd k;
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  Eigen::LLT<Eigen::MatrixXd> chol;

  DenseProblem(const NonStatModel& model, const DataField& data, int cap = kOracleCap)
      : k(dense_covariance(model, cap)), x(build_design_matrix(model, data)) {
    const auto obs = data.observed_values();
    y = Eigen::Map<const Eigen::VectorXd>(obs.data(), static_cast<Eigen::Index>(obs.size()));
    factor();
  }
  DenseProblem(Eigen::MatrixXd cov, Eigen::VectorXd data) : k(std::move(cov)), y(std::move(data)) { factor(); }

  double log_det() const { return 2.0 * chol.matrixLLT().diagonal().array().log().sum(); }

  /// 2 log L of residual r under N(0, K).
  double loglik2(const Eigen::VectorXd& r) const {
    const Eigen::VectorXd w = chol.matrixL().solve(r);
    return -static_cast<double>(r.size()) * std::log(2.0 * std::numbers::pi) - log_det() - w.squaredNorm();
  }

 private:
  void factor() {
    chol.compute(k);
    if (chol.info() != Eigen::Success) {
      throw numerical_error("invalid-parameters", "covariance matrix is not positive definite");
    }
  }
};

/// 2 log L at the model's parameters and mean coefficients.
inline double exact_loglik(const NonStatModel& model, const DataField& data, int cap = kOracleCap) {
  detail::check_cap(model.n_obs(), cap);
  DenseProblem prob(dense_covariance(model, cap), mean_residual(model, data));
  return prob.loglik2(prob.y);
}

/// Exact score 0.5 y0' K^-1 K_i K^-1 y0 - 0.5 tr(K^-1 K_i) for every
/// natural-scale parameter, indexed by ParamId::flat.
inline Eigen::VectorXd exact_score(const NonStatModel& model, const Eigen::VectorXd& y0, int cap = kOracleCap) {
  detail::check_cap(model.n_obs(), cap);
  DenseProblem prob(dense_covariance(model, cap), y0);
  const Eigen::VectorXd a = prob.chol.solve(y0);
  const Eigen::MatrixXd kinv = prob.chol.solve(Eigen::MatrixXd::Identity(y0.size(), y0.size()));
  Eigen::VectorXd s(model.n_cov_params());
  for (int f = 0; f < model.n_cov_params(); ++f) {
    const Eigen::MatrixXd ki = dense_dcov(model, ParamId::from_flat(f), cap);
    s[f] = 0.5 * a.dot(ki * a) - 0.5 * (kinv.cwiseProduct(ki)).sum();
  }
  return s;
}

/// Information matrix of the stochastic-score estimator with N probes:
///   B_ij = (1/2 + 1/2N) tr(K^-1 K_i K^-1 K_j) - (1/2N) sum_k (K_i K^-1)_kk (K_j K^-1)_kk.
/// N = nullopt gives the N -> infinity limit 0.5 tr(K^-1 K_i K^-1 K_j).
inline Eigen::MatrixXd fisher_information(const NonStatModel& model, std::optional<std::int64_t> probes,
                                          int cap = kOracleCap) {
  detail::check_cap(model.n_obs(), cap);
  if (probes && *probes < 1) throw validation_error("invalid-parameter", "probe count must be >= 1");
  const Eigen::MatrixXd k = dense_covariance(model, cap);
  Eigen::LLT<Eigen::MatrixXd> chol(k);
  if (chol.info() != Eigen::Success) throw numerical_error("invalid-parameters", "covariance not positive definite");
  const int p = model.n_cov_params();
  const Eigen::Index n = k.rows();
  std::vector<Eigen::MatrixXd> a(p);  // K^-1 K_i
  for (int i = 0; i < p; ++i) a[i] = chol.solve(dense_dcov(model, ParamId::from_flat(i), cap));
  const double inv_n = probes ? 1.0 / static_cast<double>(*probes) : 0.0;
  Eigen::MatrixXd b(p, p);
  for (int i = 0; i < p; ++i) {
    for (int j = i; j < p; ++j) {
      // tr(K^-1 K_i K^-1 K_j) = sum(A_i .* A_j^T)
      const double tr = a[i].cwiseProduct(a[j].transpose()).sum();
      // (K_i K^-1)_kk = (K^-1 K_i)_kk since both factors are symmetric
      double diag = 0.0;
      for (Eigen::Index t = 0; t < n; ++t) diag += a[i](t, t) * a[j](t, t);
      b(i, j) = (0.5 + 0.5 * inv_n) * tr - 0.5 * inv_n * diag;
      b(j, i) = b(i, j);
    }
  }
  return b;
}

/// 2 log L(theta_hat) - 2 log L(theta_true) on the same data.
inline double likelihood_gain(const NonStatModel& model_hat, const NonStatModel& model_true, const DataField& data,
                              int cap = kOracleCap) {
  return exact_loglik(model_hat, data, cap) - exact_loglik(model_true, data, cap);
}

/// Generalized least squares under a dense covariance factor.
inline Eigen::VectorXd dense_gls(const Eigen::LLT<Eigen::MatrixXd>& chol, const Eigen::MatrixXd& x,
                                 const Eigen::VectorXd& y) {
  if (x.cols() == 0) return Eigen::VectorXd();
  const Eigen::MatrixXd kx = chol.solve(x);
  const Eigen::MatrixXd xtkx = x.transpose() * kx;
  return xtkx.ldlt().solve(kx.transpose() * y);
}

struct DenseMleResult {
  NonStatModel model;
  double loglik2 = 0.0;
  QuasiNewtonResult optimizer;
};

/// Maximum likelihood on the exact dense likelihood with a generic
/// box-constrained quasi-Newton method on the transformed scale. With the
/// sigma0 link active, sigma0^2 and beta are profiled in closed form.
inline DenseMleResult dense_mle(const DataField& data, const NonStatModel& start, const ParamBox& box = {},
                                QuasiNewtonOptions qn = {}, int cap = kOracleCap) {
  detail::check_cap(start.n_obs(), cap);
  const ParamLayout layout(start);
  const auto obs = data.observed_values();
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(obs.data(), static_cast<Eigen::Index>(obs.size()));
  const Eigen::MatrixXd x = build_design_matrix(start, data);
  const double n = static_cast<double>(y.size());
  NonStatModel work = start;

  // Evaluates the (profiled) negative log likelihood / 2 and leaves the
  // profiled sigma0^2 and beta in `work`.
  auto evaluate = [&](const Eigen::VectorXd& u, Eigen::VectorXd& grad) -> double {
    layout.unpack(u, work);
    if (layout.link()) ParamLayout::set_sigma0(work, 1.0);
    DenseProblem prob(dense_covariance(work, cap), y);
    work.beta = dense_gls(prob.chol, x, y);
    const Eigen::VectorXd r = x.cols() ? Eigen::VectorXd(y - x * work.beta) : y;
    double value;
    if (layout.link()) {
      const Eigen::VectorXd w = prob.chol.matrixL().solve(r);
      const double s0 = w.squaredNorm() / n;
      ParamLayout::set_sigma0(work, s0);
      value = 0.5 * (n * std::log(2.0 * std::numbers::pi) + n * std::log(s0) + prob.log_det() + n);
    } else {
      value = -0.5 * prob.loglik2(r);
    }
    grad = -layout.chain(work, exact_score(work, r, cap));
    return value;
  };

  Eigen::VectorXd lo, hi;
  layout.bounds(box, lo, hi);
  DenseMleResult out;
  out.optimizer = minimize_box(evaluate, layout.pack(start), lo, hi, qn);
  Eigen::VectorXd g;
  evaluate(out.optimizer.x, g);
  out.model = work;
  out.loglik2 = exact_loglik(work, data, cap);
  return out;
}

}  // namespace nsgp
