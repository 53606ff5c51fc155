#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nsgp/circulant.hpp"
#include "nsgp/error.hpp"
#include "nsgp/parallel.hpp"
#include "nsgp/pcg.hpp"
#include "nsgp/rng.hpp"

namespace nsgp {

/// Rademacher probe vectors, drawn once per fit.
struct ProbeSet {
  std::vector<Eigen::VectorXd> vectors;
  std::uint64_t seed = 0;
  int size() const { return static_cast<int>(vectors.size()); }
};

inline ProbeSet make_probes(int n_obs, int count, std::uint64_t seed) {
  if (count < 1) throw validation_error("invalid-parameter", "need at least one probe vector");
  if (n_obs < 1) throw validation_error("invalid-parameter", "need at least one observation");
  ProbeSet set;
  set.seed = seed;
  auto rng = stream_rng(seed, Stream::probes);
  std::uniform_int_distribution<int> bit(0, 1);
  for (int j = 0; j < count; ++j) {
    Eigen::VectorXd u(n_obs);
    for (int k = 0; k < n_obs; ++k) u[k] = bit(rng) ? 1.0 : -1.0;
    set.vectors.push_back(std::move(u));
  }
  return set;
}

/// The n columns of a Sylvester Hadamard matrix: n mutually orthogonal sign
/// vectors, for which the trace estimate is exact. n must be a power of two.
inline ProbeSet orthogonal_sign_basis(int n) {
  if (n < 1 || (n & (n - 1)) != 0) throw validation_error("invalid-parameter", "basis size must be a power of two");
  ProbeSet set;
  for (int j = 0; j < n; ++j) {
    Eigen::VectorXd u(n);
    for (int k = 0; k < n; ++k) u[k] = (__builtin_popcount(static_cast<unsigned>(j & k)) & 1) ? -1.0 : 1.0;
    set.vectors.push_back(std::move(u));
  }
  return set;
}

/// Solver settings shared by every K^-1 application.
struct SolveSettings {
  Precond precond = Precond::g2;
  PcgOptions pcg;
};

/// Warm-start store: previous solutions of the data, probe and design systems.
struct WarmStarts {
  std::optional<Eigen::VectorXd> data;
  std::vector<std::optional<Eigen::VectorXd>> probes;
  std::vector<std::optional<Eigen::VectorXd>> design;
};

struct SolveCounter {
  int solves = 0;
  long iterations = 0;
};

/// K^-1 y by PCG on the circulant operator; failure becomes "pcg-failure"
/// naming the system.
inline Eigen::VectorXd solve_cov(const CirculantOperator& op, const Eigen::VectorXd& y, const SolveSettings& s,
                                 std::optional<Eigen::VectorXd>* warm, SolveCounter* counter,
                                 const std::string& what) {
  auto apply_a = [&](const Eigen::VectorXd& v, Eigen::VectorXd& out) { op.cov_matvec(v, out); };
  auto apply_m = [&](const Eigen::VectorXd& v, Eigen::VectorXd& out) { op.precond_matvec(s.precond, v, out); };
  SolveReport rep;
  try {
    rep = pcg_solve(apply_a, apply_m, y, s.pcg, warm ? *warm : std::nullopt);
  } catch (const Error& e) {
    throw numerical_error("pcg-failure", what + ": " + e.category() + ": " + e.what());
  }
  if (counter) {
    ++counter->solves;
    counter->iterations += rep.iterations;
  }
  if (!rep.converged) {
    throw numerical_error("pcg-failure", what + " did not converge in " + std::to_string(rep.iterations) +
                                             " iterations (residual " + std::to_string(rep.residual_norm) + ")");
  }
  if (warm) *warm = rep.solution;
  return rep.solution;
}

struct GlsResult {
  Eigen::VectorXd beta;
  Eigen::VectorXd residual;
};

/// beta = (X' K^-1 X)^-1 X' K^-1 y using one PCG solve per design column.
inline GlsResult gls_beta(const CirculantOperator& op, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                          const SolveSettings& s = {}, WarmStarts* warm = nullptr, SolveCounter* counter = nullptr) {
  GlsResult out;
  if (x.cols() == 0) {
    out.residual = y;
    return out;
  }
  if (x.rows() != y.size() || y.size() != op.n_obs()) throw validation_error("dimension-mismatch", "gls_beta");
  if (warm) warm->design.resize(x.cols());
  Eigen::MatrixXd kx(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    kx.col(c) = solve_cov(op, x.col(c), s, warm ? &warm->design[c] : nullptr, counter,
                          "design column " + std::to_string(c));
  }
  const Eigen::MatrixXd normal = x.transpose() * kx;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0).all()) {
    throw validation_error("rank-deficient-design", "GLS normal equations are singular");
  }
  out.beta = ldlt.solve(kx.transpose() * y);
  out.residual = y - x * out.beta;
  return out;
}

/// sigma0^2 = y0' Omega^-1 y0 / n where `unit_op` carries Omega, the
/// covariance at sigma0^2 = 1 (local variances equal to phi_k).
inline double profile_sigma0(const CirculantOperator& unit_op, const Eigen::VectorXd& y0, const SolveSettings& s = {},
                             WarmStarts* warm = nullptr, SolveCounter* counter = nullptr) {
  const auto& m = unit_op.model();
  if (!m.sigma0_link) throw validation_error("invalid-parameter", "profile_sigma0 needs the sigma0 link");
  if (std::abs(m.theta0.sigma2 - 1.0) > 1e-12) {
    throw validation_error("invalid-parameter", "profile_sigma0 expects the unit-scale operator (sigma0^2 = 1)");
  }
  const Eigen::VectorXd w = solve_cov(unit_op, y0, s, warm ? &warm->data : nullptr, counter, "data system");
  return y0.dot(w) / static_cast<double>(y0.size());
}

/// Stochastic score per natural-scale parameter plus its transformed-scale
/// image (log for sigma2 / alpha / nu, logit for tau).
struct ScoreEstimate {
  Eigen::VectorXd natural;
  Eigen::VectorXd transformed;
  int solves = 0;
  long pcg_iterations = 0;
};

/// 0.5 a' K_i a for every natural-scale parameter, a = K^-1 y0.
inline Eigen::VectorXd quadratic_terms(const CirculantOperator& op, const Eigen::VectorXd& a) {
  Eigen::VectorXd out(op.model().n_cov_params());
  Eigen::VectorXd tmp;
  for (int f = 0; f < out.size(); ++f) {
    op.dcov_matvec(ParamId::from_flat(f), a, tmp);
    out[f] = 0.5 * a.dot(tmp);
  }
  return out;
}

/// (1/2N) sum_j u_j' K^-1 K_i u_j for every natural-scale parameter. The N
/// probe solves may run on several threads; contributions are summed in
/// probe order.
inline Eigen::VectorXd trace_terms(const CirculantOperator& op, const ProbeSet& probes, const SolveSettings& s = {},
                                   WarmStarts* warm = nullptr, SolveCounter* counter = nullptr, int threads = 1) {
  if (probes.size() < 1) throw validation_error("invalid-parameter", "empty probe set");
  for (const auto& u : probes.vectors) {
    if (u.size() != op.n_obs()) throw validation_error("dimension-mismatch", "probe length");
  }
  if (warm) warm->probes.resize(probes.size());
  const int np = op.model().n_cov_params();
  std::vector<Eigen::VectorXd> contrib(probes.size());
  std::vector<SolveCounter> counts(probes.size());
  parallel_for(probes.size(), threads, [&](int j) {
    const Eigen::VectorXd b = solve_cov(op, probes.vectors[j], s, warm ? &warm->probes[j] : nullptr, &counts[j],
                                        "probe system " + std::to_string(j));
    contrib[j].resize(np);
    Eigen::VectorXd tmp;
    for (int f = 0; f < np; ++f) {
      op.dcov_matvec(ParamId::from_flat(f), probes.vectors[j], tmp);
      contrib[j][f] = b.dot(tmp);
    }
  });
  Eigen::VectorXd out = Eigen::VectorXd::Zero(np);
  for (int j = 0; j < probes.size(); ++j) {
    out += contrib[j];
    if (counter) {
      counter->solves += counts[j].solves;
      counter->iterations += counts[j].iterations;
    }
  }
  return out * (0.5 / probes.size());
}

/// S_i = 0.5 y0' K^-1 K_i K^-1 y0 - (1/2N) sum_j u_j' K^-1 K_i u_j.
/// Uses N + 1 PCG solves shared by all parameters.
inline ScoreEstimate stochastic_score(const CirculantOperator& op, const Eigen::VectorXd& y0, const ProbeSet& probes,
                                      const SolveSettings& s = {}, WarmStarts* warm = nullptr, int threads = 1) {
  if (probes.size() < 1) throw validation_error("invalid-parameter", "empty probe set");
  if (y0.size() != op.n_obs()) throw validation_error("dimension-mismatch", "stochastic_score: data length");
  const auto& m = op.model();
  SolveCounter counter;
  const Eigen::VectorXd a = solve_cov(op, y0, s, warm ? &warm->data : nullptr, &counter, "data system");
  const Eigen::VectorXd trace = trace_terms(op, probes, s, warm, &counter, threads);

  ScoreEstimate est;
  est.natural = quadratic_terms(op, a) - trace;
  est.transformed.resize(est.natural.size());
  for (int f = 0; f < est.natural.size(); ++f) {
    const ParamId id = ParamId::from_flat(f);
    est.transformed[f] = est.natural[f] * m.process(id.process).jacobian()[static_cast<int>(id.param)];
  }
  est.solves = counter.solves;
  est.pcg_iterations = counter.iterations;
  return est;
}

}  // namespace nsgp
