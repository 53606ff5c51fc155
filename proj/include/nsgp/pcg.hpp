#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nsgp/error.hpp"

namespace nsgp {

struct PcgOptions {
  /// Converged when ||A x - y|| <= max(tol * ||y||, abs_tol).
  double tol = 1e-6;
  double abs_tol = 0.0;
  int max_iter = 1000;
  bool record_history = false;
  /// Extra convergence test on the current iterate (benchmarks that stop
  /// on the error against a known solution).
  std::function<bool(const Eigen::VectorXd&)> stop_when;
};

struct SolveReport {
  Eigen::VectorXd solution;
  int iterations = 0;
  double residual_norm = 0.0;
  bool converged = false;
  /// Per-iterate residual norms (including the start) when requested.
  std::vector<double> residual_history;
  std::vector<Eigen::VectorXd> iterates;
};

/// Identity preconditioner for pcg_solve.
struct NoPreconditioner {
  void operator()(const Eigen::VectorXd& x, Eigen::VectorXd& out) const { out = x; }
};

/// Preconditioned conjugate gradient for A x = y. `apply_a(x, out)` and
/// `apply_m(r, out)` write their products into `out`; both operators must
/// be symmetric positive definite. A non-positive curvature p'Ap or r'Mr
/// raises a "breakdown" error. Hitting max_iter returns the last iterate
/// with converged = false.
template <class ApplyA, class ApplyM>
SolveReport pcg_solve(ApplyA&& apply_a, ApplyM&& apply_m, const Eigen::VectorXd& y, const PcgOptions& opt,
                      const std::optional<Eigen::VectorXd>& x0 = std::nullopt) {
  if (!(opt.tol >= 0.0) || !(opt.abs_tol >= 0.0) || (opt.tol == 0.0 && opt.abs_tol == 0.0)) {
    throw validation_error("invalid-parameter", "pcg tolerance must be positive");
  }
  const Eigen::Index n = y.size();
  SolveReport rep;
  rep.solution = (x0 && x0->size() == n) ? *x0 : Eigen::VectorXd::Zero(n);

  Eigen::VectorXd r(n), z(n), p(n), ap(n);
  if (rep.solution.isZero(0.0)) {
    r = y;
  } else {
    apply_a(rep.solution, ap);
    r = y - ap;
  }
  const double target = std::max(opt.tol * y.norm(), opt.abs_tol);
  double rnorm = r.norm();
  if (opt.record_history) {
    rep.residual_history.push_back(rnorm);
    rep.iterates.push_back(rep.solution);
  }
  if (rnorm <= target) {
    rep.residual_norm = rnorm;
    rep.converged = true;
    return rep;
  }

  apply_m(r, z);
  double rz = r.dot(z);
  if (!(rz > 0.0)) throw numerical_error("breakdown", "preconditioner is not positive definite (r'Mr <= 0)");
  p = z;
  for (int it = 1; it <= opt.max_iter; ++it) {
    apply_a(p, ap);
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) {
      throw numerical_error("breakdown", "operator is not positive definite (p'Ap = " + std::to_string(pap) + ")");
    }
    const double step = rz / pap;
    rep.solution.noalias() += step * p;
    r.noalias() -= step * ap;
    rnorm = r.norm();
    rep.iterations = it;
    if (opt.record_history) {
      rep.residual_history.push_back(rnorm);
      rep.iterates.push_back(rep.solution);
    }
    if (rnorm <= target || (opt.stop_when && opt.stop_when(rep.solution))) {
      rep.converged = true;
      break;
    }
    apply_m(r, z);
    const double rz_next = r.dot(z);
    if (!(rz_next > 0.0)) throw numerical_error("breakdown", "preconditioner is not positive definite (r'Mr <= 0)");
    p = z + (rz_next / rz) * p;
    rz = rz_next;
  }
  rep.residual_norm = rnorm;
  return rep;
}

}  // namespace nsgp
