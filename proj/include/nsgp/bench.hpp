#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <random>
#include <vector>

#include "nsgp/circulant.hpp"
#include "nsgp/pcg.hpp"
#include "nsgp/rng.hpp"

namespace nsgp {

struct BenchRow {
  int system = 0;
  Precond precond = Precond::none;
  int iterations = 0;
  bool converged = false;
  double error2 = 0.0;
  double seconds = 0.0;
};

struct BenchOptions {
  int systems = 20;
  /// Stop once ||x_k - x||^2 drops below this.
  double error2_tol = 1e-4;
  int max_iter = 2000;
  std::vector<Precond> preconds = {Precond::none, Precond::g1, Precond::g2, Precond::g3, Precond::g4};
  std::uint64_t seed = 1;
};

/// Solves K x = K x_true from a zero start for `systems` standard normal
/// x_true, once per preconditioner, counting iterations until the squared
/// error norm meets the tolerance.
inline std::vector<BenchRow> bench_precond(const NonStatModel& model, const BenchOptions& opt) {
  if (opt.systems < 1 || opt.max_iter < 1 || !(opt.error2_tol > 0)) {
    throw validation_error("invalid-parameter", "bench: need systems >= 1, max_iter >= 1, tolerance > 0");
  }
  const CirculantOperator op(model);
  const int n = op.n_obs();
  std::vector<BenchRow> rows;
  for (int s = 0; s < opt.systems; ++s) {
    auto rng = stream_rng(opt.seed, Stream::replicate, static_cast<std::uint64_t>(s));
    std::normal_distribution<double> normal;
    Eigen::VectorXd x(n);
    for (int i = 0; i < n; ++i) x[i] = normal(rng);
    const Eigen::VectorXd y = op.cov_matvec(x);
    for (Precond kind : opt.preconds) {
      PcgOptions po;
      po.tol = 1e-300;
      po.max_iter = opt.max_iter;
      double err2 = 0.0;
      po.stop_when = [&](const Eigen::VectorXd& xk) {
        err2 = (xk - x).squaredNorm();
        return err2 < opt.error2_tol;
      };
      auto apply_a = [&](const Eigen::VectorXd& v, Eigen::VectorXd& out) { op.cov_matvec(v, out); };
      auto apply_m = [&](const Eigen::VectorXd& v, Eigen::VectorXd& out) { op.precond_matvec(kind, v, out); };
      const auto t0 = std::chrono::steady_clock::now();
      const auto rep = pcg_solve(apply_a, apply_m, y, po);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rows.push_back({s, kind, rep.iterations, rep.converged, err2, secs});
    }
  }
  return rows;
}

}  // namespace nsgp
