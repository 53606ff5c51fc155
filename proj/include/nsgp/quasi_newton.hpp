#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "nsgp/error.hpp"

namespace nsgp {

struct QuasiNewtonOptions {
  int max_iter = 200;
  /// Stop when the projected gradient's max-norm falls below this.
  double gtol = 1e-6;
  /// Stop when the objective changes by less than ftol * (1 + |f|) on
  /// flat_window consecutive iterations.
  double ftol = 1e-12;
  int flat_window = 2;
  /// Largest change of any coordinate in one step.
  double max_step = 2.0;
  int max_backtracks = 40;
};

struct QuasiNewtonResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

/// Objective returning f(x) and writing its gradient.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

namespace detail {
inline Eigen::VectorXd clamp_box(const Eigen::VectorXd& x, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}
}  // namespace detail

/// Projected BFGS for min f(x) subject to lo <= x <= hi. Coordinates pinned
/// at a bound with the gradient pushing outward are held fixed; the rest take
/// a BFGS step followed by a projected Armijo backtracking search.
inline QuasiNewtonResult minimize_box(const Objective& f, Eigen::VectorXd x0, const Eigen::VectorXd& lo,
                                      const Eigen::VectorXd& hi, const QuasiNewtonOptions& opt = {}) {
  const Eigen::Index n = x0.size();
  if (lo.size() != n || hi.size() != n) throw validation_error("dimension-mismatch", "box size mismatch");
  QuasiNewtonResult res;
  res.x = detail::clamp_box(x0, lo, hi);
  res.gradient.resize(n);
  res.value = f(res.x, res.gradient);
  ++res.evaluations;
  if (!std::isfinite(res.value)) throw numerical_error("optimizer-failure", "objective not finite at start");

  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(n, n);
  int flat_steps = 0;
  double last_t = 1.0;
  auto projected_gradient = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& g) {
    return (x - detail::clamp_box(x - g, lo, hi)).cwiseAbs().maxCoeff();
  };

  for (int it = 0; it < opt.max_iter; ++it) {
    res.iterations = it;
    if (n == 0 || projected_gradient(res.x, res.gradient) < opt.gtol) {
      res.converged = true;
      return res;
    }
    const double eps = 1e-10;
    Eigen::Array<bool, Eigen::Dynamic, 1> active(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      active[i] = (res.x[i] <= lo[i] + eps && res.gradient[i] > 0) || (res.x[i] >= hi[i] - eps && res.gradient[i] < 0);
    }
    // Quasi-Newton direction on the free variables; a variable sitting on a
    // bound that the direction would push further out is frozen as well.
    Eigen::VectorXd d(n);
    for (Eigen::Index pass = 0; pass <= n; ++pass) {
      Eigen::VectorXd gfree = res.gradient;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (active[i]) gfree[i] = 0.0;
      }
      Eigen::MatrixXd hf = h;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (active[i]) {
          hf.row(i).setZero();
          hf.col(i).setZero();
        }
      }
      d = -(hf * gfree);
      if (d.dot(gfree) >= 0.0) {
        h.setIdentity();
        d = -gfree;
      }
      bool changed = false;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (active[i]) continue;
        if ((res.x[i] <= lo[i] + eps && d[i] < 0) || (res.x[i] >= hi[i] - eps && d[i] > 0)) {
          active[i] = true;
          changed = true;
        }
      }
      if (!changed) break;
    }
    if (d.cwiseAbs().maxCoeff() == 0.0) {
      res.converged = true;
      return res;
    }
    const double dmax = d.cwiseAbs().maxCoeff();
    if (dmax > opt.max_step) d *= opt.max_step / dmax;

    // start from a multiple of the last accepted step length
    double t = std::min(1.0, 4.0 * last_t);
    Eigen::VectorXd xn, gn(n);
    double fn = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int b = 0; b < opt.max_backtracks; ++b) {
      xn = detail::clamp_box(res.x + t * d, lo, hi);
      fn = f(xn, gn);
      ++res.evaluations;
      if (std::isfinite(fn) && fn <= res.value + 1e-4 * res.gradient.dot(xn - res.x)) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      // Could not decrease along the quasi-Newton direction: retry once from
      // steepest descent before declaring convergence at this point.
      if (!h.isIdentity()) {
        h.setIdentity();
        last_t = 1.0;
        continue;
      }
      res.converged = projected_gradient(res.x, res.gradient) < std::sqrt(opt.gtol);
      return res;
    }
    last_t = t;
    const Eigen::VectorXd s = xn - res.x;
    const Eigen::VectorXd yv = gn - res.gradient;
    const double change = std::abs(fn - res.value);
    res.x = xn;
    res.value = fn;
    res.gradient = gn;

    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
      h = (eye - rho * s * yv.transpose()) * h * (eye - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    flat_steps = change < opt.ftol * (1.0 + std::abs(fn)) ? flat_steps + 1 : 0;
    if (flat_steps >= opt.flat_window) {
      res.iterations = it + 1;
      res.converged = true;
      return res;
    }
  }
  res.iterations = opt.max_iter;
  res.converged = projected_gradient(res.x, res.gradient) < opt.gtol;
  return res;
}

}  // namespace nsgp
