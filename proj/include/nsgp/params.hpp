#pragma once

#include <array>
#include <cmath>
#include <string>

#include "nsgp/error.hpp"

namespace nsgp {

/// Position of a parameter inside a quasi-Matérn parameter set.
enum class Param : int { sigma2 = 0, alpha = 1, nu = 2, tau = 3 };

inline constexpr int kParamsPerProcess = 4;

inline const char* param_name(Param p) {
  switch (p) {
    case Param::sigma2: return "sigma2";
    case Param::alpha: return "alpha";
    case Param::nu: return "nu";
    case Param::tau: return "tau";
  }
  return "?";
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double inv_logit(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Variance scale, inverse range, smoothness and nugget fraction of one
/// stationary quasi-Matérn process.
struct QuasiMaternParams {
  double sigma2 = 1.0;
  double alpha = 0.5;
  double nu = 0.5;
  double tau = 0.05;

  double operator[](Param p) const {
    switch (p) {
      case Param::sigma2: return sigma2;
      case Param::alpha: return alpha;
      case Param::nu: return nu;
      case Param::tau: return tau;
    }
    return 0.0;
  }
  double& operator[](Param p) {
    switch (p) {
      case Param::alpha: return alpha;
      case Param::nu: return nu;
      case Param::tau: return tau;
      default: return sigma2;
    }
  }

  bool valid() const {
    return std::isfinite(sigma2) && std::isfinite(alpha) && std::isfinite(nu) &&
           std::isfinite(tau) && sigma2 > 0 && alpha > 0 && nu > 0 && tau > 0 && tau < 1;
  }

  void validate(const std::string& where = "") const {
    if (!valid()) {
      throw validation_error(
          "invalid-parameter",
          (where.empty() ? std::string() : where + ": ") + "need sigma2>0, alpha>0, nu>0, 0<tau<1 (got " +
              std::to_string(sigma2) + ", " + std::to_string(alpha) + ", " + std::to_string(nu) +
              ", " + std::to_string(tau) + ")");
    }
  }

  /// (log sigma2, log alpha, log nu, logit tau)
  std::array<double, 4> transformed() const {
    return {std::log(sigma2), std::log(alpha), std::log(nu), logit(tau)};
  }

  static QuasiMaternParams from_transformed(const std::array<double, 4>& u) {
    return {std::exp(u[0]), std::exp(u[1]), std::exp(u[2]), inv_logit(u[3])};
  }

  /// d(natural)/d(transformed), used for the chain rule on scores.
  std::array<double, 4> jacobian() const { return {sigma2, alpha, nu, tau * (1.0 - tau)}; }

  bool operator==(const QuasiMaternParams&) const = default;
};

/// Box on the transformed scale, one interval per parameter kind.
struct ParamBox {
  double log_sigma0_lo = -20.0, log_sigma0_hi = 20.0;
  double log_phi_lo = -10.0, log_phi_hi = 10.0;
  double log_alpha_lo = std::log(1e-4), log_alpha_hi = std::log(20.0);
  double log_nu_lo = std::log(1e-3), log_nu_hi = std::log(20.0);
  double logit_tau_lo = logit(1e-4), logit_tau_hi = logit(0.9);

  /// Bounds for parameter p of a process; `local_scale` selects the phi
  /// interval for a local variance instead of the global sigma0 interval.
  std::array<double, 2> bounds(Param p, bool local_scale) const {
    switch (p) {
      case Param::sigma2:
        return local_scale ? std::array{log_phi_lo, log_phi_hi} : std::array{log_sigma0_lo, log_sigma0_hi};
      case Param::alpha: return {log_alpha_lo, log_alpha_hi};
      case Param::nu: return {log_nu_lo, log_nu_hi};
      case Param::tau: return {logit_tau_lo, logit_tau_hi};
    }
    return {0, 0};
  }

  void validate() const {
    const double v[] = {log_sigma0_lo, log_sigma0_hi, log_phi_lo, log_phi_hi, log_alpha_lo,
                        log_alpha_hi, log_nu_lo, log_nu_hi, logit_tau_lo, logit_tau_hi};
    for (int i = 0; i < 10; i += 2) {
      if (!std::isfinite(v[i]) || !std::isfinite(v[i + 1]) || v[i] > v[i + 1]) {
        throw validation_error("invalid-parameter", "projection box bounds must be finite and ordered");
      }
    }
  }
};

}  // namespace nsgp
