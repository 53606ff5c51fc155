#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "nsgp/error.hpp"
#include "nsgp/fft.hpp"
#include "nsgp/params.hpp"

namespace nsgp {

struct LatticeDims {
  int m1 = 1;
  int m2 = 1;
  std::size_t size() const { return static_cast<std::size_t>(m1) * static_cast<std::size_t>(m2); }
  bool operator==(const LatticeDims&) const = default;
};

/// Largest lattice (in points) any spectral table may occupy.
inline constexpr std::size_t kDefaultLatticeBudget = std::size_t{1} << 26;

/// A real function on the Fourier frequencies 2*pi*(j1/m1, j2/m2), stored
/// row-major over (j1, j2).
struct SpectralField {
  LatticeDims dims;
  std::vector<double> values;

  double operator()(int j1, int j2) const { return values[static_cast<std::size_t>(j1) * dims.m2 + j2]; }
};

/// Lag-domain covariance on the embedding torus, C(h) for h in Z_m1 x Z_m2.
struct LagTable {
  LatticeDims dims;
  std::vector<double> values;

  /// Lags may be negative; they are reduced modulo the lattice.
  double at(int d1, int d2) const {
    int a = d1 % dims.m1;
    int b = d2 % dims.m2;
    if (a < 0) a += dims.m1;
    if (b < 0) b += dims.m2;
    return values[static_cast<std::size_t>(a) * dims.m2 + b];
  }
};

namespace detail {

inline void check_dims(LatticeDims dims, std::size_t budget) {
  if (dims.m1 < 1 || dims.m2 < 1) {
    throw validation_error("invalid-parameter", "lattice dimensions must be positive");
  }
  if (dims.size() > budget) {
    throw validation_error("dimension-overflow", "lattice " + std::to_string(dims.m1) + "x" +
                                                     std::to_string(dims.m2) + " exceeds the memory budget");
  }
}

/// sin^2(pi*j/m) tabulated through min(j, m-j) so the table is exactly even.
inline std::vector<double> half_angle_sin2(int m) {
  std::vector<double> out(m);
  for (int j = 0; j < m; ++j) {
    const int k = std::min(j, m - j);
    const double s = std::sin(std::numbers::pi * k / m);
    out[j] = s * s;
  }
  return out;
}

/// Shared pieces of the density and its derivatives: s(gamma), g(gamma), c.
struct QuasiMaternParts {
  std::vector<double> s;  // sin^2(g1/2) + sin^2(g2/2)
  std::vector<double> g;  // (alpha^2 + s)^(-1-nu)
  double c = 1.0;         // M / sum(g)
};

inline QuasiMaternParts quasi_matern_parts(const QuasiMaternParams& p, LatticeDims dims) {
  const auto s1 = half_angle_sin2(dims.m1);
  const auto s2 = half_angle_sin2(dims.m2);
  QuasiMaternParts parts;
  parts.s.resize(dims.size());
  parts.g.resize(dims.size());
  const double a2 = p.alpha * p.alpha;
  const double expo = -(1.0 + p.nu);
  double sum = 0.0;
  std::size_t k = 0;
  for (int j1 = 0; j1 < dims.m1; ++j1) {
    for (int j2 = 0; j2 < dims.m2; ++j2, ++k) {
      const double s = s1[j1] + s2[j2];
      parts.s[k] = s;
      // log-space evaluation keeps small alpha / large nu from overflowing
      parts.g[k] = std::exp(expo * std::log(a2 + s));
      sum += parts.g[k];
    }
  }
  parts.c = static_cast<double>(dims.size()) / sum;
  return parts;
}

}  // namespace detail

/// Quasi-Matérn spectral density
///   f(gamma) = sigma2 * [c (1 - tau) g(gamma) + tau],
///   g(gamma) = (alpha^2 + sin^2(gamma1/2) + sin^2(gamma2/2))^(-1-nu),
/// with c = M / sum_gamma g so that the lag-zero covariance equals sigma2.
inline SpectralField qm_density(const QuasiMaternParams& p, LatticeDims dims,
                                std::size_t budget = kDefaultLatticeBudget) {
  p.validate("qm_density");
  detail::check_dims(dims, budget);
  const auto parts = detail::quasi_matern_parts(p, dims);
  SpectralField f{dims, std::vector<double>(dims.size())};
  const double smooth = p.sigma2 * parts.c * (1.0 - p.tau);
  const double nugget = p.sigma2 * p.tau;
  for (std::size_t k = 0; k < dims.size(); ++k) f.values[k] = smooth * parts.g[k] + nugget;
  return f;
}

/// Derivatives of qm_density with respect to (sigma2, alpha, nu, tau) on the
/// natural scale. The normalizing constant depends on alpha and nu and is
/// differentiated through.
inline std::array<SpectralField, 4> qm_density_grad(const QuasiMaternParams& p, LatticeDims dims,
                                                    std::size_t budget = kDefaultLatticeBudget) {
  p.validate("qm_density_grad");
  detail::check_dims(dims, budget);
  const auto parts = detail::quasi_matern_parts(p, dims);
  const std::size_t n = dims.size();
  const double a2 = p.alpha * p.alpha;

  // d(c g_k)/dtheta = c g_k (l_k - sum_j w_j l_j) with l = dlog g/dtheta and
  // w = g / sum(g). Measuring l against the zero frequency (s = 0),
  //   alpha: d_k = 2 (1+nu) s_k / (alpha (alpha^2 + s_k)),  nu: d_k = -log1p(s_k / alpha^2),
  // keeps every term of the weighted mean one-signed.
  std::vector<double> d_alpha(n), d_nu(n);
  double sum_g = 0.0, mean_a = 0.0, mean_n = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double sk = parts.s[k];
    d_alpha[k] = 2.0 * (1.0 + p.nu) * sk / (p.alpha * (a2 + sk));
    d_nu[k] = -std::log1p(sk / a2);
    sum_g += parts.g[k];
    mean_a += parts.g[k] * d_alpha[k];
    mean_n += parts.g[k] * d_nu[k];
  }
  mean_a /= sum_g;
  mean_n /= sum_g;
  const double c = parts.c;
  const double scale = p.sigma2 * (1.0 - p.tau);

  std::array<SpectralField, 4> out;
  for (auto& f : out) f = SpectralField{dims, std::vector<double>(n)};
  for (std::size_t k = 0; k < n; ++k) {
    const double cg = c * parts.g[k];
    out[0].values[k] = (1.0 - p.tau) * cg + p.tau;
    out[1].values[k] = scale * cg * (d_alpha[k] - mean_a);
    out[2].values[k] = scale * cg * (d_nu[k] - mean_n);
    out[3].values[k] = p.sigma2 * (1.0 - cg);
  }
  return out;
}

/// Elementwise f0 + fi: the stationary density a segment sees when the
/// global process is added to its local one.
inline SpectralField combined_density(const SpectralField& f0, const SpectralField& fi) {
  if (!(f0.dims == fi.dims) || f0.values.size() != fi.values.size()) {
    throw validation_error("dimension-mismatch", "combined_density: lattice sizes differ");
  }
  SpectralField out{f0.dims, f0.values};
  for (std::size_t k = 0; k < out.values.size(); ++k) out.values[k] += fi.values[k];
  return out;
}

/// C(h) = (1/M) sum_gamma f(gamma) cos(gamma . h). Because f is even the
/// transform is real; it is evaluated with one real-to-complex FFT.
inline LagTable covariance_from_density(const SpectralField& f) {
  const LatticeDims dims = f.dims;
  if (dims.m1 < 1 || dims.m2 < 1 || f.values.size() != dims.size()) {
    throw validation_error("dimension-mismatch", "covariance_from_density: malformed spectral field");
  }
  const auto plan = fft_plan(dims.m1, dims.m2);
  RealBuffer in(dims.size());
  ComplexBuffer out(plan->half_size());
  for (std::size_t k = 0; k < dims.size(); ++k) in[k] = f.values[k];
  plan->forward(in, out);

  LagTable table{dims, std::vector<double>(dims.size())};
  const double inv_m = 1.0 / static_cast<double>(dims.size());
  const int hm2 = plan->half_m2();
  for (int j1 = 0; j1 < dims.m1; ++j1) {
    for (int j2 = 0; j2 < dims.m2; ++j2) {
      double v;
      if (j2 < hm2) {
        v = out[static_cast<std::size_t>(j1) * hm2 + j2].real();
      } else {
        const int r1 = (dims.m1 - j1) % dims.m1;
        v = out[static_cast<std::size_t>(r1) * hm2 + (dims.m2 - j2)].real();
      }
      table.values[static_cast<std::size_t>(j1) * dims.m2 + j2] = v * inv_m;
    }
  }
  // C(h) and C(-h) can come from different FFT outputs; make them bitwise equal.
  for (int j1 = 0; j1 < dims.m1; ++j1) {
    for (int j2 = 0; j2 < dims.m2; ++j2) {
      const std::size_t a = static_cast<std::size_t>(j1) * dims.m2 + j2;
      const std::size_t b = static_cast<std::size_t>((dims.m1 - j1) % dims.m1) * dims.m2 + (dims.m2 - j2) % dims.m2;
      if (a < b) {
        const double v = 0.5 * (table.values[a] + table.values[b]);
        table.values[a] = v;
        table.values[b] = v;
      }
    }
  }
  return table;
}

}  // namespace nsgp
