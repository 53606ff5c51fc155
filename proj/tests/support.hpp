#pragma once

// Shared generators and independent reference computations for the tests.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "nsgp/model.hpp"
#include "nsgp/params.hpp"

namespace nsgp::testing {

/// Log-uniform draw of each parameter inside the default projection box,
/// pulled slightly inward so finite differences stay inside it.
inline QuasiMaternParams random_params(std::mt19937_64& rng, bool moderate = false) {
  auto lu = [&](double lo, double hi) {
    std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
    return std::exp(u(rng));
  };
  QuasiMaternParams p;
  if (moderate) {
    p.sigma2 = lu(0.2, 5.0);
    p.alpha = lu(0.1, 2.0);
    p.nu = lu(0.2, 2.0);
    p.tau = lu(0.02, 0.5);
  } else {
    p.sigma2 = lu(1e-3, 1e3);
    p.alpha = lu(2e-4, 15.0);
    p.nu = lu(2e-3, 15.0);
    p.tau = lu(2e-4, 0.85);
  }
  return p;
}

/// Random grid (optionally masked), random partition with q segments, and
/// random parameters. q = 0 gives a global-only covariance.
inline NonStatModel random_model(std::mt19937_64& rng, int max_n, int q, bool masked, bool moderate = true) {
  std::uniform_int_distribution<int> dim(2, max_n);
  for (;;) {
    const int n1 = dim(rng), n2 = dim(rng);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n1) * n2, 1);
    if (masked) {
      std::bernoulli_distribution keep(0.8);
      for (auto& m : mask) m = keep(rng) ? 1 : 0;
    }
    int observed = 0;
    for (auto m : mask) observed += m;
    const int segments = std::max(q, 1);
    if (observed < 2 * segments + 1) continue;
    GridGeometry grid(n1, n2, mask);
    std::vector<int> labels(grid.pixels(), 0);
    // contiguous row-major chunks so every segment is non-empty
    int k = 0;
    for (std::size_t p = 0; p < grid.pixels(); ++p) {
      if (!grid.observed(p)) continue;
      labels[p] = 1 + (k * segments) / observed;
      ++k;
    }
    Partition part = Partition::from_labels(grid, labels);
    std::vector<QuasiMaternParams> local;
    for (int i = 0; i < q; ++i) local.push_back(random_params(rng, moderate));
    return NonStatModel::make(grid, part, random_params(rng, moderate), local, 1.25, 0, false);
  }
}

/// Full-grid model on an n1 x n2 window with the given labels.
inline NonStatModel grid_model(int n1, int n2, const std::vector<int>& labels, const QuasiMaternParams& global,
                               const std::vector<QuasiMaternParams>& local, double factor = 1.25,
                               int n_covariates = 0, bool has_mean = false) {
  GridGeometry grid(n1, n2);
  Partition part = Partition::from_labels(grid, labels);
  return NonStatModel::make(grid, part, global, local, factor, n_covariates, has_mean);
}

/// Labels splitting an n1 x n2 grid into k vertical strips.
inline std::vector<int> strip_labels(int n1, int n2, int k) {
  std::vector<int> labels(static_cast<std::size_t>(n1) * n2);
  for (int r = 0; r < n1; ++r) {
    for (int c = 0; c < n2; ++c) labels[static_cast<std::size_t>(r) * n2 + c] = 1 + (c * k) / n2;
  }
  return labels;
}

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = z(rng);
  return v;
}

/// Lag covariance by direct cosine summation of the closed-form density.
inline std::vector<double> reference_lags(const QuasiMaternParams& p, int m1, int m2) {
  std::vector<double> f(static_cast<std::size_t>(m1) * m2);
  double sum = 0.0;
  for (int j1 = 0; j1 < m1; ++j1) {
    for (int j2 = 0; j2 < m2; ++j2) {
      const double s = std::pow(std::sin(std::numbers::pi * j1 / m1), 2) + std::pow(std::sin(std::numbers::pi * j2 / m2), 2);
      f[j1 * m2 + j2] = std::pow(p.alpha * p.alpha + s, -1.0 - p.nu);
      sum += f[j1 * m2 + j2];
    }
  }
  for (auto& v : f) v = p.sigma2 * (m1 * m2 / sum * (1 - p.tau) * v + p.tau);
  std::vector<double> c(f.size(), 0.0);
  for (int h1 = 0; h1 < m1; ++h1) {
    for (int h2 = 0; h2 < m2; ++h2) {
      double acc = 0.0;
      for (int j1 = 0; j1 < m1; ++j1) {
        for (int j2 = 0; j2 < m2; ++j2) {
          acc += f[j1 * m2 + j2] * std::cos(2 * std::numbers::pi * (double(h1) * j1 / m1 + double(h2) * j2 / m2));
        }
      }
      c[h1 * m2 + h2] = acc / (m1 * m2);
    }
  }
  return c;
}

/// Dense covariance assembled pairwise from reference lag tables.
inline Eigen::MatrixXd reference_covariance(const NonStatModel& m) {
  const int m1 = m.embed.m1, m2 = m.embed.m2, n = m.n_obs();
  std::vector<std::vector<double>> lags;
  for (int k = 0; k < m.n_processes(); ++k) lags.push_back(reference_lags(m.process(k), m1, m2));
  Eigen::MatrixXd out(n, n);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      const int d1 = ((m.grid.row_of(a) - m.grid.row_of(b)) % m1 + m1) % m1;
      const int d2 = ((m.grid.col_of(a) - m.grid.col_of(b)) % m2 + m2) % m2;
      double v = lags[0][d1 * m2 + d2];
      const int sa = m.partition.label(m.grid.pixel_of(a)), sb = m.partition.label(m.grid.pixel_of(b));
      if (m.q_local() > 0 && sa == sb) v += lags[sa][d1 * m2 + d2];
      out(a, b) = v;
    }
  }
  return out;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

inline double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

}  // namespace nsgp::testing
