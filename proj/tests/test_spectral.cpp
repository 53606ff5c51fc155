#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "nsgp/spectral.hpp"
#include "support.hpp"

using namespace nsgp;
using nsgp::testing::random_params;

namespace {

// Scalar-loop evaluation straight from the closed form, no tabulation tricks.
template <class T = double>
std::vector<T> direct_density(const std::array<T, 4>& p, int m1, int m2) {
  std::vector<T> g(static_cast<std::size_t>(m1) * m2);
  T sum = 0;
  const T pi = std::numbers::pi_v<T>;
  for (int j1 = 0; j1 < m1; ++j1) {
    for (int j2 = 0; j2 < m2; ++j2) {
      const T w1 = 2 * pi * j1 / m1, w2 = 2 * pi * j2 / m2;
      const T s = std::pow(std::sin(w1 / 2), 2) + std::pow(std::sin(w2 / 2), 2);
      g[j1 * m2 + j2] = std::pow(p[1] * p[1] + s, -1 - p[2]);
      sum += g[j1 * m2 + j2];
    }
  }
  const T c = m1 * m2 / sum;
  for (auto& v : g) v = p[0] * (c * (1 - p[3]) * v + p[3]);
  return g;
}

std::vector<double> direct_density(const QuasiMaternParams& p, int m1, int m2) {
  return direct_density<double>({p.sigma2, p.alpha, p.nu, p.tau}, m1, m2);
}

// Central difference of the extended-precision scalar loop.
double fd_component(const QuasiMaternParams& p, Param which, LatticeDims dims, std::size_t k, double rel_step) {
  std::array<long double, 4> hi{p.sigma2, p.alpha, p.nu, p.tau};
  auto lo = hi;
  const int i = static_cast<int>(which);
  const long double h = rel_step * hi[i];
  hi[i] += h;
  lo[i] -= h;
  return static_cast<double>((direct_density(hi, dims.m1, dims.m2)[k] - direct_density(lo, dims.m1, dims.m2)[k]) /
                             (2 * h));
}

}  // namespace

TEST(QmDensity, NuggetLimitIsFlat) {
  const QuasiMaternParams p{1.7, 0.3, 1.0, 1.0 - 1e-12};
  const auto f = qm_density(p, {8, 6});
  for (double v : f.values) EXPECT_NEAR(v, 1.7, 1e-9);
}

TEST(QmDensity, ConstantShapeNormalizesToSigma2) {
  const QuasiMaternParams p{2.5, 1e6, 0.5, 0.2};
  const auto f = qm_density(p, {5, 7});
  for (double v : f.values) EXPECT_NEAR(v, 2.5, 1e-9);
}

TEST(QmDensity, MatchesScalarLoopOn4x4) {
  const QuasiMaternParams p{2.0, 0.5, 1.0, 0.1};
  const auto f = qm_density(p, {4, 4});
  const auto ref = direct_density(p, 4, 4);
  for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_LT(nsgp::testing::rel_err(f.values[k], ref[k]), 1e-12);
}

TEST(QmDensity, RejectsInvalidParameters) {
  EXPECT_THROW(qm_density({-1.0, 0.5, 0.5, 0.1}, {4, 4}), Error);
  EXPECT_THROW(qm_density({1.0, 0.5, 0.5, 1.0}, {4, 4}), Error);
  EXPECT_THROW(qm_density({1.0, 0.0, 0.5, 0.1}, {4, 4}), Error);
  try {
    qm_density({1.0, 0.5, 0.5, 0.1}, {64, 64}, 1000);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), "dimension-overflow");
  }
}

TEST(QmDensity, PositiveAndSymmetricAcrossBoxCorners) {
  const ParamBox box;
  for (double a : {std::exp(box.log_alpha_lo), std::exp(box.log_alpha_hi)}) {
    for (double nu : {std::exp(box.log_nu_lo), std::exp(box.log_nu_hi)}) {
      for (double tau : {inv_logit(box.logit_tau_lo), inv_logit(box.logit_tau_hi)}) {
        const LatticeDims dims{9, 16};
        const auto f = qm_density({1.0, a, nu, tau}, dims);
        for (int j1 = 0; j1 < dims.m1; ++j1) {
          for (int j2 = 0; j2 < dims.m2; ++j2) {
            ASSERT_GT(f(j1, j2), 0.0);
            ASSERT_EQ(f(j1, j2), f((dims.m1 - j1) % dims.m1, (dims.m2 - j2) % dims.m2));
          }
        }
      }
    }
  }
}

TEST(QmDensity, LagZeroCovarianceIsSigma2) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 30; ++t) {
    const auto p = random_params(rng);
    const auto c = covariance_from_density(qm_density(p, {12, 10}));
    EXPECT_LT(nsgp::testing::rel_err(c.at(0, 0), p.sigma2), 1e-10);
  }
}

TEST(QmDensityGrad, Sigma2DerivativeIsDensityOverSigma2) {
  const QuasiMaternParams p{3.0, 0.4, 0.7, 0.2};
  const auto f = qm_density(p, {6, 6});
  const auto d = qm_density_grad(p, {6, 6});
  for (std::size_t k = 0; k < f.values.size(); ++k) EXPECT_NEAR(d[0].values[k], f.values[k] / 3.0, 1e-14);
}

TEST(QmDensityGrad, TauDerivativeIsSigma2TimesOneMinusCg) {
  const QuasiMaternParams p{2.0, 0.6, 0.9, 0.3};
  const auto f = qm_density(p, {7, 5});
  const auto d = qm_density_grad(p, {7, 5});
  for (std::size_t k = 0; k < f.values.size(); ++k) {
    const double cg = (f.values[k] / p.sigma2 - p.tau) / (1 - p.tau);
    EXPECT_NEAR(d[3].values[k], p.sigma2 * (1 - cg), 1e-12);
  }
  // c g == 1 everywhere in the flat limit, so the tau derivative vanishes
  const auto flat = qm_density_grad({2.0, 1e6, 0.9, 0.3}, {7, 5});
  for (double v : flat[3].values) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(QmDensityGrad, MatchesFiniteDifferencesOn8x8) {
  const QuasiMaternParams p{1.0, 0.8, 0.5, 0.05};
  const LatticeDims dims{8, 8};
  const auto d = qm_density_grad(p, dims);
  for (int q = 0; q < 4; ++q) {
    for (std::size_t k = 0; k < dims.size(); ++k) {
      const double fd = fd_component(p, static_cast<Param>(q), dims, k, 1e-6);
      EXPECT_LT(std::abs(fd - d[q].values[k]), 1e-5 * std::abs(d[q].values[k]) + 1e-12)
          << "param " << q << " k " << k;
    }
  }
}

// Random draws across the whole box; elementwise relative agreement where
// the derivative is not negligible.
TEST(QmDensityGrad, RandomDrawsMatchFiniteDifferences) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(2, 16);
  for (int t = 0; t < 20; ++t) {
    const auto p = random_params(rng);
    const LatticeDims dims{dim(rng), dim(rng)};
    const auto d = qm_density_grad(p, dims);
    for (int q = 0; q < 4; ++q) {
      for (std::size_t k = 0; k < dims.size(); ++k) {
        const double an = d[q].values[k];
        if (std::abs(an) <= 1e-8) continue;
        const double fd = fd_component(p, static_cast<Param>(q), dims, k, 1e-6);
        EXPECT_LT(std::abs(fd - an), 1e-5 * std::abs(an)) << "draw " << t << " param " << q << " k " << k;
      }
    }
  }
}

TEST(CombinedDensity, AddsElementwise) {
  const LatticeDims dims{4, 4};
  const auto f0 = qm_density({1.0, 0.5, 0.5, 0.1}, dims);
  const auto f1 = qm_density({2.0, 0.2, 1.5, 0.3}, dims);
  const auto sum = combined_density(f0, f1);
  for (std::size_t k = 0; k < dims.size(); ++k) EXPECT_EQ(sum.values[k], f0.values[k] + f1.values[k]);

  SpectralField zero{dims, std::vector<double>(dims.size(), 0.0)};
  EXPECT_EQ(combined_density(f0, zero).values, f0.values);

  SpectralField one{dims, std::vector<double>(dims.size(), 1.0)};
  for (double v : combined_density(one, one).values) EXPECT_EQ(v, 2.0);

  SpectralField other{{4, 5}, std::vector<double>(20, 1.0)};
  EXPECT_THROW(combined_density(f0, other), Error);
}

TEST(CovarianceFromDensity, FlatDensityIsWhiteNoise) {
  const LatticeDims dims{6, 10};
  SpectralField f{dims, std::vector<double>(dims.size(), 3.0)};
  const auto c = covariance_from_density(f);
  for (int a = 0; a < dims.m1; ++a) {
    for (int b = 0; b < dims.m2; ++b) EXPECT_NEAR(c.at(a, b), (a == 0 && b == 0) ? 3.0 : 0.0, 1e-14);
  }
}

TEST(CovarianceFromDensity, MatchesDirectSummation) {
  const LatticeDims dims{8, 8};
  const auto f = qm_density({1.3, 0.3, 0.8, 0.07}, dims);
  const auto c = covariance_from_density(f);
  double mean = 0.0;
  for (double v : f.values) mean += v;
  mean /= dims.size();
  EXPECT_NEAR(c.at(0, 0), mean, 1e-12);
  for (int h1 = 0; h1 < dims.m1; ++h1) {
    for (int h2 = 0; h2 < dims.m2; ++h2) {
      double s = 0.0;
      for (int j1 = 0; j1 < dims.m1; ++j1) {
        for (int j2 = 0; j2 < dims.m2; ++j2) {
          const double arg = 2 * std::numbers::pi * (double(j1) * h1 / dims.m1 + double(j2) * h2 / dims.m2);
          s += f(j1, j2) * std::cos(arg);
        }
      }
      EXPECT_NEAR(c.at(h1, h2), s / dims.size(), 1e-10);
      EXPECT_EQ(c.at(h1, h2), c.at(-h1, -h2));
      EXPECT_GE(c.at(0, 0), std::abs(c.at(h1, h2)));
    }
  }
}

TEST(CovarianceFromDensity, OddLatticeSymmetry) {
  const LatticeDims dims{5, 9};
  const auto c = covariance_from_density(qm_density({1.0, 0.1, 2.0, 0.01}, dims));
  for (int a = 0; a < dims.m1; ++a) {
    for (int b = 0; b < dims.m2; ++b) EXPECT_EQ(c.at(a, b), c.at(-a, -b));
  }
}
