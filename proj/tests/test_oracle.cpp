#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "nsgp/oracle.hpp"
#include "support.hpp"

using namespace nsgp;
using namespace nsgp::testing;

namespace {

// 2 log L from an eigendecomposition of the reference covariance.
double eigen_loglik2(const NonStatModel& m, const Eigen::VectorXd& y) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(reference_covariance(m));
  const Eigen::VectorXd proj = es.eigenvectors().transpose() * y;
  double out = -y.size() * std::log(2 * std::numbers::pi);
  for (Eigen::Index i = 0; i < y.size(); ++i) out -= std::log(es.eigenvalues()[i]) + proj[i] * proj[i] / es.eigenvalues()[i];
  return out;
}

DataField field_from(const NonStatModel& m, const Eigen::VectorXd& y) {
  DataField d{m.grid, std::vector<double>(m.grid.pixels(), std::numeric_limits<double>::quiet_NaN()), {}};
  for (int i = 0; i < m.n_obs(); ++i) d.values[m.grid.pixel_of(i)] = y[i];
  return d;
}

}  // namespace

TEST(ExactLoglik, SinglePixelClosedForm) {
  const auto m = grid_model(1, 1, {1}, {2.5, 0.3, 0.5, 0.1}, {});
  Eigen::VectorXd y(1);
  y << 1.2;
  EXPECT_NEAR(exact_loglik(m, field_from(m, y)), -std::log(2 * std::numbers::pi) - std::log(2.5) - 1.44 / 2.5, 1e-12);
}

TEST(ExactLoglik, MatchesEigendecomposition) {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 10; ++t) {
    const auto m = random_model(rng, 10, t % 3, t % 2 == 0);
    const auto y = random_vector(rng, m.n_obs());
    EXPECT_NEAR(exact_loglik(m, field_from(m, y)), eigen_loglik2(m, y), 1e-8 * m.n_obs());
  }
}

TEST(ExactLoglik, SubtractsModelMean) {
  std::mt19937_64 rng(32);
  auto m = grid_model(4, 6, strip_labels(4, 6, 2), {1.0, 0.5, 0.5, 0.1}, {{}, {}}, 1.25, 0, true);
  m.beta = Eigen::Vector2d(1.5, -2.0);
  const auto z = random_vector(rng, 24);
  Eigen::VectorXd y = z;
  for (int i = 0; i < 24; ++i) y[i] += (m.grid.col_of(i) < 3) ? 1.5 : -2.0;
  EXPECT_NEAR(exact_loglik(m, field_from(m, y)), eigen_loglik2(m, z), 1e-9);
}

TEST(ExactScore, MatchesFiniteDifferenceOfLoglik) {
  std::mt19937_64 rng(33);
  for (int t = 0; t < 4; ++t) {
    const auto m = random_model(rng, 8, t % 3, true);
    const auto y = random_vector(rng, m.n_obs());
    const auto s = exact_score(m, y);
    for (int f = 0; f < m.n_cov_params(); ++f) {
      const auto id = ParamId::from_flat(f);
      const double h = 1e-5 * m.process(id.process)[id.param];
      NonStatModel hi = m, lo = m;
      hi.process(id.process)[id.param] += h;
      lo.process(id.process)[id.param] -= h;
      const double fd = 0.25 * (eigen_loglik2(hi, y) - eigen_loglik2(lo, y)) / h;
      EXPECT_NEAR(s[f], fd, 1e-5 * (std::abs(fd) + 1.0)) << "trial " << t << " param " << f;
    }
  }
}

TEST(ExactScore, HasZeroMeanUnderTheModel) {
  std::mt19937_64 rng(34);
  const auto m = grid_model(4, 5, strip_labels(4, 5, 2), {1.0, 0.4, 0.8, 0.1}, {{2.0, 0.3, 0.5, 0.05}, {0.5, 1.0, 1.0, 0.2}});
  const Eigen::MatrixXd l = reference_covariance(m).llt().matrixL();
  const int reps = 3000;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(12);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(12, 12);
  for (int r = 0; r < reps; ++r) {
    const Eigen::VectorXd s = exact_score(m, l * random_vector(rng, 20));
    mean += s;
    cov += s * s.transpose();
  }
  mean /= reps;
  cov /= reps;
  const auto info = fisher_information(m, std::nullopt);
  for (int f = 0; f < 12; ++f) {
    const double se = std::sqrt(info(f, f) / reps);
    EXPECT_LT(std::abs(mean[f]), 4.5 * se) << "param " << f;
    // second moment of the score equals the information (within sampling error)
    EXPECT_NEAR(cov(f, f) / info(f, f), 1.0, 0.25) << "param " << f;
  }
}

TEST(FisherInformation, MatchesTraceFormulaComputedEntrywise) {
  std::mt19937_64 rng(35);
  const auto m = random_model(rng, 7, 1, false);
  const Eigen::MatrixXd k = reference_covariance(m);
  const Eigen::MatrixXd kinv = k.inverse();
  const int p = m.n_cov_params();
  const int n = m.n_obs();
  std::vector<Eigen::MatrixXd> a(p);
  for (int i = 0; i < p; ++i) a[i] = kinv * dense_dcov(m, ParamId::from_flat(i));
  for (std::optional<int> probes : {std::optional<int>{}, std::optional<int>{1}, std::optional<int>{5}}) {
    const auto b = fisher_information(m, probes);
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < p; ++j) {
        const double tr = (a[i] * a[j]).trace();
        double diag = 0.0;
        for (int t = 0; t < n; ++t) diag += a[i](t, t) * a[j](t, t);
        const double ref = probes ? (0.5 + 0.5 / *probes) * tr - 0.5 / *probes * diag : 0.5 * tr;
        EXPECT_NEAR(b(i, j), ref, 1e-8 * (std::abs(ref) + 1));
      }
    }
    EXPECT_LT((b - b.transpose()).norm(), 1e-12 * b.norm());
  }
  EXPECT_THROW(fisher_information(m, 0), Error);
}

TEST(LikelihoodGain, ZeroAtTruthAndNonNegativeAtMle) {
  std::mt19937_64 rng(36);
  const auto truth = grid_model(8, 8, strip_labels(8, 8, 1), {1.0, 0.3, 0.7, 0.1}, {});
  const auto field = sample_field(truth, {}, 77);
  EXPECT_EQ(likelihood_gain(truth, truth, field.data), 0.0);
  auto start = truth;
  start.theta0 = {1.0, 0.5, 0.5, 0.05};
  start.sigma0_link = false;
  const auto fit = dense_mle(field.data, start);
  EXPECT_TRUE(fit.optimizer.converged);
  EXPECT_GE(likelihood_gain(fit.model, truth, field.data), -1e-6);
  EXPECT_NEAR(fit.loglik2, exact_loglik(fit.model, field.data), 1e-9);
}

TEST(DenseMle, ProfiledFitIsStationaryPoint) {
  auto truth = grid_model(12, 12, std::vector<int>(144, 1), {1.5, 0.3, 0.8, 0.1}, {}, 1.25, 0, true);
  truth.beta = Eigen::VectorXd::Constant(1, 2.0);
  const auto field = sample_field(truth, {}, 5);
  auto start = truth;
  start.theta0 = {1.0, 0.5, 0.5, 0.05};
  const auto fit = dense_mle(field.data, start);
  ASSERT_TRUE(fit.optimizer.converged);
  EXPECT_GE(fit.loglik2, exact_loglik(truth, field.data) - 1e-6);
  // every score component vanishes at the optimum, sigma0^2 included
  const auto s = exact_score(fit.model, mean_residual(fit.model, field.data));
  const auto jac = fit.model.theta0.jacobian();
  for (int f = 0; f < 4; ++f) EXPECT_LT(std::abs(s[f] * jac[f]), 1e-4) << "param " << f;
  // and beta is the GLS estimate at the fitted covariance
  const Eigen::MatrixXd k = reference_covariance(fit.model);
  const auto y = field.data.observed_values();
  const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), 144);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(144);
  const Eigen::VectorXd kinv1 = k.llt().solve(ones);
  EXPECT_NEAR(fit.model.beta[0], kinv1.dot(yv) / kinv1.dot(ones), 1e-8);
}

TEST(Oracle, RefusesLargeProblems) {
  const auto m = grid_model(70, 70, std::vector<int>(4900, 1), {}, {});
  try {
    exact_loglik(m, field_from(m, Eigen::VectorXd::Zero(4900)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), "too-large");
  }
  EXPECT_THROW(dense_covariance(m), Error);
}
