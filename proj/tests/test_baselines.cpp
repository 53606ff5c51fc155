#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "nsgp/baselines.hpp"
#include "nsgp/oracle.hpp"
#include "support.hpp"

using namespace nsgp;
using namespace nsgp::testing;

namespace {

// Brute force: sort every earlier observation by (squared distance, index).
std::vector<int> brute_neighbors(const GridGeometry& g, int i, int m) {
  std::vector<std::pair<long, int>> all;
  for (int j = 0; j < i; ++j) {
    const long dr = g.row_of(i) - g.row_of(j), dc = g.col_of(i) - g.col_of(j);
    all.emplace_back(dr * dr + dc * dc, j);
  }
  std::sort(all.begin(), all.end());
  std::vector<int> out;
  for (int k = 0; k < std::min<int>(m, static_cast<int>(all.size())); ++k) out.push_back(all[k].second);
  return out;
}

// Sum of conditional Gaussian log densities from the dense covariance.
double conditional_loglik(const Eigen::MatrixXd& k, const Eigen::VectorXd& y, const GridGeometry& g, int m) {
  double out = 0.0;
  for (int i = 0; i < y.size(); ++i) {
    const auto s = brute_neighbors(g, i, m);
    const int ns = static_cast<int>(s.size());
    double mean = 0.0, var = k(i, i);
    if (ns > 0) {
      Eigen::MatrixXd kss(ns, ns);
      Eigen::VectorXd ksi(ns), ys(ns);
      for (int a = 0; a < ns; ++a) {
        ksi[a] = k(s[a], i);
        ys[a] = y[s[a]];
        for (int b = 0; b < ns; ++b) kss(a, b) = k(s[a], s[b]);
      }
      const Eigen::VectorXd w = kss.ldlt().solve(ksi);
      mean = w.dot(ys);
      var -= w.dot(ksi);
    }
    const double r = y[i] - mean;
    out += -0.5 * (std::log(2 * std::numbers::pi * var) + r * r / var);
  }
  return out;
}

DataField field_from(const NonStatModel& m, const Eigen::VectorXd& y) {
  DataField d{m.grid, std::vector<double>(m.grid.pixels(), std::numeric_limits<double>::quiet_NaN()), {}};
  for (int i = 0; i < m.n_obs(); ++i) d.values[m.grid.pixel_of(i)] = y[i];
  return d;
}

}  // namespace

TEST(VecchiaNeighbors, MatchBruteForceOnMaskedGrids) {
  std::mt19937_64 rng(41);
  for (int t = 0; t < 6; ++t) {
    const auto m = random_model(rng, 14, 1, true);
    for (int nb : {0, 1, 4, 9, 30}) {
      const auto sets = vecchia_neighbors(m.grid, nb);
      for (int i = 0; i < m.n_obs(); ++i) ASSERT_EQ(sets[i], brute_neighbors(m.grid, i, nb)) << "obs " << i;
    }
  }
  EXPECT_THROW(vecchia_neighbors(GridGeometry(3, 3), -1), Error);
}

TEST(VecchiaNeighbors, TiesGoToLowerRasterIndex) {
  const GridGeometry g(3, 3);
  // centre (obs 4): earlier observations at distance 1 are 1 and 3
  EXPECT_EQ(vecchia_neighbors(g, 2)[4], (std::vector<int>{1, 3}));
  EXPECT_EQ(vecchia_neighbors(g, 3)[4], (std::vector<int>{1, 3, 0}));
}

TEST(VecchiaLoglik, FullConditioningIsExact) {
  std::mt19937_64 rng(42);
  for (int t = 0; t < 5; ++t) {
    const auto m = random_model(rng, 7, t % 3, t % 2 == 1);
    const auto y = random_vector(rng, m.n_obs());
    const auto d = field_from(m, y);
    EXPECT_NEAR(2.0 * vecchia_loglik(m, d, m.n_obs() - 1), exact_loglik(m, d), 1e-8 * m.n_obs());
  }
}

TEST(VecchiaLoglik, NoConditioningIsSumOfMarginals) {
  std::mt19937_64 rng(43);
  const auto m = random_model(rng, 8, 2, true);
  const auto y = random_vector(rng, m.n_obs());
  const Eigen::MatrixXd k = reference_covariance(m);
  double ref = 0.0;
  for (int i = 0; i < m.n_obs(); ++i) ref += -0.5 * (std::log(2 * std::numbers::pi * k(i, i)) + y[i] * y[i] / k(i, i));
  EXPECT_NEAR(vecchia_loglik(m, field_from(m, y), 0), ref, 1e-9 * std::abs(ref));
}

TEST(VecchiaLoglik, MatchesIndependentConditionalDecomposition) {
  std::mt19937_64 rng(44);
  const auto m = grid_model(6, 6, strip_labels(6, 6, 2), {0.5, 0.4, 0.8, 0.1}, {{1.5, 0.3, 0.6, 0.05}, {0.8, 0.9, 1.2, 0.2}});
  for (int rep = 0; rep < 3; ++rep) {
    const auto y = random_vector(rng, 36);
    const double ref = conditional_loglik(reference_covariance(m), y, m.grid, 5);
    EXPECT_NEAR(vecchia_loglik(m, field_from(m, y), 5), ref, 1e-9 * std::abs(ref));
  }
}

TEST(VecchiaLoglik, SubtractsModelMean) {
  std::mt19937_64 rng(45);
  auto m = grid_model(5, 6, strip_labels(5, 6, 2), {1.0, 0.4, 0.8, 0.1}, {{}, {}}, 1.25, 0, true);
  m.beta = Eigen::Vector2d(3.0, -1.0);
  const auto z = random_vector(rng, 30);
  Eigen::VectorXd y = z;
  for (int i = 0; i < 30; ++i) y[i] += m.grid.col_of(i) < 3 ? 3.0 : -1.0;
  auto zero_mean = m;
  zero_mean.has_mean = false;
  zero_mean.beta.resize(0);
  EXPECT_NEAR(vecchia_loglik(m, field_from(m, y), 4), vecchia_loglik(zero_mean, field_from(m, z), 4), 1e-10);
}

TEST(VecchiaFit, FullConditioningMatchesDenseMle) {
  auto truth = grid_model(5, 5, std::vector<int>(25, 1), {1.0, 0.3, 0.5, 0.3}, {}, 1.25, 0, true);
  truth.beta = Eigen::VectorXd::Constant(1, 0.5);
  const auto data = sample_field(truth, {}, 8).data;
  auto start = truth;
  start.theta0 = {1.0, 0.5, 0.5, 0.05};
  const auto mle = dense_mle(data, start);
  VecchiaConfig cfg;
  cfg.neighbors = 24;
  cfg.stationary = true;
  cfg.qn = {};
  const auto vf = vecchia_fit(data, truth.partition, cfg);
  EXPECT_NEAR(2.0 * vf.loglik, mle.loglik2, 1e-5);
  EXPECT_NEAR(exact_loglik(vf.model, data), mle.loglik2, 1e-5);
  EXPECT_NEAR(vf.model.beta[0], mle.model.beta[0], 1e-3);
}

TEST(VecchiaFit, RecoversWhiteNoiseVariance) {
  const GridGeometry g(20, 20);
  std::mt19937_64 rng(46);
  std::normal_distribution<double> z(0.0, std::sqrt(2.5));
  DataField d{g, std::vector<double>(400), {}};
  for (auto& v : d.values) v = z(rng);
  const auto part = Partition::from_labels(g, std::vector<int>(400, 1));
  VecchiaConfig cfg;
  cfg.neighbors = 10;
  cfg.stationary = true;
  cfg.has_mean = false;
  const auto vf = vecchia_fit(d, part, cfg);
  const double se = 2.5 * std::sqrt(2.0 / 400);
  EXPECT_LT(std::abs(vf.model.theta0.sigma2 - 2.5), 3 * se) << vf.model.theta0.sigma2;
  // the profiled variance maximizes the Vecchia likelihood along sigma0^2
  auto at = [&](double s) {
    NonStatModel t = vf.model;
    ParamLayout::set_sigma0(t, s);
    return vecchia_loglik(t, d, 10);
  };
  const double s = vf.model.theta0.sigma2;
  EXPECT_GE(at(s), at(s * 1.01));
  EXPECT_GE(at(s), at(s * 0.99));
  EXPECT_NEAR(vf.loglik, at(s), 1e-9 * std::abs(vf.loglik));
}

TEST(EqualSplit, VerticalStripsOfNearEqualWidth) {
  const GridGeometry g(50, 100);
  const auto one = equal_split_partition(g, 1);
  EXPECT_EQ(one.q, 1);
  const auto two = equal_split_partition(g, 2);
  EXPECT_EQ(two.q, 2);
  for (int r = 0; r < 50; ++r) {
    for (int c = 0; c < 100; ++c) EXPECT_EQ(two.label(static_cast<std::size_t>(r) * 100 + c), c < 50 ? 1 : 2);
  }
  const auto three = equal_split_partition(GridGeometry(4, 10), 3);
  std::vector<int> width(4, 0);
  for (int c = 0; c < 10; ++c) ++width[three.label(c)];
  EXPECT_EQ(width[1] + width[2] + width[3], 10);
  EXPECT_LE(*std::max_element(width.begin() + 1, width.end()) - *std::min_element(width.begin() + 1, width.end()), 1);
  EXPECT_THROW(equal_split_partition(g, 0), Error);
}
