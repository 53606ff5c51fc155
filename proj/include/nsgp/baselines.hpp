#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "nsgp/error.hpp"
#include "nsgp/grid.hpp"
#include "nsgp/layout.hpp"
#include "nsgp/model.hpp"
#include "nsgp/optimizer.hpp"
#include "nsgp/quasi_newton.hpp"
#include "nsgp/spectral.hpp"

namespace nsgp {

/// Conditioning sets for the raster-ordered Vecchia approximation: for each
/// observation the (up to) m nearest earlier observations, ties broken by
/// lower raster index, listed nearest first.
inline std::vector<std::vector<int>> vecchia_neighbors(const GridGeometry& grid, int m) {
  if (m < 0) throw validation_error("invalid-parameter", "neighbor count must be >= 0");
  const int n = grid.n_obs();
  std::vector<std::vector<int>> sets(n);
  struct Cand {
    long d2;
    int idx;
  };
  std::vector<Cand> cand;
  for (int i = 0; i < n; ++i) {
    const int want = std::min(m, i);
    if (want == 0) continue;
    const int r = grid.row_of(i), c = grid.col_of(i);
    for (int rad = std::max(1, static_cast<int>(std::ceil(std::sqrt(double(want))))); ; rad *= 2) {
      cand.clear();
      for (int rr = std::max(0, r - rad); rr <= r; ++rr) {
        for (int cc = std::max(0, c - rad); cc <= std::min(grid.n2() - 1, c + rad); ++cc) {
          const std::size_t pix = static_cast<std::size_t>(rr) * grid.n2() + cc;
          const int j = grid.obs_of(pix);
          if (j < 0 || j >= i) continue;
          const long dr = r - rr, dc = c - cc;
          cand.push_back({dr * dr + dc * dc, j});
        }
      }
      long inside = 0;
      for (const auto& x : cand) inside += x.d2 <= static_cast<long>(rad) * rad;
      const bool covers_all = rad >= std::max(grid.n1(), grid.n2());
      if (inside >= want || covers_all) break;
    }
    std::sort(cand.begin(), cand.end(), [](const Cand& a, const Cand& b) { return a.d2 != b.d2 ? a.d2 < b.d2 : a.idx < b.idx; });
    for (int k = 0; k < want; ++k) sets[i].push_back(cand[k].idx);
  }
  return sets;
}

/// Conditioning sets plus, per observation, the lattice lag index of every
/// pair in S_i + {i} (neighbors first, i last), all fixed by the geometry.
struct VecchiaPlan {
  int lattice_m1 = 0, lattice_m2 = 0;
  std::vector<std::vector<int>> sets;
  std::vector<std::vector<int>> lag;  // (k+1) x (k+1) row-major
  std::vector<int> segment;

  VecchiaPlan(const NonStatModel& m, int neighbors)
      : lattice_m1(m.embed.m1), lattice_m2(m.embed.m2), sets(vecchia_neighbors(m.grid, neighbors)) {
    const auto& grid = m.grid;
    const int n = grid.n_obs();
    segment.resize(n);
    for (int i = 0; i < n; ++i) segment[i] = m.partition.label(grid.pixel_of(i));
    lag.resize(n);
    std::vector<int> pts;
    for (int i = 0; i < n; ++i) {
      pts = sets[i];
      pts.push_back(i);
      const int k1 = static_cast<int>(pts.size());
      lag[i].resize(static_cast<std::size_t>(k1) * k1);
      for (int a = 0; a < k1; ++a) {
        for (int c = 0; c < k1; ++c) {
          const int d1 = ((grid.row_of(pts[a]) - grid.row_of(pts[c])) % lattice_m1 + lattice_m1) % lattice_m1;
          const int d2 = ((grid.col_of(pts[a]) - grid.col_of(pts[c])) % lattice_m2 + lattice_m2) % lattice_m2;
          lag[i][static_cast<std::size_t>(a) * k1 + c] = d1 * lattice_m2 + d2;
        }
      }
    }
  }
};

namespace detail {

/// Lag tables of every process and, optionally, of every density derivative.
struct VecchiaTables {
  std::vector<LagTable> cov;
  std::vector<std::array<LagTable, 4>> grad;
};

inline VecchiaTables vecchia_tables(const NonStatModel& m, bool with_grad) {
  VecchiaTables t;
  const LatticeDims dims = m.embed.dims();
  for (int k = 0; k < m.n_processes(); ++k) {
    t.cov.push_back(covariance_from_density(qm_density(m.process(k), dims)));
    if (with_grad) {
      const auto g = qm_density_grad(m.process(k), dims);
      t.grad.push_back({covariance_from_density(g[0]), covariance_from_density(g[1]), covariance_from_density(g[2]),
                        covariance_from_density(g[3])});
    }
  }
  return t;
}

struct VecchiaTerms {
  double sum_log_d = 0.0;
  double sum_r2_over_d = 0.0;
  /// Per flat parameter: sum dd/d, sum r^2 dd / d^2, sum r dr / d.
  Eigen::VectorXd dlogd, dr2d, rdr;
};

/// Conditional decomposition with (unit-scale) covariance m at residual y0.
/// Optionally returns B X, B y0 and the conditional variances d.
inline VecchiaTerms vecchia_terms(const NonStatModel& m, const Eigen::VectorXd& y0, const VecchiaPlan& plan,
                                  bool with_grad, Eigen::MatrixXd* bx = nullptr, const Eigen::MatrixXd* x = nullptr,
                                  Eigen::VectorXd* by = nullptr, Eigen::VectorXd* dvec = nullptr) {
  const int n = m.grid.n_obs();
  const VecchiaTables tab = vecchia_tables(m, with_grad);
  const int np = m.n_cov_params();
  const bool local = m.q_local() > 0;
  const auto& seg = plan.segment;

  VecchiaTerms out;
  if (with_grad) {
    out.dlogd = Eigen::VectorXd::Zero(np);
    out.dr2d = Eigen::VectorXd::Zero(np);
    out.rdr = Eigen::VectorXd::Zero(np);
  }
  if (bx) bx->resize(n, x->cols());
  if (by) by->resize(n);
  if (dvec) dvec->resize(n);
  Eigen::MatrixXd kss, dkss;
  Eigen::VectorXd ksi, ys, b, w, dksi;
  std::vector<char> in_seg;
  for (int i = 0; i < n; ++i) {
    const auto& s = plan.sets[i];
    const auto& lag = plan.lag[i];
    const int k = static_cast<int>(s.size());
    const int k1 = k + 1;
    // same-segment flags, i last
    in_seg.assign(k1, 0);
    for (int a = 0; a < k; ++a) in_seg[a] = seg[s[a]] == seg[i];
    in_seg[k] = 1;
    auto cov = [&](int a, int c) {
      const int l = lag[static_cast<std::size_t>(a) * k1 + c];
      double v = tab.cov[0].values[l];
      if (local) {
        const int sa = a == k ? seg[i] : seg[s[a]], sc = c == k ? seg[i] : seg[s[c]];
        if (sa == sc) v += tab.cov[sa].values[l];
      }
      return v;
    };
    double d = cov(k, k);
    double r = y0[i];
    if (k > 0) {
      kss.resize(k, k);
      ksi.resize(k);
      ys.resize(k);
      for (int a = 0; a < k; ++a) {
        ksi[a] = cov(a, k);
        ys[a] = y0[s[a]];
        for (int c = 0; c <= a; ++c) kss(a, c) = kss(c, a) = cov(a, c);
      }
      Eigen::LLT<Eigen::MatrixXd> llt(kss);
      if (llt.info() != Eigen::Success) {
        throw numerical_error("singular-conditioning", "conditioning covariance of observation " + std::to_string(i) +
                                                           " is not positive definite");
      }
      b = llt.solve(ksi);
      d -= ksi.dot(b);
      r -= b.dot(ys);
      if (with_grad) w = llt.solve(ys);
      if (bx) {
        bx->row(i) = x->row(i);
        for (int a = 0; a < k; ++a) bx->row(i) -= b[a] * x->row(s[a]);
      }
    } else if (bx) {
      bx->row(i) = x->row(i);
    }
    if (!(d > 0.0)) {
      throw numerical_error("singular-conditioning", "non-positive conditional variance at observation " +
                                                         std::to_string(i));
    }
    if (by) (*by)[i] = r;
    if (dvec) (*dvec)[i] = d;
    out.sum_log_d += std::log(d);
    out.sum_r2_over_d += r * r / d;
    if (!with_grad) continue;
    dkss.resize(k, k);
    dksi.resize(k);
    for (int proc = 0; proc < m.n_processes(); ++proc) {
      // membership of each point in the process (all points for the global one)
      auto member = [&](int a) { return proc == 0 || (a == k ? seg[i] : seg[s[a]]) == proc; };
      bool any = false;
      for (int a = 0; a < k1 && !any; ++a) any = member(a);
      if (!any) continue;
      for (int p = 0; p < kParamsPerProcess; ++p) {
        const auto& table = tab.grad[proc][p].values;
        auto dcov = [&](int a, int c) {
          return (member(a) && member(c)) ? table[lag[static_cast<std::size_t>(a) * k1 + c]] : 0.0;
        };
        double dd = dcov(k, k);
        double dr = 0.0;
        if (k > 0) {
          for (int a = 0; a < k; ++a) {
            dksi[a] = dcov(a, k);
            for (int c = 0; c <= a; ++c) dkss(a, c) = dkss(c, a) = dcov(a, c);
          }
          const Eigen::VectorXd dkb = dkss * b;
          dd += -2.0 * dksi.dot(b) + b.dot(dkb);
          dr = -(dksi - dkb).dot(w);
        }
        const int f = kParamsPerProcess * proc + p;
        out.dlogd[f] += dd / d;
        out.dr2d[f] += r * r * dd / (d * d);
        out.rdr[f] += r * dr / d;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Vecchia log likelihood (log L, not 2 log L) at the model's parameters and
/// mean, conditioning each observation on its m nearest earlier neighbors.
inline double vecchia_loglik(const NonStatModel& model, const DataField& data, int m) {
  model.validate();
  Eigen::VectorXd y0;
  {
    const auto obs = data.observed_values();
    y0 = Eigen::Map<const Eigen::VectorXd>(obs.data(), static_cast<Eigen::Index>(obs.size()));
    if (model.p_mean() > 0 && model.beta.size() == model.p_mean()) y0 -= build_design_matrix(model, data) * model.beta;
  }
  const VecchiaPlan plan(model, m);
  const auto t = detail::vecchia_terms(model, y0, plan, false);
  const double n = static_cast<double>(y0.size());
  return -0.5 * (n * std::log(2.0 * std::numbers::pi) + t.sum_log_d + t.sum_r2_over_d);
}

inline QuasiNewtonOptions vecchia_qn_defaults() {
  QuasiNewtonOptions o;
  o.max_iter = 300;
  o.ftol = 1e-9;
  o.flat_window = 5;
  return o;
}

struct VecchiaConfig {
  int neighbors = 30;
  ParamBox box;
  QuasiNewtonOptions qn = vecchia_qn_defaults();
  bool stationary = false;
  bool has_mean = true;
  double expansion_factor = 1.25;
  std::optional<NonStatModel> init;
};

struct VecchiaFitResult {
  NonStatModel model;
  /// Vecchia log L at the optimum.
  double loglik = 0.0;
  QuasiNewtonResult optimizer;
};

/// Maximizes the Vecchia likelihood over the transformed covariance
/// parameters with projected BFGS. sigma0^2 (under the link) and beta are
/// profiled exactly; beta is GLS under the Vecchia-implied precision.
inline VecchiaFitResult vecchia_fit(const DataField& data, const Partition& partition, const VecchiaConfig& cfg = {}) {
  data.validate();
  cfg.box.validate();
  NonStatModel model;
  if (cfg.init) {
    model = *cfg.init;
  } else {
    const QuasiMaternParams start{1.0, 0.5, 0.5, 0.05};
    std::vector<QuasiMaternParams> local(cfg.stationary ? 0 : partition.q, start);
    model = NonStatModel::make(data.grid, partition, start, local, cfg.expansion_factor,
                               static_cast<int>(data.covariates.size()), cfg.has_mean);
  }
  const Eigen::MatrixXd x = build_design_matrix(model, data);
  const auto obs = data.observed_values();
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(obs.data(), static_cast<Eigen::Index>(obs.size()));
  if (!cfg.init) ParamLayout::set_sigma0(model, ols_residual_variance(x, y));
  const VecchiaPlan plan(model, cfg.neighbors);
  const ParamLayout layout(model);
  const double n = static_cast<double>(y.size());
  const double log2pi = std::log(2.0 * std::numbers::pi);
  NonStatModel work = model;

  auto evaluate = [&](const Eigen::VectorXd& u, Eigen::VectorXd& grad) -> double {
    layout.unpack(u, work);
    NonStatModel unit = work;
    if (layout.link()) ParamLayout::set_sigma0(unit, 1.0);
    // GLS beta under Q = B' D^-1 B, then the profiled likelihood at beta.
    if (x.cols() > 0) {
      Eigen::MatrixXd bx;
      Eigen::VectorXd by, dv;
      detail::vecchia_terms(unit, y, plan, false, &bx, &x, &by, &dv);
      const Eigen::MatrixXd wx = dv.cwiseInverse().asDiagonal() * bx;
      work.beta = (bx.transpose() * wx).ldlt().solve(wx.transpose() * by);
    }
    const Eigen::VectorXd y0 = x.cols() > 0 ? Eigen::VectorXd(y - x * work.beta) : y;
    const auto t = detail::vecchia_terms(unit, y0, plan, true);
    Eigen::VectorXd natural;
    double value;
    if (layout.link()) {
      const double s0 = t.sum_r2_over_d / n;
      ParamLayout::set_sigma0(work, s0);
      value = 0.5 * (n * log2pi + n * std::log(s0) + t.sum_log_d + n);
      natural = -0.5 * (t.dlogd - t.dr2d / s0) - t.rdr / s0;
      grad = -layout.chain(unit, natural);
    } else {
      value = 0.5 * (n * log2pi + t.sum_log_d + t.sum_r2_over_d);
      natural = -0.5 * (t.dlogd - t.dr2d) - t.rdr;
      grad = -layout.chain(work, natural);
    }
    return value;
  };

  Eigen::VectorXd lo, hi;
  layout.bounds(cfg.box, lo, hi);
  VecchiaFitResult out;
  out.optimizer = minimize_box(evaluate, layout.pack(model), lo, hi, cfg.qn);
  Eigen::VectorXd g;
  out.loglik = -evaluate(out.optimizer.x, g);
  out.model = work;
  return out;
}

/// k vertical strips [floor(j n2 / k), floor((j + 1) n2 / k)).
inline Partition equal_split_partition(const GridGeometry& grid, int k) {
  if (k < 1 || k > grid.n2()) throw validation_error("invalid-parameter", "strip count must be in [1, n2]");
  std::vector<int> labels(grid.pixels(), 0);
  for (int r = 0; r < grid.n1(); ++r) {
    for (int j = 0; j < k; ++j) {
      const int c0 = (j * grid.n2()) / k, c1 = ((j + 1) * grid.n2()) / k;
      for (int c = c0; c < c1; ++c) labels[static_cast<std::size_t>(r) * grid.n2() + c] = j + 1;
    }
  }
  return Partition::from_labels(grid, labels);
}

}  // namespace nsgp
