#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nsgp/circulant.hpp"
#include "nsgp/error.hpp"
#include "nsgp/layout.hpp"
#include "nsgp/model.hpp"
#include "nsgp/score.hpp"

namespace nsgp {

struct FitConfig {
  int probes = 5;
  std::uint64_t seed = 1;
  /// Initial step = step_scale / g0, threshold = threshold_fraction * max|score|.
  double step_scale = 0.5;
  double threshold_fraction = 0.1;
  double grow = 2.0;
  double shrink = 0.1;
  ParamBox box;
  int max_iter = 200;
  double rel_move_tol = 1e-6;
  /// Stop level is max(stop_factor * g0 / sqrt(n), score_tol).
  double stop_factor = 2.0;
  double score_tol = 0.0;
  int max_rejections = 25;
  /// Global process only (no local processes).
  bool stationary = false;
  bool has_mean = true;
  double expansion_factor = 1.25;
  SolveSettings solver;
  int threads = 1;
  /// Starting point; when absent all processes start at the default
  /// stationary values with sigma0^2 from an OLS pre-fit.
  std::optional<NonStatModel> init;
};

enum class Termination { score_small, relative_move_small, max_iter };

inline const char* termination_name(Termination t) {
  switch (t) {
    case Termination::score_small: return "score-small";
    case Termination::relative_move_small: return "relative-move-small";
    case Termination::max_iter: return "max-iter";
  }
  return "?";
}

/// One proposed step.
struct StepRecord {
  int iteration = 0;
  double step = 0.0;
  double threshold = 0.0;
  std::vector<int> moved;
  Eigen::VectorXd score_before;
  Eigen::VectorXd score_candidate;
  /// Score after beta and sigma0^2 are re-profiled (accepted steps only).
  Eigen::VectorXd score_accepted;
  Eigen::VectorXd u_candidate;
  double relative_move = 0.0;
  bool accepted = false;
};

struct FitResult {
  NonStatModel model;
  NonStatModel initial;
  ParamLayout layout;
  int iterations = 0;
  int accepted = 0;
  int rejected = 0;
  Termination termination = Termination::max_iter;
  double g0 = 0.0;
  double stop_level = 0.0;
  /// max|score| at the start and after each iteration.
  std::vector<double> score_norms;
  Eigen::VectorXd final_score;
  std::vector<StepRecord> log;
  int solves = 0;
  long pcg_iterations = 0;
  int probes = 0;
  std::uint64_t seed = 0;
};

/// Componentwise clamp into the box.
inline Eigen::VectorXd project_params(const Eigen::VectorXd& u, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  return u.cwiseMax(lo).cwiseMin(hi);
}

/// OLS residual variance, the default starting sigma0^2.
inline double ols_residual_variance(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  const double n = static_cast<double>(y.size());
  if (x.cols() == 0) return y.squaredNorm() / n;
  const Eigen::VectorXd beta = x.colPivHouseholderQr().solve(y);
  const double dof = std::max(1.0, n - static_cast<double>(x.cols()));
  return (y - x * beta).squaredNorm() / dof;
}

namespace detail {

/// Score state at one parameter point, on the unit-scale operator when the
/// sigma0 link is active.
struct ScorePoint {
  Eigen::VectorXd trace;  // natural, flat
  Eigen::VectorXd a;
  double sigma0 = 1.0;
  Eigen::VectorXd score;  // transformed, layout order
};

class Fitter {
 public:
  Fitter(const DataField& data, const Partition& partition, const FitConfig& cfg) : cfg_(cfg) {
    data.validate();
    if (cfg.probes < 1) throw validation_error("invalid-parameter", "probes must be >= 1");
    if (cfg.max_iter < 1) throw validation_error("invalid-parameter", "max_iter must be >= 1");
    cfg.box.validate();
    partition.validate(data.grid);

    if (cfg.init) {
      model_ = *cfg.init;
      model_.validate();
      if (!model_.grid.same_shape(data.grid)) throw validation_error("grid-mismatch", "initial model grid");
    } else {
      const QuasiMaternParams start{1.0, 0.5, 0.5, 0.05};
      std::vector<QuasiMaternParams> local(cfg.stationary ? 0 : partition.q, start);
      model_ = NonStatModel::make(data.grid, partition, start, local, cfg.expansion_factor,
                                  static_cast<int>(data.covariates.size()), cfg.has_mean);
    }
    x_ = build_design_matrix(model_, data);
    const auto obs = data.observed_values();
    y_ = Eigen::Map<const Eigen::VectorXd>(obs.data(), static_cast<Eigen::Index>(obs.size()));
    if (!cfg.init) {
      ParamLayout::set_sigma0(model_, std::clamp(ols_residual_variance(x_, y_), std::exp(cfg.box.log_sigma0_lo),
                                                 std::exp(cfg.box.log_sigma0_hi)));
    }
    layout_ = ParamLayout(model_);
    layout_.bounds(cfg.box, lo_, hi_);
    probes_ = make_probes(model_.n_obs(), cfg.probes, cfg.seed);
    op_.emplace(operator_model(model_));
  }

  FitResult run() {
    FitResult res;
    res.probes = cfg_.probes;
    res.seed = cfg_.seed;
    res.layout = layout_;
    res.initial = model_;
    const double n = static_cast<double>(model_.n_obs());

    Eigen::VectorXd u = project_params(layout_.pack(model_), lo_, hi_);
    layout_.unpack(u, model_);
    update_beta(0);
    ScorePoint cur = evaluate(u, 0);
    commit(cur);

    res.g0 = max_abs(cur.score);
    res.stop_level = std::max(cfg_.stop_factor * res.g0 / std::sqrt(n), cfg_.score_tol);
    res.score_norms.push_back(res.g0);
    double step = res.g0 > 0 ? cfg_.step_scale / res.g0 : 0.0;
    double threshold = cfg_.threshold_fraction * res.g0;
    int rejections = 0;

    res.termination = Termination::max_iter;
    for (int it = 1;; ++it) {
      if (max_abs(cur.score) < res.stop_level || res.g0 == 0.0) {
        res.termination = Termination::score_small;
        break;
      }
      if (it > cfg_.max_iter) break;
      res.iterations = it;

      StepRecord rec;
      rec.iteration = it;
      rec.step = step;
      rec.threshold = threshold;
      rec.score_before = cur.score;
      Eigen::VectorXd cand = u;
      for (int i = 0; i < layout_.size(); ++i) {
        if (std::abs(cur.score[i]) > threshold) {
          rec.moved.push_back(i);
          cand[i] += step * cur.score[i];
        }
      }
      cand = project_params(cand, lo_, hi_);
      rec.u_candidate = cand;
      rec.relative_move = ((cand - u).array().abs() / (u.array().abs() + 1e-8)).maxCoeff();
      if (rec.relative_move < cfg_.rel_move_tol) {
        res.log.push_back(std::move(rec));
        res.termination = Termination::relative_move_small;
        break;
      }

      ScorePoint next = evaluate(cand, it);
      rec.score_candidate = next.score;
      bool keep = true;
      for (int i : rec.moved) keep = keep && (next.score[i] * cur.score[i] > 0.0);
      rec.accepted = keep;

      if (keep) {
        u = cand;
        layout_.unpack(u, model_);
        if (update_beta(it)) refresh_data_term(next, it);
        commit(next);
        cur = std::move(next);
        rec.score_accepted = cur.score;
        step *= cfg_.grow;
        threshold = cfg_.threshold_fraction * max_abs(cur.score);
        rejections = 0;
        ++res.accepted;
      } else {
        step *= cfg_.shrink;
        ++res.rejected;
        if (++rejections >= cfg_.max_rejections) {
          throw numerical_error("no-progress", std::to_string(rejections) + " consecutive rejected steps at iteration " +
                                                   std::to_string(it));
        }
      }
      res.log.push_back(std::move(rec));
      res.score_norms.push_back(max_abs(cur.score));
    }
    res.model = model_;
    res.final_score = cur.score;
    res.solves = counter_.solves;
    res.pcg_iterations = counter_.iterations;
    return res;
  }

 private:
  static double max_abs(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

  /// Model handed to the operator: unit sigma0^2 under the link.
  static NonStatModel operator_model(NonStatModel m) {
    if (m.sigma0_link) ParamLayout::set_sigma0(m, 1.0);
    return m;
  }

  void set_operator(const NonStatModel& m) {
    const NonStatModel unit = operator_model(m);
    op_->set_params(unit.theta0, unit.theta);
  }

  Eigen::VectorXd residual() const {
    return model_.p_mean() > 0 && model_.beta.size() == model_.p_mean() ? Eigen::VectorXd(y_ - x_ * model_.beta) : y_;
  }

  /// GLS beta at the current covariance parameters; false when there is no mean.
  bool update_beta(int iteration) {
    if (model_.p_mean() == 0) return false;
    set_operator(model_);
    try {
      model_.beta = gls_beta(*op_, x_, y_, cfg_.solver, &warm_, &counter_).beta;
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::numerical) {
        throw numerical_error(e.category(), "iteration " + std::to_string(iteration) + ": GLS: " + e.what());
      }
      throw;
    }
    return true;
  }

  ScorePoint evaluate(const Eigen::VectorXd& u, int iteration) {
    NonStatModel m = model_;
    layout_.unpack(u, m);
    set_operator(m);
    ScorePoint p;
    try {
      p.trace = trace_terms(*op_, probes_, cfg_.solver, &warm_, &counter_, cfg_.threads);
      refresh_data_term(p, iteration);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::numerical) {
        throw numerical_error(e.category(), "iteration " + std::to_string(iteration) + ": " + e.what());
      }
      throw;
    }
    return p;
  }

  /// Data solve, profiled sigma0^2 and the transformed score at the
  /// operator's current parameters.
  void refresh_data_term(ScorePoint& p, int iteration) {
    const Eigen::VectorXd y0 = residual();
    try {
      p.a = solve_cov(*op_, y0, cfg_.solver, &warm_.data, &counter_, "data system");
    } catch (const Error& e) {
      throw numerical_error(e.category(), "iteration " + std::to_string(iteration) + ": " + e.what());
    }
    const Eigen::VectorXd quad = quadratic_terms(*op_, p.a);
    Eigen::VectorXd natural;
    const NonStatModel& om = op_->model();
    if (layout_.link()) {
      p.sigma0 = std::clamp(y0.dot(p.a) / static_cast<double>(y0.size()), std::exp(cfg_.box.log_sigma0_lo),
                            std::exp(cfg_.box.log_sigma0_hi));
      natural = quad / p.sigma0 - p.trace;
    } else {
      natural = quad - p.trace;
    }
    // chain on the operator's (unit-scale) model: d/dlog(phi_k) = phi_k * d/dsigma_k^2
    p.score = layout_.chain(om, natural);
  }

  void commit(const ScorePoint& p) {
    if (layout_.link()) ParamLayout::set_sigma0(model_, p.sigma0);
  }

  FitConfig cfg_;
  NonStatModel model_;
  ParamLayout layout_;
  Eigen::VectorXd lo_, hi_;
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  ProbeSet probes_;
  std::optional<CirculantOperator> op_;
  WarmStarts warm_;
  SolveCounter counter_;
};

}  // namespace detail

/// Sign-preserving thresholded score ascent on the transformed parameters.
/// Only components whose score exceeds the threshold move; a candidate is
/// kept when none of the moved components changes sign. sigma0^2 and beta
/// are profiled and never stepped.
inline FitResult fit(const DataField& data, const Partition& partition, const FitConfig& cfg = {}) {
  detail::Fitter f(data, partition, cfg);
  return f.run();
}

}  // namespace nsgp
