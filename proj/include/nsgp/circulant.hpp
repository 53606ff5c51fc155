#pragma once

#include <Eigen/Dense>

#include <array>
#include <atomic>
#include <cmath>
#include <complex>
#include <limits>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include "nsgp/error.hpp"
#include "nsgp/fft.hpp"
#include "nsgp/model.hpp"
#include "nsgp/rng.hpp"
#include "nsgp/spectral.hpp"

namespace nsgp {

enum class Precond { none, g1, g2, g3, g4 };

inline const char* precond_name(Precond p) {
  switch (p) {
    case Precond::none: return "none";
    case Precond::g1: return "g1";
    case Precond::g2: return "g2";
    case Precond::g3: return "g3";
    case Precond::g4: return "g4";
  }
  return "?";
}

inline Precond parse_precond(const std::string& s) {
  if (s == "none") return Precond::none;
  if (s == "g1") return Precond::g1;
  if (s == "g2") return Precond::g2;
  if (s == "g3") return Precond::g3;
  if (s == "g4") return Precond::g4;
  throw validation_error("unknown-kind", "unknown preconditioner '" + s + "'");
}

/// Fast products with K(theta), its parameter derivatives and the spectral
/// preconditioners. Every stationary term is one scatter / FFT / multiply /
/// inverse FFT / gather round trip on the embedding lattice.
///
/// Read-only evaluations may run concurrently: scratch lattices come from an
/// internal pool. set_params() must not race with evaluations.
class CirculantOperator {
 public:
  explicit CirculantOperator(const NonStatModel& model)
      : model_(model), plan_(fft_plan(model.embed.m1, model.embed.m2)), pool_(std::make_unique<Pool>()),
        round_trips_(std::make_unique<std::atomic<std::size_t>>(0)) {
    model_.validate();
    const auto& grid = model_.grid;
    const int n = grid.n_obs();
    lattice_.resize(n);
    segment_.resize(n);
    members_.assign(static_cast<std::size_t>(model_.partition.q) + 1, {});
    for (int i = 0; i < n; ++i) {
      const int r = grid.row_of(i), c = grid.col_of(i);
      lattice_[i] = static_cast<std::size_t>(r) * model_.embed.m2 + c;
      segment_[i] = model_.partition.label(grid.pixel_of(i));
      members_[segment_[i]].push_back(i);
    }
    refresh();
  }

  CirculantOperator(CirculantOperator&&) = default;
  CirculantOperator& operator=(CirculantOperator&&) = default;

  const NonStatModel& model() const { return model_; }
  int n_obs() const { return model_.grid.n_obs(); }
  int q_local() const { return model_.q_local(); }

  /// Replaces the covariance parameters and recomputes all spectral tables.
  void set_params(const QuasiMaternParams& theta0, const std::vector<QuasiMaternParams>& theta) {
    if (theta.size() != model_.theta.size()) {
      throw validation_error("dimension-mismatch", "set_params: wrong number of local parameter sets");
    }
    model_.theta0 = theta0;
    model_.theta = theta;
    model_.theta0.validate("global process");
    for (const auto& t : model_.theta) t.validate("local process");
    refresh();
  }

  /// Full spectral density of process k (0 = global).
  const SpectralField& density(int k) const { return densities_.at(k); }
  const SpectralField& density_grad(ParamId id) const {
    return gradients_.at(id.process)[static_cast<int>(id.param)];
  }

  /// [Kx]_l = sum_j C0(s_l - s_j) x_j + sum_k w_k(s_l) sum_j C_k(s_l - s_j) w_k(s_j) x_j,
  /// computed with exactly q + 1 transform round trips.
  void cov_matvec(const Eigen::VectorXd& x, Eigen::VectorXd& out) const {
    check_size(x);
    out.setZero(n_obs());
    Lease ws(*pool_, *plan_);
    apply_term(half_density_[0], 0, x, out, ws.get());
    for (int k = 1; k <= q_local(); ++k) apply_term(half_density_[k], k, x, out, ws.get());
  }
  Eigen::VectorXd cov_matvec(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out;
    cov_matvec(x, out);
    return out;
  }

  /// Product with dK/dtheta for one natural-scale parameter.
  void dcov_matvec(ParamId id, const Eigen::VectorXd& x, Eigen::VectorXd& out) const {
    check_size(x);
    if (id.process < 0 || id.process > q_local()) {
      throw validation_error("unknown-parameter", "process " + std::to_string(id.process) + " does not exist");
    }
    out.setZero(n_obs());
    if (id.process > 0 && members_[id.process].empty()) return;
    Lease ws(*pool_, *plan_);
    apply_term(half_gradients_[id.process][static_cast<int>(id.param)], id.process, x, out, ws.get());
  }
  Eigen::VectorXd dcov_matvec(ParamId id, const Eigen::VectorXd& x) const {
    Eigen::VectorXd out;
    dcov_matvec(id, x, out);
    return out;
  }

  /// Spectral preconditioners, each symmetric positive definite on the
  /// observed subspace:
  ///   g1: stationary with density 1/f0
  ///   g2: sum_k W_k [density 1/f_k] W_k  (block diagonal over segments)
  ///   g3: g1 + g2
  ///   g4: stationary with density 1 / sum_k (f0 + f_k)
  /// Without local processes g2 and g3 reduce to g1.
  void precond_matvec(Precond kind, const Eigen::VectorXd& x, Eigen::VectorXd& out) const {
    check_size(x);
    if (kind == Precond::none) {
      out = x;
      return;
    }
    out.setZero(n_obs());
    Lease ws(*pool_, *plan_);
    const bool has_local = q_local() > 0;
    switch (kind) {
      case Precond::g1: apply_term(half_inv_f0_, 0, x, out, ws.get()); break;
      case Precond::g2:
        if (!has_local) {
          apply_term(half_inv_f0_, 0, x, out, ws.get());
          break;
        }
        for (int k = 1; k <= q_local(); ++k) apply_term(half_inv_fk_[k], k, x, out, ws.get());
        break;
      case Precond::g3:
        apply_term(half_inv_f0_, 0, x, out, ws.get());
        for (int k = 1; k <= q_local(); ++k) apply_term(half_inv_fk_[k], k, x, out, ws.get());
        break;
      case Precond::g4: apply_term(half_g4_, 0, x, out, ws.get()); break;
      default: throw validation_error("unknown-kind", "unknown preconditioner");
    }
  }
  Eigen::VectorXd precond_matvec(Precond kind, const Eigen::VectorXd& x) const {
    Eigen::VectorXd out;
    precond_matvec(kind, x, out);
    return out;
  }

  /// Total FFT round trips performed so far (for cost accounting).
  std::size_t round_trips() const { return round_trips_->load(); }

  /// Spectral table of a preconditioner as a full-lattice field (for dense checks).
  SpectralField precond_density(Precond kind, int segment = 0) const {
    SpectralField out{model_.embed.dims(), std::vector<double>(model_.embed.dims().size())};
    for (std::size_t k = 0; k < out.values.size(); ++k) {
      const double f0 = densities_[0].values[k];
      switch (kind) {
        case Precond::g1: out.values[k] = 1.0 / f0; break;
        case Precond::g2:
        case Precond::g3: out.values[k] = 1.0 / densities_.at(segment).values[k]; break;
        case Precond::g4: out.values[k] = g4_value(k); break;
        default: out.values[k] = 0.0;
      }
    }
    return out;
  }

 private:
  struct Workspace {
    RealBuffer real;
    ComplexBuffer spec;
  };

  class Pool {
   public:
    std::unique_ptr<Workspace> acquire(const Fft2d& plan) {
      {
        std::lock_guard lock(mutex_);
        if (!free_.empty()) {
          auto ws = std::move(free_.back());
          free_.pop_back();
          return ws;
        }
      }
      auto ws = std::make_unique<Workspace>();
      ws->real = RealBuffer(plan.size());
      ws->spec = ComplexBuffer(plan.half_size());
      return ws;
    }
    void release(std::unique_ptr<Workspace> ws) {
      std::lock_guard lock(mutex_);
      free_.push_back(std::move(ws));
    }

   private:
    std::mutex mutex_;
    std::vector<std::unique_ptr<Workspace>> free_;
  };

  class Lease {
   public:
    Lease(Pool& pool, const Fft2d& plan) : pool_(pool), ws_(pool.acquire(plan)) {}
    ~Lease() { pool_.release(std::move(ws_)); }
    Workspace& get() { return *ws_; }

   private:
    Pool& pool_;
    std::unique_ptr<Workspace> ws_;
  };

  void check_size(const Eigen::VectorXd& x) const {
    if (x.size() != n_obs()) {
      throw validation_error("dimension-mismatch", "vector has " + std::to_string(x.size()) + " entries, expected " +
                                                       std::to_string(n_obs()));
    }
  }

  double g4_value(std::size_t k) const {
    const double f0 = densities_[0].values[k];
    if (q_local() == 0) return 1.0 / f0;
    double s = 0.0;
    for (int i = 1; i <= q_local(); ++i) s += f0 + densities_[i].values[k];
    return 1.0 / s;
  }

  /// Half-spectrum multiplier (r2c layout) of a full-lattice table, with the
  /// 1/M inverse-transform normalization folded in.
  std::vector<double> to_half(const std::vector<double>& full) const {
    const int m1 = model_.embed.m1, m2 = model_.embed.m2, h = plan_->half_m2();
    const double inv_m = 1.0 / static_cast<double>(plan_->size());
    std::vector<double> half(plan_->half_size());
    for (int j1 = 0; j1 < m1; ++j1) {
      for (int j2 = 0; j2 < h; ++j2) {
        half[static_cast<std::size_t>(j1) * h + j2] = full[static_cast<std::size_t>(j1) * m2 + j2] * inv_m;
      }
    }
    return half;
  }

  void refresh() {
    const LatticeDims dims = model_.embed.dims();
    const int np = model_.n_processes();
    densities_.assign(np, {});
    gradients_.assign(np, {});
    half_density_.assign(np, {});
    half_gradients_.assign(np, {});
    half_inv_fk_.assign(np, {});
    for (int k = 0; k < np; ++k) {
      densities_[k] = qm_density(model_.process(k), dims);
      gradients_[k] = qm_density_grad(model_.process(k), dims);
      half_density_[k] = to_half(densities_[k].values);
      for (int p = 0; p < kParamsPerProcess; ++p) half_gradients_[k][p] = to_half(gradients_[k][p].values);
      std::vector<double> inv(dims.size());
      for (std::size_t t = 0; t < inv.size(); ++t) inv[t] = 1.0 / densities_[k].values[t];
      half_inv_fk_[k] = to_half(inv);
      if (k == 0) half_inv_f0_ = half_inv_fk_[0];
    }
    std::vector<double> g4(dims.size());
    for (std::size_t t = 0; t < g4.size(); ++t) g4[t] = g4_value(t);
    half_g4_ = to_half(g4);
  }

  /// out += W_seg C W_seg x for the stationary operator C with half-spectrum
  /// `mult`; seg == 0 means unweighted (all observations).
  void apply_term(const std::vector<double>& mult, int seg, const Eigen::VectorXd& x, Eigen::VectorXd& out,
                  Workspace& ws) const {
    std::fill(ws.real.data(), ws.real.data() + ws.real.size(), 0.0);
    if (seg == 0) {
      for (int i = 0; i < n_obs(); ++i) ws.real[lattice_[i]] = x[i];
    } else {
      for (int i : members_[seg]) ws.real[lattice_[i]] = x[i];
    }
    plan_->forward(ws.real, ws.spec);
    for (std::size_t t = 0; t < mult.size(); ++t) ws.spec[t] *= mult[t];
    plan_->backward(ws.spec, ws.real);
    if (seg == 0) {
      for (int i = 0; i < n_obs(); ++i) out[i] += ws.real[lattice_[i]];
    } else {
      for (int i : members_[seg]) out[i] += ws.real[lattice_[i]];
    }
    round_trips_->fetch_add(1, std::memory_order_relaxed);
  }

  NonStatModel model_;
  std::shared_ptr<const Fft2d> plan_;
  std::unique_ptr<Pool> pool_;
  std::unique_ptr<std::atomic<std::size_t>> round_trips_;
  std::vector<std::size_t> lattice_;
  std::vector<int> segment_;
  std::vector<std::vector<int>> members_;

  std::vector<SpectralField> densities_;
  std::vector<std::array<SpectralField, 4>> gradients_;
  std::vector<std::vector<double>> half_density_;
  std::vector<std::array<std::vector<double>, 4>> half_gradients_;
  std::vector<std::vector<double>> half_inv_fk_;
  std::vector<double> half_inv_f0_;
  std::vector<double> half_g4_;
};

/// One draw of a stationary field with density f on the embedding torus,
/// restricted to the n1 x n2 window (all pixels, row-major). Uses one complex
/// normal per frequency; the real part of the transform is an exact draw.
inline std::vector<double> sample_stationary(const SpectralField& f, int n1, int n2, std::mt19937_64& rng) {
  const LatticeDims dims = f.dims;
  if (n1 > dims.m1 || n2 > dims.m2) throw validation_error("invalid-parameter", "window larger than lattice");
  const auto plan = fft_plan(dims.m1, dims.m2);
  ComplexBuffer buf(dims.size());
  std::normal_distribution<double> normal(0.0, 1.0);
  const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(dims.size()));
  for (std::size_t k = 0; k < dims.size(); ++k) {
    const double a = normal(rng);
    const double b = normal(rng);
    buf[k] = std::complex<double>(a, b) * (std::sqrt(f.values[k]) * inv_sqrt_m);
  }
  plan->complex_backward(buf);
  std::vector<double> out(static_cast<std::size_t>(n1) * n2);
  for (int r = 0; r < n1; ++r) {
    for (int c = 0; c < n2; ++c) {
      out[static_cast<std::size_t>(r) * n2 + c] = buf[static_cast<std::size_t>(r) * dims.m2 + c].real();
    }
  }
  return out;
}

struct SampledField {
  DataField data;
  /// Z0, Z1, ..., Zq over every window pixel (before weighting).
  std::vector<std::vector<double>> components;
};

/// Y = X beta + Z0 + sum_k w_k Z_k. Each Z_k uses its own generator keyed
/// by (seed, k). `covariates` are full-grid arrays matching model.n_covariates.
inline SampledField sample_field(const NonStatModel& model, const std::vector<std::vector<double>>& covariates,
                                 std::uint64_t seed, bool keep_components = false) {
  model.validate();
  if (static_cast<int>(covariates.size()) != model.n_covariates) {
    throw validation_error("dimension-mismatch", "sample_field: covariate count does not match the model");
  }
  const auto& grid = model.grid;
  const LatticeDims dims = model.embed.dims();
  SampledField out;
  out.data.grid = grid;
  out.data.covariates = covariates;
  out.data.values.assign(grid.pixels(), 0.0);

  std::vector<std::vector<double>> z(model.n_processes());
  for (int k = 0; k < model.n_processes(); ++k) {
    auto rng = stream_rng(seed, Stream::simulation, static_cast<std::uint64_t>(k));
    z[k] = sample_stationary(qm_density(model.process(k), dims), grid.n1(), grid.n2(), rng);
  }
  const int width = 1 + model.n_covariates;
  for (std::size_t p = 0; p < grid.pixels(); ++p) {
    if (!grid.observed(p)) {
      out.data.values[p] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const int seg = model.partition.label(p);
    double v = z[0][p];
    if (model.q_local() > 0) v += z[seg][p];
    if (model.has_mean && model.beta.size() > 0) {
      const int col0 = (seg - 1) * width;
      v += model.beta[col0];
      for (int c = 0; c < model.n_covariates; ++c) v += model.beta[col0 + 1 + c] * covariates[c][p];
    }
    out.data.values[p] = v;
  }
  if (keep_components) out.components = std::move(z);
  return out;
}

}  // namespace nsgp
