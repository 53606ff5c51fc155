#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "nsgp/model.hpp"
#include "nsgp/params.hpp"

namespace nsgp {

/// Maps the free covariance parameters of a model to a vector on the
/// transformed scale (log / log / log / logit). With the sigma0 link active
/// the global variance is profiled and not part of the vector, and a local
/// variance enters as log(phi_k) = log(sigma_k^2 / sigma0^2).
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const NonStatModel& model) : link_(model.sigma0_link), q_(model.q_local()) {
    for (int k = 0; k <= q_; ++k) {
      for (int p = 0; p < kParamsPerProcess; ++p) {
        const ParamId id{k, static_cast<Param>(p)};
        if (link_ && k == 0 && id.param == Param::sigma2) continue;
        ids_.push_back(id);
      }
    }
  }

  int size() const { return static_cast<int>(ids_.size()); }
  const std::vector<ParamId>& ids() const { return ids_; }
  bool link() const { return link_; }

  std::string name(int i) const {
    const auto id = ids_[i];
    std::string base = id.process == 0 ? "global." : "segment." + std::to_string(id.process) + ".";
    if (id.param == Param::sigma2 && id.process > 0 && link_) return base + "log_phi";
    const char* prefix = id.param == Param::tau ? "logit_" : "log_";
    return base + prefix + param_name(id.param);
  }

  Eigen::VectorXd pack(const NonStatModel& m) const {
    Eigen::VectorXd u(size());
    for (int i = 0; i < size(); ++i) {
      const auto id = ids_[i];
      const auto t = m.process(id.process).transformed();
      u[i] = t[static_cast<int>(id.param)];
      if (link_ && id.process > 0 && id.param == Param::sigma2) u[i] -= std::log(m.theta0.sigma2);
    }
    return u;
  }

  /// Writes u into the model; under the link the current sigma0^2 is kept
  /// and local variances become phi_k * sigma0^2.
  void unpack(const Eigen::VectorXd& u, NonStatModel& m) const {
    for (int i = 0; i < size(); ++i) {
      const auto id = ids_[i];
      auto& proc = m.process(id.process);
      switch (id.param) {
        case Param::sigma2: proc.sigma2 = std::exp(u[i]) * ((link_ && id.process > 0) ? m.theta0.sigma2 : 1.0); break;
        case Param::alpha: proc.alpha = std::exp(u[i]); break;
        case Param::nu: proc.nu = std::exp(u[i]); break;
        case Param::tau: proc.tau = inv_logit(u[i]); break;
      }
    }
  }

  /// Rescales sigma0^2 keeping every phi_k fixed.
  static void set_sigma0(NonStatModel& m, double sigma0) {
    const double ratio = sigma0 / m.theta0.sigma2;
    m.theta0.sigma2 = sigma0;
    for (auto& t : m.theta) t.sigma2 *= ratio;
  }

  void bounds(const ParamBox& box, Eigen::VectorXd& lo, Eigen::VectorXd& hi) const {
    lo.resize(size());
    hi.resize(size());
    for (int i = 0; i < size(); ++i) {
      const auto id = ids_[i];
      const bool local_scale = link_ && id.process > 0;
      const auto b = box.bounds(id.param, local_scale);
      lo[i] = b[0];
      hi[i] = b[1];
    }
  }

  /// Natural-scale score (indexed by ParamId::flat) to the transformed scale.
  Eigen::VectorXd chain(const NonStatModel& m, const Eigen::VectorXd& natural) const {
    Eigen::VectorXd s(size());
    for (int i = 0; i < size(); ++i) {
      const auto id = ids_[i];
      s[i] = natural[id.flat()] * m.process(id.process).jacobian()[static_cast<int>(id.param)];
    }
    return s;
  }

 private:
  bool link_ = true;
  int q_ = 0;
  std::vector<ParamId> ids_;
};

}  // namespace nsgp
