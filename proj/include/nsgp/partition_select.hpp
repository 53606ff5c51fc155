#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nsgp/error.hpp"
#include "nsgp/grid.hpp"
#include "nsgp/optimizer.hpp"
#include "nsgp/parallel.hpp"
#include "nsgp/params.hpp"
#include "nsgp/quasi_newton.hpp"
#include "nsgp/rng.hpp"
#include "nsgp/spectral.hpp"

namespace nsgp {

/// Segments with fewer observations than this are never fitted on their own.
inline constexpr int kMinSegmentObs = 25;
/// Covariance parameters per segment: the LRT degrees of freedom and the BIC
/// parameter count per segment.
inline constexpr int kSegmentDf = 4;

/// Tiles the grid with floor(n/b) blocks per axis; remainder rows and
/// columns join the last block. Blocks without observed pixels are dropped.
/// Labels number the surviving blocks in row-major block order.
inline Partition base_partition(const GridGeometry& grid, int block_rows = 10, int block_cols = 10) {
  if (block_rows < 1 || block_cols < 1 || block_rows > grid.n1() || block_cols > grid.n2()) {
    throw validation_error("invalid-parameter", "block size must be in [1, grid dims]");
  }
  const int nb1 = grid.n1() / block_rows, nb2 = grid.n2() / block_cols;
  std::vector<int> raw(grid.pixels(), 0);
  for (int r = 0; r < grid.n1(); ++r) {
    const int br = std::min(r / block_rows, nb1 - 1);
    for (int c = 0; c < grid.n2(); ++c) {
      const int bc = std::min(c / block_cols, nb2 - 1);
      raw[static_cast<std::size_t>(r) * grid.n2() + c] = 1 + br * nb2 + bc;
    }
  }
  auto p = Partition::from_labels(grid, std::move(raw));
  p.block_rows = block_rows;
  p.block_cols = block_cols;
  return p;
}

/// Rand index over observed pixels via pair counts of the contingency table.
inline double rand_index(const Partition& estimated, const Partition& truth) {
  if (estimated.n1 != truth.n1 || estimated.n2 != truth.n2 || estimated.labels.size() != truth.labels.size()) {
    throw validation_error("grid-mismatch", "partitions have different grids");
  }
  std::map<std::pair<int, int>, long> cells;
  std::map<int, long> rows, cols;
  long n = 0;
  for (std::size_t p = 0; p < truth.labels.size(); ++p) {
    const int a = estimated.labels[p], b = truth.labels[p];
    if ((a == 0) != (b == 0)) throw validation_error("grid-mismatch", "partitions have different masks");
    if (a == 0) continue;
    ++cells[{a, b}];
    ++rows[a];
    ++cols[b];
    ++n;
  }
  if (n < 2) return 1.0;
  auto c2 = [](long k) { return 0.5 * static_cast<double>(k) * static_cast<double>(k - 1); };
  double same_both = 0.0, same_est = 0.0, same_truth = 0.0;
  for (const auto& [key, k] : cells) same_both += c2(k);
  for (const auto& [key, k] : rows) same_est += c2(k);
  for (const auto& [key, k] : cols) same_truth += c2(k);
  const double total = c2(n);
  return (total + 2.0 * same_both - same_est - same_truth) / total;
}

/// One block's observed pixels and residual scatter.
struct BlockInfo {
  int id = 0;  // label in the base partition
  int block_row = 0, block_col = 0;
  int shape = 0;  // index into BlockData::shapes
  Eigen::MatrixXd scatter;
  int n_obs = 0;
};

/// Pixel offsets of a block shape (observed pixels only) and the lattice
/// lag index of every offset pair.
struct BlockShape {
  int rows = 0, cols = 0;
  std::vector<std::uint8_t> mask;
  std::vector<int> lag;  // n x n row-major
  int n = 0;
};

/// Residuals cut into base blocks, grouped by shape so blocks with identical
/// geometry share one covariance factorization.
struct BlockData {
  LatticeDims dims;
  Partition base;
  std::vector<BlockInfo> blocks;  // index = base label - 1
  std::vector<BlockShape> shapes;
  long n_obs = 0;

  BlockData(const GridGeometry& grid, const Eigen::VectorXd& residuals, int block_rows = 10, int block_cols = 10,
            double expansion_factor = 1.25)
      : dims(embed_dims(grid.n1(), grid.n2(), expansion_factor).dims()),
        base(base_partition(grid, block_rows, block_cols)) {
    if (residuals.size() != grid.n_obs()) throw validation_error("dimension-mismatch", "residual length");
    n_obs = grid.n_obs();
    struct Box {
      int r0 = 1 << 30, c0 = 1 << 30, r1 = -1, c1 = -1;
    };
    std::vector<Box> extent(base.q);
    const int nb2 = grid.n2() / block_cols;
    std::vector<int> first_pixel(base.q, -1);
    for (std::size_t p = 0; p < grid.pixels(); ++p) {
      const int l = base.labels[p];
      if (l == 0) continue;
      if (first_pixel[l - 1] < 0) first_pixel[l - 1] = static_cast<int>(p);
    }
    // block extents from the tiling (not from observed pixels)
    for (int b = 0; b < base.q; ++b) {
      const int r = first_pixel[b] / grid.n2(), c = first_pixel[b] % grid.n2();
      const int nb1 = grid.n1() / block_rows;
      const int br = std::min(r / block_rows, nb1 - 1), bc = std::min(c / block_cols, nb2 - 1);
      auto& e = extent[b];
      e.r0 = br * block_rows;
      e.c0 = bc * block_cols;
      e.r1 = br == nb1 - 1 ? grid.n1() : e.r0 + block_rows;
      e.c1 = bc == nb2 - 1 ? grid.n2() : e.c0 + block_cols;
      blocks.push_back({b + 1, br, bc, 0, {}, 0});
    }
    std::map<std::pair<std::pair<int, int>, std::vector<std::uint8_t>>, int> shape_index;
    for (int b = 0; b < base.q; ++b) {
      const auto& e = extent[b];
      BlockShape s;
      s.rows = e.r1 - e.r0;
      s.cols = e.c1 - e.c0;
      std::vector<int> obs;
      for (int r = e.r0; r < e.r1; ++r) {
        for (int c = e.c0; c < e.c1; ++c) {
          const std::size_t p = static_cast<std::size_t>(r) * grid.n2() + c;
          s.mask.push_back(grid.observed(p) ? 1 : 0);
          if (grid.observed(p)) obs.push_back(grid.obs_of(p));
        }
      }
      auto key = std::make_pair(std::make_pair(s.rows, s.cols), s.mask);
      auto it = shape_index.find(key);
      if (it == shape_index.end()) {
        std::vector<std::pair<int, int>> off;
        for (int r = 0; r < s.rows; ++r) {
          for (int c = 0; c < s.cols; ++c) {
            if (s.mask[static_cast<std::size_t>(r) * s.cols + c]) off.emplace_back(r, c);
          }
        }
        s.n = static_cast<int>(off.size());
        s.lag.resize(static_cast<std::size_t>(s.n) * s.n);
        for (int a = 0; a < s.n; ++a) {
          for (int c = 0; c < s.n; ++c) {
            const int d1 = ((off[a].first - off[c].first) % dims.m1 + dims.m1) % dims.m1;
            const int d2 = ((off[a].second - off[c].second) % dims.m2 + dims.m2) % dims.m2;
            s.lag[static_cast<std::size_t>(a) * s.n + c] = d1 * dims.m2 + d2;
          }
        }
        it = shape_index.emplace(std::move(key), static_cast<int>(shapes.size())).first;
        shapes.push_back(std::move(s));
      }
      auto& blk = blocks[b];
      blk.shape = it->second;
      Eigen::VectorXd y(static_cast<Eigen::Index>(obs.size()));
      for (std::size_t k = 0; k < obs.size(); ++k) y[static_cast<Eigen::Index>(k)] = residuals[obs[k]];
      blk.scatter = y * y.transpose();
      blk.n_obs = static_cast<int>(obs.size());
    }
  }

  /// Edge-adjacent (4-neighbourhood) pairs of surviving base blocks, a < b.
  std::vector<std::pair<int, int>> neighbor_pairs() const {
    std::map<std::pair<int, int>, int> at;
    for (std::size_t b = 0; b < blocks.size(); ++b) at[{blocks[b].block_row, blocks[b].block_col}] = static_cast<int>(b);
    std::vector<std::pair<int, int>> out;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      for (auto [dr, dc] : {std::pair{0, 1}, std::pair{1, 0}}) {
        auto it = at.find({blocks[b].block_row + dr, blocks[b].block_col + dc});
        if (it != at.end()) out.emplace_back(static_cast<int>(b), it->second);
      }
    }
    return out;
  }
};

/// Block-independent stationary fit of one segment.
struct SegmentFit {
  QuasiMaternParams theta;
  /// Transformed (log alpha, log nu, logit tau) at the optimum.
  Eigen::Vector3d u = Eigen::Vector3d::Zero();
  double loglik = 0.0;
  int n_obs = 0;
  bool converged = false;
};

/// Maximizes the sum of block log likelihoods of the given base blocks
/// (indices into BlockData::blocks) under one stationary quasi-Matern
/// covariance; sigma^2 is profiled in closed form.
inline SegmentFit segment_mle(const BlockData& data, const std::vector<int>& members,
                              const std::optional<Eigen::Vector3d>& start = std::nullopt, const ParamBox& box = {},
                              const QuasiNewtonOptions& qn = {}) {
  // scatter summed per shape
  std::map<int, std::pair<Eigen::MatrixXd, int>> groups;
  long n = 0;
  for (int b : members) {
    const auto& blk = data.blocks.at(b);
    auto [it, fresh] = groups.try_emplace(blk.shape, Eigen::MatrixXd(), 0);
    if (fresh) it->second.first = blk.scatter;
    else it->second.first += blk.scatter;
    ++it->second.second;
    n += blk.n_obs;
  }
  if (n < kMinSegmentObs) {
    throw validation_error("too-few-observations", "segment has " + std::to_string(n) + " observations, need " +
                                                       std::to_string(kMinSegmentObs));
  }
  const double nn = static_cast<double>(n);
  const double log2pi = std::log(2.0 * std::numbers::pi);

  struct Eval {
    double quad = 0.0, logdet = 0.0;
  };
  auto params_of = [](const Eigen::VectorXd& u) {
    return QuasiMaternParams{1.0, std::exp(u[0]), std::exp(u[1]), inv_logit(u[2])};
  };
  Eval last;
  auto objective = [&](const Eigen::VectorXd& u, Eigen::VectorXd& grad) -> double {
    const auto p = params_of(u);
    const LagTable c = covariance_from_density(qm_density(p, data.dims));
    const auto g = qm_density_grad(p, data.dims);
    const LagTable dc[3] = {covariance_from_density(g[1]), covariance_from_density(g[2]),
                            covariance_from_density(g[3])};
    Eval e;
    std::vector<Eigen::MatrixXd> ws;
    std::vector<Eigen::MatrixXd> wsw;
    for (const auto& [shape_id, grp] : groups) {
      const auto& s = data.shapes[shape_id];
      Eigen::MatrixXd k(s.n, s.n);
      for (int a = 0; a < s.n * s.n; ++a) k.data()[a] = c.values[s.lag[a]];
      Eigen::LLT<Eigen::MatrixXd> llt(k);
      if (llt.info() != Eigen::Success) {
        throw numerical_error("optimizer-failure", "block covariance not positive definite");
      }
      const Eigen::MatrixXd w = llt.solve(Eigen::MatrixXd::Identity(s.n, s.n));
      const Eigen::MatrixXd wsm = w * grp.first;
      e.quad += wsm.trace();
      e.logdet += grp.second * 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      ws.push_back(w);
      wsw.push_back(wsm * w);
    }
    const double s2 = e.quad / nn;
    grad.setZero(3);
    int gi = 0;
    for (const auto& [shape_id, grp] : groups) {
      const auto& s = data.shapes[shape_id];
      // d(-logL)/d omega_i = 0.5 * sum((m W - W S W / s2) .* Omega_i)
      const Eigen::MatrixXd a = grp.second * ws[gi] - wsw[gi] / s2;
      for (int i = 0; i < 3; ++i) {
        double acc = 0.0;
        for (int t = 0; t < s.n * s.n; ++t) acc += a.data()[t] * dc[i].values[s.lag[t]];
        grad[i] += 0.5 * acc;
      }
      ++gi;
    }
    grad[0] *= p.alpha;
    grad[1] *= p.nu;
    grad[2] *= p.tau * (1.0 - p.tau);
    last = e;
    return 0.5 * (nn * log2pi + nn * std::log(s2) + e.logdet + nn);
  };

  Eigen::VectorXd lo(3), hi(3);
  lo << box.log_alpha_lo, box.log_nu_lo, box.logit_tau_lo;
  hi << box.log_alpha_hi, box.log_nu_hi, box.logit_tau_hi;
  Eigen::VectorXd x0(3);
  if (start) {
    x0 = *start;
  } else {
    x0 << std::log(0.5), std::log(0.5), logit(0.05);
  }
  const auto res = minimize_box(objective, x0, lo, hi, qn);
  Eigen::VectorXd g;
  const double value = objective(res.x, g);
  SegmentFit out;
  out.u = res.x;
  out.theta = params_of(res.x);
  out.theta.sigma2 = std::clamp(last.quad / nn, std::exp(box.log_sigma0_lo), std::exp(box.log_sigma0_hi));
  out.loglik = -value;
  out.n_obs = static_cast<int>(n);
  out.converged = res.converged;
  return out;
}

/// Upper chi^2_4 tail of -2 log Lambda for merging two fitted segments.
inline double lrt_pvalue(double loglik_s, double loglik_k, double loglik_joint) {
  const double stat = std::max(0.0, 2.0 * (loglik_s + loglik_k - loglik_joint));
  if (stat == 0.0) return 1.0;
  boost::math::chi_squared chi(kSegmentDf);
  return std::clamp(boost::math::cdf(boost::math::complement(chi, stat)), 0.0, 1.0);
}

/// Segment fits keyed by (member blocks, starting point). A fit is a pure
/// function of its key, so sharing the cache across candidate runs changes
/// no result.
class SegmentFitCache {
 public:
  using Key = std::pair<std::vector<int>, std::array<double, 4>>;  // {has start, start}

  std::optional<SegmentFit> find(const Key& k) const {
    std::lock_guard lock(mutex_);
    auto it = map_.find(k);
    if (it == map_.end()) return std::nullopt;
    ++hits_;
    return it->second;
  }
  void put(const Key& k, const SegmentFit& f) {
    std::lock_guard lock(mutex_);
    map_.emplace(k, f);
  }
  long hits() const { return hits_; }
  std::size_t size() const { return map_.size(); }

 private:
  mutable std::mutex mutex_;
  mutable long hits_ = 0;
  std::map<Key, SegmentFit> map_;
};

struct CandidateRun {
  double p_cutoff = 0.0;
  std::uint64_t seed = 0;
  Partition partition;
  std::vector<SegmentFit> segments;  // by compacted label - 1
  double loglik = 0.0;
  double bic = 0.0;
  /// Neighbour pairs already inside one segment, pairs tested by LRT, and
  /// pairs merged untested because a side was too small to fit; these sum
  /// to the number of neighbour pairs.
  int skipped = 0;
  int tests = 0;
  int forced = 0;
  int merges = 0;
  /// Tests or forced merges abandoned because the joint fit failed.
  int refused = 0;
};

inline double bic_value(double loglik, int segments, long n_obs) {
  return -2.0 * loglik + static_cast<double>(kSegmentDf) * segments * std::log(static_cast<double>(n_obs));
}

struct SelectionConfig {
  int block_rows = 10, block_cols = 10;
  std::vector<double> cutoffs = {0.0005, 0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.007, 0.008, 0.009};
  int seeds_per_cutoff = 3;
  std::uint64_t seed = 1;
  ParamBox box;
  QuasiNewtonOptions qn;
  double expansion_factor = 1.25;
  int threads = 1;
};

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
};

}  // namespace detail

/// One LRT-driven merge sequence. `singles` holds the fit of every base
/// block (nullopt when the block alone is below the observation guard).
/// A pair whose segments differ is tested; the merge happens when the
/// p-value exceeds the cutoff (always at cutoff 0). A segment too small to
/// fit is merged without a test; a failed joint fit refuses the merge.
inline CandidateRun generate_candidate(const BlockData& data, const std::vector<std::optional<SegmentFit>>& singles,
                                       double p_cutoff, std::uint64_t seed, const SelectionConfig& cfg = {},
                                       SegmentFitCache* cache = nullptr) {
  const int nb = static_cast<int>(data.blocks.size());
  if (static_cast<int>(singles.size()) != nb) throw validation_error("dimension-mismatch", "one fit per base block");
  if (!(p_cutoff >= 0.0 && p_cutoff <= 1.0)) throw validation_error("invalid-parameter", "p cutoff must be in [0, 1]");
  CandidateRun run;
  run.p_cutoff = p_cutoff;
  run.seed = seed;

  auto fit_segment = [&](const std::vector<int>& blocks, const std::optional<Eigen::Vector3d>& start) {
    SegmentFitCache::Key key{blocks, {0.0, 0.0, 0.0, 0.0}};
    if (start) key.second = {1.0, (*start)[0], (*start)[1], (*start)[2]};
    if (cache) {
      if (auto hit = cache->find(key)) return *hit;
    }
    auto f = segment_mle(data, blocks, start, cfg.box, cfg.qn);
    if (cache) cache->put(key, f);
    return f;
  };

  detail::UnionFind uf(nb);
  std::vector<std::vector<int>> members(nb);
  std::vector<std::optional<SegmentFit>> fits = singles;
  for (int b = 0; b < nb; ++b) members[b] = {b};

  auto pairs = data.neighbor_pairs();
  auto rng = stream_rng(seed, Stream::shuffle);
  std::shuffle(pairs.begin(), pairs.end(), rng);

  for (auto [a, b] : pairs) {
    const int ra = uf.find(a), rb = uf.find(b);
    if (ra == rb) {
      ++run.skipped;
      continue;
    }
    std::vector<int> joint = members[ra];
    joint.insert(joint.end(), members[rb].begin(), members[rb].end());
    std::sort(joint.begin(), joint.end());
    std::optional<SegmentFit> joint_fit;
    bool merge = false;
    if (!fits[ra] || !fits[rb]) {
      merge = true;
      ++run.forced;
      long n = 0;
      for (int m : joint) n += data.blocks[m].n_obs;
      if (n >= kMinSegmentObs) {
        try {
          const auto& from = fits[ra] ? fits[ra] : fits[rb];
          joint_fit = fit_segment(joint, from ? std::optional<Eigen::Vector3d>(from->u) : std::nullopt);
        } catch (const Error&) {
          merge = false;
          ++run.refused;
        }
      }
    } else {
      const auto& fa = *fits[ra];
      const auto& fb = *fits[rb];
      const Eigen::Vector3d warm = (fa.n_obs * fa.u + fb.n_obs * fb.u) / static_cast<double>(fa.n_obs + fb.n_obs);
      ++run.tests;
      try {
        joint_fit = fit_segment(joint, warm);
        const double p = lrt_pvalue(fa.loglik, fb.loglik, joint_fit->loglik);
        merge = p_cutoff <= 0.0 || p > p_cutoff;
      } catch (const Error&) {
        ++run.refused;
      }
    }
    if (!merge) continue;
    ++run.merges;
    uf.parent[rb] = ra;
    members[ra] = std::move(joint);
    members[rb].clear();
    fits[ra] = joint_fit;
    fits[rb].reset();
  }

  // compact: segment labels in order of first appearance over pixels
  std::vector<int> raw(data.base.labels.size(), 0);
  for (std::size_t p = 0; p < raw.size(); ++p) {
    const int l = data.base.labels[p];
    if (l > 0) raw[p] = 1 + uf.find(l - 1);
  }
  GridGeometry grid(data.base.n1, data.base.n2, [&] {
    std::vector<std::uint8_t> m(raw.size());
    for (std::size_t p = 0; p < raw.size(); ++p) m[p] = data.base.labels[p] > 0;
    return m;
  }());
  run.partition = Partition::from_labels(grid, raw);
  run.partition.block_rows = data.base.block_rows;
  run.partition.block_cols = data.base.block_cols;
  std::vector<int> root_of(run.partition.q, -1);
  for (std::size_t p = 0; p < raw.size(); ++p) {
    if (raw[p] > 0) root_of[run.partition.labels[p] - 1] = raw[p] - 1;
  }
  for (int s = 0; s < run.partition.q; ++s) {
    const int r = root_of[s];
    if (!fits[r]) fits[r] = fit_segment(members[r], std::nullopt);
    run.segments.push_back(*fits[r]);
    run.loglik += fits[r]->loglik;
  }
  run.bic = bic_value(run.loglik, run.partition.q, data.n_obs);
  return run;
}

/// Minimum BIC; ties go to fewer segments, then to the earlier candidate.
inline std::size_t bic_select(const std::vector<CandidateRun>& candidates) {
  if (candidates.empty()) throw validation_error("empty-candidate-list", "no candidates to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    const auto& b = candidates[best];
    if (c.bic < b.bic || (c.bic == b.bic && c.partition.q < b.partition.q)) best = i;
  }
  return best;
}

/// Residuals of an ordinary least-squares fit of the data on an intercept
/// and the covariates.
inline Eigen::VectorXd ols_residuals(const DataField& data) {
  data.validate();
  const int n = data.grid.n_obs();
  const auto obs = data.observed_values();
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(obs.data(), n);
  Eigen::MatrixXd x(n, 1 + static_cast<Eigen::Index>(data.covariates.size()));
  for (int i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    for (std::size_t c = 0; c < data.covariates.size(); ++c) {
      x(i, static_cast<Eigen::Index>(c) + 1) = data.covariates[c][data.grid.pixel_of(i)];
    }
  }
  const Eigen::VectorXd beta = x.colPivHouseholderQr().solve(y);
  return y - x * beta;
}

struct SelectionResult {
  std::vector<CandidateRun> candidates;  // cutoff-major, then seed
  std::size_t best = 0;
  const CandidateRun& winner() const { return candidates[best]; }
};

/// Candidate pool over cutoffs x seeds on OLS residuals, then BIC selection.
/// Candidate j of a cutoff uses seed cfg.seed + j.
inline SelectionResult select_partition(const DataField& data, const SelectionConfig& cfg = {}) {
  if (cfg.cutoffs.empty() || cfg.seeds_per_cutoff < 1) {
    throw validation_error("empty-candidate-list", "need at least one cutoff and one seed");
  }
  cfg.box.validate();
  const BlockData blocks(data.grid, ols_residuals(data), cfg.block_rows, cfg.block_cols, cfg.expansion_factor);
  const int nb = static_cast<int>(blocks.blocks.size());
  std::vector<std::optional<SegmentFit>> singles(nb);
  parallel_for(nb, cfg.threads, [&](int b) {
    if (blocks.blocks[b].n_obs < kMinSegmentObs) return;
    try {
      singles[b] = segment_mle(blocks, {b}, std::nullopt, cfg.box, cfg.qn);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numerical) throw;
    }
  });
  SegmentFitCache cache;
  SelectionResult out;
  const int ns = cfg.seeds_per_cutoff;
  out.candidates.resize(cfg.cutoffs.size() * ns);
  parallel_for(static_cast<int>(out.candidates.size()), cfg.threads, [&](int i) {
    out.candidates[i] = generate_candidate(blocks, singles, cfg.cutoffs[i / ns], cfg.seed + i % ns, cfg, &cache);
  });
  out.best = bic_select(out.candidates);
  return out;
}

}  // namespace nsgp
