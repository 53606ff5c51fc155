#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nsgp/error.hpp"
#include "nsgp/spectral.hpp"

namespace nsgp {

/// Observation lattice with a mask of observed pixels. Pixels are row-major
/// (index r * n2 + c); vectors over observations use the mask-compacted
/// order, i.e. observed pixels in row-major order.
class GridGeometry {
 public:
  GridGeometry() = default;
  GridGeometry(int n1, int n2) : GridGeometry(n1, n2, std::vector<std::uint8_t>(std::size_t(std::max(n1, 0)) * std::max(n2, 0), 1)) {}
  GridGeometry(int n1, int n2, std::vector<std::uint8_t> mask) : n1_(n1), n2_(n2), mask_(std::move(mask)) {
    if (n1 < 1 || n2 < 1) throw validation_error("invalid-parameter", "grid dimensions must be >= 1");
    if (mask_.size() != pixels()) throw validation_error("dimension-mismatch", "mask size does not match grid");
    pixel_to_obs_.assign(pixels(), -1);
    for (std::size_t p = 0; p < pixels(); ++p) {
      if (mask_[p]) {
        pixel_to_obs_[p] = static_cast<int>(obs_to_pixel_.size());
        obs_to_pixel_.push_back(static_cast<int>(p));
      }
    }
    if (obs_to_pixel_.empty()) throw validation_error("invalid-parameter", "grid has no observed pixels");
  }

  int n1() const { return n1_; }
  int n2() const { return n2_; }
  std::size_t pixels() const { return static_cast<std::size_t>(n1_) * n2_; }
  int n_obs() const { return static_cast<int>(obs_to_pixel_.size()); }
  bool observed(std::size_t pixel) const { return mask_[pixel] != 0; }
  const std::vector<std::uint8_t>& mask() const { return mask_; }
  int pixel_of(int obs) const { return obs_to_pixel_[obs]; }
  int obs_of(std::size_t pixel) const { return pixel_to_obs_[pixel]; }
  int row_of(int obs) const { return obs_to_pixel_[obs] / n2_; }
  int col_of(int obs) const { return obs_to_pixel_[obs] % n2_; }

  bool same_shape(const GridGeometry& o) const { return n1_ == o.n1_ && n2_ == o.n2_ && mask_ == o.mask_; }

 private:
  int n1_ = 0, n2_ = 0;
  std::vector<std::uint8_t> mask_;
  std::vector<int> obs_to_pixel_;
  std::vector<int> pixel_to_obs_;
};

/// Periodic lattice the observation window is embedded in; the model's
/// covariance is defined as the torus covariance on this lattice.
struct EmbeddingGeometry {
  int m1 = 1;
  int m2 = 1;
  double expansion_factor = 1.25;
  LatticeDims dims() const { return {m1, m2}; }
};

inline bool is_smooth_235(long n) {
  if (n < 1) return false;
  for (long p : {2L, 3L, 5L}) {
    while (n % p == 0) n /= p;
  }
  return n == 1;
}

/// Smallest {2,3,5}-smooth integer >= n.
inline long next_smooth_235(long n) {
  long k = std::max(1L, n);
  while (!is_smooth_235(k)) ++k;
  return k;
}

inline EmbeddingGeometry embed_dims(int n1, int n2, double factor = 1.25) {
  if (!(factor >= 1.0) || !std::isfinite(factor)) {
    throw validation_error("invalid-parameter", "expansion factor must be >= 1");
  }
  if (n1 < 1 || n2 < 1) throw validation_error("invalid-parameter", "grid dimensions must be >= 1");
  // the 1e-9 slack keeps products like 1.25 * 100 from rounding up past 125
  auto target = [factor](int n) { return static_cast<long>(std::ceil(factor * n - 1e-9)); };
  return {static_cast<int>(next_smooth_235(target(n1))), static_cast<int>(next_smooth_235(target(n2))), factor};
}

/// Segment labels per pixel: 1..q on observed pixels, 0 elsewhere.
struct Partition {
  int n1 = 0;
  int n2 = 0;
  std::vector<int> labels;
  int q = 0;
  int block_rows = 10;
  int block_cols = 10;

  int label(std::size_t pixel) const { return labels[pixel]; }

  /// Relabels the non-zero labels to 1..q in order of first appearance.
  void compact() {
    std::map<int, int> remap;
    for (int& l : labels) {
      if (l == 0) continue;
      auto [it, inserted] = remap.try_emplace(l, static_cast<int>(remap.size()) + 1);
      l = it->second;
    }
    q = static_cast<int>(remap.size());
  }

  /// Checks that every observed pixel has a label and unobserved ones do not.
  void validate(const GridGeometry& grid) const {
    if (n1 != grid.n1() || n2 != grid.n2() || labels.size() != grid.pixels()) {
      throw validation_error("grid-mismatch", "partition does not match grid dimensions");
    }
    std::vector<int> count(static_cast<std::size_t>(q) + 1, 0);
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const int l = labels[p];
      if (grid.observed(p)) {
        if (l < 1 || l > q) {
          throw validation_error("invalid-parameter", "observed pixel " + std::to_string(p) +
                                                          " has no valid segment label");
        }
        ++count[l];
      } else if (l != 0) {
        throw validation_error("invalid-parameter", "unobserved pixel " + std::to_string(p) + " carries a label");
      }
    }
    for (int k = 1; k <= q; ++k) {
      if (count[k] == 0) {
        throw validation_error("invalid-parameter", "segment " + std::to_string(k) + " has no observed pixels");
      }
    }
  }

  /// Observed pixel count per segment, index 0 unused.
  std::vector<int> segment_sizes() const {
    std::vector<int> count(static_cast<std::size_t>(q) + 1, 0);
    for (int l : labels) {
      if (l > 0) ++count[l];
    }
    return count;
  }

  static Partition single(const GridGeometry& grid) {
    Partition p{grid.n1(), grid.n2(), std::vector<int>(grid.pixels(), 0), 1};
    for (std::size_t k = 0; k < grid.pixels(); ++k) {
      if (grid.observed(k)) p.labels[k] = 1;
    }
    return p;
  }

  /// Builds a compacted partition from raw labels, clearing unobserved pixels.
  static Partition from_labels(const GridGeometry& grid, std::vector<int> raw) {
    if (raw.size() != grid.pixels()) throw validation_error("grid-mismatch", "label array does not match grid");
    Partition p{grid.n1(), grid.n2(), std::move(raw), 0};
    for (std::size_t k = 0; k < p.labels.size(); ++k) {
      if (!grid.observed(k)) p.labels[k] = 0;
    }
    p.compact();
    p.validate(grid);
    return p;
  }
};

/// Observed values (NaN where unobserved) and covariate fields on one grid.
struct DataField {
  GridGeometry grid;
  std::vector<double> values;
  std::vector<std::vector<double>> covariates;

  void validate() const {
    if (values.size() != grid.pixels()) throw validation_error("dimension-mismatch", "data size does not match grid");
    for (std::size_t p = 0; p < grid.pixels(); ++p) {
      if (grid.observed(p) && !std::isfinite(values[p])) {
        throw validation_error("invalid-parameter", "non-finite value at observed pixel " + std::to_string(p));
      }
    }
    for (const auto& c : covariates) {
      if (c.size() != grid.pixels()) throw validation_error("dimension-mismatch", "covariate size does not match grid");
      for (std::size_t p = 0; p < grid.pixels(); ++p) {
        if (grid.observed(p) && !std::isfinite(c[p])) {
          throw validation_error("invalid-parameter", "non-finite covariate at observed pixel " + std::to_string(p));
        }
      }
    }
  }

  std::vector<double> observed_values() const {
    std::vector<double> y(grid.n_obs());
    for (int i = 0; i < grid.n_obs(); ++i) y[i] = values[grid.pixel_of(i)];
    return y;
  }
};

}  // namespace nsgp
