// SPDX-License-Identifier: Apache-2.0
//
// Nested multi-scale point clouds, node input features, field transfer and
// z-score normalisation.

#pragma once

#include "xmgn/common.hpp"
#include "xmgn/geometry.hpp"
#include "xmgn/kdtree.hpp"

#include <numbers>
#include <string>
#include <vector>

namespace xmgn {

/// Levels share one point array: level i is the prefix [0, level_counts[i]).
struct MultiScalePointCloud {
  std::vector<Index> level_counts;
  std::vector<Vec3> positions;
  std::vector<Vec3> normals;
  std::vector<Index> triangle_ids;

  Index level_count() const { return static_cast<Index>(level_counts.size()); }
  Index size() const { return static_cast<Index>(positions.size()); }
  std::span<const Vec3> level_positions(Index level) const {
    return std::span<const Vec3>(positions).first(static_cast<std::size_t>(level_counts[static_cast<std::size_t>(level)]));
  }
};

/// Sub-seed used for the samples that level `level` appends.
inline std::uint64_t level_seed(std::uint64_t seed, Index level) {
  return mix_seed(seed, static_cast<std::uint64_t>(level));
}

inline MultiScalePointCloud multiscale_sample(const TriangleSoup& soup, std::span<const Index> counts,
                                              std::uint64_t seed) {
  require(!counts.empty(), "multiscale_sample: at least one level is required");
  Index prev = 0;
  for (Index c : counts) {
    if (c <= prev) {
      throw ConfigError("multiscale_sample: level counts must be strictly increasing and positive");
    }
    prev = c;
  }
  MultiScalePointCloud cloud;
  cloud.level_counts.assign(counts.begin(), counts.end());
  cloud.positions.reserve(static_cast<std::size_t>(counts.back()));
  prev = 0;
  for (std::size_t level = 0; level < counts.size(); ++level) {
    for (const auto& s : sample_surface(soup, counts[level] - prev, level_seed(seed, static_cast<Index>(level)))) {
      cloud.positions.push_back(s.position);
      cloud.normals.push_back(s.normal);
      cloud.triangle_ids.push_back(s.triangle_id);
    }
    prev = counts[level];
  }
  return cloud;
}

struct FeatureBlock {
  std::string name;
  Index width = 0;
  bool operator==(const FeatureBlock&) const = default;
};

using FeatureSchema = std::vector<FeatureBlock>;

inline Index schema_width(const FeatureSchema& schema) {
  Index w = 0;
  for (const auto& b : schema) w += b.width;
  return w;
}

struct FeatureMatrix {
  MatrixD values;
  FeatureSchema schema;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
};

/// Per point: for each frequency, for x,y,z: sin(f*c), cos(f*c).
inline FeatureMatrix fourier_features(std::span<const Vec3> positions, std::span<const double> freqs) {
  require(!freqs.empty(), "fourier_features: at least one frequency is required");
  const auto nf = static_cast<Index>(freqs.size());
  FeatureMatrix out;
  out.schema = {{"fourier", 6 * nf}};
  out.values.resize(static_cast<Index>(positions.size()), 6 * nf);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (Index f = 0; f < nf; ++f) {
      for (int c = 0; c < 3; ++c) {
        const double arg = freqs[static_cast<std::size_t>(f)] * positions[i][c];
        out.values(static_cast<Index>(i), 6 * f + 2 * c) = std::sin(arg);
        out.values(static_cast<Index>(i), 6 * f + 2 * c + 1) = std::cos(arg);
      }
    }
  }
  return out;
}

struct FeatureOptions {
  std::vector<double> fourier_freqs{2 * std::numbers::pi, 4 * std::numbers::pi, 8 * std::numbers::pi};
  bool include_positions = true;
};

inline FeatureSchema node_feature_schema(const FeatureOptions& opt) {
  FeatureSchema schema;
  if (opt.include_positions) schema.push_back({"position", 3});
  schema.push_back({"normal", 3});
  if (!opt.fourier_freqs.empty()) schema.push_back({"fourier", 6 * static_cast<Index>(opt.fourier_freqs.size())});
  return schema;
}

/// Surface node inputs: [position] normal [fourier]. 24 columns with defaults.
inline FeatureMatrix node_features(std::span<const Vec3> positions, std::span<const Vec3> normals,
                                   const FeatureOptions& opt = {}) {
  require(positions.size() == normals.size(), "node_features: positions/normals size mismatch");
  FeatureMatrix out;
  out.schema = node_feature_schema(opt);
  const auto n = static_cast<Index>(positions.size());
  out.values.resize(n, schema_width(out.schema));
  Index col = 0;
  if (opt.include_positions) {
    for (Index i = 0; i < n; ++i) out.values.row(i).segment<3>(col) = positions[static_cast<std::size_t>(i)].transpose();
    col += 3;
  }
  for (Index i = 0; i < n; ++i) out.values.row(i).segment<3>(col) = normals[static_cast<std::size_t>(i)].transpose();
  col += 3;
  if (!opt.fourier_freqs.empty()) {
    auto ff = fourier_features(positions, opt.fourier_freqs);
    out.values.rightCols(ff.cols()) = ff.values;
  }
  return out;
}

/// Inverse-distance-weighted transfer of per-source rows onto destinations.
inline MatrixD idw_transfer(std::span<const Vec3> src_positions, const MatrixD& src_values,
                            std::span<const Vec3> dst_positions, Index k = 5, double power = 1.0) {
  require(k >= 1, "idw_transfer: k must be >= 1");
  if (src_positions.empty()) throw ConfigError("idw_transfer: empty source set");
  require(static_cast<Index>(src_positions.size()) == src_values.rows(), "idw_transfer: source value row mismatch");
  const KdTree tree(src_positions);
  MatrixD out(static_cast<Index>(dst_positions.size()), src_values.cols());
  for (std::size_t i = 0; i < dst_positions.size(); ++i) {
    const auto nbrs = tree.knn(dst_positions[i], k);
    const auto row = static_cast<Index>(i);
    if (std::sqrt(nbrs.front().dist2) < 1e-12) {
      out.row(row) = src_values.row(nbrs.front().index);
      continue;
    }
    double wsum = 0.0;
    out.row(row).setZero();
    for (const auto& nb : nbrs) {
      const double w = 1.0 / std::pow(std::sqrt(nb.dist2), power);
      out.row(row) += w * src_values.row(nb.index);
      wsum += w;
    }
    out.row(row) /= wsum;
  }
  return out;
}

inline constexpr double kStdFloor = 1e-8;

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::string> warnings;
};

/// Column-wise mean and population standard deviation, floored at kStdFloor.
inline NormStats fit_norm(const MatrixD& values) {
  require(values.rows() >= 2, "fit_norm: at least two samples are required");
  NormStats s;
  const auto n = static_cast<double>(values.rows());
  for (Index c = 0; c < values.cols(); ++c) {
    const double mean = values.col(c).sum() / n;
    const double var = (values.col(c).array() - mean).square().sum() / n;
    double sd = std::sqrt(var);
    if (sd < kStdFloor) {
      s.warnings.push_back("variable " + std::to_string(c) + " is constant; std clamped to 1e-8");
      sd = kStdFloor;
    }
    s.mean.push_back(mean);
    s.stddev.push_back(sd);
  }
  return s;
}

inline MatrixD apply_norm(const MatrixD& values, const NormStats& s) {
  require(static_cast<std::size_t>(values.cols()) == s.mean.size(), "apply_norm: variable count mismatch");
  MatrixD out(values.rows(), values.cols());
  for (Index c = 0; c < values.cols(); ++c) {
    out.col(c) = (values.col(c).array() - s.mean[static_cast<std::size_t>(c)]) / s.stddev[static_cast<std::size_t>(c)];
  }
  return out;
}

inline MatrixD invert_norm(const MatrixD& normalized, const NormStats& s) {
  require(static_cast<std::size_t>(normalized.cols()) == s.mean.size(), "invert_norm: variable count mismatch");
  MatrixD out(normalized.rows(), normalized.cols());
  for (Index c = 0; c < normalized.cols(); ++c) {
    out.col(c) = normalized.col(c).array() * s.stddev[static_cast<std::size_t>(c)] + s.mean[static_cast<std::size_t>(c)];
  }
  return out;
}

}  // namespace xmgn
