// SPDX-License-Identifier: Apache-2.0
//
// Built-in geometries and analytic surface fields, so the pipeline runs without external data.

#pragma once

#include "xmgn/common.hpp"
#include "xmgn/geometry.hpp"

#include <numbers>
#include <random>
#include <string>

namespace xmgn {

struct SyntheticShape {
  std::string kind = "icosphere";  // icosphere | superellipsoid
  int subdivisions = 3;
  double radius = 1.0;
  // superellipsoid morph ranges, drawn per sample seed
  double axis_min = 0.7;
  double axis_max = 1.3;
  double exponent_min = 1.6;
  double exponent_max = 3.0;
};

/// Sample 0 of an icosphere config is the plain sphere; every sample of a
/// superellipsoid config draws its own semi-axes and exponent from the seed.
inline TriangleSoup synthetic_geometry(const SyntheticShape& shape, std::uint64_t seed) {
  require(shape.subdivisions >= 0 && shape.subdivisions <= 8, "synthetic: subdivisions must be in [0, 8]");
  if (shape.kind == "icosphere") return make_icosphere(shape.subdivisions, shape.radius);
  if (shape.kind == "superellipsoid") {
    require(shape.axis_min > 0 && shape.axis_min <= shape.axis_max, "synthetic: bad semi-axis range");
    require(shape.exponent_min > 0 && shape.exponent_min <= shape.exponent_max, "synthetic: bad exponent range");
    std::mt19937_64 rng(mix_seed(seed, 0x5e11));
    std::uniform_real_distribution<double> ax(shape.axis_min, shape.axis_max);
    std::uniform_real_distribution<double> ex(shape.exponent_min, shape.exponent_max);
    Vec3 axes;
    for (int d = 0; d < 3; ++d) axes[d] = ax(rng) * shape.radius;
    return make_superellipsoid(shape.subdivisions, axes, ex(rng));
  }
  throw ConfigError("synthetic: unknown shape '" + shape.kind + "' (expected icosphere or superellipsoid)");
}

/// p(x) = sin(2 pi x) cos(2 pi y) + z
inline double analytic_pressure(const Vec3& x) {
  constexpr double w = 2 * std::numbers::pi;
  return std::sin(w * x.x()) * std::cos(w * x.y()) + x.z();
}

inline Vec3 analytic_pressure_gradient(const Vec3& x) {
  constexpr double w = 2 * std::numbers::pi;
  return {w * std::cos(w * x.x()) * std::cos(w * x.y()), -w * std::sin(w * x.x()) * std::sin(w * x.y()), 1.0};
}

/// Rows (p, tau_x, tau_y, tau_z), tau = grad p minus its normal component.
inline MatrixD analytic_targets(std::span<const Vec3> positions, std::span<const Vec3> normals) {
  require(positions.size() == normals.size(), "analytic_targets: positions/normals size mismatch");
  MatrixD out(static_cast<Index>(positions.size()), 4);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Vec3& n = normals[i];
    const Vec3 g = analytic_pressure_gradient(positions[i]);
    const Vec3 tau = g - g.dot(n) * n;
    out.row(static_cast<Index>(i)) << analytic_pressure(positions[i]), tau.x(), tau.y(), tau.z();
  }
  return out;
}

}  // namespace xmgn
