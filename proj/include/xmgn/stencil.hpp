// SPDX-License-Identifier: Apache-2.0
//
// Halo partitioning for regular-grid stencil pipelines: receptive-field
// arithmetic, slab decomposition, equivalence checks and the central-difference
// divergence operator.

#pragma once

#include "xmgn/common.hpp"
#include "xmgn/geometry.hpp"

#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace xmgn::stencil {

enum class LayerKind { conv, pool, upsample, pointwise };
enum class PointwiseFn { silu, gelu, tanh, relu };

struct Layer {
  LayerKind kind = LayerKind::pointwise;
  Index size = 1;                     // kernel width (conv) or factor (pool / upsample)
  PointwiseFn fn = PointwiseFn::silu;
  std::vector<double> weights;        // size^rank taps, x-fastest (conv only)
  double bias = 0.0;
};

/// Ordered layer list applied to a single-channel field of the given rank (1..3).
struct StencilStack {
  int rank = 1;
  std::vector<Layer> layers;

  StencilStack& conv(Index k, std::vector<double> weights = {}, double bias = 0.0) {
    layers.push_back({LayerKind::conv, k, PointwiseFn::silu, std::move(weights), bias});
    return *this;
  }
  StencilStack& pool(Index f) {
    layers.push_back({LayerKind::pool, f, PointwiseFn::silu, {}, 0.0});
    return *this;
  }
  StencilStack& upsample(Index f) {
    layers.push_back({LayerKind::upsample, f, PointwiseFn::silu, {}, 0.0});
    return *this;
  }
  StencilStack& pointwise(PointwiseFn fn) {
    layers.push_back({LayerKind::pointwise, 1, fn, {}, 0.0});
    return *this;
  }

  Index taps(Index k) const {
    Index n = 1;
    for (int a = 0; a < rank; ++a) n *= k;
    return n;
  }

  void validate() const {
    require(rank >= 1 && rank <= 3, "stencil: rank must be 1, 2 or 3");
    for (const auto& l : layers) {
      if (l.kind == LayerKind::conv) {
        require(l.size >= 1 && l.size % 2 == 1, "stencil: conv kernel sizes must be odd");
        require(static_cast<Index>(l.weights.size()) == taps(l.size),
                "stencil: conv(" + std::to_string(l.size) + ") needs " + std::to_string(taps(l.size)) + " weights");
      } else if (l.kind != LayerKind::pointwise) {
        require(l.size >= 1, "stencil: pool/upsample factors must be >= 1");
      }
    }
  }
};

/// Fills conv weights with nonzero values of random sign; magnitudes in [0.1, 1).
inline void randomize_weights(StencilStack& stack, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& l : stack.layers) {
    if (l.kind != LayerKind::conv) continue;
    l.weights.resize(static_cast<std::size_t>(stack.taps(l.size)));
    const double scale = 1.0 / static_cast<double>(l.weights.size());
    for (auto& w : l.weights) w = (sign(rng) ? 1.0 : -1.0) * mag(rng) * scale * 2.0;
    l.bias = 0.1 * mag(rng);
  }
}

struct StackGeometry {
  Index radius = 0;       // input cells one output cell depends on, beyond its footprint
  Index alignment = 1;    // lcm of every intermediate jump; slab cuts must be multiples
  Index output_jump = 1;  // input cells per output cell
};

/// Forward jump traversal: conv(k) adds ((k-1)/2)*j, pool(f) multiplies j by f,
/// upsample(f) divides j by f.
inline StackGeometry stack_geometry(const StencilStack& stack) {
  StackGeometry g;
  Index jump = 1;
  for (const auto& l : stack.layers) {
    switch (l.kind) {
      case LayerKind::conv: g.radius += ((l.size - 1) / 2) * jump; break;
      case LayerKind::pool: jump *= l.size; break;
      case LayerKind::upsample:
        if (jump % l.size != 0) {
          throw ConfigError("stencil: upsample(" + std::to_string(l.size) + ") at jump " + std::to_string(jump) +
                            " gives a non-integer jump");
        }
        jump /= l.size;
        break;
      case LayerKind::pointwise: break;
    }
    g.alignment = std::lcm(g.alignment, jump);
  }
  g.output_jump = jump;
  return g;
}

inline Index receptive_radius(const StencilStack& stack) { return stack_geometry(stack).radius; }

/// Halo needed by aligned slabs, found by pulling the first and last owned output
/// cell back through the layers. Equals receptive_radius for conv/pool/pointwise
/// stacks; larger when an upsample is followed by a conv.
inline Index exact_halo_radius(const StencilStack& stack) {
  const auto geo = stack_geometry(stack);
  const Index a = geo.alignment * (geo.radius + 8) * 4;  // far from 0, keeps divisions non-negative
  const Index b = a + geo.alignment;
  Index lo = a / geo.output_jump, hi = b / geo.output_jump - 1;
  for (auto it = stack.layers.rbegin(); it != stack.layers.rend(); ++it) {
    switch (it->kind) {
      case LayerKind::conv:
        lo -= (it->size - 1) / 2;
        hi += (it->size - 1) / 2;
        break;
      case LayerKind::pool:
        lo *= it->size;
        hi = hi * it->size + it->size - 1;
        break;
      case LayerKind::upsample:
        lo /= it->size;
        hi /= it->size;
        break;
      case LayerKind::pointwise: break;
    }
  }
  return std::max<Index>({0, a - lo, hi - (b - 1)});
}

/// Dense single-channel field, x-fastest.
struct Field {
  std::array<Index, 3> dims{1, 1, 1};
  std::vector<double> values;

  Field() = default;
  explicit Field(std::array<Index, 3> d) : dims(d), values(static_cast<std::size_t>(d[0] * d[1] * d[2]), 0.0) {}
  Index size() const { return dims[0] * dims[1] * dims[2]; }
  Index index(Index i, Index j, Index k) const { return i + dims[0] * (j + dims[1] * k); }
  double& at(Index i, Index j, Index k) { return values[static_cast<std::size_t>(index(i, j, k))]; }
  double at(Index i, Index j, Index k) const { return values[static_cast<std::size_t>(index(i, j, k))]; }
  bool operator==(const Field&) const = default;
};

inline Field field_from_grid(const ScalarGrid& g) {
  Field f(g.dims);
  f.values = g.values;
  return f;
}

namespace detail {

inline double pointwise(PointwiseFn fn, double v) {
  switch (fn) {
    case PointwiseFn::silu: return v / (1.0 + std::exp(-v));
    case PointwiseFn::gelu: return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    case PointwiseFn::tanh: return std::tanh(v);
    case PointwiseFn::relu: return v > 0.0 ? v : 0.0;
  }
  return v;
}

// Out-of-buffer taps are skipped, i.e. zero padding at the buffer boundary.
inline Field apply_conv(const Field& in, const Layer& l, int rank) {
  Field out(in.dims);
  const Index r = (l.size - 1) / 2;
  const Index rx = r, ry = rank >= 2 ? r : 0, rz = rank >= 3 ? r : 0;
  const Index kx = 2 * rx + 1, ky = 2 * ry + 1;
  for (Index k = 0; k < in.dims[2]; ++k)
    for (Index j = 0; j < in.dims[1]; ++j)
      for (Index i = 0; i < in.dims[0]; ++i) {
        double acc = l.bias;
        for (Index dz = -rz; dz <= rz; ++dz) {
          const Index z = k + dz;
          if (z < 0 || z >= in.dims[2]) continue;
          for (Index dy = -ry; dy <= ry; ++dy) {
            const Index y = j + dy;
            if (y < 0 || y >= in.dims[1]) continue;
            for (Index dx = -rx; dx <= rx; ++dx) {
              const Index x = i + dx;
              if (x < 0 || x >= in.dims[0]) continue;
              const Index tap = (dx + rx) + kx * ((dy + ry) + ky * (dz + rz));
              acc += l.weights[static_cast<std::size_t>(tap)] * in.at(x, y, z);
            }
          }
        }
        out.at(i, j, k) = acc;
      }
  return out;
}

inline Field apply_pool(const Field& in, Index f, int rank) {
  std::array<Index, 3> fd{f, rank >= 2 ? f : 1, rank >= 3 ? f : 1};
  std::array<Index, 3> od{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (in.dims[a] % fd[a] != 0) {
      throw ConfigError("stencil: pool(" + std::to_string(f) + ") does not divide extent " + std::to_string(in.dims[a]));
    }
    od[a] = in.dims[a] / fd[a];
  }
  Field out(od);
  const double inv = 1.0 / static_cast<double>(fd[0] * fd[1] * fd[2]);
  for (Index k = 0; k < od[2]; ++k)
    for (Index j = 0; j < od[1]; ++j)
      for (Index i = 0; i < od[0]; ++i) {
        double acc = 0.0;
        for (Index c = 0; c < fd[2]; ++c)
          for (Index b = 0; b < fd[1]; ++b)
            for (Index a = 0; a < fd[0]; ++a) acc += in.at(i * fd[0] + a, j * fd[1] + b, k * fd[2] + c);
        out.at(i, j, k) = acc * inv;
      }
  return out;
}

inline Field apply_upsample(const Field& in, Index f, int rank) {
  std::array<Index, 3> fd{f, rank >= 2 ? f : 1, rank >= 3 ? f : 1};
  Field out({in.dims[0] * fd[0], in.dims[1] * fd[1], in.dims[2] * fd[2]});
  for (Index k = 0; k < out.dims[2]; ++k)
    for (Index j = 0; j < out.dims[1]; ++j)
      for (Index i = 0; i < out.dims[0]; ++i) out.at(i, j, k) = in.at(i / fd[0], j / fd[1], k / fd[2]);
  return out;
}

}  // namespace detail

/// Applies the stack to one buffer; zero padding only at the buffer edge.
inline Field forward(const StencilStack& stack, Field field) {
  stack.validate();
  for (const auto& l : stack.layers) {
    switch (l.kind) {
      case LayerKind::conv: field = detail::apply_conv(field, l, stack.rank); break;
      case LayerKind::pool: field = detail::apply_pool(field, l.size, stack.rank); break;
      case LayerKind::upsample: field = detail::apply_upsample(field, l.size, stack.rank); break;
      case LayerKind::pointwise:
        for (auto& v : field.values) v = detail::pointwise(l.fn, v);
        break;
    }
  }
  return field;
}

struct Slab {
  Index begin = 0, end = 0;              // owned cells along the cut axis
  Index local_begin = 0, local_end = 0;  // buffer extent along the cut axis
  Field local;                           // owned + halo cells; alignment padding is zero
  std::vector<std::uint8_t> owned_mask;  // along the cut axis, per local index
};

struct GridPartition {
  int axis = 0;
  Index halo = 0;
  Index alignment = 1;
  std::array<Index, 3> dims{1, 1, 1};
  std::vector<Slab> slabs;
};

/// Cuts `field` into P slabs along `axis`. Cuts fall on multiples of `alignment`.
/// Each buffer extends ceil(h/alignment)*alignment cells past its owned range
/// (clipped at the domain); only cells within h of the owned range carry data.
inline GridPartition grid_partition(const Field& field, Index parts, int axis, Index halo, Index alignment = 1) {
  require(axis >= 0 && axis < 3, "grid_partition: axis must be 0, 1 or 2");
  require(halo >= 0, "grid_partition: halo must be >= 0");
  require(parts >= 1, "grid_partition: partition count must be >= 1");
  require(alignment >= 1, "grid_partition: alignment must be >= 1");
  const auto ax = static_cast<std::size_t>(axis);
  const Index n = field.dims[ax];
  if (n % alignment != 0) {
    throw ConfigError("grid_partition: extent " + std::to_string(n) + " is not a multiple of alignment " +
                      std::to_string(alignment));
  }
  const Index blocks = n / alignment;
  if (parts > blocks) {
    throw ConfigError("grid_partition: " + std::to_string(parts) + " slabs leave a slab thinner than one owned cell");
  }
  GridPartition gp;
  gp.axis = axis;
  gp.halo = halo;
  gp.alignment = alignment;
  gp.dims = field.dims;
  const Index pad = (halo + alignment - 1) / alignment * alignment;
  for (Index p = 0; p < parts; ++p) {
    Slab s;
    s.begin = (blocks * p / parts) * alignment;
    s.end = (blocks * (p + 1) / parts) * alignment;
    s.local_begin = std::max<Index>(0, s.begin - pad);
    s.local_end = std::min<Index>(n, s.end + pad);
    auto ld = field.dims;
    ld[ax] = s.local_end - s.local_begin;
    s.local = Field(ld);
    s.owned_mask.resize(static_cast<std::size_t>(ld[ax]));
    for (Index k = 0; k < ld[2]; ++k)
      for (Index j = 0; j < ld[1]; ++j)
        for (Index i = 0; i < ld[0]; ++i) {
          std::array<Index, 3> g{i, j, k};
          g[ax] += s.local_begin;
          const Index c = g[ax];
          if (c >= s.begin - halo && c < s.end + halo) s.local.at(i, j, k) = field.at(g[0], g[1], g[2]);
        }
    for (Index l = 0; l < ld[ax]; ++l) {
      const Index c = l + s.local_begin;
      s.owned_mask[static_cast<std::size_t>(l)] = (c >= s.begin && c < s.end) ? 1 : 0;
    }
    gp.slabs.push_back(std::move(s));
  }
  return gp;
}

/// Runs the stack per slab and assembles the owned outputs into one field.
inline Field stencil_forward(const GridPartition& gp, const StencilStack& stack) {
  const auto geo = stack_geometry(stack);
  if (gp.alignment % geo.alignment != 0) {
    throw ConfigError("stencil_forward: slab alignment " + std::to_string(gp.alignment) +
                      " is not a multiple of the stack alignment " + std::to_string(geo.alignment));
  }
  const auto ax = static_cast<std::size_t>(gp.axis);
  std::array<Index, 3> od = gp.dims;
  const Index jf = geo.output_jump;
  for (std::size_t a = 0; a < 3; ++a) {
    if (static_cast<int>(a) < stack.rank) od[a] /= jf;
  }
  Field out(od);
  for (const auto& s : gp.slabs) {
    const Field local = forward(stack, s.local);
    const Index off = (s.begin - s.local_begin) / jf;
    const Index count = (s.end - s.begin) / jf;
    for (Index k = 0; k < local.dims[2]; ++k)
      for (Index j = 0; j < local.dims[1]; ++j)
        for (Index i = 0; i < local.dims[0]; ++i) {
          std::array<Index, 3> l{i, j, k};
          if (l[ax] < off || l[ax] >= off + count) continue;
          std::array<Index, 3> g = l;
          g[ax] = l[ax] - off + s.begin / jf;
          out.at(g[0], g[1], g[2]) = local.at(i, j, k);
        }
  }
  return out;
}

/// Smallest halo for which the partitioned forward equals the full forward bit for bit.
inline Index empirical_min_halo(const StencilStack& stack, const Field& probe, Index parts = 2, int axis = 0) {
  const auto geo = stack_geometry(stack);
  const Field full = forward(stack, probe);
  const Index n = probe.dims[static_cast<std::size_t>(axis)];
  for (Index h = 0; h <= n; ++h) {
    if (stencil_forward(grid_partition(probe, parts, axis, h, geo.alignment), stack) == full) return h;
  }
  return n;
}

/// div u = sum over axes of central differences; one-sided on the boundary.
inline ScalarGrid divergence_central(const ScalarGrid& u, const ScalarGrid& v, const ScalarGrid& w) {
  require(u.same_layout(v) && u.same_layout(w), "divergence_central: components must share one grid layout");
  for (Index d : u.dims) require(d >= 3, "divergence_central: every axis needs at least 3 points");
  ScalarGrid div = axis_derivative(u, 0);
  const auto dv = axis_derivative(v, 1);
  const auto dw = axis_derivative(w, 2);
  for (std::size_t i = 0; i < div.values.size(); ++i) div.values[i] += dv.values[i] + dw.values[i];
  return div;
}

}  // namespace xmgn::stencil
