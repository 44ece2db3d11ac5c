// SPDX-License-Identifier: Apache-2.0
//
// k-NN connectivity per scale and the merged multi-scale graph.

#pragma once

#include "xmgn/common.hpp"
#include "xmgn/kdtree.hpp"
#include "xmgn/pointcloud.hpp"

#include <algorithm>
#include <array>
#include <vector>

namespace xmgn {

/// Directed edge src -> dst (messages flow from sender src into receiver dst).
struct Edge {
  Index src = 0;
  Index dst = 0;

  // CSR order: destination-major, then source.
  friend bool operator<(const Edge& a, const Edge& b) {
    return a.dst < b.dst || (a.dst == b.dst && a.src < b.src);
  }
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// (x_j - x_i, |x_j - x_i|) for sender j and receiver i.
inline std::array<double, 4> edge_feature(const Vec3& receiver, const Vec3& sender) {
  const Vec3 rel = sender - receiver;
  return {rel.x(), rel.y(), rel.z(), rel.norm()};
}

/// Receiver-major CSR graph: row i lists the senders of edges into i.
struct Graph {
  Index node_count = 0;
  std::vector<Index> offsets{0};
  std::vector<Index> sources;
  std::vector<Vec3> positions;
  std::vector<Vec3> normals;
  MatrixD edge_features;             // E x 4
  std::vector<std::uint8_t> edge_level;
  Index k = 0;
  std::vector<Index> level_counts;
  bool symmetric = true;

  Index edge_count() const { return static_cast<Index>(sources.size()); }

  std::span<const Index> in_neighbors(Index v) const {
    return std::span<const Index>(sources).subspan(static_cast<std::size_t>(offsets[static_cast<std::size_t>(v)]),
                                                   static_cast<std::size_t>(offsets[static_cast<std::size_t>(v) + 1] -
                                                                            offsets[static_cast<std::size_t>(v)]));
  }

  /// Receiver of every edge, in CSR order.
  std::vector<Index> destinations() const {
    std::vector<Index> dst(sources.size());
    for (Index v = 0; v < node_count; ++v) {
      for (Index e = offsets[static_cast<std::size_t>(v)]; e < offsets[static_cast<std::size_t>(v) + 1]; ++e) {
        dst[static_cast<std::size_t>(e)] = v;
      }
    }
    return dst;
  }

  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    out.reserve(sources.size());
    for (Index v = 0; v < node_count; ++v) {
      for (Index s : in_neighbors(v)) out.push_back({s, v});
    }
    return out;
  }
};

/// Incoming edges from the k nearest distinct points of every node
/// (k capped at n-1), ties broken by smaller index. Sorted in CSR order.
inline std::vector<Edge> knn_edges(std::span<const Vec3> positions, Index k) {
  require(k >= 1, "knn_edges: k must be >= 1");
  const auto n = static_cast<Index>(positions.size());
  require(n >= 2, "knn_edges: at least two points are required");
  const Index kk = std::min(k, n - 1);
  const KdTree tree(positions);
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(n * kk));
  for (Index i = 0; i < n; ++i) {
    auto nbrs = tree.knn(positions[static_cast<std::size_t>(i)], kk, i);
    std::sort(nbrs.begin(), nbrs.end(), [](const Neighbor& a, const Neighbor& b) { return a.index < b.index; });
    for (const auto& nb : nbrs) edges.push_back({nb.index, i});
  }
  return edges;
}

/// Incoming edges from every point within `radius` (alternative to k-NN).
inline std::vector<Edge> radius_edges(std::span<const Vec3> positions, double radius) {
  require(radius > 0.0, "radius_edges: radius must be positive");
  const KdTree tree(positions);
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    auto nbrs = tree.radius(positions[i], radius, static_cast<Index>(i));
    std::sort(nbrs.begin(), nbrs.end(), [](const Neighbor& a, const Neighbor& b) { return a.index < b.index; });
    for (const auto& nb : nbrs) edges.push_back({nb.index, static_cast<Index>(i)});
  }
  return edges;
}

/// Union of the edges and their reverses, deduplicated and sorted.
inline std::vector<Edge> symmetrize(std::span<const Edge> edges) {
  std::vector<Edge> out;
  out.reserve(edges.size() * 2);
  for (const auto& e : edges) {
    out.push_back(e);
    out.push_back({e.dst, e.src});
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Assembles CSR and edge features. `edges` must be sorted, unique and free of self-loops.
inline Graph graph_from_edges(std::span<const Vec3> positions, std::span<const Edge> edges,
                              std::span<const std::uint8_t> levels = {}) {
  Graph g;
  g.node_count = static_cast<Index>(positions.size());
  g.positions.assign(positions.begin(), positions.end());
  g.offsets.assign(static_cast<std::size_t>(g.node_count) + 1, 0);
  g.sources.reserve(edges.size());
  g.edge_features.resize(static_cast<Index>(edges.size()), 4);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& ed = edges[e];
    if (ed.src == ed.dst) throw ConfigError("graph_from_edges: self-loop at node " + std::to_string(ed.src));
    if (e > 0 && !(edges[e - 1] < ed)) throw ConfigError("graph_from_edges: edges must be sorted and unique");
    ++g.offsets[static_cast<std::size_t>(ed.dst) + 1];
    g.sources.push_back(ed.src);
    const auto f = edge_feature(positions[static_cast<std::size_t>(ed.dst)], positions[static_cast<std::size_t>(ed.src)]);
    for (int c = 0; c < 4; ++c) g.edge_features(static_cast<Index>(e), c) = f[static_cast<std::size_t>(c)];
  }
  for (std::size_t v = 0; v < static_cast<std::size_t>(g.node_count); ++v) g.offsets[v + 1] += g.offsets[v];
  if (levels.empty()) {
    g.edge_level.assign(edges.size(), 0);
  } else {
    g.edge_level.assign(levels.begin(), levels.end());
  }
  return g;
}

/// Per-level k-NN (symmetrized unless `symmetric` is false), unioned over
/// levels on the finest node set. Each edge remembers the coarsest level that produced it.
inline Graph build_multiscale_graph(const MultiScalePointCloud& cloud, Index k, bool symmetric = true) {
  require(cloud.level_count() >= 1, "build_multiscale_graph: cloud has no levels");
  require(cloud.level_count() <= 255, "build_multiscale_graph: too many levels");
  struct Tagged {
    Edge edge;
    std::uint8_t level;
  };
  std::vector<Tagged> all;
  for (Index level = 0; level < cloud.level_count(); ++level) {
    auto edges = knn_edges(cloud.level_positions(level), k);
    if (symmetric) edges = symmetrize(edges);
    for (const auto& e : edges) all.push_back({e, static_cast<std::uint8_t>(level)});
  }
  std::stable_sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) {
    return a.edge < b.edge || (a.edge == b.edge && a.level < b.level);
  });
  std::vector<Edge> edges;
  std::vector<std::uint8_t> levels;
  for (const auto& t : all) {
    if (!edges.empty() && edges.back() == t.edge) continue;
    edges.push_back(t.edge);
    levels.push_back(t.level);
  }
  Graph g = graph_from_edges(cloud.positions, edges, levels);
  g.normals = cloud.normals;
  g.k = k;
  g.level_counts = cloud.level_counts;
  g.symmetric = symmetric;
  return g;
}

/// Content checksum over CSR, positions and edge data.
inline std::uint64_t graph_checksum(const Graph& g) {
  Fnv64 h;
  h.update(&g.node_count, sizeof(g.node_count));
  h.update(std::span<const Index>(g.offsets));
  h.update(std::span<const Index>(g.sources));
  for (const auto& p : g.positions) h.update(p.data(), 3 * sizeof(double));
  h.update(g.edge_features.data(), static_cast<std::size_t>(g.edge_features.size()) * sizeof(double));
  h.update(std::span<const std::uint8_t>(g.edge_level));
  return h.digest();
}

}  // namespace xmgn
