// SPDX-License-Identifier: Apache-2.0
//
// Node partitioning and L-hop halo expansion. Every partition record is
// self-contained: owned nodes plus the halo they need for L layers.

#pragma once

#include "xmgn/common.hpp"
#include "xmgn/graph.hpp"

#include <algorithm>
#include <deque>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <vector>

namespace xmgn {

enum class PartitionMethod { coordinate_bisection, greedy_bfs, external_assignment };

inline std::string to_string(PartitionMethod m) {
  switch (m) {
    case PartitionMethod::coordinate_bisection: return "coordinate_bisection";
    case PartitionMethod::greedy_bfs: return "greedy_bfs";
    case PartitionMethod::external_assignment: return "external_assignment";
  }
  return "unknown";
}

inline PartitionMethod partition_method_from_string(const std::string& s) {
  if (s == "coordinate_bisection") return PartitionMethod::coordinate_bisection;
  if (s == "greedy_bfs") return PartitionMethod::greedy_bfs;
  if (s == "external_assignment") return PartitionMethod::external_assignment;
  throw ConfigError("unknown partition method '" + s + "'");
}

/// undirected: hops ignore edge direction. predecessor: hops follow senders only.
enum class HaloMode { undirected, predecessor };

/// One partition: local nodes are owned ∪ halo sorted by global id.
struct LocalPartition {
  Index id = 0;
  std::vector<Index> owned;
  std::vector<Index> halo;
  std::vector<Index> local_to_global;
  std::vector<Index> offsets{0};
  std::vector<Index> sources;       // local ids
  std::vector<Index> edge_ids;      // global edge id of each local edge
  std::vector<std::uint8_t> owned_mask;

  Index local_count() const { return static_cast<Index>(local_to_global.size()); }
  Index edge_count() const { return static_cast<Index>(sources.size()); }
};

struct PartitionSet {
  Index partition_count = 0;
  Index halo_depth = 0;
  PartitionMethod method = PartitionMethod::coordinate_bisection;
  HaloMode halo_mode = HaloMode::undirected;
  std::vector<Index> owner;
  std::vector<LocalPartition> parts;
};

namespace detail {

inline void bisect(std::span<const Vec3> pos, std::vector<Index>& nodes, Index begin, Index end, Index part_begin,
                   Index parts, Index total_nodes, Index total_parts, std::vector<Index>& owner) {
  if (parts == 1) {
    for (Index i = begin; i < end; ++i) owner[static_cast<std::size_t>(nodes[static_cast<std::size_t>(i)])] = part_begin;
    return;
  }
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (Index i = begin; i < end; ++i) {
    lo = lo.cwiseMin(pos[static_cast<std::size_t>(nodes[static_cast<std::size_t>(i)])]);
    hi = hi.cwiseMax(pos[static_cast<std::size_t>(nodes[static_cast<std::size_t>(i)])]);
  }
  int axis = 0;
  const Vec3 extent = hi - lo;
  for (int a = 1; a < 3; ++a) {
    if (extent[a] > extent[axis]) axis = a;
  }
  const Index left_parts = parts / 2;
  // Part p targets floor(n/P) nodes, plus one for the first n mod P parts.
  auto target = [&](Index p) { return total_nodes / total_parts + (p < total_nodes % total_parts ? 1 : 0); };
  Index left_count = 0;
  for (Index p = part_begin; p < part_begin + left_parts; ++p) left_count += target(p);
  const Index mid = begin + left_count;
  std::nth_element(nodes.begin() + begin, nodes.begin() + mid, nodes.begin() + end, [&](Index a, Index b) {
    const double ca = pos[static_cast<std::size_t>(a)][axis];
    const double cb = pos[static_cast<std::size_t>(b)][axis];
    return ca < cb || (ca == cb && a < b);
  });
  bisect(pos, nodes, begin, mid, part_begin, left_parts, total_nodes, total_parts, owner);
  bisect(pos, nodes, mid, end, part_begin + left_parts, parts - left_parts, total_nodes, total_parts, owner);
}

}  // namespace detail

/// Undirected adjacency (senders ∪ receivers) in CSR form.
struct Adjacency {
  std::vector<Index> offsets;
  std::vector<Index> neighbors;

  std::span<const Index> of(Index v) const {
    return std::span<const Index>(neighbors).subspan(static_cast<std::size_t>(offsets[static_cast<std::size_t>(v)]),
                                                     static_cast<std::size_t>(offsets[static_cast<std::size_t>(v) + 1] -
                                                                              offsets[static_cast<std::size_t>(v)]));
  }
};

inline Adjacency make_adjacency(const Graph& g, HaloMode mode = HaloMode::undirected) {
  std::vector<std::vector<Index>> lists(static_cast<std::size_t>(g.node_count));
  for (Index v = 0; v < g.node_count; ++v) {
    for (Index s : g.in_neighbors(v)) {
      lists[static_cast<std::size_t>(v)].push_back(s);
      if (mode == HaloMode::undirected) lists[static_cast<std::size_t>(s)].push_back(v);
    }
  }
  Adjacency adj;
  adj.offsets.assign(1, 0);
  for (auto& l : lists) {
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
    adj.neighbors.insert(adj.neighbors.end(), l.begin(), l.end());
    adj.offsets.push_back(static_cast<Index>(adj.neighbors.size()));
  }
  return adj;
}

/// Recursive median split along the widest axis; part sizes differ by at most one.
inline std::vector<Index> coordinate_bisection(std::span<const Vec3> positions, Index parts) {
  const auto n = static_cast<Index>(positions.size());
  std::vector<Index> owner(static_cast<std::size_t>(n), 0);
  std::vector<Index> nodes(static_cast<std::size_t>(n));
  std::iota(nodes.begin(), nodes.end(), Index{0});
  detail::bisect(positions, nodes, 0, n, 0, parts, n, parts, owner);
  return owner;
}

/// Grows `parts` regions from hop-spread seeds; the smallest region (by node
/// count, or by incoming-edge count when `balance_edges`) claims next.
inline std::vector<Index> greedy_bfs_partition(const Graph& g, Index parts, bool balance_edges = false) {
  const Index n = g.node_count;
  const Adjacency adj = make_adjacency(g);
  constexpr Index unset = -1;

  // Seeds: farthest-first traversal in hop distance, ties to the smaller index.
  std::vector<Index> seeds;
  std::vector<Index> dist(static_cast<std::size_t>(n), std::numeric_limits<Index>::max());
  auto relax_from = [&](Index s) {
    std::queue<Index> q;
    dist[static_cast<std::size_t>(s)] = 0;
    q.push(s);
    while (!q.empty()) {
      const Index v = q.front();
      q.pop();
      for (Index w : adj.of(v)) {
        if (dist[static_cast<std::size_t>(w)] > dist[static_cast<std::size_t>(v)] + 1) {
          dist[static_cast<std::size_t>(w)] = dist[static_cast<std::size_t>(v)] + 1;
          q.push(w);
        }
      }
    }
  };
  auto farthest = [&] {
    Index best = 0;
    for (Index v = 1; v < n; ++v) {
      if (dist[static_cast<std::size_t>(v)] > dist[static_cast<std::size_t>(best)]) best = v;
    }
    return best;
  };
  relax_from(0);
  seeds.push_back(farthest());
  std::fill(dist.begin(), dist.end(), std::numeric_limits<Index>::max());
  relax_from(seeds.back());
  while (static_cast<Index>(seeds.size()) < parts) {
    seeds.push_back(farthest());
    relax_from(seeds.back());
  }

  std::vector<Index> owner(static_cast<std::size_t>(n), unset);
  std::vector<std::deque<Index>> frontier(static_cast<std::size_t>(parts));
  std::vector<Index> load(static_cast<std::size_t>(parts), 0);
  auto weight = [&](Index v) { return balance_edges ? static_cast<Index>(g.in_neighbors(v).size()) + 1 : Index{1}; };
  auto claim = [&](Index p, Index v) {
    owner[static_cast<std::size_t>(v)] = p;
    load[static_cast<std::size_t>(p)] += weight(v);
    for (Index w : adj.of(v)) {
      if (owner[static_cast<std::size_t>(w)] == unset) frontier[static_cast<std::size_t>(p)].push_back(w);
    }
  };
  Index claimed = 0;
  for (Index p = 0; p < parts; ++p) {
    claim(p, seeds[static_cast<std::size_t>(p)]);
    ++claimed;
  }
  Index next_unclaimed = 0;
  while (claimed < n) {
    Index p = 0;
    for (Index q = 1; q < parts; ++q) {
      if (load[static_cast<std::size_t>(q)] < load[static_cast<std::size_t>(p)]) p = q;
    }
    auto& f = frontier[static_cast<std::size_t>(p)];
    while (!f.empty() && owner[static_cast<std::size_t>(f.front())] != unset) f.pop_front();
    Index v = unset;
    if (!f.empty()) {
      v = f.front();
      f.pop_front();
    } else {
      // Region is enclosed (or the graph is disconnected): restart from the smallest free node.
      while (owner[static_cast<std::size_t>(next_unclaimed)] != unset) ++next_unclaimed;
      v = next_unclaimed;
    }
    claim(p, v);
    ++claimed;
  }
  return owner;
}

/// Validates an imported assignment (e.g. METIS output).
inline std::vector<Index> external_assignment(std::span<const Index> owner, Index node_count, Index parts) {
  if (static_cast<Index>(owner.size()) != node_count) {
    throw ConfigError("external assignment covers " + std::to_string(owner.size()) + " nodes, graph has " +
                      std::to_string(node_count));
  }
  for (std::size_t v = 0; v < owner.size(); ++v) {
    if (owner[v] < 0 || owner[v] >= parts) {
      throw ConfigError("external assignment: node " + std::to_string(v) + " has owner " + std::to_string(owner[v]) +
                        " outside [0, " + std::to_string(parts) + ")");
    }
  }
  return {owner.begin(), owner.end()};
}

inline std::vector<Index> partition_nodes(const Graph& g, Index parts, PartitionMethod method,
                                          std::span<const Index> external = {}, bool balance_edges = false) {
  if (parts < 1) throw ConfigError("partition count must be >= 1");
  if (parts > g.node_count) {
    throw ConfigError("partition count " + std::to_string(parts) + " exceeds node count " + std::to_string(g.node_count));
  }
  switch (method) {
    case PartitionMethod::coordinate_bisection: return coordinate_bisection(g.positions, parts);
    case PartitionMethod::greedy_bfs: return greedy_bfs_partition(g, parts, balance_edges);
    case PartitionMethod::external_assignment: return external_assignment(external, g.node_count, parts);
  }
  throw ConfigError("unknown partition method");
}

/// BFS from the owned set up to `depth` hops; returns non-owned nodes reached.
inline std::vector<Index> halo_nodes(const Adjacency& adj, std::span<const Index> owned, Index depth, Index n) {
  std::vector<Index> level(static_cast<std::size_t>(n), -1);
  std::vector<Index> current(owned.begin(), owned.end());
  for (Index v : owned) level[static_cast<std::size_t>(v)] = 0;
  std::vector<Index> halo;
  for (Index d = 1; d <= depth && !current.empty(); ++d) {
    std::vector<Index> next;
    for (Index v : current) {
      for (Index w : adj.of(v)) {
        if (level[static_cast<std::size_t>(w)] < 0) {
          level[static_cast<std::size_t>(w)] = d;
          next.push_back(w);
        }
      }
    }
    halo.insert(halo.end(), next.begin(), next.end());
    current = std::move(next);
  }
  std::sort(halo.begin(), halo.end());
  return halo;
}

inline LocalPartition build_local_partition(const Graph& g, const Adjacency& adj, std::span<const Index> owner,
                                            Index part, Index depth) {
  LocalPartition lp;
  lp.id = part;
  for (Index v = 0; v < g.node_count; ++v) {
    if (owner[static_cast<std::size_t>(v)] == part) lp.owned.push_back(v);
  }
  lp.halo = halo_nodes(adj, lp.owned, depth, g.node_count);
  lp.local_to_global.reserve(lp.owned.size() + lp.halo.size());
  std::merge(lp.owned.begin(), lp.owned.end(), lp.halo.begin(), lp.halo.end(), std::back_inserter(lp.local_to_global));
  std::vector<Index> global_to_local(static_cast<std::size_t>(g.node_count), -1);
  for (std::size_t l = 0; l < lp.local_to_global.size(); ++l) {
    global_to_local[static_cast<std::size_t>(lp.local_to_global[l])] = static_cast<Index>(l);
  }
  lp.owned_mask.resize(lp.local_to_global.size());
  for (std::size_t l = 0; l < lp.local_to_global.size(); ++l) {
    lp.owned_mask[l] = owner[static_cast<std::size_t>(lp.local_to_global[l])] == part ? 1 : 0;
  }
  for (Index gv : lp.local_to_global) {
    for (Index e = g.offsets[static_cast<std::size_t>(gv)]; e < g.offsets[static_cast<std::size_t>(gv) + 1]; ++e) {
      const Index ls = global_to_local[static_cast<std::size_t>(g.sources[static_cast<std::size_t>(e)])];
      if (ls < 0) continue;  // sender lies beyond the halo
      lp.sources.push_back(ls);
      lp.edge_ids.push_back(e);
    }
    lp.offsets.push_back(static_cast<Index>(lp.sources.size()));
  }
  return lp;
}

/// `parts` defaults to max(owner) + 1.
inline PartitionSet expand_halo(const Graph& g, std::span<const Index> owner, Index depth,
                                HaloMode mode = HaloMode::undirected, Index parts = -1) {
  require(depth >= 0, "expand_halo: halo depth must be >= 0");
  require(static_cast<Index>(owner.size()) == g.node_count, "expand_halo: owner array does not match graph");
  PartitionSet ps;
  ps.halo_depth = depth;
  ps.halo_mode = mode;
  ps.owner.assign(owner.begin(), owner.end());
  Index max_owner = -1;
  for (Index o : owner) {
    require(o >= 0, "expand_halo: negative owner id");
    max_owner = std::max(max_owner, o);
  }
  if (parts < 0) parts = max_owner + 1;
  require(max_owner < parts, "expand_halo: owner id exceeds partition count");
  ps.partition_count = parts;
  const Adjacency adj = make_adjacency(g, mode);
  ps.parts.reserve(static_cast<std::size_t>(parts));
  for (Index p = 0; p < parts; ++p) ps.parts.push_back(build_local_partition(g, adj, owner, p, depth));
  return ps;
}

inline PartitionSet partition_graph(const Graph& g, Index parts, PartitionMethod method, Index halo_depth,
                                    std::span<const Index> external = {}) {
  auto owner = partition_nodes(g, parts, method, external);
  auto ps = expand_halo(g, owner, halo_depth, g.symmetric ? HaloMode::undirected : HaloMode::predecessor, parts);
  ps.method = method;
  return ps;
}

struct BalanceReport {
  std::vector<Index> owned_nodes;
  std::vector<Index> local_nodes;
  std::vector<Index> local_edges;
  double replication_factor = 1.0;
  double owned_ratio = 1.0;  // max/min owned count
  double edge_ratio = 1.0;   // max/min local edge count
};

inline BalanceReport balance_report(const PartitionSet& ps) {
  BalanceReport r;
  Index total_local = 0, total_owned = 0;
  for (const auto& p : ps.parts) {
    r.owned_nodes.push_back(static_cast<Index>(p.owned.size()));
    r.local_nodes.push_back(p.local_count());
    r.local_edges.push_back(p.edge_count());
    total_local += p.local_count();
    total_owned += static_cast<Index>(p.owned.size());
  }
  auto ratio = [](const std::vector<Index>& v) {
    if (v.empty()) return 1.0;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *lo > 0 ? static_cast<double>(*hi) / static_cast<double>(*lo) : std::numeric_limits<double>::infinity();
  };
  r.replication_factor = total_owned > 0 ? static_cast<double>(total_local) / static_cast<double>(total_owned) : 1.0;
  r.owned_ratio = ratio(r.owned_nodes);
  r.edge_ratio = ratio(r.local_edges);
  return r;
}

}  // namespace xmgn
