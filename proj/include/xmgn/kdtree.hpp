// SPDX-License-Identifier: Apache-2.0
//
// Exact k-nearest-neighbour search over 3D points.

#pragma once

#include "xmgn/common.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <vector>

namespace xmgn {

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

struct Neighbor {
  Index index = 0;
  double dist2 = 0.0;

  // Total order used everywhere: distance first, then smaller index.
  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
  }
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Static kd-tree. Query results are exact under the (distance, index) order,
/// so they match an exhaustive scan bit for bit.
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), Index{0});
    if (!points_.empty()) build(0, static_cast<Index>(order_.size()));
  }

  Index size() const { return static_cast<Index>(points_.size()); }

  /// The k nearest points to `query`, excluding index `exclude` (pass -1 to keep all).
  std::vector<Neighbor> knn(const Vec3& query, Index k, Index exclude = -1) const {
    std::vector<Neighbor> out;
    if (k <= 0 || nodes_.empty()) return out;
    std::priority_queue<Neighbor> heap;  // max-heap: top is the current worst
    search_knn(0, query, k, exclude, heap);
    out.resize(heap.size());
    for (auto it = out.rbegin(); it != out.rend(); ++it) {
      *it = heap.top();
      heap.pop();
    }
    return out;
  }

  /// All points with squared distance <= radius^2, sorted by (distance, index).
  std::vector<Neighbor> radius(const Vec3& query, double radius, Index exclude = -1) const {
    std::vector<Neighbor> out;
    if (nodes_.empty()) return out;
    search_radius(0, query, radius * radius, exclude, out);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  static constexpr Index kLeafSize = 8;

  struct Node {
    Index begin = 0, end = 0;
    Index left = -1, right = -1;
    Vec3 lo, hi;
  };

  Index build(Index begin, Index end) {
    Node node;
    node.begin = begin;
    node.end = end;
    node.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    node.hi = -node.lo;
    for (Index i = begin; i < end; ++i) {
      const auto& p = points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])];
      node.lo = node.lo.cwiseMin(p);
      node.hi = node.hi.cwiseMax(p);
    }
    const auto id = static_cast<Index>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin > kLeafSize) {
      int axis = 0;
      (node.hi - node.lo).maxCoeff(&axis);
      const Index mid = begin + (end - begin) / 2;
      std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, [&](Index a, Index b) {
        const double ca = points_[static_cast<std::size_t>(a)][axis];
        const double cb = points_[static_cast<std::size_t>(b)][axis];
        return ca < cb || (ca == cb && a < b);
      });
      const Index left = build(begin, mid);
      const Index right = build(mid, end);
      nodes_[static_cast<std::size_t>(id)].left = left;
      nodes_[static_cast<std::size_t>(id)].right = right;
    }
    return id;
  }

  static double box_distance2(const Node& n, const Vec3& q) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      double d = 0.0;
      if (q[a] < n.lo[a]) d = n.lo[a] - q[a];
      else if (q[a] > n.hi[a]) d = q[a] - n.hi[a];
      d2 += d * d;
    }
    return d2;
  }

  void search_knn(Index id, const Vec3& q, Index k, Index exclude, std::priority_queue<Neighbor>& heap) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    // Equal box distance must still be explored: a tie may carry a smaller index.
    if (static_cast<Index>(heap.size()) == k && box_distance2(n, q) > heap.top().dist2) return;
    if (n.left < 0) {
      for (Index i = n.begin; i < n.end; ++i) {
        const Index idx = order_[static_cast<std::size_t>(i)];
        if (idx == exclude) continue;
        Neighbor cand{idx, squared_distance(points_[static_cast<std::size_t>(idx)], q)};
        if (static_cast<Index>(heap.size()) < k) {
          heap.push(cand);
        } else if (cand < heap.top()) {
          heap.pop();
          heap.push(cand);
        }
      }
      return;
    }
    const double dl = box_distance2(nodes_[static_cast<std::size_t>(n.left)], q);
    const double dr = box_distance2(nodes_[static_cast<std::size_t>(n.right)], q);
    if (dl <= dr) {
      search_knn(n.left, q, k, exclude, heap);
      search_knn(n.right, q, k, exclude, heap);
    } else {
      search_knn(n.right, q, k, exclude, heap);
      search_knn(n.left, q, k, exclude, heap);
    }
  }

  void search_radius(Index id, const Vec3& q, double r2, Index exclude, std::vector<Neighbor>& out) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (box_distance2(n, q) > r2) return;
    if (n.left < 0) {
      for (Index i = n.begin; i < n.end; ++i) {
        const Index idx = order_[static_cast<std::size_t>(i)];
        if (idx == exclude) continue;
        const double d2 = squared_distance(points_[static_cast<std::size_t>(idx)], q);
        if (d2 <= r2) out.push_back({idx, d2});
      }
      return;
    }
    search_radius(n.left, q, r2, exclude, out);
    search_radius(n.right, q, r2, exclude, out);
  }

  std::vector<Vec3> points_;
  std::vector<Index> order_;
  std::vector<Node> nodes_;
};

}  // namespace xmgn
