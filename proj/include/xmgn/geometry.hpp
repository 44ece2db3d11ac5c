// SPDX-License-Identifier: Apache-2.0
//
// Tessellated geometry: STL ingestion, triangle metrics, area-uniform surface
// sampling and signed distance grids.

#pragma once

#include "xmgn/common.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xmgn {

using Triangle = std::array<Index, 3>;

/// Indexed triangle set. Normals and areas always follow vertex winding.
struct TriangleSoup {
  std::vector<Vec3> vertices;
  std::vector<Triangle> triangles;
  std::vector<Vec3> face_normals;
  std::vector<double> face_areas;

  Index triangle_count() const { return static_cast<Index>(triangles.size()); }

  double total_area() const {
    double sum = 0.0;
    for (double a : face_areas) sum += a;
    return sum;
  }

  std::array<Vec3, 3> corners(Index t) const {
    const auto& tri = triangles[static_cast<std::size_t>(t)];
    return {vertices[static_cast<std::size_t>(tri[0])], vertices[static_cast<std::size_t>(tri[1])],
            vertices[static_cast<std::size_t>(tri[2])]};
  }

  std::pair<Vec3, Vec3> bounding_box() const {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (const auto& v : vertices) {
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
    return {lo, hi};
  }

  /// Recomputes normals and areas from the current vertices and winding.
  void update_metrics() {
    face_normals.resize(triangles.size());
    face_areas.resize(triangles.size());
    for (std::size_t t = 0; t < triangles.size(); ++t) {
      auto [a, b, c] = corners(static_cast<Index>(t));
      const Vec3 cross = (b - a).cross(c - a);
      const double norm = cross.norm();
      face_areas[t] = 0.5 * norm;
      face_normals[t] = norm > 0.0 ? Vec3(cross / norm) : Vec3::Zero();
    }
  }
};

struct SurfaceSample {
  Vec3 position;
  Vec3 normal;
  Index triangle_id = 0;
};

/// Regular grid of scalars; voxel (i,j,k) is centred at origin + (i,j,k)*spacing.
struct ScalarGrid {
  Vec3 origin = Vec3::Zero();
  Vec3 spacing = Vec3::Ones();
  std::array<Index, 3> dims{1, 1, 1};
  std::vector<double> values;

  ScalarGrid() = default;
  ScalarGrid(Vec3 origin_, Vec3 spacing_, std::array<Index, 3> dims_)
      : origin(origin_), spacing(spacing_), dims(dims_),
        values(static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]), 0.0) {}

  Index size() const { return dims[0] * dims[1] * dims[2]; }
  Index index(Index i, Index j, Index k) const { return i + dims[0] * (j + dims[1] * k); }
  double& at(Index i, Index j, Index k) { return values[static_cast<std::size_t>(index(i, j, k))]; }
  double at(Index i, Index j, Index k) const {
    return values[static_cast<std::size_t>(index(i, j, k))];
  }
  Vec3 center(Index i, Index j, Index k) const {
    return origin + Vec3(static_cast<double>(i) * spacing.x(), static_cast<double>(j) * spacing.y(),
                         static_cast<double>(k) * spacing.z());
  }
  bool same_layout(const ScalarGrid& o) const {
    return origin == o.origin && spacing == o.spacing && dims == o.dims;
  }
};

namespace detail {

class VertexMerger {
 public:
  explicit VertexMerger(double tol) : tol_(tol) {}

  Index insert(const Vec3& v, std::vector<Vec3>& vertices) {
    const auto key = cell(v);
    for (long dx = -1; dx <= 1; ++dx)
      for (long dy = -1; dy <= 1; ++dy)
        for (long dz = -1; dz <= 1; ++dz) {
          auto it = buckets_.find(Key{key.x + dx, key.y + dy, key.z + dz});
          if (it == buckets_.end()) continue;
          for (Index idx : it->second) {
            if ((vertices[static_cast<std::size_t>(idx)] - v).cwiseAbs().maxCoeff() <= tol_) return idx;
          }
        }
    const auto idx = static_cast<Index>(vertices.size());
    vertices.push_back(v);
    buckets_[key].push_back(idx);
    return idx;
  }

 private:
  struct Key {
    long long x, y, z;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      std::uint64_t h = mix_seed(static_cast<std::uint64_t>(k.x), 1);
      h = mix_seed(h ^ static_cast<std::uint64_t>(k.y), 2);
      return static_cast<std::size_t>(mix_seed(h ^ static_cast<std::uint64_t>(k.z), 3));
    }
  };
  Key cell(const Vec3& v) const {
    return Key{static_cast<long long>(std::floor(v.x() / tol_)),
               static_cast<long long>(std::floor(v.y() / tol_)),
               static_cast<long long>(std::floor(v.z() / tol_))};
  }

  double tol_;
  std::unordered_map<Key, std::vector<Index>, KeyHash> buckets_;
};

inline bool looks_like_ascii_stl(std::string_view text) {
  std::size_t pos = text.find_first_not_of(" \t\r\n");
  if (pos == std::string_view::npos || text.substr(pos, 5) != "solid") return false;
  return text.find("facet") != std::string_view::npos || text.find("endsolid") != std::string_view::npos;
}

inline double parse_number(std::string_view tok, std::size_t line) {
  double value = 0.0;
  // from_chars does not accept a leading '+'.
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    throw ParseError("ASCII STL line " + std::to_string(line) + ": invalid number '" +
                     std::string(tok) + "'");
  }
  return value;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

// Raw facets as float-rounded corner triples, in file order.
inline std::vector<std::array<Vec3, 3>> read_ascii_facets(std::string_view text) {
  std::vector<std::array<Vec3, 3>> facets;
  std::vector<Vec3> loop;
  bool in_loop = false;
  std::size_t loop_line = 0;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    auto toks = split_ws(text.substr(start, end - start));
    start = end + 1;
    if (toks.empty()) continue;
    if (toks[0] == "outer") {
      in_loop = true;
      loop.clear();
      loop_line = line_no;
    } else if (toks[0] == "vertex") {
      if (!in_loop) throw ParseError("ASCII STL line " + std::to_string(line_no) + ": vertex outside loop");
      if (toks.size() != 4) {
        throw ParseError("ASCII STL line " + std::to_string(line_no) + ": vertex needs 3 coordinates");
      }
      Vec3 v;
      for (int c = 0; c < 3; ++c) {
        v[c] = static_cast<double>(static_cast<float>(parse_number(toks[static_cast<std::size_t>(c) + 1], line_no)));
      }
      loop.push_back(v);
    } else if (toks[0] == "endloop") {
      if (loop.size() != 3) {
        throw ParseError("ASCII STL line " + std::to_string(loop_line) + ": facet has " +
                         std::to_string(loop.size()) + " vertices, expected 3");
      }
      facets.push_back({loop[0], loop[1], loop[2]});
      in_loop = false;
    }
    if (end == text.size()) break;
  }
  if (in_loop) throw ParseError("ASCII STL line " + std::to_string(loop_line) + ": unterminated loop");
  return facets;
}

inline std::vector<std::array<Vec3, 3>> read_binary_facets(std::span<const unsigned char> bytes) {
  const auto count = get_le<std::uint32_t>(bytes.data() + 80);
  const std::size_t expected = 84 + 50 * static_cast<std::size_t>(count);
  if (bytes.size() != expected) {
    const std::size_t complete = (bytes.size() - 84) / 50;
    const std::size_t offset = 84 + 50 * complete;
    throw ParseError("binary STL truncated or oversized: header declares " + std::to_string(count) +
                     " triangles, expected length " + std::to_string(expected) + " bytes, got " +
                     std::to_string(bytes.size()) + "; record " + std::to_string(complete) +
                     " at byte offset " + std::to_string(offset) + " is incomplete");
  }
  std::vector<std::array<Vec3, 3>> facets(count);
  for (std::size_t t = 0; t < count; ++t) {
    const unsigned char* rec = bytes.data() + 84 + 50 * t + 12;  // skip stored normal
    for (int c = 0; c < 3; ++c) {
      for (int d = 0; d < 3; ++d) {
        facets[t][static_cast<std::size_t>(c)][d] =
            static_cast<double>(get_le<float>(rec + 12 * c + 4 * d));
      }
    }
  }
  return facets;
}

}  // namespace detail

inline constexpr double kVertexMergeTolerance = 1e-9;

/// Builds a soup from raw facets, merging co-located vertices.
inline TriangleSoup soup_from_facets(const std::vector<std::array<Vec3, 3>>& facets) {
  TriangleSoup soup;
  detail::VertexMerger merger(kVertexMergeTolerance);
  soup.triangles.reserve(facets.size());
  for (const auto& f : facets) {
    Triangle tri;
    for (int c = 0; c < 3; ++c) {
      if (!all_finite(f[static_cast<std::size_t>(c)])) throw ParseError("STL contains a non-finite vertex");
      tri[static_cast<std::size_t>(c)] = merger.insert(f[static_cast<std::size_t>(c)], soup.vertices);
    }
    soup.triangles.push_back(tri);
  }
  soup.update_metrics();
  return soup;
}

/// Parses ASCII or binary STL (auto-detected). Stored file normals are ignored.
inline TriangleSoup parse_stl(std::span<const unsigned char> bytes) {
  if (bytes.size() >= 84) {
    const auto count = get_le<std::uint32_t>(bytes.data() + 80);
    if (84 + 50 * static_cast<std::size_t>(count) == bytes.size()) {
      return soup_from_facets(detail::read_binary_facets(bytes));
    }
  }
  std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  if (detail::looks_like_ascii_stl(text)) return soup_from_facets(detail::read_ascii_facets(text));
  if (bytes.size() >= 84) return soup_from_facets(detail::read_binary_facets(bytes));
  throw ParseError("STL input of " + std::to_string(bytes.size()) +
                   " bytes is neither ASCII STL nor a binary STL (minimum 84 bytes)");
}

inline TriangleSoup parse_stl(std::string_view text) {
  return parse_stl(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

inline std::vector<unsigned char> write_stl_binary(const TriangleSoup& soup, std::string_view header = "xmgn") {
  std::vector<unsigned char> out(80, 0);
  std::copy_n(header.begin(), std::min<std::size_t>(header.size(), 80), out.begin());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(soup.triangles.size()));
  for (Index t = 0; t < soup.triangle_count(); ++t) {
    const auto& n = soup.face_normals[static_cast<std::size_t>(t)];
    for (int d = 0; d < 3; ++d) put_le<float>(out, static_cast<float>(n[d]));
    for (const auto& v : soup.corners(t)) {
      for (int d = 0; d < 3; ++d) put_le<float>(out, static_cast<float>(v[d]));
    }
    put_le<std::uint16_t>(out, 0);
  }
  return out;
}

inline std::string write_stl_ascii(const TriangleSoup& soup, std::string_view name = "xmgn") {
  std::ostringstream os;
  os.precision(9);
  os << "solid " << name << "\n";
  for (Index t = 0; t < soup.triangle_count(); ++t) {
    const auto& n = soup.face_normals[static_cast<std::size_t>(t)];
    os << "  facet normal " << n.x() << ' ' << n.y() << ' ' << n.z() << "\n    outer loop\n";
    for (const auto& v : soup.corners(t)) {
      os << "      vertex " << static_cast<float>(v.x()) << ' ' << static_cast<float>(v.y()) << ' '
         << static_cast<float>(v.z()) << "\n";
    }
    os << "    endloop\n  endfacet\n";
  }
  os << "endsolid " << name << "\n";
  return os.str();
}

/// Area-proportional triangle choice, then square-root barycentric map inside
/// the chosen triangle. Zero-area triangles are never chosen.
inline std::vector<SurfaceSample> sample_surface(const TriangleSoup& soup, Index n, std::uint64_t seed) {
  require(n >= 0, "sample_surface: negative sample count");
  std::vector<double> cdf(soup.face_areas.size());
  double total = 0.0;
  for (std::size_t t = 0; t < cdf.size(); ++t) {
    total += soup.face_areas[t];
    cdf[t] = total;
  }
  if (n == 0) return {};
  if (!(total > 0.0)) throw ConfigError("sample_surface: total surface area is zero");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<SurfaceSample> out(static_cast<std::size_t>(n));
  for (auto& s : out) {
    const double pick = uni(rng) * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), pick);
    if (it == cdf.end()) it = std::prev(cdf.end());
    auto t = static_cast<Index>(it - cdf.begin());
    // upper_bound never lands on a zero-area face, except through the clamp above.
    while (soup.face_areas[static_cast<std::size_t>(t)] <= 0.0) --t;
    const double r1 = uni(rng);
    const double r2 = uni(rng);
    const double sr = std::sqrt(r1);
    const double u = 1.0 - sr;
    const double v = r2 * sr;
    const double w = sr * (1.0 - r2);
    auto [a, b, c] = soup.corners(t);
    s.position = u * a + w * b + v * c;
    s.normal = soup.face_normals[static_cast<std::size_t>(t)];
    s.triangle_id = t;
  }
  return out;
}

/// Closest point on triangle abc to p (Ericson, Real-Time Collision Detection 5.1.5).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double den = d1 - d3;
    return den > 0.0 ? Vec3(a + (d1 / den) * ab) : a;
  }
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double den = d2 - d6;
    return den > 0.0 ? Vec3(a + (d2 / den) * ac) : a;
  }
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double den = (d4 - d3) + (d5 - d6);
    return den > 0.0 ? Vec3(b + ((d4 - d3) / den) * (c - b)) : b;
  }
  const double sum = va + vb + vc;
  if (!(sum > 0.0)) return a;  // degenerate
  const double denom = 1.0 / sum;
  return a + ab * (vb * denom) + ac * (vc * denom);
}

namespace detail {

// Moller-Trumbore; counts hits with t > 0.
inline bool ray_hits_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 pvec = dir.cross(e2);
  const double det = e1.dot(pvec);
  if (std::abs(det) < 1e-300) return false;
  const double inv = 1.0 / det;
  const Vec3 tvec = origin - a;
  const double u = tvec.dot(pvec) * inv;
  if (u < 0.0 || u > 1.0) return false;
  const Vec3 qvec = tvec.cross(e1);
  const double v = dir.dot(qvec) * inv;
  if (v < 0.0 || u + v > 1.0) return false;
  return e2.dot(qvec) * inv > 0.0;
}

inline const std::array<Vec3, 3>& parity_directions() {
  static const std::array<Vec3, 3> dirs = {Vec3(0.8017, 0.4422, 0.4023).normalized(),
                                           Vec3(-0.3317, 0.8773, -0.3469).normalized(),
                                           Vec3(0.1291, -0.2671, 0.9550).normalized()};
  return dirs;
}

}  // namespace detail

/// Unsigned distance from p to the nearest triangle (brute force).
inline double distance_to_soup(const TriangleSoup& soup, const Vec3& p) {
  double best = std::numeric_limits<double>::infinity();
  for (Index t = 0; t < soup.triangle_count(); ++t) {
    auto [a, b, c] = soup.corners(t);
    best = std::min(best, (closest_point_on_triangle(p, a, b, c) - p).squaredNorm());
  }
  return std::sqrt(best);
}

/// Majority vote over three jittered ray-parity tests.
inline bool inside_soup(const TriangleSoup& soup, const Vec3& p) {
  int votes = 0;
  for (const auto& dir : detail::parity_directions()) {
    int hits = 0;
    for (Index t = 0; t < soup.triangle_count(); ++t) {
      auto [a, b, c] = soup.corners(t);
      if (detail::ray_hits_triangle(p, dir, a, b, c)) ++hits;
    }
    if (hits % 2 == 1) ++votes;
  }
  return votes >= 2;
}

/// d f / d axis by first-order central differences, one-sided at the grid boundary.
inline ScalarGrid axis_derivative(const ScalarGrid& f, int axis) {
  ScalarGrid out(f.origin, f.spacing, f.dims);
  const auto a = static_cast<std::size_t>(axis);
  const Index n = f.dims[a];
  const double h = f.spacing[axis];
  const Index stride = axis == 0 ? 1 : (axis == 1 ? f.dims[0] : f.dims[0] * f.dims[1]);
  for (Index k = 0; k < f.dims[2]; ++k)
    for (Index j = 0; j < f.dims[1]; ++j)
      for (Index i = 0; i < f.dims[0]; ++i) {
        const std::array<Index, 3> ijk{i, j, k};
        const Index c = ijk[a];
        const Index idx = f.index(i, j, k);
        auto at = [&](Index m) { return f.values[static_cast<std::size_t>(idx + (m - c) * stride)]; };
        double g = 0.0;
        if (n >= 3 && c > 0 && c < n - 1) {
          g = (at(c + 1) - at(c - 1)) / (2.0 * h);
        } else if (n >= 2 && c == 0) {
          g = (at(1) - at(0)) / h;
        } else if (n >= 2) {
          g = (at(n - 1) - at(n - 2)) / h;
        }
        out.values[static_cast<std::size_t>(idx)] = g;
      }
  return out;
}

inline std::array<ScalarGrid, 3> grid_gradient(const ScalarGrid& f) {
  return {axis_derivative(f, 0), axis_derivative(f, 1), axis_derivative(f, 2)};
}

struct SignedDistanceField {
  ScalarGrid distance;
  std::array<ScalarGrid, 3> gradient;
};

/// Signed distance (negative inside) at every voxel centre, plus its gradient.
inline SignedDistanceField signed_distance_grid(const TriangleSoup& soup, const Vec3& origin, double spacing,
                                                std::array<Index, 3> dims) {
  require(spacing > 0.0, "signed_distance_grid: spacing must be positive");
  require(dims[0] > 0 && dims[1] > 0 && dims[2] > 0, "signed_distance_grid: dims must be positive");
  for (const auto& v : soup.vertices) {
    if (!all_finite(v)) throw NumericError("signed_distance_grid: non-finite vertex coordinate");
  }
  require(soup.triangle_count() > 0, "signed_distance_grid: empty soup");
  SignedDistanceField out;
  out.distance = ScalarGrid(origin, Vec3::Constant(spacing), dims);
  for (Index k = 0; k < dims[2]; ++k)
    for (Index j = 0; j < dims[1]; ++j)
      for (Index i = 0; i < dims[0]; ++i) {
        const Vec3 p = out.distance.center(i, j, k);
        const double d = distance_to_soup(soup, p);
        out.distance.at(i, j, k) = (d > 0.0 && inside_soup(soup, p)) ? -d : d;
      }
  out.gradient = grid_gradient(out.distance);
  return out;
}

/// Icosahedron subdivided `subdivisions` times and projected onto a sphere.
inline TriangleSoup make_icosphere(int subdivisions, double radius = 1.0, const Vec3& center = Vec3::Zero()) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                             {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : verts) v.normalize();
  std::vector<Triangle> tris = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::unordered_map<std::uint64_t, Index> midpoint;
    auto mid = [&](Index a, Index b) {
      const auto key = (static_cast<std::uint64_t>(std::min(a, b)) << 32) | static_cast<std::uint64_t>(std::max(a, b));
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const auto idx = static_cast<Index>(verts.size());
      verts.push_back((verts[static_cast<std::size_t>(a)] + verts[static_cast<std::size_t>(b)]).normalized());
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<Triangle> next;
    next.reserve(tris.size() * 4);
    for (const auto& tri : tris) {
      const Index ab = mid(tri[0], tri[1]), bc = mid(tri[1], tri[2]), ca = mid(tri[2], tri[0]);
      next.push_back({tri[0], ab, ca});
      next.push_back({tri[1], bc, ab});
      next.push_back({tri[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    tris = std::move(next);
  }
  TriangleSoup soup;
  soup.vertices.reserve(verts.size());
  for (const auto& v : verts) soup.vertices.push_back(center + radius * v);
  soup.triangles = std::move(tris);
  soup.update_metrics();
  return soup;
}

/// Radially maps an icosphere onto |x/a|^e + |y/b|^e + |z/c|^e = 1.
inline TriangleSoup make_superellipsoid(int subdivisions, const Vec3& semi_axes, double exponent) {
  require(exponent > 0.0, "superellipsoid exponent must be positive");
  TriangleSoup soup = make_icosphere(subdivisions);
  for (auto& v : soup.vertices) {
    double level = 0.0;
    for (int d = 0; d < 3; ++d) level += std::pow(std::abs(v[d] / semi_axes[d]), exponent);
    v /= std::pow(level, 1.0 / exponent);
  }
  soup.update_metrics();
  return soup;
}

}  // namespace xmgn
