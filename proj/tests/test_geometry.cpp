// SPDX-License-Identifier: Apache-2.0

#include "xmgn/geometry.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

using namespace xmgn;

namespace {

std::vector<unsigned char> binary_stl(const std::vector<std::array<float, 9>>& facets, std::uint32_t count) {
  std::vector<unsigned char> out(80, ' ');
  put_le<std::uint32_t>(out, count);
  for (const auto& f : facets) {
    for (int i = 0; i < 3; ++i) put_le<float>(out, 9.0f);  // bogus file normal, must be ignored
    for (float v : f) put_le<float>(out, v);
    put_le<std::uint16_t>(out, 0);
  }
  return out;
}

const std::array<float, 9> kRightTriangle{0, 0, 0, 1, 0, 0, 0, 1, 0};

TriangleSoup unit_cube() {
  TriangleSoup s;
  for (int i = 0; i < 8; ++i) s.vertices.emplace_back(i & 1, (i >> 1) & 1, (i >> 2) & 1);
  // outward winding
  s.triangles = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
                 {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  s.update_metrics();
  return s;
}

}  // namespace

TEST(ParseStl, BinaryRightTriangle) {
  const auto soup = parse_stl(binary_stl({kRightTriangle}, 1));
  ASSERT_EQ(soup.vertices.size(), 3u);
  ASSERT_EQ(soup.triangle_count(), 1);
  EXPECT_DOUBLE_EQ(soup.face_areas[0], 0.5);
  EXPECT_TRUE(soup.face_normals[0].isApprox(Vec3(0, 0, 1)));
}

TEST(ParseStl, AsciiMatchesBinary) {
  const std::string text =
      "solid t\n  facet normal 0 0 -1\n    outer loop\n      vertex 0 0 0\n      vertex 1 0 0\n"
      "      vertex 0 1 0\n    endloop\n  endfacet\nendsolid t\n";
  const auto a = parse_stl(std::string_view(text));
  const auto b = parse_stl(binary_stl({kRightTriangle}, 1));
  EXPECT_EQ(a.vertices, b.vertices);
  EXPECT_EQ(a.triangles, b.triangles);
  EXPECT_EQ(a.face_normals, b.face_normals);
  EXPECT_EQ(a.face_areas, b.face_areas);
}

TEST(ParseStl, TruncatedBinaryNamesExpectedLength) {
  const auto bytes = binary_stl({kRightTriangle}, 2);
  try {
    parse_stl(bytes);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("184"), std::string::npos) << msg;
    EXPECT_NE(msg.find("byte offset 134"), std::string::npos) << msg;
  }
}

TEST(ParseStl, AsciiFacetWithTwoVerticesNamesLine) {
  const std::string text =
      "solid t\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\nvertex 1 0 0\nendloop\nendfacet\nendsolid\n";
  try {
    parse_stl(std::string_view(text));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line"), std::string::npos) << e.what();
  }
}

TEST(ParseStl, TooShortInput) { EXPECT_THROW(parse_stl(std::string_view("xx")), ParseError); }

TEST(ParseStl, SharedVerticesMerged) {
  const auto soup = parse_stl(binary_stl({kRightTriangle, {1, 0, 0, 1, 1, 0, 0, 1, 0}}, 2));
  EXPECT_EQ(soup.vertices.size(), 4u);
  EXPECT_EQ(soup.triangle_count(), 2);
}

TEST(ParseStl, RoundTripIsIdentical) {
  const auto sphere = make_icosphere(2);
  const auto once = parse_stl(write_stl_binary(sphere));
  const auto twice = parse_stl(write_stl_binary(once));
  EXPECT_EQ(once.vertices, twice.vertices);
  EXPECT_EQ(once.triangles, twice.triangles);
  EXPECT_EQ(once.face_areas, twice.face_areas);
  const auto ascii = parse_stl(std::string_view(write_stl_ascii(once)));
  EXPECT_EQ(ascii.triangles, once.triangles);
}

TEST(TriangleSoup, MetricInvariants) {
  const auto s = make_superellipsoid(3, Vec3(1.0, 0.7, 1.3), 2.5);
  for (Index t = 0; t < s.triangle_count(); ++t) {
    auto [a, b, c] = s.corners(t);
    const double area = 0.5 * (b - a).cross(c - a).norm();
    EXPECT_NEAR(s.face_areas[static_cast<std::size_t>(t)], area, 1e-9 * area);
    EXPECT_NEAR(s.face_normals[static_cast<std::size_t>(t)].norm(), 1.0, 1e-6);
    for (Index v : s.triangles[static_cast<std::size_t>(t)]) EXPECT_LT(v, static_cast<Index>(s.vertices.size()));
  }
}

TEST(TriangleSoup, DegenerateFaceHasZeroNormal) {
  TriangleSoup s;
  s.vertices = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  s.triangles = {{0, 1, 2}};
  s.update_metrics();
  EXPECT_EQ(s.face_areas[0], 0.0);
  EXPECT_EQ(s.face_normals[0], Vec3::Zero());
}

TEST(SampleSurface, EmptyAndBarycentric) {
  const auto soup = parse_stl(binary_stl({kRightTriangle}, 1));
  EXPECT_TRUE(sample_surface(soup, 0, 1).empty());
  for (const auto& s : sample_surface(soup, 500, 3)) {
    const double x = s.position.x(), y = s.position.y();
    EXPECT_NEAR(s.position.z(), 0.0, 1e-12);
    EXPECT_GE(x, -1e-12);
    EXPECT_GE(y, -1e-12);
    EXPECT_LE(x + y, 1.0 + 1e-12);
    EXPECT_EQ(s.normal, Vec3(0, 0, 1));
  }
}

TEST(SampleSurface, PointsLieOnTheirTriangle) {
  const auto soup = make_icosphere(2);
  const auto [lo, hi] = soup.bounding_box();
  const double diag = (hi - lo).norm();
  for (const auto& s : sample_surface(soup, 2000, 9)) {
    auto [a, b, c] = soup.corners(s.triangle_id);
    const Vec3 n = soup.face_normals[static_cast<std::size_t>(s.triangle_id)];
    EXPECT_LE(std::abs((s.position - a).dot(n)), 1e-7 * diag);
    // barycentrics via areas
    const double A = soup.face_areas[static_cast<std::size_t>(s.triangle_id)];
    const double wa = 0.5 * (b - s.position).cross(c - s.position).dot(n) / A;
    const double wb = 0.5 * (c - s.position).cross(a - s.position).dot(n) / A;
    const double wc = 0.5 * (a - s.position).cross(b - s.position).dot(n) / A;
    EXPECT_NEAR(wa + wb + wc, 1.0, 1e-7);
    for (double w : {wa, wb, wc}) {
      EXPECT_GE(w, -1e-7);
      EXPECT_LE(w, 1.0 + 1e-7);
    }
  }
}

TEST(SampleSurface, AreaWeightedSelectionBinomialBound) {
  TriangleSoup s;
  s.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 2, 0}, {10, 0, 0}, {13, 0, 0}, {10, 2, 0}};
  s.triangles = {{0, 1, 2}, {3, 4, 5}};  // areas 1 and 3
  s.update_metrics();
  ASSERT_DOUBLE_EQ(s.face_areas[0], 1.0);
  ASSERT_DOUBLE_EQ(s.face_areas[1], 3.0);
  for (std::uint64_t seed : {1u, 2u, 3u, 99u}) {
    Index big = 0;
    for (const auto& p : sample_surface(s, 10000, seed)) big += p.triangle_id == 1;
    EXPECT_GE(big, 7357);
    EXPECT_LE(big, 7643);
  }
}

TEST(SampleSurface, DegenerateFacesNeverChosen) {
  TriangleSoup s;
  s.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {2, 0, 0}};
  s.triangles = {{0, 1, 3}, {0, 1, 2}, {0, 3, 1}};
  s.update_metrics();
  for (const auto& p : sample_surface(s, 1000, 5)) EXPECT_EQ(p.triangle_id, 1);
}

TEST(SampleSurface, ZeroAreaThrowsAndDeterministic) {
  TriangleSoup s;
  s.vertices = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  s.triangles = {{0, 1, 2}};
  s.update_metrics();
  EXPECT_THROW(sample_surface(s, 3, 1), ConfigError);
  const auto sphere = make_icosphere(1);
  const auto a = sample_surface(sphere, 100, 42), b = sample_surface(sphere, 100, 42);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].position, b[i].position);
}

TEST(ClosestPoint, RegionsAgainstDenseSampling) {
  const Vec3 a(0, 0, 0), b(1, 0, 0), c(0, 1, 0);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> uni(-1.5, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec3 p(uni(rng), uni(rng), uni(rng));
    const double d = (closest_point_on_triangle(p, a, b, c) - p).norm();
    double best = 1e300;
    for (int i = 0; i <= 200; ++i)
      for (int j = 0; i + j <= 200; ++j) {
        const Vec3 q = a + (b - a) * (i / 200.0) + (c - a) * (j / 200.0);
        best = std::min(best, (q - p).norm());
      }
    EXPECT_LE(d, best + 1e-12);
    EXPECT_GE(d, best - 0.01);
  }
}

TEST(SignedDistance, VertexCoincidentVoxelIsZero) {
  const auto cube = unit_cube();
  const auto sdf = signed_distance_grid(cube, Vec3(0, 0, 0), 1.0, {2, 2, 2});
  for (double v : sdf.distance.values) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(SignedDistance, SphereCenterAndEikonal) {
  const auto sphere = make_icosphere(3);
  // 9^3 grid centered at the origin, spacing 0.5: voxel (4,4,4) is the centre.
  const auto sdf = signed_distance_grid(sphere, Vec3(-2, -2, -2), 0.5, {9, 9, 9});
  EXPECT_NEAR(sdf.distance.at(4, 4, 4), -1.0, 0.01);
  // Voxels 2 units from the centre sit on the grid boundary (one-sided differences).
  for (auto ijk : {std::array<Index, 3>{8, 4, 4}, std::array<Index, 3>{4, 0, 4}, std::array<Index, 3>{4, 4, 8}}) {
    const Index i = ijk[0], j = ijk[1], k = ijk[2];
    const Vec3 g(sdf.gradient[0].at(i, j, k), sdf.gradient[1].at(i, j, k), sdf.gradient[2].at(i, j, k));
    EXPECT_NEAR(g.norm(), 1.0, 0.05) << i << "," << j << "," << k;
  }
}

TEST(SignedDistance, SignFlipsOnceAlongLine) {
  const auto cube = unit_cube();
  const auto sdf = signed_distance_grid(cube, Vec3(-0.45, 0.37, 0.52), 0.1, {20, 1, 1});
  int flips = 0;
  for (Index i = 1; i < 20; ++i) flips += (sdf.distance.at(i - 1, 0, 0) < 0) != (sdf.distance.at(i, 0, 0) < 0);
  EXPECT_EQ(flips, 2);  // enters and leaves the cube: each crossing is one flip
  EXPECT_GT(sdf.distance.at(0, 0, 0), 0.0);
  EXPECT_LT(sdf.distance.at(10, 0, 0), 0.0);
}

TEST(SignedDistance, NonFiniteVertexThrows) {
  auto cube = unit_cube();
  cube.vertices[3].x() = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(signed_distance_grid(cube, Vec3::Zero(), 1.0, {2, 2, 2}), NumericError);
}

TEST(GridDerivative, LinearFieldExact) {
  ScalarGrid g(Vec3(0.3, -1, 2), Vec3(0.5, 0.25, 2.0), {5, 4, 3});
  for (Index k = 0; k < 3; ++k)
    for (Index j = 0; j < 4; ++j)
      for (Index i = 0; i < 5; ++i) {
        const Vec3 c = g.center(i, j, k);
        g.values[static_cast<std::size_t>(g.index(i, j, k))] = 2 * c.x() - 3 * c.y() + 0.5 * c.z();
      }
  const auto grad = grid_gradient(g);
  for (std::size_t n = 0; n < g.values.size(); ++n) {
    EXPECT_NEAR(grad[0].values[n], 2.0, 1e-12);
    EXPECT_NEAR(grad[1].values[n], -3.0, 1e-12);
    EXPECT_NEAR(grad[2].values[n], 0.5, 1e-12);
  }
}
