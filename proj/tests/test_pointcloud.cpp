// SPDX-License-Identifier: Apache-2.0

#include "xmgn/pointcloud.hpp"

#include "oracles.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include <numbers>

using namespace xmgn;

TEST(Multiscale, PrefixNestingIsBitwise) {
  const auto soup = make_icosphere(2);
  const std::vector<Index> counts{100, 200, 400};
  const auto cloud = multiscale_sample(soup, counts, 5);
  ASSERT_EQ(cloud.size(), 400);
  const auto level0 = multiscale_sample(soup, std::vector<Index>{100}, 5);
  const auto level01 = multiscale_sample(soup, std::vector<Index>{100, 200}, 5);
  EXPECT_EQ(std::memcmp(level0.positions.data(), cloud.positions.data(), 100 * sizeof(Vec3)), 0);
  EXPECT_EQ(std::memcmp(level01.positions.data(), cloud.positions.data(), 200 * sizeof(Vec3)), 0);
  for (const auto& n : cloud.normals) EXPECT_NEAR(n.norm(), 1.0, 1e-6);
}

TEST(Multiscale, SingleLevelEqualsSampleSurface) {
  const auto soup = make_icosphere(1);
  const auto cloud = multiscale_sample(soup, std::vector<Index>{50}, 9);
  const auto direct = sample_surface(soup, 50, level_seed(9, 0));
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(cloud.positions[i], direct[i].position);
}

TEST(Multiscale, RejectsNonIncreasing) {
  const auto soup = make_icosphere(1);
  EXPECT_THROW(multiscale_sample(soup, std::vector<Index>{100, 100}, 1), ConfigError);
  EXPECT_THROW(multiscale_sample(soup, std::vector<Index>{200, 100}, 1), ConfigError);
  EXPECT_THROW(multiscale_sample(soup, std::vector<Index>{0, 10}, 1), ConfigError);
  EXPECT_THROW(multiscale_sample(soup, std::vector<Index>{}, 1), ConfigError);
}

TEST(Sampling, ChiSquareAgainstAreas) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> uni(0.2, 2.0);
  for (int trial = 0; trial < 5; ++trial) {
    TriangleSoup s;
    const int tris = 3 + trial;
    for (int t = 0; t < tris; ++t) {
      const Vec3 o(3.0 * t, 0, 0);
      s.vertices.push_back(o);
      s.vertices.push_back(o + Vec3(uni(rng), 0, 0));
      s.vertices.push_back(o + Vec3(0, uni(rng), 0));
      s.triangles.push_back({3 * t, 3 * t + 1, 3 * t + 2});
    }
    s.update_metrics();
    const Index n = 10000;
    std::vector<double> counts(static_cast<std::size_t>(tris), 0.0);
    for (const auto& p : sample_surface(s, n, 100 + trial)) counts[static_cast<std::size_t>(p.triangle_id)] += 1;
    double chi2 = 0.0;
    for (int t = 0; t < tris; ++t) {
      const double expected = n * s.face_areas[static_cast<std::size_t>(t)] / s.total_area();
      chi2 += std::pow(counts[static_cast<std::size_t>(t)] - expected, 2) / expected;
    }
    const boost::math::chi_squared dist(tris - 1);
    const double crit = boost::math::quantile(boost::math::complement(dist, 0.001));
    EXPECT_NEAR(crit, oracle::chi2_upper_wilson_hilferty(tris - 1, 3.090232), 0.25 + 0.02 * crit);
    EXPECT_LT(chi2, crit) << "trial " << trial;
  }
}

TEST(Fourier, OriginAndQuarterPeriod) {
  const std::vector<Vec3> pts{{0, 0, 0}, {0.25, 0, 0}};
  const std::vector<double> freqs{2 * std::numbers::pi, 4 * std::numbers::pi, 8 * std::numbers::pi};
  const auto ff = fourier_features(pts, freqs);
  ASSERT_EQ(ff.cols(), 18);
  for (Index c = 0; c < 18; ++c) EXPECT_EQ(ff.values(0, c), c % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(ff.values(1, 0), 1.0, 1e-12);  // sin(2 pi x)
  EXPECT_NEAR(ff.values(1, 1), 0.0, 1e-12);  // cos(2 pi x)
  EXPECT_THROW(fourier_features(pts, std::vector<double>{}), ConfigError);
}

TEST(Fourier, BoundedAndSchemaWidth) {
  const auto soup = make_icosphere(2);
  const auto cloud = multiscale_sample(soup, std::vector<Index>{300}, 2);
  const auto f = node_features(cloud.positions, cloud.normals);
  EXPECT_EQ(f.cols(), 24);
  EXPECT_EQ(schema_width(f.schema), 24);
  EXPECT_LE(f.values.rightCols(18).cwiseAbs().maxCoeff(), 1.0);
  FeatureOptions no_pos;
  no_pos.include_positions = false;
  EXPECT_EQ(node_features(cloud.positions, cloud.normals, no_pos).cols(), 21);
}

TEST(Idw, HandExampleAndCoincidence) {
  const std::vector<Vec3> src{{1, 0, 0}, {-3, 0, 0}};
  MatrixD vals(2, 1);
  vals << 0.0, 4.0;
  const std::vector<Vec3> dst{{0, 0, 0}, {1, 0, 0}};
  const auto out = idw_transfer(src, vals, dst, 2);
  EXPECT_NEAR(out(0, 0), 1.0, 1e-12);
  EXPECT_EQ(out(1, 0), 0.0);
  EXPECT_THROW(idw_transfer(std::vector<Vec3>{}, MatrixD(0, 1), dst), ConfigError);
}

TEST(Idw, ConstantFieldAndConvexity) {
  const auto src = oracle::tie_heavy_cloud(300, 3);
  const auto dst = oracle::tie_heavy_cloud(200, 4);
  MatrixD c = MatrixD::Constant(300, 2, 3.25);
  const auto out = idw_transfer(src, c, dst);
  EXPECT_LE((out.array() - 3.25).abs().maxCoeff(), 1e-6);
  MatrixD r = MatrixD::Random(300, 1);
  const auto o2 = idw_transfer(src, r, dst, 5, 2.0);
  EXPECT_LE(o2.maxCoeff(), r.maxCoeff() + 1e-12);
  EXPECT_GE(o2.minCoeff(), r.minCoeff() - 1e-12);
}

TEST(Norm, HandExampleAndRoundTrip) {
  MatrixD v(2, 1);
  v << 1.0, 3.0;
  const auto s = fit_norm(v);
  EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(s.stddev[0], 1.0);
  EXPECT_DOUBLE_EQ(apply_norm(v, s)(1, 0), 1.0);

  MatrixD r = MatrixD::Random(100, 4) * 50.0;
  r.col(2).array() += 1e4;
  const auto st = fit_norm(r);
  const auto z = apply_norm(r, st);
  for (Index c = 0; c < 4; ++c) {
    EXPECT_NEAR(z.col(c).mean(), 0.0, 1e-6);
    EXPECT_NEAR(std::sqrt(z.col(c).array().square().mean()), 1.0, 1e-6);
  }
  const auto back = invert_norm(z, st);
  EXPECT_LE(((back - r).array().abs() / r.array().abs().max(1e-12)).maxCoeff(), 1e-6);
}

TEST(Norm, ConstantClampedWithWarning) {
  MatrixD v = MatrixD::Constant(3, 1, 5.0);
  const auto s = fit_norm(v);
  EXPECT_EQ(s.stddev[0], kStdFloor);
  EXPECT_EQ(s.warnings.size(), 1u);
  EXPECT_EQ(apply_norm(v, s).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(fit_norm(MatrixD::Zero(1, 2)), ConfigError);
}
