// SPDX-License-Identifier: Apache-2.0

#include "xmgn/io.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

using namespace xmgn;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("xmgn_io_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

Graph small_graph() {
  const auto cloud = multiscale_sample(make_icosphere(3), std::vector<Index>{40, 160}, 4);
  return build_multiscale_graph(cloud, 5);
}

void flip_byte(const fs::path& file, std::size_t offset) {
  auto bytes = read_file_bytes(file);
  bytes.at(offset) ^= 0x01;
  write_file_bytes(file, bytes);
}

}  // namespace

TEST(Io, ArrayRoundTripAllDtypes) {
  TempDir t;
  const std::vector<float> f{1.5f, -2.0f, 3.25f};
  const std::vector<double> d{1e-300, -0.0, 7.0};
  const std::vector<std::int64_t> i{-1, 0, 1LL << 40};
  const std::vector<std::int32_t> i32{-7, 9};
  const std::vector<std::uint8_t> u{0, 255, 3};
  BundleWriter w(t.path(), "demo");
  w.array<float>("a/f", f);
  w.array<double>("d", d, {3, 1});
  w.array<std::int64_t>("i", i);
  w.array<std::int32_t>("j", i32);
  w.array<std::uint8_t>("u", u);
  w.meta()["metadata"] = {{"note", "x"}};
  const auto sum = w.finish();
  EXPECT_TRUE(fs::exists(t.path() / "a_f.bin"));
  BundleReader r(t.path(), "demo");
  EXPECT_EQ(r.checksum(), sum);
  EXPECT_EQ(r.array<float>("a/f"), f);
  EXPECT_EQ(r.array<double>("d"), d);
  EXPECT_EQ(r.array<std::int64_t>("i"), i);
  EXPECT_EQ(r.array<std::int32_t>("j"), i32);
  EXPECT_EQ(r.array<std::uint8_t>("u"), u);
  EXPECT_EQ(r.dtype("d"), "f64");
  EXPECT_THROW(r.array<float>("d"), ConfigError);
  EXPECT_THROW(r.array<float>("missing"), ConfigError);
  EXPECT_THROW(BundleReader(t.path(), "graph"), ConfigError);
}

TEST(Io, LittleEndianLayout) {
  const std::vector<std::int32_t> v{0x01020304};
  const auto bytes = encode_le<std::int32_t>(v);
  ASSERT_EQ(bytes.size(), 4u);
  EXPECT_EQ(bytes[0], 0x04);
  EXPECT_EQ(bytes[3], 0x01);
  const std::vector<unsigned char> odd{1, 2, 3};
  EXPECT_THROW(decode_le<std::int32_t>(odd), ParseError);
}

TEST(Io, ChecksumIsDeterministic) {
  TempDir a, b;
  const auto g = small_graph();
  EXPECT_EQ(write_graph_bundle(a.path(), g, {}), write_graph_bundle(b.path(), g, {}));
}

TEST(Io, TamperedArrayIsRejected) {
  TempDir t;
  const std::vector<double> d{1, 2, 3};
  BundleWriter w(t.path(), "demo");
  w.array<double>("d", d);
  w.finish();
  flip_byte(t.path() / "d.bin", 3);
  BundleReader r(t.path());
  EXPECT_THROW(r.array<double>("d"), ConfigError);
}

TEST(Io, TamperedManifestIsRejected) {
  TempDir t;
  BundleWriter w(t.path(), "demo");
  w.meta()["metadata"] = {{"k", 6}};
  w.finish();
  auto j = json::parse(std::ifstream(t.path() / "manifest.json"));
  j["metadata"]["k"] = 7;
  std::ofstream(t.path() / "manifest.json") << j.dump();
  EXPECT_THROW(BundleReader{t.path()}, ConfigError);
  std::ofstream(t.path() / "manifest.json") << "{not json";
  EXPECT_THROW(BundleReader{t.path()}, ParseError);
  fs::remove(t.path() / "manifest.json");
  EXPECT_THROW(BundleReader{t.path()}, ConfigError);
}

TEST(Io, CloudRoundTrip) {
  TempDir t;
  const auto cloud = multiscale_sample(make_icosphere(2), std::vector<Index>{10, 50}, 9);
  write_cloud_bundle(t.path(), cloud, {{"seed", 9}});
  const auto back = read_cloud_bundle(BundleReader(t.path(), "pointcloud"));
  EXPECT_EQ(back.level_counts, cloud.level_counts);
  EXPECT_EQ(back.positions, cloud.positions);
  EXPECT_EQ(back.normals, cloud.normals);
  EXPECT_EQ(back.triangle_ids, cloud.triangle_ids);
}

// Graph arrays are stored in f32, so the round trip is exact only after one quantisation.
TEST(Io, GraphRoundTrip) {
  TempDir t, again;
  const auto g = small_graph();
  const auto sum = write_graph_bundle(t.path(), g, {});
  const auto back = read_graph_bundle(BundleReader(t.path(), "graph"));
  EXPECT_EQ(back.node_count, g.node_count);
  EXPECT_EQ(back.offsets, g.offsets);
  EXPECT_EQ(back.sources, g.sources);
  EXPECT_EQ(back.edge_level, g.edge_level);
  EXPECT_EQ(back.k, g.k);
  EXPECT_EQ(back.level_counts, g.level_counts);
  for (std::size_t i = 0; i < g.positions.size(); ++i) EXPECT_LE((back.positions[i] - g.positions[i]).norm(), 1e-6);
  EXPECT_LE((back.edge_features - g.edge_features).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(write_graph_bundle(again.path(), back, {}), sum);
}

TEST(Io, PartitionRoundTripAndStaleUpstream) {
  TempDir gdir, pdir, other;
  const auto g = small_graph();
  const auto gsum = write_graph_bundle(gdir.path(), g, {});
  const auto ps = partition_graph(g, 3, PartitionMethod::greedy_bfs, 2);
  write_partition_bundle(pdir.path(), ps, {{"upstream_checksum", gsum}});
  BundleReader pr(pdir.path(), "partition");
  EXPECT_NO_THROW(require_upstream(pr, BundleReader(gdir.path())));
  const auto back = read_partition_bundle(pr);
  EXPECT_EQ(back.partition_count, 3);
  EXPECT_EQ(back.halo_depth, 2);
  EXPECT_EQ(back.method, PartitionMethod::greedy_bfs);
  EXPECT_EQ(back.owner, ps.owner);
  ASSERT_EQ(back.parts.size(), ps.parts.size());
  for (std::size_t p = 0; p < ps.parts.size(); ++p) {
    EXPECT_EQ(back.parts[p].owned, ps.parts[p].owned);
    EXPECT_EQ(back.parts[p].halo, ps.parts[p].halo);
    EXPECT_EQ(back.parts[p].local_to_global, ps.parts[p].local_to_global);
    EXPECT_EQ(back.parts[p].offsets, ps.parts[p].offsets);
    EXPECT_EQ(back.parts[p].sources, ps.parts[p].sources);
    EXPECT_EQ(back.parts[p].edge_ids, ps.parts[p].edge_ids);
    EXPECT_EQ(back.parts[p].owned_mask, ps.parts[p].owned_mask);
  }
  // A graph rebuilt with a different k is a different upstream.
  const auto cloud = multiscale_sample(make_icosphere(3), std::vector<Index>{40, 160}, 4);
  write_graph_bundle(other.path(), build_multiscale_graph(cloud, 6), {});
  EXPECT_THROW(require_upstream(pr, BundleReader(other.path())), ConfigError);
}

TEST(Io, OwnerFile) {
  TempDir t;
  const std::vector<Index> owner{0, 2, 1, 1, 0};
  write_owner_file(t.path() / "owner.i32", owner);
  EXPECT_EQ(fs::file_size(t.path() / "owner.i32"), 20u);
  EXPECT_EQ(read_owner_file(t.path() / "owner.i32"), owner);
  write_file_bytes(t.path() / "bad.i32", std::vector<unsigned char>{1, 2, 3});
  EXPECT_THROW(read_owner_file(t.path() / "bad.i32"), Error);
  EXPECT_THROW(read_owner_file(t.path() / "absent.i32"), ConfigError);
}

TEST(Io, GridRoundTrip) {
  TempDir t;
  ScalarGrid g(Vec3(-1, 0.5, 2), Vec3(0.25, 0.5, 1), {3, 2, 4});
  for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = 0.5 * static_cast<double>(i) - 3.0;
  BundleWriter w(t.path(), "grid");
  write_grid(w, "sdf", g);
  w.finish();
  BundleReader r(t.path(), "grid");
  const auto back = read_grid(r, "sdf");
  EXPECT_TRUE(back.same_layout(g));
  EXPECT_EQ(back.values, g.values);  // values chosen to be exact in f32
  EXPECT_EQ(r.meta()["arrays"]["sdf"]["shape"], json({4, 2, 3}));
}
