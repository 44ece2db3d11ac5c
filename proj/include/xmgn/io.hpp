// SPDX-License-Identifier: Apache-2.0
//
// On-disk bundles: a JSON manifest plus raw little-endian arrays, each carrying
// an FNV-1a checksum. Bundles record the checksum of the bundle they derive from.

#pragma once

#include "xmgn/common.hpp"
#include "xmgn/geometry.hpp"
#include "xmgn/graph.hpp"
#include "xmgn/partition.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace xmgn {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kBundleSchemaVersion = 1;

inline std::vector<unsigned char> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const fs::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::uint64_t checksum_bytes(std::span<const unsigned char> bytes) {
  Fnv64 h;
  h.update(bytes.data(), bytes.size());
  return h.digest();
}

template <class T>
inline const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else if constexpr (std::is_same_v<T, std::int64_t>) return "i64";
  else if constexpr (std::is_same_v<T, std::int32_t>) return "i32";
  else if constexpr (std::is_same_v<T, std::uint8_t>) return "u8";
  else static_assert(sizeof(T) == 0, "unsupported dtype");
}

template <class T>
inline std::vector<unsigned char> encode_le(std::span<const T> values) {
  std::vector<unsigned char> out;
  out.reserve(values.size() * sizeof(T));
  for (const T& v : values) put_le<T>(out, v);
  return out;
}

template <class T>
inline std::vector<T> decode_le(std::span<const unsigned char> bytes) {
  if (bytes.size() % sizeof(T) != 0) throw ParseError("array byte length is not a multiple of the element size");
  std::vector<T> out(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_le<T>(bytes.data() + i * sizeof(T));
  return out;
}

class BundleWriter {
 public:
  BundleWriter(fs::path dir, std::string kind) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    manifest_["kind"] = std::move(kind);
    manifest_["schema_version"] = kBundleSchemaVersion;
    manifest_["arrays"] = json::object();
  }

  template <class T>
  void array(const std::string& name, std::span<const T> values, std::vector<Index> shape = {}) {
    const auto bytes = encode_le(values);
    std::string file = name;
    std::replace(file.begin(), file.end(), '/', '_');
    file += ".bin";
    write_file_bytes(dir_ / file, bytes);
    if (shape.empty()) shape = {static_cast<Index>(values.size())};
    const auto sum = checksum_bytes(bytes);
    manifest_["arrays"][name] = {{"file", file}, {"dtype", dtype_name<T>()}, {"shape", shape}, {"fnv64", hex64(sum)}};
  }

  json& meta() { return manifest_; }

  /// Writes manifest.json; returns the bundle checksum.
  std::string finish() {
    manifest_["checksum"] = content_checksum(manifest_);
    std::ofstream out(dir_ / "manifest.json", std::ios::trunc);
    if (!out) throw ConfigError("cannot write manifest in '" + dir_.string() + "'");
    out << manifest_.dump(2) << "\n";
    return manifest_["checksum"].get<std::string>();
  }

  /// Hash of kind, every array checksum (name order), metadata and grid layouts.
  static std::string content_checksum(const json& manifest) {
    Fnv64 h;
    const auto kind = manifest.at("kind").get<std::string>();
    h.update(kind.data(), kind.size());
    for (const auto& [name, entry] : manifest.at("arrays").items()) {
      h.update(name.data(), name.size());
      const auto sum = entry.at("fnv64").get<std::string>();
      h.update(sum.data(), sum.size());
    }
    for (const char* key : {"metadata", "grids"}) {
      if (!manifest.contains(key)) continue;
      const auto m = manifest[key].dump();
      h.update(m.data(), m.size());
    }
    return hex64(h.digest());
  }

 private:
  fs::path dir_;
  json manifest_;
};

class BundleReader {
 public:
  explicit BundleReader(fs::path dir, const std::string& expected_kind = {}) : dir_(std::move(dir)) {
    const auto path = dir_ / "manifest.json";
    std::ifstream in(path);
    if (!in) throw ConfigError("bundle '" + dir_.string() + "' has no manifest.json");
    try {
      in >> manifest_;
    } catch (const json::exception& e) {
      throw ParseError("bundle '" + dir_.string() + "': malformed manifest: " + e.what());
    }
    if (!expected_kind.empty() && manifest_.value("kind", "") != expected_kind) {
      throw ConfigError("bundle '" + dir_.string() + "' is a '" + manifest_.value("kind", "?") + "' bundle, expected '" +
                        expected_kind + "'");
    }
    if (manifest_.value("schema_version", 0) != kBundleSchemaVersion) {
      throw ConfigError("bundle '" + dir_.string() + "' has unsupported schema version");
    }
    if (manifest_.value("checksum", "") != BundleWriter::content_checksum(manifest_)) {
      throw ConfigError("bundle '" + dir_.string() + "': manifest checksum mismatch");
    }
  }

  const json& meta() const { return manifest_; }
  std::string checksum() const { return manifest_.at("checksum").get<std::string>(); }
  bool has(const std::string& name) const { return manifest_.at("arrays").contains(name); }

  template <class T>
  std::vector<T> array(const std::string& name) const {
    if (!has(name)) throw ConfigError("bundle '" + dir_.string() + "' has no array '" + name + "'");
    const auto& entry = manifest_["arrays"][name];
    if (entry.at("dtype").get<std::string>() != dtype_name<T>()) {
      throw ConfigError("array '" + name + "' has dtype " + entry.at("dtype").get<std::string>() + ", expected " +
                        dtype_name<T>());
    }
    const auto bytes = read_file_bytes(dir_ / entry.at("file").get<std::string>());
    if (hex64(checksum_bytes(bytes)) != entry.at("fnv64").get<std::string>()) {
      throw ConfigError("array '" + name + "' in bundle '" + dir_.string() + "' fails its checksum (stale or corrupt)");
    }
    return decode_le<T>(bytes);
  }

  std::string dtype(const std::string& name) const { return manifest_.at("arrays").at(name).at("dtype"); }

 private:
  fs::path dir_;
  json manifest_;
};

inline void require_upstream(const BundleReader& downstream, const BundleReader& upstream) {
  const auto recorded = downstream.meta().value("metadata", json::object()).value("upstream_checksum", "");
  if (recorded != upstream.checksum()) {
    throw ConfigError("stale input: bundle was derived from checksum " + recorded + " but the given " +
                      upstream.meta().value("kind", "?") + " bundle has checksum " + upstream.checksum());
  }
}

// ---------------------------------------------------------------------------

inline std::vector<float> flatten_f32(std::span<const Vec3> v) {
  std::vector<float> out;
  out.reserve(v.size() * 3);
  for (const auto& p : v) {
    for (int d = 0; d < 3; ++d) out.push_back(static_cast<float>(p[d]));
  }
  return out;
}

inline std::vector<Vec3> unflatten(std::span<const float> v) {
  std::vector<Vec3> out(v.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
  return out;
}

inline std::vector<double> flatten_f64(std::span<const Vec3> v) {
  std::vector<double> out;
  out.reserve(v.size() * 3);
  for (const auto& p : v) out.insert(out.end(), {p.x(), p.y(), p.z()});
  return out;
}

inline std::vector<Vec3> unflatten(std::span<const double> v) {
  std::vector<Vec3> out(v.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
  return out;
}

inline std::string write_cloud_bundle(const fs::path& dir, const MultiScalePointCloud& cloud, const json& metadata) {
  BundleWriter w(dir, "pointcloud");
  const auto n = cloud.size();
  w.array<double>("positions", flatten_f64(cloud.positions), {n, 3});
  w.array<double>("normals", flatten_f64(cloud.normals), {n, 3});
  w.array<std::int64_t>("triangle_ids", cloud.triangle_ids);
  w.meta()["metadata"] = metadata;
  w.meta()["metadata"]["level_counts"] = cloud.level_counts;
  return w.finish();
}

inline MultiScalePointCloud read_cloud_bundle(const BundleReader& r) {
  MultiScalePointCloud cloud;
  cloud.level_counts = r.meta().at("metadata").at("level_counts").get<std::vector<Index>>();
  cloud.positions = unflatten(std::span<const double>(r.array<double>("positions")));
  cloud.normals = unflatten(std::span<const double>(r.array<double>("normals")));
  cloud.triangle_ids = r.array<std::int64_t>("triangle_ids");
  return cloud;
}

/// Graph bundle: positions/normals f32[n*3], csr_offsets i64[n+1], csr_sources i64[E],
/// edge_features f32[E*4], edge_level u8[E].
inline std::string write_graph_bundle(const fs::path& dir, const Graph& g, const json& metadata) {
  BundleWriter w(dir, "graph");
  const Index n = g.node_count, e = g.edge_count();
  w.array<float>("positions", flatten_f32(g.positions), {n, 3});
  w.array<float>("normals", flatten_f32(g.normals), {static_cast<Index>(g.normals.size()), 3});
  w.array<std::int64_t>("csr_offsets", g.offsets);
  w.array<std::int64_t>("csr_sources", g.sources);
  std::vector<float> ef(static_cast<std::size_t>(e * 4));
  for (Index i = 0; i < e * 4; ++i) ef[static_cast<std::size_t>(i)] = static_cast<float>(g.edge_features.data()[i]);
  w.array<float>("edge_features", ef, {e, 4});
  w.array<std::uint8_t>("edge_level", g.edge_level);
  auto& m = w.meta();
  m["metadata"] = metadata;
  m["metadata"]["node_count"] = n;
  m["metadata"]["edge_count"] = e;
  m["metadata"]["k"] = g.k;
  m["metadata"]["levels"] = g.level_counts;
  m["metadata"]["symmetric"] = g.symmetric;
  return w.finish();
}

inline Graph read_graph_bundle(const BundleReader& r) {
  Graph g;
  const auto& m = r.meta().at("metadata");
  g.node_count = m.at("node_count").get<Index>();
  g.k = m.at("k").get<Index>();
  g.level_counts = m.at("levels").get<std::vector<Index>>();
  g.symmetric = m.at("symmetric").get<bool>();
  g.positions = unflatten(std::span<const float>(r.array<float>("positions")));
  g.normals = unflatten(std::span<const float>(r.array<float>("normals")));
  g.offsets = r.array<std::int64_t>("csr_offsets");
  g.sources = r.array<std::int64_t>("csr_sources");
  g.edge_level = r.array<std::uint8_t>("edge_level");
  const auto ef = r.array<float>("edge_features");
  if (static_cast<Index>(g.positions.size()) != g.node_count ||
      static_cast<Index>(g.offsets.size()) != g.node_count + 1 || ef.size() != g.sources.size() * 4 ||
      g.edge_level.size() != g.sources.size() || g.offsets.back() != static_cast<Index>(g.sources.size())) {
    throw ParseError("graph bundle arrays have inconsistent sizes");
  }
  g.edge_features.resize(static_cast<Index>(g.sources.size()), 4);
  for (std::size_t i = 0; i < ef.size(); ++i) g.edge_features.data()[i] = static_cast<double>(ef[i]);
  return g;
}

inline std::string write_partition_bundle(const fs::path& dir, const PartitionSet& ps, const json& metadata) {
  BundleWriter w(dir, "partition");
  w.array<std::int64_t>("owner", ps.owner);
  for (const auto& p : ps.parts) {
    const std::string pre = "part" + std::to_string(p.id) + "/";
    w.array<std::int64_t>(pre + "owned", p.owned);
    w.array<std::int64_t>(pre + "halo", p.halo);
    w.array<std::int64_t>(pre + "local_to_global", p.local_to_global);
    w.array<std::int64_t>(pre + "csr_offsets", p.offsets);
    w.array<std::int64_t>(pre + "csr_sources", p.sources);
    w.array<std::int64_t>(pre + "edge_ids", p.edge_ids);
    w.array<std::uint8_t>(pre + "owned_mask", p.owned_mask);
  }
  auto& m = w.meta();
  m["metadata"] = metadata;
  m["metadata"]["partition_count"] = ps.partition_count;
  m["metadata"]["halo_depth"] = ps.halo_depth;
  m["metadata"]["method"] = to_string(ps.method);
  m["metadata"]["halo_mode"] = ps.halo_mode == HaloMode::undirected ? "undirected" : "predecessor";
  return w.finish();
}

inline PartitionSet read_partition_bundle(const BundleReader& r) {
  PartitionSet ps;
  const auto& m = r.meta().at("metadata");
  ps.partition_count = m.at("partition_count").get<Index>();
  ps.halo_depth = m.at("halo_depth").get<Index>();
  ps.method = partition_method_from_string(m.at("method").get<std::string>());
  ps.halo_mode = m.at("halo_mode").get<std::string>() == "undirected" ? HaloMode::undirected : HaloMode::predecessor;
  ps.owner = r.array<std::int64_t>("owner");
  for (Index p = 0; p < ps.partition_count; ++p) {
    const std::string pre = "part" + std::to_string(p) + "/";
    LocalPartition lp;
    lp.id = p;
    lp.owned = r.array<std::int64_t>(pre + "owned");
    lp.halo = r.array<std::int64_t>(pre + "halo");
    lp.local_to_global = r.array<std::int64_t>(pre + "local_to_global");
    lp.offsets = r.array<std::int64_t>(pre + "csr_offsets");
    lp.sources = r.array<std::int64_t>(pre + "csr_sources");
    lp.edge_ids = r.array<std::int64_t>(pre + "edge_ids");
    lp.owned_mask = r.array<std::uint8_t>(pre + "owned_mask");
    ps.parts.push_back(std::move(lp));
  }
  return ps;
}

/// Owner import/export: raw little-endian i32[n].
inline void write_owner_file(const fs::path& path, std::span<const Index> owner) {
  std::vector<std::int32_t> v(owner.begin(), owner.end());
  write_file_bytes(path, encode_le<std::int32_t>(v));
}

inline std::vector<Index> read_owner_file(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() % 4 != 0) throw ParseError("owner file '" + path.string() + "' length is not a multiple of 4");
  const auto raw = decode_le<std::int32_t>(bytes);
  return {raw.begin(), raw.end()};
}

/// Manifest entry for a grid; the values go to a separate raw f32 array.
inline json grid_manifest_entry(const ScalarGrid& g) {
  return {{"origin", {g.origin.x(), g.origin.y(), g.origin.z()}},
          {"spacing", {g.spacing.x(), g.spacing.y(), g.spacing.z()}},
          {"dims", {g.dims[0], g.dims[1], g.dims[2]}},
          {"layout", "x-fastest"}};
}

inline void write_grid(BundleWriter& w, const std::string& name, const ScalarGrid& g) {
  std::vector<float> v(g.values.begin(), g.values.end());
  w.array<float>(name, v, {g.dims[2], g.dims[1], g.dims[0]});
  w.meta()["grids"][name] = grid_manifest_entry(g);
}

inline ScalarGrid read_grid(const BundleReader& r, const std::string& name) {
  const auto& e = r.meta().at("grids").at(name);
  const auto o = e.at("origin").get<std::vector<double>>();
  const auto s = e.at("spacing").get<std::vector<double>>();
  const auto d = e.at("dims").get<std::vector<Index>>();
  ScalarGrid g(Vec3(o[0], o[1], o[2]), Vec3(s[0], s[1], s[2]), {d[0], d[1], d[2]});
  const auto v = r.array<float>(name);
  if (static_cast<Index>(v.size()) != g.size()) throw ParseError("grid '" + name + "' has the wrong value count");
  g.values.assign(v.begin(), v.end());
  return g;
}

}  // namespace xmgn
