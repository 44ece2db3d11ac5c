// SPDX-License-Identifier: Apache-2.0
//
// xmgn command-line driver. Exit codes: 0 ok, 1 verification failure, 2 input/config error.

#include "xmgn/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

namespace {

using namespace xmgn;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<Index> workers;
  std::optional<std::string> precision;
  std::optional<Index> partitions;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_config = true) {
  auto* c = cmd->add_option("--config", f.config, "pipeline config (JSON)");
  if (needs_config) c->required();
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_option("--workers", f.workers, "concurrent partitions per step");
  cmd->add_option("--precision", f.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--partitions", f.partitions, "override the partition count");
  cmd->add_option("--out", f.out, "output directory");
}

PipelineConfig resolve(const CommonFlags& f) {
  PipelineConfig cfg = f.config.empty() ? PipelineConfig{} : load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.workers) cfg.workers = *f.workers;
  if (f.precision) cfg.precision = *f.precision;
  if (f.partitions) {
    cfg.partition_count = *f.partitions;
    cfg.infer_partitions = *f.partitions;
  }
  if (!f.out.empty()) cfg.output_dir = f.out;
  cfg.validate();
  return cfg;
}

json geometry_metadata(const PipelineConfig& cfg) {
  json m = {{"seed", cfg.seed}};
  if (!cfg.geometry_path.empty()) {
    m["geometry"] = {{"path", cfg.geometry_path}, {"fnv64", hex64(checksum_bytes(read_file_bytes(cfg.geometry_path)))}};
  } else {
    m["geometry"] = {{"synthetic", cfg.synthetic.kind}, {"subdivisions", cfg.synthetic.subdivisions}};
  }
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

int cmd_sample(const CommonFlags& f, const std::string& geometry) {
  auto cfg = resolve(f);
  if (!geometry.empty()) cfg.geometry_path = geometry;
  const auto soup = load_geometry(cfg, 0);
  const auto cloud = multiscale_sample(soup, cfg.level_counts, sample_seed(cfg, 0));
  const auto sum = write_cloud_bundle(cfg.output_dir, cloud, geometry_metadata(cfg));
  std::printf("point cloud: %lld points in %zu levels -> %s (checksum %s)\n", static_cast<long long>(cloud.size()),
              cloud.level_counts.size(), cfg.output_dir.c_str(), sum.c_str());
  return 0;
}

int cmd_build_graph(const CommonFlags& f, const std::string& input) {
  const auto cfg = resolve(f);
  BundleReader in(input, "pointcloud");
  const auto cloud = read_cloud_bundle(in);
  const auto g = build_multiscale_graph(cloud, cfg.k, cfg.symmetric);
  json meta = {{"upstream_checksum", in.checksum()},
               {"feature_schema", feature_schema_json(node_feature_schema(cfg.features))},
               {"graph_fnv64", hex64(graph_checksum(g))}};
  const auto sum = write_graph_bundle(cfg.output_dir, g, meta);
  std::printf("graph: %lld nodes, %lld edges, k=%lld -> %s (checksum %s)\n", static_cast<long long>(g.node_count),
              static_cast<long long>(g.edge_count()), static_cast<long long>(g.k), cfg.output_dir.c_str(), sum.c_str());
  return 0;
}

void print_balance(const BalanceReport& b) {
  std::printf("partition  owned  local  edges\n");
  for (std::size_t p = 0; p < b.owned_nodes.size(); ++p) {
    std::printf("%9zu %6lld %6lld %6lld\n", p, static_cast<long long>(b.owned_nodes[p]),
                static_cast<long long>(b.local_nodes[p]), static_cast<long long>(b.local_edges[p]));
  }
  std::printf("replication factor %.6f, owned max/mean %.4f, edges max/mean %.4f\n", b.replication_factor,
              b.owned_ratio, b.edge_ratio);
}

json balance_json(const BalanceReport& b) {
  return {{"owned_nodes", b.owned_nodes}, {"local_nodes", b.local_nodes},   {"local_edges", b.local_edges},
          {"replication_factor", b.replication_factor}, {"owned_ratio", b.owned_ratio}, {"edge_ratio", b.edge_ratio}};
}

int cmd_partition(const CommonFlags& f, const std::string& input) {
  const auto cfg = resolve(f);
  BundleReader in(input, "graph");
  const auto g = read_graph_bundle(in);
  std::vector<Index> external;
  if (cfg.partition_method == PartitionMethod::external_assignment) external = read_owner_file(cfg.owner_file);
  const auto ps = partition_graph(g, cfg.partition_count, cfg.partition_method, cfg.halo_depth, external);
  const auto report = balance_report(ps);
  json meta = {{"upstream_checksum", in.checksum()}, {"balance", balance_json(report)}};
  const auto sum = write_partition_bundle(cfg.output_dir, ps, meta);
  write_owner_file(fs::path(cfg.output_dir) / "owner.i32", ps.owner);
  print_balance(report);
  std::printf("partitions -> %s (checksum %s)\n", cfg.output_dir.c_str(), sum.c_str());
  return 0;
}

template <class T>
int run_train(const PipelineConfig& cfg) {
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  const auto pipeline = config_to_json(cfg);
  const Index every = cfg.training.checkpoint_every;
  const auto r = train<T>(cfg, [&](const TrainResult<T>& st) {
    const auto& row = st.log.back();
    if (row.step == 1 || row.step % 10 == 0 || row.step == cfg.optimizer.total_steps) {
      std::printf("step %5lld  lr %.3e  train %.6e", static_cast<long long>(row.step), row.lr, row.train_loss);
      if (!std::isnan(row.validation_loss)) std::printf("  val %.6e", row.validation_loss);
      std::printf("\n");
      std::fflush(stdout);
    }
    if (every > 0 && row.step % every == 0) {
      save_checkpoint(out / ("checkpoint_step" + std::to_string(row.step)), st, pipeline);
    }
  });
  write_text(out / "loss_log.csv", loss_log_csv(r.log));
  const auto sum = save_checkpoint(out / "checkpoint", r, pipeline);
  std::printf("checkpoint -> %s (checksum %s)\n", (out / "checkpoint").c_str(), sum.c_str());
  return 0;
}

int cmd_train(const CommonFlags& f) {
  const auto cfg = resolve(f);
  return cfg.precision == "f64" ? run_train<double>(cfg) : run_train<float>(cfg);
}

int cmd_infer(const CommonFlags& f, const std::string& checkpoint, const std::string& geometry) {
  auto cfg = resolve(f);
  if (!geometry.empty()) cfg.geometry_path = geometry;
  const auto ck = load_checkpoint(checkpoint);
  const auto soup = load_geometry(cfg, 0);
  const auto seed = sample_seed(cfg, 0);
  const auto pred = cfg.precision == "f64" ? infer<double>(cfg, ck, soup, cfg.infer_partitions, seed)
                                           : infer<float>(cfg, ck, soup, cfg.infer_partitions, seed);
  json meta = geometry_metadata(cfg);
  meta["checkpoint_checksum"] = BundleReader(checkpoint, "checkpoint").checksum();
  const auto sum = write_prediction_bundle(cfg.output_dir, pred, meta);
  std::printf("prediction: %zu nodes, %lld partitions -> %s (checksum %s)\n", pred.positions.size(),
              static_cast<long long>(pred.partitions), cfg.output_dir.c_str(), sum.c_str());
  std::printf("force (area %.6f): Fx %.6e  Fy %.6e  Fz %.6e\n", pred.total_area, pred.force.x(), pred.force.y(),
              pred.force.z());
  return 0;
}

int cmd_verify(const CommonFlags& f, std::optional<Index> halo, std::optional<Index> layers) {
  VerifyOptions o;
  if (!f.config.empty()) {
    const auto cfg = resolve(f);
    o.seed = cfg.seed;
    o.partitions = std::min<Index>(cfg.partition_count, 8);
  }
  if (f.seed) o.seed = *f.seed;
  if (f.partitions) o.partitions = *f.partitions;
  if (layers) o.layers = *layers;
  if (halo) o.halo = *halo;
  o.include_f32 = !f.precision || *f.precision == "f32";
  const auto rep = run_verify(o);
  std::printf("layers %lld, halo %lld, partitions %lld\n", static_cast<long long>(rep.layers),
              static_cast<long long>(rep.halo), static_cast<long long>(o.partitions));
  std::printf("max forward deviation (f64)   %.3e\n", rep.forward_dev_f64);
  if (o.include_f32) std::printf("max forward deviation (f32)   %.3e\n", rep.forward_dev_f32);
  std::printf("max gradient deviation (rel)  %.3e\n", rep.gradient_rel_dev);
  std::printf("negative control (halo L-1)   %.3e\n", rep.negative_control_dev);
  std::printf("stencil radius %lld, empirical minimum halo %lld, bitwise %s\n",
              static_cast<long long>(rep.stencil_radius), static_cast<long long>(rep.stencil_empirical),
              rep.stencil_bitwise ? "yes" : "no");
  for (const auto& msg : rep.failures) std::printf("FAIL: %s\n", msg.c_str());
  std::printf("%s\n", rep.ok() ? "verify: ok" : "verify: FAILED");
  return rep.ok() ? 0 : 1;
}

int cmd_stats(const std::vector<std::string>& bundles, const std::string& against) {
  for (const auto& dir : bundles) {
    BundleReader r(dir);
    const auto& m = r.meta();
    std::printf("%s: %s bundle, checksum %s\n", dir.c_str(), m.at("kind").get<std::string>().c_str(),
                r.checksum().c_str());
    for (const auto& [name, entry] : m.at("arrays").items()) {
      std::printf("  %-32s %s %s\n", name.c_str(), entry.at("dtype").get<std::string>().c_str(),
                  entry.at("shape").dump().c_str());
    }
    if (m.contains("metadata")) {
      for (const auto& [key, value] : m["metadata"].items()) {
        auto text = value.dump();
        if (text.size() > 120) text = text.substr(0, 117) + "...";
        std::printf("  %s: %s\n", key.c_str(), text.c_str());
      }
    }
    if (m.at("kind") == "partition") print_balance(balance_report(read_partition_bundle(r)));
    if (!against.empty()) {
      require_upstream(r, BundleReader(against));
      std::printf("  upstream %s: checksum matches\n", against.c_str());
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  xmgn::tune_allocator();
  CLI::App app{"xmgn: halo-partitioned multi-scale graph network pipeline"};
  app.require_subcommand(1);
  CommonFlags f;
  std::string input, checkpoint, geometry, against;
  std::vector<std::string> bundles;
  std::optional<Index> halo, layers;

  auto* sample = app.add_subcommand("sample", "sample a multi-scale point cloud");
  add_common(sample, f);
  sample->add_option("--geometry", geometry, "STL file (overrides the config)");

  auto* build = app.add_subcommand("build-graph", "build the multi-scale k-NN graph");
  add_common(build, f);
  build->add_option("--input", input, "point-cloud bundle")->required();

  auto* part = app.add_subcommand("partition", "partition a graph bundle with halos");
  add_common(part, f);
  part->add_option("--input", input, "graph bundle")->required();

  auto* tr = app.add_subcommand("train", "train on synthetic or configured geometry");
  add_common(tr, f);

  auto* inf = app.add_subcommand("infer", "predict surface fields for a geometry");
  add_common(inf, f);
  inf->add_option("--checkpoint", checkpoint, "checkpoint bundle")->required();
  inf->add_option("--geometry", geometry, "STL file (overrides the config)");

  auto* ver = app.add_subcommand("verify", "run the equivalence suite");
  add_common(ver, f, false);
  ver->add_option("--halo", halo, "halo depth (default: layer count)");
  ver->add_option("--layers", layers, "message-passing layers (default 3)");

  auto* st = app.add_subcommand("stats", "describe bundles");
  st->add_option("bundles", bundles, "bundle directories")->required();
  st->add_option("--against", against, "upstream bundle whose checksum must match");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sample->parsed()) return cmd_sample(f, geometry);
    if (build->parsed()) return cmd_build_graph(f, input);
    if (part->parsed()) return cmd_partition(f, input);
    if (tr->parsed()) return cmd_train(f);
    if (inf->parsed()) return cmd_infer(f, checkpoint, geometry);
    if (ver->parsed()) return cmd_verify(f, halo, layers);
    if (st->parsed()) return cmd_stats(bundles, against);
  } catch (const xmgn::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
