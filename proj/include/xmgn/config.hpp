// SPDX-License-Identifier: Apache-2.0
//
// Pipeline configuration (JSON, versioned). Unknown keys are rejected so typos fail loudly.

#pragma once

#include "xmgn/diff.hpp"
#include "xmgn/gnn.hpp"
#include "xmgn/partition.hpp"
#include "xmgn/pointcloud.hpp"
#include "xmgn/synthetic.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

namespace xmgn {

inline constexpr int kConfigSchemaVersion = 1;

struct TrainingConfig {
  Index train_samples = 4;       // synthetic geometries used for training
  Index validation_samples = 1;  // held out, drawn after the training seeds
  Index validate_every = 10;     // 0: validate only at the end
  Index checkpoint_every = 0;    // 0: final checkpoint only
  std::string targets = "analytic";  // analytic | idw (analytic at face centroids, moved by IDW)
  Index idw_k = 5;
  double idw_power = 1.0;
};

struct PipelineConfig {
  int schema_version = kConfigSchemaVersion;
  std::string geometry_path;  // empty: synthetic geometry
  SyntheticShape synthetic;
  std::vector<Index> level_counts{500000, 1000000, 2000000};
  Index k = 6;
  bool symmetric = true;
  FeatureOptions features;
  Index partition_count = 21;
  PartitionMethod partition_method = PartitionMethod::coordinate_bisection;
  bool balance_edges = false;
  std::string owner_file;
  Index halo_depth = 15;
  Index infer_partitions = 1;
  ModelConfig model;
  AdamConfig optimizer;
  TrainingConfig training;
  std::uint64_t seed = 0;
  std::string precision = "f32";
  Index workers = 1;
  std::string output_dir = "out";

  void validate() const {
    if (schema_version != kConfigSchemaVersion) {
      throw ConfigError("config schema_version " + std::to_string(schema_version) + " is not supported (expected " +
                        std::to_string(kConfigSchemaVersion) + ")");
    }
    require(!level_counts.empty(), "config: levels must list at least one point count");
    for (std::size_t i = 0; i < level_counts.size(); ++i) {
      require(level_counts[i] > 0 && (i == 0 || level_counts[i] > level_counts[i - 1]),
              "config: levels must be positive and strictly increasing");
    }
    require(level_counts.size() <= 255, "config: at most 255 levels");
    require(k >= 1, "config: k must be >= 1");
    require(partition_count >= 1, "config: partition.count must be >= 1");
    require(infer_partitions >= 1, "config: partition.infer_count must be >= 1");
    require(partition_method != PartitionMethod::external_assignment || !owner_file.empty(),
            "config: partition.method external_assignment needs partition.owner_file");
    require(halo_depth >= 0, "config: partition.halo_depth must be >= 0");
    model.validate();
    require_halo(halo_depth, model);
    const Index width = schema_width(node_feature_schema(features));
    if (model.node_input_dim != width) {
      throw ConfigError("config: model.node_input_dim is " + std::to_string(model.node_input_dim) +
                        " but the feature options produce " + std::to_string(width) + " columns");
    }
    require(model.edge_input_dim == 4, "config: model.edge_input_dim must be 4 (offset + length)");
    require(model.output_dim == 4, "config: model.output_dim must be 4 (pressure + 3 shear components)");
    require(optimizer.lr_max > 0 && optimizer.lr_min >= 0 && optimizer.lr_min <= optimizer.lr_max,
            "config: optimizer needs 0 <= lr_min <= lr_max, lr_max > 0");
    require(optimizer.total_steps >= 1, "config: optimizer.steps must be >= 1");
    require(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1,
            "config: Adam betas must be in [0, 1)");
    require(optimizer.eps > 0, "config: optimizer.eps must be positive");
    require(training.train_samples >= 1, "config: training.train_samples must be >= 1");
    require(training.validation_samples >= 0, "config: training.validation_samples must be >= 0");
    require(training.validate_every >= 0 && training.checkpoint_every >= 0, "config: intervals must be >= 0");
    require(training.targets == "analytic" || training.targets == "idw",
            "config: training.targets must be analytic or idw");
    require(training.idw_k >= 1 && training.idw_power > 0, "config: idw_k >= 1 and idw_power > 0 required");
    require(precision == "f32" || precision == "f64", "config: precision must be f32 or f64");
    require(workers >= 1, "config: workers must be >= 1");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!ok.count(key)) throw ConfigError("config: unknown key '" + where + (where.empty() ? "" : ".") + key + "'");
  }
}

template <class T>
void read_opt(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  try {
    detail::check_keys(j, "", {"schema_version", "geometry", "levels", "k", "symmetric", "features", "partition", "model",
                               "optimizer", "training", "seed", "precision", "workers", "output_dir"});
    if (!j.contains("schema_version")) throw ConfigError("config: schema_version is required");
    c.schema_version = j.at("schema_version").get<int>();
    if (j.contains("geometry")) {
      const auto& g = j["geometry"];
      detail::check_keys(g, "geometry", {"path", "synthetic"});
      detail::read_opt(g, "path", c.geometry_path);
      if (g.contains("synthetic")) {
        const auto& s = g["synthetic"];
        detail::check_keys(s, "geometry.synthetic",
                           {"kind", "subdivisions", "radius", "axis_min", "axis_max", "exponent_min", "exponent_max"});
        detail::read_opt(s, "kind", c.synthetic.kind);
        detail::read_opt(s, "subdivisions", c.synthetic.subdivisions);
        detail::read_opt(s, "radius", c.synthetic.radius);
        detail::read_opt(s, "axis_min", c.synthetic.axis_min);
        detail::read_opt(s, "axis_max", c.synthetic.axis_max);
        detail::read_opt(s, "exponent_min", c.synthetic.exponent_min);
        detail::read_opt(s, "exponent_max", c.synthetic.exponent_max);
      }
    }
    detail::read_opt(j, "levels", c.level_counts);
    detail::read_opt(j, "k", c.k);
    detail::read_opt(j, "symmetric", c.symmetric);
    if (j.contains("features")) {
      const auto& f = j["features"];
      detail::check_keys(f, "features", {"fourier_freqs", "include_positions"});
      detail::read_opt(f, "fourier_freqs", c.features.fourier_freqs);
      detail::read_opt(f, "include_positions", c.features.include_positions);
    }
    c.model.node_input_dim = schema_width(node_feature_schema(c.features));
    if (j.contains("partition")) {
      const auto& p = j["partition"];
      detail::check_keys(p, "partition", {"count", "method", "halo_depth", "owner_file", "infer_count", "balance_edges"});
      detail::read_opt(p, "count", c.partition_count);
      if (p.contains("method")) c.partition_method = partition_method_from_string(p["method"].get<std::string>());
      detail::read_opt(p, "halo_depth", c.halo_depth);
      detail::read_opt(p, "owner_file", c.owner_file);
      detail::read_opt(p, "infer_count", c.infer_partitions);
      detail::read_opt(p, "balance_edges", c.balance_edges);
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      detail::check_keys(m, "model", {"layer_count", "hidden_dim", "mlp_hidden_layers", "activation", "node_input_dim",
                                      "edge_input_dim", "output_dim", "residual", "update_edges", "layernorm"});
      detail::read_opt(m, "layer_count", c.model.layer_count);
      detail::read_opt(m, "hidden_dim", c.model.hidden_dim);
      detail::read_opt(m, "mlp_hidden_layers", c.model.mlp_hidden_layers);
      if (m.contains("activation")) c.model.activation = activation_from_string(m["activation"].get<std::string>());
      detail::read_opt(m, "node_input_dim", c.model.node_input_dim);
      detail::read_opt(m, "edge_input_dim", c.model.edge_input_dim);
      detail::read_opt(m, "output_dim", c.model.output_dim);
      detail::read_opt(m, "residual", c.model.residual);
      detail::read_opt(m, "update_edges", c.model.update_edges);
      detail::read_opt(m, "layernorm", c.model.layernorm);
    }
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      detail::check_keys(o, "optimizer", {"lr_max", "lr_min", "steps", "beta1", "beta2", "eps", "clip"});
      detail::read_opt(o, "lr_max", c.optimizer.lr_max);
      detail::read_opt(o, "lr_min", c.optimizer.lr_min);
      detail::read_opt(o, "steps", c.optimizer.total_steps);
      detail::read_opt(o, "beta1", c.optimizer.beta1);
      detail::read_opt(o, "beta2", c.optimizer.beta2);
      detail::read_opt(o, "eps", c.optimizer.eps);
      detail::read_opt(o, "clip", c.optimizer.clip_threshold);
    }
    if (j.contains("training")) {
      const auto& t = j["training"];
      detail::check_keys(t, "training", {"train_samples", "validation_samples", "validate_every", "checkpoint_every",
                                         "targets", "idw_k", "idw_power"});
      detail::read_opt(t, "train_samples", c.training.train_samples);
      detail::read_opt(t, "validation_samples", c.training.validation_samples);
      detail::read_opt(t, "validate_every", c.training.validate_every);
      detail::read_opt(t, "checkpoint_every", c.training.checkpoint_every);
      detail::read_opt(t, "targets", c.training.targets);
      detail::read_opt(t, "idw_k", c.training.idw_k);
      detail::read_opt(t, "idw_power", c.training.idw_power);
    }
    detail::read_opt(j, "seed", c.seed);
    detail::read_opt(j, "precision", c.precision);
    detail::read_opt(j, "workers", c.workers);
    detail::read_opt(j, "output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json model_config_json(const ModelConfig& m) {
  return {{"layer_count", m.layer_count},   {"hidden_dim", m.hidden_dim},       {"mlp_hidden_layers", m.mlp_hidden_layers},
          {"activation", to_string(m.activation)}, {"node_input_dim", m.node_input_dim}, {"edge_input_dim", m.edge_input_dim},
          {"output_dim", m.output_dim},     {"residual", m.residual},           {"update_edges", m.update_edges},
          {"layernorm", m.layernorm}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.layer_count = j.at("layer_count").get<Index>();
  m.hidden_dim = j.at("hidden_dim").get<Index>();
  m.mlp_hidden_layers = j.at("mlp_hidden_layers").get<Index>();
  m.activation = activation_from_string(j.at("activation").get<std::string>());
  m.node_input_dim = j.at("node_input_dim").get<Index>();
  m.edge_input_dim = j.at("edge_input_dim").get<Index>();
  m.output_dim = j.at("output_dim").get<Index>();
  m.residual = j.at("residual").get<bool>();
  m.update_edges = j.at("update_edges").get<bool>();
  m.layernorm = j.at("layernorm").get<bool>();
  m.validate();
  return m;
}

inline nlohmann::json adam_config_json(const AdamConfig& o) {
  return {{"lr_max", o.lr_max}, {"lr_min", o.lr_min}, {"steps", o.total_steps}, {"beta1", o.beta1},
          {"beta2", o.beta2},   {"eps", o.eps},       {"clip", o.clip_threshold}};
}

inline AdamConfig adam_config_from_json(const nlohmann::json& j) {
  AdamConfig o;
  o.lr_max = j.at("lr_max").get<double>();
  o.lr_min = j.at("lr_min").get<double>();
  o.total_steps = j.at("steps").get<Index>();
  o.beta1 = j.at("beta1").get<double>();
  o.beta2 = j.at("beta2").get<double>();
  o.eps = j.at("eps").get<double>();
  o.clip_threshold = j.at("clip").get<double>();
  return o;
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  return {{"schema_version", c.schema_version},
          {"geometry",
           {{"path", c.geometry_path},
            {"synthetic",
             {{"kind", c.synthetic.kind}, {"subdivisions", c.synthetic.subdivisions}, {"radius", c.synthetic.radius},
              {"axis_min", c.synthetic.axis_min}, {"axis_max", c.synthetic.axis_max},
              {"exponent_min", c.synthetic.exponent_min}, {"exponent_max", c.synthetic.exponent_max}}}}},
          {"levels", c.level_counts},
          {"k", c.k},
          {"symmetric", c.symmetric},
          {"features", {{"fourier_freqs", c.features.fourier_freqs}, {"include_positions", c.features.include_positions}}},
          {"partition",
           {{"count", c.partition_count}, {"method", to_string(c.partition_method)}, {"halo_depth", c.halo_depth},
            {"owner_file", c.owner_file}, {"infer_count", c.infer_partitions}, {"balance_edges", c.balance_edges}}},
          {"model", model_config_json(c.model)},
          {"optimizer", adam_config_json(c.optimizer)},
          {"training",
           {{"train_samples", c.training.train_samples}, {"validation_samples", c.training.validation_samples},
            {"validate_every", c.training.validate_every}, {"checkpoint_every", c.training.checkpoint_every},
            {"targets", c.training.targets}, {"idw_k", c.training.idw_k}, {"idw_power", c.training.idw_power}}},
          {"seed", c.seed},
          {"precision", c.precision},
          {"workers", c.workers},
          {"output_dir", c.output_dir}};
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline nlohmann::json feature_schema_json(const FeatureSchema& s) {
  auto out = nlohmann::json::array();
  for (const auto& b : s) out.push_back({{"name", b.name}, {"width", b.width}});
  return out;
}

inline FeatureSchema feature_schema_from_json(const nlohmann::json& j) {
  FeatureSchema s;
  for (const auto& b : j) s.push_back({b.at("name").get<std::string>(), b.at("width").get<Index>()});
  return s;
}

inline nlohmann::json norm_json(const NormStats& s) {
  return {{"mean", std::vector<double>(s.mean.begin(), s.mean.end())},
          {"stddev", std::vector<double>(s.stddev.begin(), s.stddev.end())}};
}

inline NormStats norm_from_json(const nlohmann::json& j) {
  NormStats s;
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto sd = j.at("stddev").get<std::vector<double>>();
  s.mean.assign(mean.begin(), mean.end());
  s.stddev.assign(sd.begin(), sd.end());
  return s;
}

}  // namespace xmgn
