// SPDX-License-Identifier: Apache-2.0
//
// End-to-end plumbing: samples, normalisation, training loop, checkpoints,
// inference, and the equivalence verification suite.

#pragma once

#include "xmgn/config.hpp"
#include "xmgn/geometry.hpp"
#include "xmgn/gnn.hpp"
#include "xmgn/graph.hpp"
#include "xmgn/io.hpp"
#include "xmgn/partition.hpp"
#include "xmgn/pointcloud.hpp"
#include "xmgn/stencil.hpp"
#include "xmgn/synthetic.hpp"

#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>

namespace xmgn {

struct Sample {
  TriangleSoup soup;
  MultiScalePointCloud cloud;
  Graph graph;
  MatrixD node_features;  // raw
  MatrixD targets;        // raw (p, tau_x, tau_y, tau_z)
};

/// Geometry for sample `index`: the configured STL file, or a synthetic shape seeded per sample.
inline TriangleSoup load_geometry(const PipelineConfig& cfg, Index index) {
  if (!cfg.geometry_path.empty()) return parse_stl(read_file_bytes(cfg.geometry_path));
  return synthetic_geometry(cfg.synthetic, mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(index)));
}

inline MatrixD sample_targets(const PipelineConfig& cfg, const TriangleSoup& soup, const MultiScalePointCloud& cloud) {
  if (cfg.training.targets == "analytic") return analytic_targets(cloud.positions, cloud.normals);
  // Reference values live on mesh faces (centroids); IDW moves them onto the cloud.
  std::vector<Vec3> centroids(static_cast<std::size_t>(soup.triangle_count()));
  for (Index t = 0; t < soup.triangle_count(); ++t) {
    const auto c = soup.corners(t);
    centroids[static_cast<std::size_t>(t)] = (c[0] + c[1] + c[2]) / 3.0;
  }
  const MatrixD ref = analytic_targets(centroids, soup.face_normals);
  return idw_transfer(centroids, ref, cloud.positions, cfg.training.idw_k, cfg.training.idw_power);
}

inline Sample make_sample(const PipelineConfig& cfg, TriangleSoup soup, std::uint64_t seed) {
  Sample s;
  s.soup = std::move(soup);
  s.cloud = multiscale_sample(s.soup, cfg.level_counts, seed);
  s.graph = build_multiscale_graph(s.cloud, cfg.k, cfg.symmetric);
  s.node_features = node_features(s.cloud.positions, s.cloud.normals, cfg.features).values;
  s.targets = sample_targets(cfg, s.soup, s.cloud);
  return s;
}

inline std::uint64_t sample_seed(const PipelineConfig& cfg, Index index) {
  return mix_seed(cfg.seed, 2000 + static_cast<std::uint64_t>(index));
}

struct Normalizers {
  NormStats nodes, edges, targets;
};

inline MatrixD stack_rows(const std::vector<const MatrixD*>& parts) {
  Index rows = 0;
  for (const auto* p : parts) rows += p->rows();
  MatrixD out(rows, parts.empty() ? 0 : parts.front()->cols());
  Index r = 0;
  for (const auto* p : parts) {
    out.middleRows(r, p->rows()) = *p;
    r += p->rows();
  }
  return out;
}

/// Global statistics over every training sample.
inline Normalizers fit_normalizers(const std::vector<Sample>& train) {
  std::vector<const MatrixD*> nf, ef, tg;
  for (const auto& s : train) {
    nf.push_back(&s.node_features);
    ef.push_back(&s.graph.edge_features);
    tg.push_back(&s.targets);
  }
  return {fit_norm(stack_rows(nf)), fit_norm(stack_rows(ef)), fit_norm(stack_rows(tg))};
}

/// Normalised inputs in working precision plus the partitioning used for training.
template <class T>
struct PreparedSample {
  GraphView view;
  Mat<T> node_features, edge_features, targets;
  PartitionSet partitions;
};

template <class T>
PreparedSample<T> prepare(const Sample& s, const Normalizers& norms, const PipelineConfig& cfg, Index parts) {
  PreparedSample<T> p;
  p.view = view_of(s.graph);
  p.node_features = apply_norm(s.node_features, norms.nodes).cast<T>();
  p.edge_features = apply_norm(s.graph.edge_features, norms.edges).cast<T>();
  p.targets = apply_norm(s.targets, norms.targets).cast<T>();
  std::vector<Index> external;
  if (cfg.partition_method == PartitionMethod::external_assignment) external = read_owner_file(cfg.owner_file);
  p.partitions = partition_graph(s.graph, parts, cfg.partition_method, cfg.halo_depth, external);
  return p;
}

template <class T>
double mean_squared_error(const Mat<T>& pred, const Mat<T>& target) {
  return (pred.template cast<double>() - target.template cast<double>()).squaredNorm() /
         static_cast<double>(pred.size());
}

struct TrainLogRow {
  Index step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double validation_loss = std::numeric_limits<double>::quiet_NaN();
};

template <class T>
struct TrainResult {
  Model<T> model;
  OptimizerState<T> optimizer;
  Normalizers norms;
  FeatureSchema schema;
  std::vector<TrainLogRow> log;
};

/// Partitioned training on the configured samples; sample (step mod count) feeds each step.
/// `on_step` sees every log row (useful for checkpoints and progress output).
template <class T>
TrainResult<T> train(const PipelineConfig& cfg, const std::function<void(const TrainResult<T>&)>& on_step = {}) {
  cfg.validate();
  std::vector<Sample> train_raw, val_raw;
  for (Index i = 0; i < cfg.training.train_samples; ++i) {
    train_raw.push_back(make_sample(cfg, load_geometry(cfg, i), sample_seed(cfg, i)));
  }
  for (Index i = 0; i < cfg.training.validation_samples; ++i) {
    const Index idx = cfg.training.train_samples + i;
    val_raw.push_back(make_sample(cfg, load_geometry(cfg, idx), sample_seed(cfg, idx)));
  }
  TrainResult<T> out;
  out.norms = fit_normalizers(train_raw);
  out.schema = node_feature_schema(cfg.features);
  std::vector<PreparedSample<T>> train_set, val_set;
  for (const auto& s : train_raw) train_set.push_back(prepare<T>(s, out.norms, cfg, cfg.partition_count));
  for (const auto& s : val_raw) val_set.push_back(prepare<T>(s, out.norms, cfg, 1));

  out.model = init_model(cfg.model, mix_seed(cfg.seed, 7)).template cast<T>();
  out.optimizer = OptimizerState<T>(out.model.params, cfg.optimizer);
  const Index steps = cfg.optimizer.total_steps;
  for (Index step = 0; step < steps; ++step) {
    const auto& s = train_set[static_cast<std::size_t>(step % static_cast<Index>(train_set.size()))];
    const auto r = partitioned_train_step(out.model, out.optimizer, s.partitions, s.node_features, s.edge_features,
                                          s.targets, cfg.workers);
    TrainLogRow row{step + 1, r.lr, r.loss};
    const bool last = step + 1 == steps;
    const bool due = cfg.training.validate_every > 0 && (step + 1) % cfg.training.validate_every == 0;
    if (!val_set.empty() && (due || last)) {
      double total = 0.0;
      for (const auto& v : val_set) {
        total += mean_squared_error(full_forward(out.model, v.view, v.node_features, v.edge_features), v.targets);
      }
      row.validation_loss = total / static_cast<double>(val_set.size());
    }
    out.log.push_back(row);
    if (on_step) on_step(out);
  }
  return out;
}

inline std::string loss_log_csv(const std::vector<TrainLogRow>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "step,lr,train_loss,validation_loss\n";
  for (const auto& r : log) {
    os << r.step << "," << r.lr << "," << r.train_loss << ",";
    if (!std::isnan(r.validation_loss)) os << r.validation_loss;
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointSchemaVersion = 1;

/// Parameters and moments kept in double regardless of the stored dtype.
struct Checkpoint {
  ModelConfig model_config;
  std::string precision = "f64";
  FeatureSchema schema;
  Normalizers norms;
  AdamConfig adam;
  Index step = 0;
  Model<double> model;
  std::vector<MatrixD> first_moment, second_moment;
};

template <class T>
void write_named_matrices(BundleWriter& w, const std::string& prefix, const std::vector<std::string>& names,
                          const std::vector<Mat<T>>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& m = values[i];
    w.array<T>(prefix + names[i], std::span<const T>(m.data(), static_cast<std::size_t>(m.size())), {m.rows(), m.cols()});
  }
}

template <class T>
std::string save_checkpoint(const fs::path& dir, const TrainResult<T>& r, const json& pipeline) {
  BundleWriter w(dir, "checkpoint");
  write_named_matrices<T>(w, "param/", r.model.params.names, r.model.params.values);
  write_named_matrices<T>(w, "adam_m/", r.model.params.names, r.optimizer.first_moment);
  write_named_matrices<T>(w, "adam_v/", r.model.params.names, r.optimizer.second_moment);
  auto& m = w.meta()["metadata"];
  m["checkpoint_schema_version"] = kCheckpointSchemaVersion;
  m["precision"] = std::is_same_v<T, float> ? "f32" : "f64";
  m["model"] = model_config_json(r.model.config);
  m["feature_schema"] = feature_schema_json(r.schema);
  m["norm"] = {{"nodes", norm_json(r.norms.nodes)}, {"edges", norm_json(r.norms.edges)},
               {"targets", norm_json(r.norms.targets)}};
  m["optimizer"] = adam_config_json(r.optimizer.config);
  m["optimizer"]["step"] = r.optimizer.step;
  m["pipeline"] = pipeline;
  return w.finish();
}

namespace detail {

inline MatrixD read_matrix(const BundleReader& r, const std::string& name, Index rows, Index cols) {
  std::vector<double> v;
  if (r.dtype(name) == "f32") {
    const auto f = r.array<float>(name);
    v.assign(f.begin(), f.end());
  } else {
    v = r.array<double>(name);
  }
  const auto shape = r.meta().at("arrays").at(name).at("shape").get<std::vector<Index>>();
  if (shape.size() != 2 || shape[0] != rows || shape[1] != cols) {
    throw ConfigError("checkpoint array '" + name + "' has the wrong shape for the recorded model config");
  }
  MatrixD m(rows, cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

}  // namespace detail

inline Checkpoint load_checkpoint(const fs::path& dir) {
  BundleReader r(dir, "checkpoint");
  const auto& m = r.meta().at("metadata");
  if (m.value("checkpoint_schema_version", 0) != kCheckpointSchemaVersion) {
    throw ConfigError("checkpoint '" + dir.string() + "' has an unsupported schema version");
  }
  Checkpoint ck;
  ck.model_config = model_config_from_json(m.at("model"));
  ck.precision = m.at("precision").get<std::string>();
  ck.schema = feature_schema_from_json(m.at("feature_schema"));
  ck.norms = {norm_from_json(m.at("norm").at("nodes")), norm_from_json(m.at("norm").at("edges")),
              norm_from_json(m.at("norm").at("targets"))};
  ck.adam = adam_config_from_json(m.at("optimizer"));
  ck.step = m.at("optimizer").at("step").get<Index>();
  ck.model = init_model(ck.model_config, 0);
  for (Index i = 0; i < ck.model.params.size(); ++i) {
    const auto& name = ck.model.params.names[static_cast<std::size_t>(i)];
    auto& value = ck.model.params.values[static_cast<std::size_t>(i)];
    value = detail::read_matrix(r, "param/" + name, value.rows(), value.cols());
    ck.first_moment.push_back(detail::read_matrix(r, "adam_m/" + name, value.rows(), value.cols()));
    ck.second_moment.push_back(detail::read_matrix(r, "adam_v/" + name, value.rows(), value.cols()));
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  std::vector<Vec3> positions, normals;
  MatrixD values;  // denormalised (p, tau_x, tau_y, tau_z)
  double total_area = 0.0;
  Vec3 force = Vec3::Zero();
  Index partitions = 1;
};

inline void require_schema(const Checkpoint& ck, const PipelineConfig& cfg) {
  const auto expected = node_feature_schema(cfg.features);
  if (ck.schema != expected) {
    throw ConfigError("checkpoint feature schema (" + feature_schema_json(ck.schema).dump() +
                      ") does not match the pipeline feature options (" + feature_schema_json(expected).dump() + ")");
  }
}

/// Sample, build, partition into `parts`, run each partition, gather owned rows, denormalise.
template <class T>
Prediction infer(const PipelineConfig& cfg, const Checkpoint& ck, const TriangleSoup& soup, Index parts,
                 std::uint64_t seed) {
  require_schema(ck, cfg);
  const auto cloud = multiscale_sample(soup, cfg.level_counts, seed);
  const auto graph = build_multiscale_graph(cloud, cfg.k, cfg.symmetric);
  const auto nf = node_features(cloud.positions, cloud.normals, cfg.features).values;
  const Mat<T> x = apply_norm(nf, ck.norms.nodes).cast<T>();
  const Mat<T> e = apply_norm(graph.edge_features, ck.norms.edges).cast<T>();
  const Index halo = ck.model_config.layer_count;
  const auto ps = partition_graph(graph, parts, PartitionMethod::coordinate_bisection, halo, {});
  const auto model = ck.model.cast<T>();
  const Mat<T> out = partitioned_forward(model, ps, x, e);
  Prediction p;
  p.positions = cloud.positions;
  p.normals = cloud.normals;
  p.values = invert_norm(out.template cast<double>(), ck.norms.targets);
  p.total_area = soup.total_area();
  for (int a = 0; a < 3; ++a) p.force[a] = integrate_force(p.values, p.normals, p.total_area, a);
  p.partitions = parts;
  return p;
}

inline std::string prediction_csv(const Prediction& p) {
  std::ostringstream os;
  os.precision(9);
  os << "node_id,x,y,z,p,tau_x,tau_y,tau_z\n";
  for (std::size_t i = 0; i < p.positions.size(); ++i) {
    const auto& x = p.positions[i];
    const auto r = static_cast<Index>(i);
    os << i << "," << x.x() << "," << x.y() << "," << x.z() << "," << p.values(r, 0) << "," << p.values(r, 1) << ","
       << p.values(r, 2) << "," << p.values(r, 3) << "\n";
  }
  return os.str();
}

inline std::string write_prediction_bundle(const fs::path& dir, const Prediction& p, const json& metadata) {
  BundleWriter w(dir, "prediction");
  const auto n = static_cast<Index>(p.positions.size());
  w.array<float>("positions", flatten_f32(p.positions), {n, 3});
  const char* names[] = {"pressure", "shear_x", "shear_y", "shear_z"};
  for (Index c = 0; c < 4; ++c) {
    std::vector<float> col(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = static_cast<float>(p.values(i, c));
    w.array<float>(names[c], col);
  }
  auto& m = w.meta()["metadata"];
  m = metadata;
  m["node_count"] = n;
  m["partitions"] = p.partitions;
  m["total_area"] = p.total_area;
  m["force"] = {p.force.x(), p.force.y(), p.force.z()};
  const auto sum = w.finish();
  const auto csv = prediction_csv(p);
  write_file_bytes(dir / "predictions.csv",
                   std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(csv.data()), csv.size()));
  return sum;
}

// ---------------------------------------------------------------------------
// Verification suite

/// max |a - b| / max |b| per tensor, maximised over tensors (absolute when b is all zero).
template <class T>
double max_relative_deviation(const std::vector<Mat<T>>& a, const std::vector<Mat<T>>& b) {
  require(a.size() == b.size(), "max_relative_deviation: tensor count mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = (a[i].template cast<double>() - b[i].template cast<double>()).cwiseAbs().maxCoeff();
    const double scale = b[i].template cast<double>().cwiseAbs().maxCoeff();
    worst = std::max(worst, scale > 0 ? diff / scale : diff);
  }
  return worst;
}

template <class T>
double max_abs_deviation(const Mat<T>& a, const Mat<T>& b) {
  return (a.template cast<double>() - b.template cast<double>()).cwiseAbs().maxCoeff();
}

struct VerifyOptions {
  Index nodes = 600;
  std::vector<Index> levels{150, 600};
  Index k = 6;
  Index layers = 3;
  Index hidden = 16;
  Index partitions = 4;
  Index halo = -1;  // -1: equal to layers
  std::uint64_t seed = 0;
  double forward_tol_f64 = 1e-10;
  double forward_tol_f32 = 1e-5;
  double gradient_tol = 1e-9;
  double negative_control_min = 1e-6;
  bool include_f32 = true;
};

struct VerifyReport {
  Index halo = 0;
  Index layers = 0;
  double forward_dev_f64 = 0.0;
  double forward_dev_f32 = 0.0;
  double gradient_rel_dev = 0.0;
  double negative_control_dev = 0.0;
  Index stencil_radius = 0;
  Index stencil_empirical = 0;
  bool stencil_bitwise = false;
  std::vector<std::string> failures;

  bool ok() const { return failures.empty(); }
};

/// Random two-level surface graph on a morphed superellipsoid.
inline Graph verify_graph(const VerifyOptions& o, MultiScalePointCloud* cloud_out = nullptr) {
  SyntheticShape shape;
  shape.kind = "superellipsoid";
  shape.subdivisions = 2;
  const auto soup = synthetic_geometry(shape, mix_seed(o.seed, 11));
  auto cloud = multiscale_sample(soup, o.levels, mix_seed(o.seed, 12));
  auto g = build_multiscale_graph(cloud, o.k);
  if (cloud_out) *cloud_out = std::move(cloud);
  return g;
}

/// Forward (f64, f32), gradient, negative-control and stencil checks. Any tolerance
/// violation is listed in `failures`; a configured halo below the layer count
/// therefore fails the forward check.
inline VerifyReport run_verify(const VerifyOptions& o) {
  VerifyReport rep;
  rep.layers = o.layers;
  rep.halo = o.halo < 0 ? o.layers : o.halo;
  MultiScalePointCloud cloud;
  const auto g = verify_graph(o, &cloud);
  const MatrixD raw = node_features(cloud.positions, cloud.normals).values;
  const MatrixD nf = apply_norm(raw, fit_norm(raw));
  const MatrixD ef = apply_norm(g.edge_features, fit_norm(g.edge_features));
  const MatrixD targets = analytic_targets(cloud.positions, cloud.normals);
  ModelConfig mc;
  mc.layer_count = o.layers;
  mc.hidden_dim = o.hidden;
  const auto model = init_model(mc, mix_seed(o.seed, 13));
  const auto view = view_of(g);
  const auto ps = partition_graph(g, o.partitions, PartitionMethod::coordinate_bisection, rep.halo, {});

  const MatrixD full = full_forward(model, view, nf, ef);
  rep.forward_dev_f64 = max_abs_deviation(full, partitioned_forward(model, ps, nf, ef, false));
  if (rep.forward_dev_f64 > o.forward_tol_f64) {
    rep.failures.push_back("forward f64 deviation " + std::to_string(rep.forward_dev_f64) + " exceeds tolerance");
  }
  if (o.include_f32) {
    const auto mf = model.cast<float>();
    const Mat<float> nf32 = nf.cast<float>(), ef32 = ef.cast<float>();
    rep.forward_dev_f32 = max_abs_deviation(full_forward(mf, view, nf32, ef32), partitioned_forward(mf, ps, nf32, ef32, false));
    if (rep.forward_dev_f32 > o.forward_tol_f32) {
      rep.failures.push_back("forward f32 deviation " + std::to_string(rep.forward_dev_f32) + " exceeds tolerance");
    }
  }
  if (rep.halo >= o.layers) {
    const auto fg = full_gradients(model, view, nf, ef, targets);
    const auto pg = partitioned_gradients(model, ps, nf, ef, targets);
    rep.gradient_rel_dev = max_relative_deviation(pg.grads, fg.grads);
  } else {
    rep.gradient_rel_dev = std::numeric_limits<double>::infinity();
  }
  if (!(rep.gradient_rel_dev <= o.gradient_tol)) {
    rep.failures.push_back("gradient relative deviation " + std::to_string(rep.gradient_rel_dev) +
                           " exceeds tolerance (halo " + std::to_string(rep.halo) + ")");
  }
  // The checker must see a too-small halo.
  if (o.layers >= 1) {
    const auto short_ps = partition_graph(g, o.partitions, PartitionMethod::coordinate_bisection, o.layers - 1, {});
    rep.negative_control_dev = max_abs_deviation(full, partitioned_forward(model, short_ps, nf, ef, false));
    if (!(rep.negative_control_dev > o.negative_control_min)) {
      rep.failures.push_back("negative control: halo L-1 deviation " + std::to_string(rep.negative_control_dev) +
                             " is not above " + std::to_string(o.negative_control_min));
    }
  }
  // Stencil: conv(3), pool(2), conv(3) on a 1D probe.
  stencil::StencilStack st;
  st.rank = 1;
  st.conv(3).pointwise(stencil::PointwiseFn::silu).pool(2).conv(3);
  stencil::randomize_weights(st, mix_seed(o.seed, 14));
  stencil::Field probe({64, 1, 1});
  std::mt19937_64 rng(mix_seed(o.seed, 15));
  std::normal_distribution<double> nd;
  for (auto& v : probe.values) v = nd(rng);
  rep.stencil_radius = stencil::receptive_radius(st);
  rep.stencil_empirical = stencil::empirical_min_halo(st, probe, 4);
  const auto geo = stencil::stack_geometry(st);
  rep.stencil_bitwise =
      stencil::stencil_forward(stencil::grid_partition(probe, 4, 0, rep.stencil_radius, geo.alignment), st) ==
      stencil::forward(st, probe);
  if (rep.stencil_empirical != rep.stencil_radius || !rep.stencil_bitwise) {
    rep.failures.push_back("stencil: empirical halo " + std::to_string(rep.stencil_empirical) + " vs radius " +
                           std::to_string(rep.stencil_radius));
  }
  return rep;
}

}  // namespace xmgn
