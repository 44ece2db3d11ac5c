// SPDX-License-Identifier: Apache-2.0
//
// MeshGraphNet-style encode / process / decode, run on the full graph or on
// halo-padded partitions. Partitioned training sums per-partition SSE
// gradients in partition order, which reproduces the full-graph step.

#pragma once

#include "xmgn/common.hpp"
#include "xmgn/diff.hpp"
#include "xmgn/graph.hpp"
#include "xmgn/partition.hpp"

#include <random>
#include <string>
#include <thread>
#include <vector>

namespace xmgn {

enum class Activation { silu, gelu };

inline std::string to_string(Activation a) { return a == Activation::silu ? "silu" : "gelu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + s + "'");
}

struct ModelConfig {
  Index layer_count = 15;
  Index hidden_dim = 512;
  Index mlp_hidden_layers = 2;
  Activation activation = Activation::silu;
  Index node_input_dim = 24;
  Index edge_input_dim = 4;
  Index output_dim = 4;
  bool residual = true;       // h + phi_u(h, m); false gives the plain update
  bool update_edges = false;  // e <- e + m_ij after each layer
  bool layernorm = true;

  void validate() const {
    require(layer_count >= 0, "model: layer_count must be >= 0");
    require(hidden_dim >= 1, "model: hidden_dim must be >= 1");
    require(mlp_hidden_layers >= 0, "model: mlp_hidden_layers must be >= 0");
    require(node_input_dim >= 1 && edge_input_dim >= 1 && output_dim >= 1, "model: input/output widths must be >= 1");
  }
};

struct MlpSpec {
  std::vector<std::pair<Index, Index>> linears;  // (weight id, bias id)
  Index ln_gamma = -1;
  Index ln_beta = -1;
};

template <class T>
struct Model {
  ModelConfig config;
  ParameterStore<T> params;
  MlpSpec node_encoder, edge_encoder, decoder;
  std::vector<MlpSpec> message, update;

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    m.params = params.template cast<U>();
    m.node_encoder = node_encoder;
    m.edge_encoder = edge_encoder;
    m.decoder = decoder;
    m.message = message;
    m.update = update;
    return m;
  }
};

namespace detail {

inline MlpSpec add_mlp(ParameterStore<double>& store, std::mt19937_64& rng, const std::string& name, Index in,
                       Index hidden, Index hidden_layers, Index out, bool layernorm) {
  MlpSpec spec;
  Index width = in;
  for (Index layer = 0; layer <= hidden_layers; ++layer) {
    const Index next = layer == hidden_layers ? out : hidden;
    const double bound = std::sqrt(6.0 / static_cast<double>(width + next));
    std::uniform_real_distribution<double> uni(-bound, bound);
    MatrixD w(width, next);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = uni(rng);
    const std::string prefix = name + ".linear" + std::to_string(layer);
    const Index wid = store.add(prefix + ".weight", std::move(w));
    const Index bid = store.add(prefix + ".bias", MatrixD::Zero(1, next));
    spec.linears.emplace_back(wid, bid);
    width = next;
  }
  if (layernorm) {
    spec.ln_gamma = store.add(name + ".norm.gamma", MatrixD::Ones(1, out));
    spec.ln_beta = store.add(name + ".norm.beta", MatrixD::Zero(1, out));
  }
  return spec;
}

}  // namespace detail

/// Deterministic Glorot-uniform initialisation; every layer owns distinct parameters.
inline Model<double> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<double> m;
  m.config = cfg;
  std::mt19937_64 rng(seed);
  const Index h = cfg.hidden_dim, hl = cfg.mlp_hidden_layers;
  m.node_encoder = detail::add_mlp(m.params, rng, "node_encoder", cfg.node_input_dim, h, hl, h, cfg.layernorm);
  m.edge_encoder = detail::add_mlp(m.params, rng, "edge_encoder", cfg.edge_input_dim, h, hl, h, cfg.layernorm);
  for (Index l = 0; l < cfg.layer_count; ++l) {
    const std::string p = "processor" + std::to_string(l);
    m.message.push_back(detail::add_mlp(m.params, rng, p + ".message", 3 * h, h, hl, h, cfg.layernorm));
    m.update.push_back(detail::add_mlp(m.params, rng, p + ".update", 2 * h, h, hl, h, cfg.layernorm));
  }
  m.decoder = detail::add_mlp(m.params, rng, "decoder", h, h, hl, cfg.output_dim, false);
  return m;
}

/// Edge list of a (sub)graph in CSR order: edge e carries src[e] -> dst[e].
/// When layer_nodes is set, layer l only updates the first layer_nodes[l] nodes
/// through the first layer_edges[l] edges (rows beyond them cannot reach the output).
struct GraphView {
  Index node_count = 0;
  std::vector<Index> src;
  std::vector<Index> dst;
  std::vector<Index> layer_nodes;
  std::vector<Index> layer_edges;
};

inline GraphView view_of(const Graph& g) { return GraphView{g.node_count, g.sources, g.destinations()}; }

template <class T>
using Var = typename Tape<T>::Var;

template <class T>
Var<T> activate(Tape<T>& tape, Activation act, Var<T> x) {
  return act == Activation::silu ? tape.silu(x) : tape.gelu(x);
}

/// Linear layers from `first` on, with the activation between layers and optional trailing layernorm.
template <class T>
Var<T> apply_mlp(Tape<T>& tape, const MlpSpec& spec, Activation act, Var<T> x, std::size_t first = 0) {
  for (std::size_t i = first; i < spec.linears.size(); ++i) {
    if (i > 0) x = activate(tape, act, x);
    x = tape.linear(x, tape.parameter(spec.linears[i].first), tape.parameter(spec.linears[i].second));
  }
  if (spec.ln_gamma >= 0) x = tape.layernorm(x, tape.parameter(spec.ln_gamma), tape.parameter(spec.ln_beta));
  return x;
}

template <class T>
struct Latents {
  Var<T> nodes;
  Var<T> edges;
};

template <class T>
Latents<T> encode(Tape<T>& tape, const Model<T>& model, Mat<T> node_features, Mat<T> edge_features) {
  const auto& cfg = model.config;
  if (node_features.cols() != cfg.node_input_dim) {
    throw ConfigError("encode: node features have " + std::to_string(node_features.cols()) +
                      " columns, model expects " + std::to_string(cfg.node_input_dim));
  }
  if (edge_features.cols() != cfg.edge_input_dim) {
    throw ConfigError("encode: edge features have " + std::to_string(edge_features.cols()) +
                      " columns, model expects " + std::to_string(cfg.edge_input_dim));
  }
  Latents<T> z;
  z.nodes = apply_mlp(tape, model.node_encoder, cfg.activation, tape.constant(std::move(node_features)));
  z.edges = apply_mlp(tape, model.edge_encoder, cfg.activation, tape.constant(std::move(edge_features)));
  return z;
}

/// One message-passing layer: m_ij = phi_m(h_i, h_j, e_ij), m_i = sum_j m_ij,
/// h_i' = h_i + phi_u(h_i, m_i).
template <class T>
Latents<T> process_layer(Tape<T>& tape, const Model<T>& model, Index layer, Latents<T> z, const GraphView& view) {
  const auto& cfg = model.config;
  const auto& phi = model.message[static_cast<std::size_t>(layer)];
  const auto l = static_cast<std::size_t>(layer);
  const bool pruned = !view.layer_nodes.empty();
  const Index n = pruned ? view.layer_nodes[l] : view.node_count;
  const Index m = pruned ? view.layer_edges[l] : static_cast<Index>(view.src.size());
  std::vector<Index> src(view.src.begin(), view.src.begin() + m);
  std::vector<Index> dst(view.dst.begin(), view.dst.begin() + m);
  const auto edges = tape.top_rows(z.edges, m);
  const auto nodes = tape.top_rows(z.nodes, n);
  // First message layer over [h_i | h_j | e_ij], fused with the gathers.
  const auto pre = tape.edge_linear(z.nodes, edges, tape.parameter(phi.linears[0].first),
                                    tape.parameter(phi.linears[0].second), std::move(src), dst);
  const auto messages = apply_mlp(tape, phi, cfg.activation, pre, 1);
  const auto aggregated = tape.scatter_sum(messages, std::move(dst), n);
  const auto upd_in = tape.concat_cols({nodes, aggregated});
  auto updated = apply_mlp(tape, model.update[l], cfg.activation, upd_in);
  if (cfg.residual) updated = tape.add(nodes, updated);
  Latents<T> out{updated, edges};
  if (cfg.update_edges) out.edges = tape.add(edges, messages);
  return out;
}

template <class T>
Var<T> forward(Tape<T>& tape, const Model<T>& model, const GraphView& view, Mat<T> node_features,
               Mat<T> edge_features) {
  if (node_features.rows() != view.node_count) throw ShapeError("forward: node feature rows != node count");
  if (edge_features.rows() != static_cast<Index>(view.src.size())) {
    throw ShapeError("forward: edge feature rows != edge count");
  }
  if (!view.layer_nodes.empty() && (static_cast<Index>(view.layer_nodes.size()) != model.config.layer_count ||
                                    view.layer_edges.size() != view.layer_nodes.size())) {
    throw ShapeError("forward: per-layer extents do not match the layer count");
  }
  auto z = encode(tape, model, std::move(node_features), std::move(edge_features));
  for (Index l = 0; l < model.config.layer_count; ++l) z = process_layer(tape, model, l, z, view);
  return apply_mlp(tape, model.decoder, model.config.activation, z.nodes);
}

/// One partition's inputs in computation order: local nodes sorted by hop
/// distance to the owned set (owned first, ascending global id within a
/// distance), keeping only nodes within `layers` hops and edges whose receiver
/// is within `layers - 1` hops.
template <class T>
struct LocalInputs {
  GraphView view;
  std::vector<Index> order;  // computation row -> local node id
  Index owned_count = 0;     // rows of the forward output
  Mat<T> node_features;
  Mat<T> edge_features;
};

template <class T>
LocalInputs<T> local_inputs(const LocalPartition& part, const Mat<T>& node_features, const Mat<T>& edge_features,
                            Index layers) {
  const Index n = part.local_count();
  const auto at = [](const auto& v, Index i) { return v[static_cast<std::size_t>(i)]; };
  // Breadth-first over incoming edges: depth is the distance a message needs to reach an owned node.
  std::vector<Index> depth(static_cast<std::size_t>(n), -1);
  std::vector<Index> queue;
  for (Index v = 0; v < n; ++v) {
    if (at(part.owned_mask, v)) {
      depth[static_cast<std::size_t>(v)] = 0;
      queue.push_back(v);
    }
  }
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const Index v = queue[head];
    if (at(depth, v) >= layers) continue;
    for (Index e = at(part.offsets, v); e < at(part.offsets, v + 1); ++e) {
      const Index s = at(part.sources, e);
      if (at(depth, s) < 0) {
        depth[static_cast<std::size_t>(s)] = at(depth, v) + 1;
        queue.push_back(s);
      }
    }
  }
  LocalInputs<T> in;
  std::vector<Index> count(static_cast<std::size_t>(layers) + 1, 0);  // nodes per depth
  for (Index v = 0; v < n; ++v) {
    if (at(depth, v) >= 0) ++count[static_cast<std::size_t>(at(depth, v))];
  }
  std::vector<Index> start(count.size() + 1, 0);
  for (std::size_t d = 0; d < count.size(); ++d) start[d + 1] = start[d] + count[d];
  in.order.resize(static_cast<std::size_t>(start.back()));
  std::vector<Index> row(static_cast<std::size_t>(n), -1);
  {
    auto fill = start;
    for (Index v = 0; v < n; ++v) {
      if (at(depth, v) < 0) continue;
      const Index r = fill[static_cast<std::size_t>(at(depth, v))]++;
      in.order[static_cast<std::size_t>(r)] = v;
      row[static_cast<std::size_t>(v)] = r;
    }
  }
  in.owned_count = count[0];
  in.view.node_count = start.back();
  std::vector<Index> edge_rows;
  std::vector<Index> row_offsets(in.order.size() + 1, 0);
  for (std::size_t r = 0; r < in.order.size(); ++r) {
    const Index v = in.order[r];
    if (at(depth, v) < layers) {
      for (Index e = at(part.offsets, v); e < at(part.offsets, v + 1); ++e) {
        in.view.src.push_back(at(row, at(part.sources, e)));
        in.view.dst.push_back(static_cast<Index>(r));
        edge_rows.push_back(at(part.edge_ids, e));
      }
    }
    row_offsets[r + 1] = static_cast<Index>(in.view.src.size());
  }
  for (Index l = 0; l < layers; ++l) {
    const Index nodes = start[static_cast<std::size_t>(layers - l)];
    in.view.layer_nodes.push_back(nodes);
    in.view.layer_edges.push_back(row_offsets[static_cast<std::size_t>(nodes)]);
  }
  in.node_features.resize(in.view.node_count, node_features.cols());
  for (Index r = 0; r < in.view.node_count; ++r) {
    in.node_features.row(r) = node_features.row(at(part.local_to_global, at(in.order, r)));
  }
  in.edge_features.resize(static_cast<Index>(edge_rows.size()), edge_features.cols());
  for (Index e = 0; e < in.edge_features.rows(); ++e) in.edge_features.row(e) = edge_features.row(at(edge_rows, e));
  return in;
}

inline void require_halo(Index halo_depth, const ModelConfig& cfg) {
  if (halo_depth < cfg.layer_count) {
    throw ConfigError("halo depth " + std::to_string(halo_depth) + " is smaller than the model's " +
                      std::to_string(cfg.layer_count) + " message-passing layers; partitioned results would differ");
  }
}

/// Decoder output for every node of the full graph.
template <class T>
Mat<T> full_forward(const Model<T>& model, const GraphView& view, const Mat<T>& node_features,
                    const Mat<T>& edge_features) {
  Tape<T> tape(&model.params);
  auto out = forward(tape, model, view, node_features, edge_features);
  return tape.value(out);
}

/// Owned rows (ascending global id) from one partition, without the halo check.
template <class T>
Mat<T> partition_forward_unchecked(const Model<T>& model, const LocalPartition& part, const Mat<T>& node_features,
                                   const Mat<T>& edge_features) {
  auto in = local_inputs(part, node_features, edge_features, model.config.layer_count);
  Tape<T> tape(&model.params);
  const auto out = forward(tape, model, in.view, std::move(in.node_features), std::move(in.edge_features));
  return tape.value(out).topRows(in.owned_count);
}

template <class T>
Mat<T> partition_forward(const Model<T>& model, const LocalPartition& part, Index halo_depth,
                         const Mat<T>& node_features, const Mat<T>& edge_features) {
  require_halo(halo_depth, model.config);
  return partition_forward_unchecked(model, part, node_features, edge_features);
}

/// Runs every partition and scatters owned rows back to global order.
template <class T>
Mat<T> partitioned_forward(const Model<T>& model, const PartitionSet& ps, const Mat<T>& node_features,
                           const Mat<T>& edge_features, bool check_halo = true) {
  if (check_halo) require_halo(ps.halo_depth, model.config);
  Mat<T> out(node_features.rows(), model.config.output_dim);
  for (const auto& part : ps.parts) {
    const auto rows = partition_forward_unchecked(model, part, node_features, edge_features);
    for (std::size_t i = 0; i < part.owned.size(); ++i) out.row(part.owned[i]) = rows.row(static_cast<Index>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

template <class T>
struct LossGradients {
  double sse = 0.0;
  Gradients<T> grads;
};

/// Unscaled SSE and its parameter gradients over the full graph.
template <class T>
LossGradients<T> full_gradients(const Model<T>& model, const GraphView& view, const Mat<T>& node_features,
                                const Mat<T>& edge_features, const Mat<T>& targets) {
  Tape<T> tape(&model.params);
  const auto pred = forward(tape, model, view, node_features, edge_features);
  const auto loss = tape.masked_sse(pred, tape.constant(targets), std::vector<std::uint8_t>(static_cast<std::size_t>(view.node_count), 1));
  LossGradients<T> out;
  out.sse = static_cast<double>(tape.value(loss)(0, 0));
  if (!std::isfinite(out.sse)) throw NumericError("full-graph loss is not finite");
  out.grads = zero_gradients(model.params);
  tape.backward(loss, out.grads);
  return out;
}

namespace detail {

template <class T>
LossGradients<T> partition_gradients(const Model<T>& model, const LocalPartition& part, const Mat<T>& node_features,
                                     const Mat<T>& edge_features, const Mat<T>& targets) {
  auto in = local_inputs(part, node_features, edge_features, model.config.layer_count);
  Mat<T> local_targets(in.owned_count, targets.cols());
  for (Index r = 0; r < in.owned_count; ++r) {
    local_targets.row(r) = targets.row(part.local_to_global[static_cast<std::size_t>(in.order[static_cast<std::size_t>(r)])]);
  }
  Tape<T> tape(&model.params);
  const auto forward_rows =
      forward(tape, model, in.view, std::move(in.node_features), std::move(in.edge_features));
  // The last layer only updates owned rows; any halo rows left (no layers) are dropped.
  const auto pred = tape.top_rows(forward_rows, in.owned_count);
  const auto loss = tape.masked_sse(pred, tape.constant(std::move(local_targets)),
                                    std::vector<std::uint8_t>(static_cast<std::size_t>(in.owned_count), 1));
  LossGradients<T> out;
  out.sse = static_cast<double>(tape.value(loss)(0, 0));
  if (!std::isfinite(out.sse)) {
    throw NumericError("partition " + std::to_string(part.id) + " produced a non-finite loss");
  }
  out.grads = zero_gradients(model.params);
  tape.backward(loss, out.grads);
  return out;
}

}  // namespace detail

/// Sum over partitions (in partition order) of owned-node SSE and its gradients.
/// Up to `workers` partitions run concurrently; the reduction order is fixed, so
/// results do not depend on the worker count.
template <class T>
LossGradients<T> partitioned_gradients(const Model<T>& model, const PartitionSet& ps, const Mat<T>& node_features,
                                       const Mat<T>& edge_features, const Mat<T>& targets, Index workers = 1) {
  require_halo(ps.halo_depth, model.config);
  require(targets.rows() == node_features.rows(), "partitioned_gradients: targets must cover every node");
  LossGradients<T> total;
  total.grads = zero_gradients(model.params);
  const auto count = static_cast<Index>(ps.parts.size());
  const Index batch = std::max<Index>(1, workers);
  for (Index begin = 0; begin < count; begin += batch) {
    const Index end = std::min(count, begin + batch);
    std::vector<LossGradients<T>> results(static_cast<std::size_t>(end - begin));
    if (end - begin == 1) {
      results[0] = detail::partition_gradients(model, ps.parts[static_cast<std::size_t>(begin)], node_features,
                                               edge_features, targets);
    } else {
      std::vector<std::exception_ptr> errors(results.size());
      std::vector<std::thread> threads;
      for (Index p = begin; p < end; ++p) {
        threads.emplace_back([&, p] {
          try {
            results[static_cast<std::size_t>(p - begin)] = detail::partition_gradients(
                model, ps.parts[static_cast<std::size_t>(p)], node_features, edge_features, targets);
          } catch (...) {
            errors[static_cast<std::size_t>(p - begin)] = std::current_exception();
          }
        });
      }
      for (auto& t : threads) t.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }
    for (auto& r : results) {
      total.sse += r.sse;
      for (std::size_t i = 0; i < total.grads.size(); ++i) total.grads[i] += r.grads[i];
    }
  }
  return total;
}

struct TrainStepResult {
  double loss = 0.0;  // mean squared error over all nodes and outputs
  double lr = 0.0;
  double grad_norm = 0.0;
};

/// Rescales SSE gradients to the full-graph mean, then clips and steps.
template <class T>
TrainStepResult apply_gradients(Model<T>& model, OptimizerState<T>& opt, LossGradients<T> lg, Index node_count) {
  const double denom = static_cast<double>(node_count) * static_cast<double>(model.config.output_dim);
  const T s = static_cast<T>(1.0 / denom);
  for (auto& g : lg.grads) g *= s;
  const auto info = adam_step(model.params, std::move(lg.grads), opt);
  return {lg.sse / denom, info.lr, info.grad_norm};
}

template <class T>
TrainStepResult full_train_step(Model<T>& model, OptimizerState<T>& opt, const GraphView& view,
                                const Mat<T>& node_features, const Mat<T>& edge_features, const Mat<T>& targets) {
  return apply_gradients(model, opt, full_gradients(model, view, node_features, edge_features, targets),
                         view.node_count);
}

template <class T>
TrainStepResult partitioned_train_step(Model<T>& model, OptimizerState<T>& opt, const PartitionSet& ps,
                                       const Mat<T>& node_features, const Mat<T>& edge_features, const Mat<T>& targets,
                                       Index workers = 1) {
  return apply_gradients(model, opt, partitioned_gradients(model, ps, node_features, edge_features, targets, workers),
                         node_features.rows());
}

/// F = sum_i (p_i n_i[axis] + tau_i[axis]) * A / n, with prediction columns (p, tau_x, tau_y, tau_z).
inline double integrate_force(const MatrixD& prediction, std::span<const Vec3> normals, double total_area, int axis) {
  require(prediction.cols() >= 4, "integrate_force: prediction needs pressure and three shear columns");
  require(prediction.rows() == static_cast<Index>(normals.size()), "integrate_force: normals/prediction mismatch");
  require(axis >= 0 && axis < 3, "integrate_force: axis must be 0, 1 or 2");
  if (prediction.rows() == 0) return 0.0;
  const double weight = total_area / static_cast<double>(prediction.rows());
  double force = 0.0;
  for (Index i = 0; i < prediction.rows(); ++i) {
    force += (prediction(i, 0) * normals[static_cast<std::size_t>(i)][axis] + prediction(i, 1 + axis)) * weight;
  }
  return force;
}

}  // namespace xmgn
