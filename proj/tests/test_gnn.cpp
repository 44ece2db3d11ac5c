// SPDX-License-Identifier: Apache-2.0

#include "oracles.hpp"
#include "xmgn/gnn.hpp"
#include "xmgn/graph.hpp"
#include "xmgn/partition.hpp"
#include "xmgn/pointcloud.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

using namespace xmgn;

namespace {

struct Fixture {
  Graph graph;
  MatrixD nodes;
  MatrixD edges;
  MatrixD targets;
};

MatrixD random_mat(Index r, Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  MatrixD m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

Fixture make_fixture(Index n, std::uint64_t seed) {
  Fixture f;
  const auto cloud = multiscale_sample(make_icosphere(3), std::vector<Index>{n / 4, n}, seed);
  f.graph = build_multiscale_graph(cloud, 6);
  f.nodes = random_mat(n, 5, seed + 1);
  f.edges = f.graph.edge_features;
  f.targets = random_mat(n, 4, seed + 2);
  return f;
}

ModelConfig small_config(Index layers, Index hidden = 8) {
  ModelConfig c;
  c.layer_count = layers;
  c.hidden_dim = hidden;
  c.mlp_hidden_layers = 1;
  c.node_input_dim = 5;
  return c;
}

double max_abs(const MatrixD& a, const MatrixD& b) { return (a - b).cwiseAbs().maxCoeff(); }

double max_rel(const Gradients<double>& a, const Gradients<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max(b[i].cwiseAbs().maxCoeff(), 1e-12);
    worst = std::max(worst, (a[i] - b[i]).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

}  // namespace

TEST(Gnn, OutputShapeAndParameterNames) {
  const auto f = make_fixture(200, 1);
  const auto model = init_model(small_config(2), 3);
  const auto out = full_forward(model, view_of(f.graph), f.nodes, f.edges);
  EXPECT_EQ(out.rows(), 200);
  EXPECT_EQ(out.cols(), 4);
  EXPECT_TRUE(out.allFinite());
  EXPECT_EQ(model.message.size(), 2u);
  EXPECT_EQ(model.update.size(), 2u);
  EXPECT_GE(model.params.find("decoder.linear0.weight"), 0) << "parameter naming changed";
}

TEST(Gnn, EmptyGraph) {
  const auto model = init_model(small_config(2), 3);
  GraphView v;
  const auto out = full_forward(model, v, MatrixD(0, 5), MatrixD(0, 4));
  EXPECT_EQ(out.rows(), 0);
  EXPECT_EQ(out.cols(), 4);
}

TEST(Gnn, FeatureRowMismatchThrows) {
  const auto f = make_fixture(100, 2);
  const auto model = init_model(small_config(1), 3);
  EXPECT_THROW(full_forward(model, view_of(f.graph), MatrixD(f.nodes.topRows(99)), f.edges), ShapeError);
  EXPECT_THROW(full_forward(model, view_of(f.graph), f.nodes, MatrixD(f.edges.topRows(3))), ShapeError);
}

// With no processor layers the graph is irrelevant.
TEST(Gnn, ZeroLayersIgnoresEdges) {
  const auto f = make_fixture(120, 3);
  const auto model = init_model(small_config(0), 4);
  const auto a = full_forward(model, view_of(f.graph), f.nodes, f.edges);
  const auto b = full_forward(model, GraphView{120, {}, {}}, f.nodes, MatrixD(0, 4));
  EXPECT_EQ(a, b);
}

// Perturbing one node's input changes exactly the outputs within L directed hops.
TEST(Gnn, ReceptiveFieldMatchesHopDistance) {
  const auto f = make_fixture(300, 4);
  std::vector<std::vector<Index>> out_adj(300);
  for (const auto& e : f.graph.edges()) out_adj[static_cast<std::size_t>(e.src)].push_back(e.dst);
  for (Index layers : {1, 2, 3}) {
    const auto model = init_model(small_config(layers), 5);
    const auto base = full_forward(model, view_of(f.graph), f.nodes, f.edges);
    for (Index probe : {0, 77, 251}) {
      MatrixD x = f.nodes;
      x.row(probe).array() += 0.5;
      const auto moved = full_forward(model, view_of(f.graph), x, f.edges);
      const auto hops = oracle::bfs_hops(out_adj, {probe});
      for (Index v = 0; v < 300; ++v) {
        const bool changed = (moved.row(v) - base.row(v)).cwiseAbs().maxCoeff() > 0.0;
        EXPECT_EQ(changed, hops[static_cast<std::size_t>(v)] <= layers) << "L=" << layers << " probe " << probe << " v " << v;
      }
    }
  }
}

TEST(Gnn, PermutationEquivariance) {
  const auto f = make_fixture(150, 6);
  const auto model = init_model(small_config(3), 7);
  const auto base = full_forward(model, view_of(f.graph), f.nodes, f.edges);
  std::vector<Index> perm(150);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(8));  // old id -> new id
  std::vector<Vec3> pos(150);
  MatrixD x(150, 5);
  for (Index i = 0; i < 150; ++i) {
    pos[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = f.graph.positions[static_cast<std::size_t>(i)];
    x.row(perm[static_cast<std::size_t>(i)]) = f.nodes.row(i);
  }
  std::vector<Edge> edges;
  for (const auto& e : f.graph.edges()) edges.push_back({perm[static_cast<std::size_t>(e.src)], perm[static_cast<std::size_t>(e.dst)]});
  std::sort(edges.begin(), edges.end());
  const auto g2 = graph_from_edges(pos, edges);
  const auto out = full_forward(model, view_of(g2), x, g2.edge_features);
  for (Index i = 0; i < 150; ++i) {
    EXPECT_LE((out.row(perm[static_cast<std::size_t>(i)]) - base.row(i)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Gnn, IsolatedNodeMatchesSingletonGraph) {
  auto f = make_fixture(100, 9);
  std::vector<Vec3> pos = f.graph.positions;
  pos.push_back(Vec3(5, 5, 5));
  auto edges = f.graph.edges();
  const auto g = graph_from_edges(pos, edges);
  MatrixD x(101, 5);
  x.topRows(100) = f.nodes;
  x.row(100) = random_mat(1, 5, 10);
  const auto model = init_model(small_config(2), 11);
  const auto out = full_forward(model, view_of(g), x, g.edge_features);
  const auto alone = full_forward(model, GraphView{1, {}, {}}, MatrixD(x.bottomRows(1)), MatrixD(0, 4));
  EXPECT_EQ(out.row(100), alone.row(0));
}

TEST(Gnn, SinglePartitionIsBitwiseIdentical) {
  const auto f = make_fixture(200, 12);
  const auto model = init_model(small_config(2), 13);
  const auto ps = partition_graph(f.graph, 1, PartitionMethod::coordinate_bisection, 2);
  EXPECT_EQ(partitioned_forward(model, ps, f.nodes, f.edges), full_forward(model, view_of(f.graph), f.nodes, f.edges));
}

TEST(Gnn, PartitionedForwardMatchesFullGraph) {
  const auto f = make_fixture(400, 14);
  for (Index layers : {2, 3}) {
    const auto model = init_model(small_config(layers, 16), 15);
    const auto ref = full_forward(model, view_of(f.graph), f.nodes, f.edges);
    const auto m32 = model.cast<float>();
    const Mat<float> nodes32 = f.nodes.cast<float>(), edges32 = f.edges.cast<float>();
    const auto ref32 = full_forward(m32, view_of(f.graph), nodes32, edges32);
    for (Index parts : {2, 4}) {
      for (auto method : {PartitionMethod::coordinate_bisection, PartitionMethod::greedy_bfs}) {
        const auto ps = partition_graph(f.graph, parts, method, layers);
        EXPECT_LE(max_abs(partitioned_forward(model, ps, f.nodes, f.edges), ref), 1e-10);
        const Mat<float> got32 = partitioned_forward(m32, ps, nodes32, edges32);
        EXPECT_LE((got32 - ref32).cwiseAbs().maxCoeff(), 1e-5f);
      }
    }
  }
}

TEST(Gnn, LocalInputsOrderByDepth) {
  const auto f = make_fixture(400, 30);
  const auto ps = partition_graph(f.graph, 3, PartitionMethod::greedy_bfs, 4);
  const auto& part = ps.parts[1];
  const auto in = local_inputs(part, f.nodes, f.edges, 2);
  EXPECT_EQ(in.owned_count, static_cast<Index>(part.owned.size()));
  for (Index r = 0; r < in.owned_count; ++r) {
    EXPECT_EQ(part.local_to_global[static_cast<std::size_t>(in.order[static_cast<std::size_t>(r)])],
              part.owned[static_cast<std::size_t>(r)]);
  }
  // Halo 4 for 2 layers: nodes beyond 2 hops are dropped.
  EXPECT_LT(in.view.node_count, part.local_count());
  ASSERT_EQ(in.view.layer_nodes.size(), 2u);
  EXPECT_GE(in.view.layer_nodes[0], in.view.layer_nodes[1]);
  EXPECT_EQ(in.view.layer_nodes[1], in.owned_count);
  EXPECT_EQ(in.view.layer_edges[0], static_cast<Index>(in.view.src.size()));
  // Receivers of the first layer_edges[l] edges are the first layer_nodes[l] rows; senders were live one layer earlier.
  for (std::size_t l = 0; l < 2; ++l) {
    const Index senders = l == 0 ? in.view.node_count : in.view.layer_nodes[l - 1];
    for (Index e = 0; e < in.view.layer_edges[l]; ++e) {
      EXPECT_LT(in.view.dst[static_cast<std::size_t>(e)], in.view.layer_nodes[l]);
      EXPECT_LT(in.view.src[static_cast<std::size_t>(e)], senders);
    }
  }
  // Same owned output as with a halo of exactly L.
  const auto model = init_model(small_config(2), 31);
  const auto tight = partition_graph(f.graph, 3, PartitionMethod::greedy_bfs, 2);
  EXPECT_LE(max_abs(partitioned_forward(model, ps, f.nodes, f.edges), partitioned_forward(model, tight, f.nodes, f.edges)),
            1e-12);
}

TEST(Gnn, ShallowHaloIsRejected) {
  const auto f = make_fixture(200, 16);
  const auto model = init_model(small_config(3), 17);
  const auto ps = partition_graph(f.graph, 2, PartitionMethod::coordinate_bisection, 2);
  EXPECT_THROW(partitioned_forward(model, ps, f.nodes, f.edges), ConfigError);
  EXPECT_THROW(partition_forward(model, ps.parts[0], 2, f.nodes, f.edges), ConfigError);
  EXPECT_THROW(partitioned_gradients(model, ps, f.nodes, f.edges, f.targets), ConfigError);
  // Unchecked evaluation really does differ somewhere.
  const auto loose = partitioned_forward(model, ps, f.nodes, f.edges, false);
  EXPECT_GT(max_abs(loose, full_forward(model, view_of(f.graph), f.nodes, f.edges)), 1e-6);
}

TEST(Gnn, GradientsSumOverPartitions) {
  const auto f = make_fixture(300, 18);
  const auto model = init_model(small_config(2), 19);
  const auto full = full_gradients(model, view_of(f.graph), f.nodes, f.edges, f.targets);
  for (Index parts : {2, 3, 4}) {
    const auto ps = partition_graph(f.graph, parts, PartitionMethod::coordinate_bisection, 2);
    const auto got = partitioned_gradients(model, ps, f.nodes, f.edges, f.targets);
    EXPECT_NEAR(got.sse, full.sse, 1e-10 * full.sse);
    EXPECT_LE(max_rel(got.grads, full.grads), 1e-9);
  }
}

TEST(Gnn, WorkerCountDoesNotChangeResults) {
  const auto f = make_fixture(300, 20);
  const auto model = init_model(small_config(2), 21);
  const auto ps = partition_graph(f.graph, 4, PartitionMethod::coordinate_bisection, 2);
  const auto one = partitioned_gradients(model, ps, f.nodes, f.edges, f.targets, 1);
  const auto three = partitioned_gradients(model, ps, f.nodes, f.edges, f.targets, 3);
  EXPECT_EQ(one.sse, three.sse);
  for (std::size_t i = 0; i < one.grads.size(); ++i) EXPECT_EQ(one.grads[i], three.grads[i]);
}

TEST(Gnn, TrainingTrajectoriesAgree) {
  const auto f = make_fixture(300, 22);
  AdamConfig ac;
  ac.total_steps = 50;
  ac.lr_max = 1e-2;
  auto full_model = init_model(small_config(2), 23);
  auto part_model = full_model;
  OptimizerState<double> full_opt(full_model.params, ac), part_opt(part_model.params, ac);
  const auto ps = partition_graph(f.graph, 4, PartitionMethod::greedy_bfs, 2);
  double first_loss = 0.0, last_loss = 0.0;
  for (Index s = 0; s < 50; ++s) {
    const auto a = full_train_step(full_model, full_opt, view_of(f.graph), f.nodes, f.edges, f.targets);
    const auto b = partitioned_train_step(part_model, part_opt, ps, f.nodes, f.edges, f.targets);
    EXPECT_NEAR(a.loss, b.loss, 1e-9 * a.loss);
    if (s == 0) {
      first_loss = a.loss;
      for (std::size_t i = 0; i < full_model.params.values.size(); ++i) {
        EXPECT_LE(max_abs(full_model.params.values[i], part_model.params.values[i]), 1e-12);
      }
    }
    last_loss = a.loss;
  }
  for (std::size_t i = 0; i < full_model.params.values.size(); ++i) {
    EXPECT_LE(max_abs(full_model.params.values[i], part_model.params.values[i]), 1e-7);
  }
  EXPECT_LT(last_loss, first_loss);
}

TEST(Gnn, ForceIntegration) {
  MatrixD p(1, 4);
  p << 2.0, 0.5, 0.0, 0.0;
  const std::vector<Vec3> n1{Vec3(1, 0, 0)};
  EXPECT_DOUBLE_EQ(integrate_force(p, n1, 3.0, 0), 7.5);
  EXPECT_DOUBLE_EQ(integrate_force(p, n1, 3.0, 1), 0.0);
  MatrixD q(2, 4);
  q << 1, 0, 0, 0, 1, 0, 0, 0;
  const std::vector<Vec3> n2{Vec3(1, 0, 0), Vec3(-1, 0, 0)};
  EXPECT_DOUBLE_EQ(integrate_force(q, n2, 10.0, 0), 0.0);
  EXPECT_EQ(integrate_force(MatrixD(0, 4), {}, 1.0, 0), 0.0);
  EXPECT_THROW(integrate_force(p, n1, 1.0, 3), ConfigError);
  EXPECT_THROW(integrate_force(MatrixD(1, 3), n1, 1.0, 0), ConfigError);
}
