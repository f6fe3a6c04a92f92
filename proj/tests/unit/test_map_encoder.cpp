#include "detra/gradcheck.hpp"
#include "detra/map_encoder.hpp"
#include "detra/scene.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

using namespace detra;

namespace {

struct Fixture {
  ParamStore store;
  MapEncoder encoder;
  explicit Fixture(int width = 8, int rounds = 3, std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    encoder = MapEncoder(store, "map", width, rounds, rng);
  }
  Matrix embed(const LaneGraph& g) {
    Tape tape;
    return encoder.encode(tape, g).embeddings.value();
  }
};

LaneGraph transformed(LaneGraph g, double angle, Eigen::Vector2d shift) {
  const Eigen::Rotation2Dd rot(angle);
  for (auto& n : g.nodes) {
    n.position = rot * n.position + shift;
    n.heading = normalize_angle(n.heading + angle);
  }
  return g;
}

LaneGraph sample_graph(std::uint64_t seed) {
  return build_lane_graph(make_lane_template("intersection", 20.0, seed)).graph;
}

}  // namespace

TEST(MapEncoder, WithoutEdgesEachNodeDependsOnlyOnItself) {
  Fixture f;
  LaneGraph g = sample_graph(1);
  g.edges.clear();
  const Matrix base = f.embed(g);
  LaneGraph changed = g;
  changed.nodes[0].curvature = 0.3;
  changed.nodes[0].left_type = BoundaryType::dashed;
  const Matrix after = f.embed(changed);
  EXPECT_FALSE(base.row(0).isApprox(after.row(0)));
  EXPECT_EQ(base.bottomRows(base.rows() - 1), after.bottomRows(after.rows() - 1));
}

TEST(MapEncoder, TranslationInvariance) {
  Fixture f;
  // Dyadic coordinates make the relative displacements exact under a dyadic shift.
  LaneTemplate t;
  Centerline a, b;
  a.pieces = b.pieces = {{24.0, 0.0}};
  b.start = Eigen::Vector2d(0.0, 4.0);
  t.lanes = {a, b};
  t.left_neighbors = {{0, 1}};
  t.connections = {};
  const LaneGraph g = build_lane_graph(t).graph;
  EXPECT_EQ(f.embed(g), f.embed(transformed(g, 0.0, Eigen::Vector2d(64.0, -32.0))));

  const LaneGraph generic = sample_graph(3);
  const Matrix moved = f.embed(transformed(generic, 0.0, Eigen::Vector2d(13.37, -7.21)));
  EXPECT_LE((f.embed(generic) - moved).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MapEncoder, RotationInvariance) {
  Fixture f;
  const LaneGraph g = sample_graph(4);
  const Matrix base = f.embed(g);
  for (double angle : {0.3, 1.7, -2.9}) {
    const Matrix rotated = f.embed(transformed(g, angle, Eigen::Vector2d(2.0, -5.0)));
    EXPECT_LE((base - rotated).cwiseAbs().maxCoeff() / base.cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(MapEncoder, PermutationEquivariance) {
  Fixture f;
  const LaneGraph g = sample_graph(5);
  std::vector<int> perm(g.nodes.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(2);
  std::shuffle(perm.begin(), perm.end(), rng);
  // perm[i] is the new label of node i.
  LaneGraph p = g;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) p.nodes[perm[i]] = g.nodes[i];
  for (auto& e : p.edges) e = LaneEdge{perm[e.src], perm[e.dst], e.kind};
  const Matrix base = f.embed(g), permuted = f.embed(p);
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    EXPECT_LE((base.row(i) - permuted.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MapEncoder, PositionsEqualNodePositions) {
  Fixture f;
  const LaneGraph g = sample_graph(6);
  Tape tape;
  const MapTokens tokens = f.encoder.encode(tape, g);
  ASSERT_EQ(tokens.positions.rows(), static_cast<Eigen::Index>(g.nodes.size()));
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    EXPECT_EQ(tokens.positions.row(i).transpose(), g.nodes[i].position);
}

TEST(MapEncoder, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Fixture f(4, 2, seed);
    LaneTemplate t;
    Centerline a, b;
    a.pieces = {{9.0, 0.05}};
    b.pieces = {{9.0, 0.0}};
    b.start = Eigen::Vector2d(0.3, 3.5);
    t.lanes = {a, b};
    t.left_neighbors = {{0, 1}};
    t.connections = {{0, 1}};
    const LaneGraph g = build_lane_graph(t).graph;
    const auto result = gradcheck(
        [&](Tape& tape, const std::vector<Var>& in) { return f.encoder.encode_features(tape, g, in[0]); },
        {map_node_features(g)}, &f.store, seed, 1e-6, 16);
    EXPECT_LE(result.max_rel_error, 1e-4);
  }
}
