#include "detra/errors.hpp"
#include "detra/lane_graph.hpp"
#include "detra/json_util.hpp"
#include "detra/scene.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

using namespace detra;

namespace {

int count_edges(const LaneGraph& g, EdgeKind kind) {
  int n = 0;
  for (const auto& e : g.edges) n += e.kind == kind;
  return n;
}

void expect_edge_structure(const LaneGraph& g) {
  std::set<std::tuple<int, int, int>> edges;
  for (const auto& e : g.edges) edges.emplace(e.src, e.dst, static_cast<int>(e.kind));
  for (const auto& e : g.edges) {
    switch (e.kind) {
      case EdgeKind::successor:
        EXPECT_TRUE(edges.count({e.dst, e.src, static_cast<int>(EdgeKind::predecessor)}));
        break;
      case EdgeKind::predecessor:
        EXPECT_TRUE(edges.count({e.dst, e.src, static_cast<int>(EdgeKind::successor)}));
        break;
      case EdgeKind::left_neighbor:
        EXPECT_TRUE(edges.count({e.dst, e.src, static_cast<int>(EdgeKind::right_neighbor)}));
        break;
      case EdgeKind::right_neighbor:
        EXPECT_TRUE(edges.count({e.dst, e.src, static_cast<int>(EdgeKind::left_neighbor)}));
        break;
    }
  }
}

SceneConfig small_config() {
  SceneConfig c;
  c.lane_template = "straight";
  c.horizon = 6;
  return c;
}

}  // namespace

TEST(LaneGraph, StraightLaneNodesEveryThreeMeters) {
  LaneTemplate t;
  Centerline lane;
  lane.pieces = {{30.0, 0.0}};
  t.lanes.push_back(lane);
  const auto built = build_lane_graph(t);
  ASSERT_EQ(built.graph.nodes.size(), 10u);
  EXPECT_EQ(count_edges(built.graph, EdgeKind::successor), 9);
  for (std::size_t i = 1; i < built.graph.nodes.size(); ++i) {
    EXPECT_NEAR((built.graph.nodes[i].position - built.graph.nodes[i - 1].position).norm(), 3.0, 1e-6);
  }
  EXPECT_NEAR(built.graph.nodes[0].position.x(), 1.5, 1e-12);
  expect_edge_structure(built.graph);
}

TEST(LaneGraph, ParallelLanesPairNeighborsByArcLength) {
  LaneTemplate t;
  Centerline right, left;
  right.pieces = left.pieces = {{12.0, 0.0}};
  left.start = Eigen::Vector2d(0.0, 3.5);
  t.lanes = {right, left};
  t.left_neighbors = {{0, 1}};
  const auto built = build_lane_graph(t);
  ASSERT_EQ(count_edges(built.graph, EdgeKind::left_neighbor), 4);
  for (const auto& e : built.graph.edges) {
    if (e.kind != EdgeKind::left_neighbor) continue;
    EXPECT_NEAR(built.graph.nodes[e.src].position.x(), built.graph.nodes[e.dst].position.x(), 1e-12);
    EXPECT_LT(built.graph.nodes[e.src].position.y(), built.graph.nodes[e.dst].position.y());
  }
  expect_edge_structure(built.graph);
}

TEST(LaneGraph, CircularLaneHasConstantCurvatureAndClosedCycle) {
  LaneTemplate t;
  Centerline loop;
  const double k = 2.0 * std::numbers::pi / 30.0;
  loop.pieces = {{30.0, k}};
  loop.closed = true;
  t.lanes.push_back(loop);
  const auto built = build_lane_graph(t);
  ASSERT_EQ(built.graph.nodes.size(), 10u);
  for (const auto& n : built.graph.nodes) EXPECT_NEAR(n.curvature, k, 1e-12);
  EXPECT_EQ(count_edges(built.graph, EdgeKind::successor), 10);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& a = built.graph.nodes[i].position;
    const auto& b = built.graph.nodes[(i + 1) % 10].position;
    // Chord of a 3 m arc on the circle.
    EXPECT_NEAR((a - b).norm(), 2.0 / k * std::sin(1.5 * k), 1e-9);
  }
  expect_edge_structure(built.graph);
}

TEST(LaneGraph, RejectsShortCenterline) {
  LaneTemplate t;
  Centerline lane;
  lane.pieces = {{2.5, 0.0}};
  t.lanes.push_back(lane);
  EXPECT_THROW(build_lane_graph(t), ValidationError);
}

TEST(LaneGraph, TemplatesHaveConsistentEdges) {
  for (const char* kind : {"straight", "curved", "intersection"}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto built = build_lane_graph(make_lane_template(kind, 20.0, seed));
      EXPECT_GT(built.graph.nodes.size(), 4u);
      expect_edge_structure(built.graph);
    }
  }
}

TEST(SceneSynth, DeterministicInConfigAndSeed) {
  const SceneConfig c;
  const Scene a = generate_scene(c, 42), b = generate_scene(c, 42);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(scene_to_json(a), scene_to_json(b));
  EXPECT_FALSE(generate_scene(c, 43) == a);
}

TEST(SceneSynth, AllStaticAgentsHaveConstantTrajectories) {
  SceneConfig c = small_config();
  c.static_fraction = 1.0;
  const Scene s = generate_scene(c, 3);
  for (const auto& traj : s.gt_trajectories)
    for (const auto& p : traj) EXPECT_EQ(p, traj.front());
}

TEST(SceneSynth, ConstantSpeedOnStraightLaneGivesEqualSpacing) {
  SceneConfig c = small_config();
  c.min_agents = c.max_agents = 1;
  c.static_fraction = 0.0;
  c.min_speed = c.max_speed = 10.0;
  c.max_accel = 0.0;
  c.horizon = 11;
  c.roi = 40.0;
  const Scene s = generate_scene(c, 8);
  ASSERT_EQ(s.gt_trajectories.size(), 1u);
  const auto& traj = s.gt_trajectories[0];
  ASSERT_EQ(traj.size(), 11u);
  for (std::size_t t = 1; t < traj.size(); ++t)
    EXPECT_NEAR((traj[t].head<2>() - traj[t - 1].head<2>()).norm(), 5.0, 1e-9);
}

TEST(SceneSynth, Invariants) {
  const SceneConfig c;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene s = generate_scene(c, seed);
    ASSERT_EQ(static_cast<int>(s.sweeps.size()), c.sweeps);
    for (std::size_t n = 0; n < s.agents.size(); ++n) {
      const auto& a = s.agents[n];
      const auto& traj = s.gt_trajectories[n];
      EXPECT_EQ(traj[0], Eigen::Vector3d(a.box.x, a.box.y, a.box.theta));
      for (double v : a.speed_profile) EXPECT_GE(v, 0.0);
      if (a.is_static) {
        for (double v : a.speed_profile) EXPECT_EQ(v, 0.0);
      } else {
        for (std::size_t t = 1; t < traj.size(); ++t) {
          const Eigen::Vector2d d = traj[t].head<2>() - traj[t - 1].head<2>();
          EXPECT_NEAR(normalize_angle(std::atan2(d.y(), d.x()) - traj[t].z()), 0.0, 1e-6);
        }
      }
      // Spawned on a lane centerline up to the lateral tolerance. Segment ends
      // may leave up to one segment without a node, and curved segments bend
      // away from the node tangent by curvature * lon^2 / 2.
      double nearest = 1e9;
      for (const auto& node : s.lane_graph.nodes) {
        const Eigen::Vector2d d = Eigen::Vector2d(a.box.x, a.box.y) - node.position;
        const Eigen::Vector2d normal(-std::sin(node.heading), std::cos(node.heading));
        const double lon = d.dot(Eigen::Vector2d(normal.y(), -normal.x()));
        if (std::abs(lon) <= 3.0)
          nearest = std::min(nearest, std::abs(d.dot(normal)) - 0.5 * std::abs(node.curvature) * lon * lon);
      }
      EXPECT_LE(nearest, 0.5 + 1e-9);
      int hits = 0;
      const PointCloud& latest = s.sweeps.back();
      for (Eigen::Index r = 0; r < latest.rows(); ++r) {
        Box grown = a.box;
        grown.l += 0.5, grown.w += 0.5;
        hits += box_contains(grown, latest.row(r).head<2>().transpose());
      }
      EXPECT_GE(hits, 1);
    }
    for (std::size_t k = 0; k < s.sweeps.size(); ++k) {
      const double expected = -(static_cast<double>(s.sweeps.size()) - 1 - k) * 0.1;
      for (Eigen::Index r = 0; r < s.sweeps[k].rows(); ++r) {
        EXPECT_NEAR(s.sweeps[k](r, 3), expected, 1e-12);
        EXPECT_GE(s.sweeps[k](r, 2), 0.0);
        EXPECT_LE(s.sweeps[k](r, 2), 2.0);
      }
    }
  }
}

TEST(SceneSynth, SweepTimestampsMatchHistory) {
  const Scene s = generate_scene(small_config(), 1);
  const double expected[5] = {-0.4, -0.3, -0.2, -0.1, 0.0};
  for (int k = 0; k < 5; ++k) EXPECT_NEAR(s.sweeps[k](0, 3), expected[k], 1e-12);
}

TEST(SceneSynth, NoiselessStaticAgentPointsLieOnBox) {
  SceneConfig c = small_config();
  c.min_agents = c.max_agents = 1;
  c.static_fraction = 1.0;
  c.noise_sigma = 0.0;
  c.clutter_points = 0;
  const Scene s = generate_scene(c, 5);
  Box grown = s.agents[0].box;
  grown.l += 2e-6, grown.w += 2e-6;
  for (const auto& sweep : s.sweeps)
    for (Eigen::Index r = 0; r < sweep.rows(); ++r)
      EXPECT_TRUE(box_contains(grown, sweep.row(r).head<2>().transpose()));
}

TEST(SceneSynth, MovingAgentPointsShiftOppositeMotion) {
  SceneConfig c = small_config();
  c.min_agents = c.max_agents = 1;
  c.static_fraction = 0.0;
  c.min_speed = c.max_speed = 10.0;
  c.noise_sigma = 0.0;
  c.clutter_points = 0;
  c.point_density = 200.0;
  const Scene s = generate_scene(c, 6);
  const Box& b = s.agents[0].box;
  const Eigen::Vector2d latest = s.sweeps[4].leftCols<2>().colwise().mean().transpose();
  const Eigen::Vector2d earlier = s.sweeps[3].leftCols<2>().colwise().mean().transpose();
  const Eigen::Vector2d shift = earlier - latest;
  const Eigen::Vector2d heading(std::cos(b.theta), std::sin(b.theta));
  EXPECT_NEAR(shift.dot(heading), -1.0, 0.1);
}

TEST(SceneSynth, PointCountScalesWithDensity) {
  SceneConfig c = small_config();
  c.clutter_points = 0;
  c.min_agents = c.max_agents = 3;
  const Scene a = generate_scene(c, 9);
  c.point_density *= 2.0;
  const Scene b = generate_scene(c, 9);
  const double ratio = static_cast<double>(b.sweeps.back().rows()) / a.sweeps.back().rows();
  EXPECT_NEAR(ratio, 2.0, 0.4);
}

TEST(SceneSynth, RejectsRoiTooSmallForTemplate) {
  SceneConfig c;
  c.lane_template = "intersection";
  c.roi = 8.0;
  EXPECT_THROW(generate_scene(c, 1), ValidationError);
}

TEST(SceneIo, RoundTripIsBitExact) {
  const auto dir = std::filesystem::temp_directory_path() / "detra_scene_io";
  std::filesystem::create_directories(dir);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scene s = generate_scene(SceneConfig{}, seed);
    const auto path = dir / ("scene_" + std::to_string(seed) + ".json");
    save_scene(s, path);
    const Scene loaded = load_scene(path);
    EXPECT_TRUE(loaded == s);
    EXPECT_EQ(scene_to_json(loaded), scene_to_json(s));
  }
}

TEST(SceneIo, RejectsUnknownSchemaVersion) {
  std::string text = scene_to_json(generate_scene(small_config(), 2));
  text.replace(text.find("\"schema_version\":1"), 18, "\"schema_version\":7");
  EXPECT_THROW(scene_from_json(text), ValidationError);
}

TEST(SceneIo, ParsesHandWrittenMinimalScene) {
  const std::string text = R"({
    "schema_version": 1, "seed": 17, "roi": 20,
    "lane_graph": {
      "nodes": [{"x": 0, "y": 0, "heading": 0, "length": 3, "curvature": 0,
                 "left_boundary": 1.75, "right_boundary": 1.75},
                {"x": 3, "y": 0, "heading": 0, "length": 3, "curvature": 0,
                 "left_boundary": 1.75, "right_boundary": 1.75}],
      "edges": [{"src": 0, "dst": 1, "kind": "successor"},
                {"src": 1, "dst": 0, "kind": "predecessor"}]},
    "agents": [{"id": 0, "box": [1, 0, 4.5, 1.9, 0], "is_static": false,
                "trajectory": [[1, 0, 0], [3, 0, 0], [5, 0, 0]]}],
    "sweeps": [[[1, 0.95, 0.5, 0]]]
  })";
  const Scene s = scene_from_json(text);
  ASSERT_EQ(s.agents.size(), 1u);
  EXPECT_EQ(s.horizon(), 3);
  EXPECT_EQ(s.lane_graph.nodes.size(), 2u);
  EXPECT_EQ(s.lane_graph.edges[1].kind, EdgeKind::predecessor);
  EXPECT_DOUBLE_EQ(s.agents[0].box.l, 4.5);
  EXPECT_EQ(s.sweeps[0].rows(), 1);
}

TEST(SceneConfigJson, RejectsUnknownKeys) {
  SceneConfig c;
  EXPECT_THROW(from_json(json{{"roi", 20.0}, {"bogus", 1}}, c), ValidationError);
  from_json(json{{"roi", 25.0}}, c);
  EXPECT_DOUBLE_EQ(c.roi, 25.0);
}
