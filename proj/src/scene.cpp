#include "detra/scene.hpp"

#include "detra/errors.hpp"
#include "detra/json_util.hpp"
#include "detra/nn.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace detra {

namespace {

template <typename C, typename F>
void visit_scene_config(C& c, F&& f) {
  f("lane_template", c.lane_template);
  f("min_agents", c.min_agents);
  f("max_agents", c.max_agents);
  f("roi", c.roi);
  f("min_speed", c.min_speed);
  f("max_speed", c.max_speed);
  f("max_accel", c.max_accel);
  f("static_fraction", c.static_fraction);
  f("horizon", c.horizon);
  f("waypoint_dt", c.waypoint_dt);
  f("sweeps", c.sweeps);
  f("sweep_dt", c.sweep_dt);
  f("point_density", c.point_density);
  f("noise_sigma", c.noise_sigma);
  f("clutter_points", c.clutter_points);
  f("lateral_jitter", c.lateral_jitter);
  f("min_length", c.min_length);
  f("max_length", c.max_length);
  f("min_width", c.min_width);
  f("max_width", c.max_width);
  f("random_rotation", c.random_rotation);
}

double min_roi_for(const std::string& kind) {
  if (kind == "straight") return 6.0;
  if (kind == "curved") return 10.0;
  return 12.0;
}

constexpr double kLaneWidth = 3.5;
// Agents spawn at least this far inside the ROI so every box is observed.
constexpr double kSpawnMargin = 3.0;

void rotate_template(LaneTemplate& t, double angle) {
  const Eigen::Rotation2Dd rot(angle);
  for (auto& lane : t.lanes) {
    lane.start = rot * lane.start;
    lane.start_heading = normalize_angle(lane.start_heading + angle);
  }
}

LaneTemplate straight_template(double roi, std::mt19937_64& rng) {
  LaneTemplate t;
  const int count = std::uniform_int_distribution<int>(2, 3)(rng);
  const double length = 2.0 * roi + 12.0;
  for (int i = 0; i < count; ++i) {
    Centerline lane;
    lane.start = Eigen::Vector2d(-roi - 6.0, (i - 0.5 * (count - 1)) * kLaneWidth);
    lane.pieces = {{length, 0.0}};
    lane.half_width = 0.5 * kLaneWidth;
    lane.right_type = i == 0 ? BoundaryType::solid : BoundaryType::dashed;
    lane.left_type = i == count - 1 ? BoundaryType::solid : BoundaryType::dashed;
    t.lanes.push_back(lane);
    if (i > 0) t.left_neighbors.emplace_back(i - 1, i);
  }
  return t;
}

LaneTemplate curved_template(double roi, std::mt19937_64& rng) {
  LaneTemplate t;
  std::uniform_real_distribution<double> radius(20.0, 40.0);
  const double sign = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
  const double curvature = sign / radius(rng);
  const double lead = 0.5 * roi + 6.0;
  const double arc = roi;
  const double tail = roi;
  for (int i = 0; i < 2; ++i) {
    // Lateral offset of this lane, positive to the left of travel.
    const double offset = (i - 0.5) * kLaneWidth;
    const double scale = 1.0 - curvature * offset;
    Centerline lane;
    lane.start = Eigen::Vector2d(-roi - 6.0, offset);
    lane.pieces = {{lead, 0.0}, {arc * scale, curvature / scale}, {tail, 0.0}};
    lane.half_width = 0.5 * kLaneWidth;
    lane.right_type = i == 0 ? BoundaryType::solid : BoundaryType::dashed;
    lane.left_type = i == 1 ? BoundaryType::solid : BoundaryType::dashed;
    t.lanes.push_back(lane);
  }
  t.left_neighbors.emplace_back(0, 1);
  return t;
}

// Four approaches into a square junction of half-size 8 m with straight,
// left and right connectors for each, right-hand traffic.
LaneTemplate intersection_template(double roi) {
  constexpr double kJunction = 8.0;
  constexpr double kOffset = 0.5 * kLaneWidth;
  LaneTemplate t;
  const double outer = roi + 3.0;
  std::vector<int> approach(4), exit(4);
  for (int d = 0; d < 4; ++d) {
    const double heading = d * 0.5 * std::numbers::pi;
    const Eigen::Rotation2Dd rot(heading);
    Centerline in;
    in.start = rot * Eigen::Vector2d(-outer, -kOffset);
    in.start_heading = normalize_angle(heading);
    in.pieces = {{outer - kJunction, 0.0}};
    in.half_width = kOffset;
    approach[d] = static_cast<int>(t.lanes.size());
    t.lanes.push_back(in);
    Centerline out = in;
    out.start = rot * Eigen::Vector2d(kJunction, -kOffset);
    exit[d] = static_cast<int>(t.lanes.size());
    t.lanes.push_back(out);
  }
  for (int d = 0; d < 4; ++d) {
    const Centerline& in = t.lanes[approach[d]];
    const Eigen::Vector3d end = in.pose_at(in.length());
    struct Turn {
      CenterlinePiece piece;
      int exit_dir;
    };
    const double right_r = kJunction - kOffset;
    const double left_r = kJunction + kOffset;
    const Turn turns[3] = {
        {{2.0 * kJunction, 0.0}, d},
        {{0.5 * std::numbers::pi * left_r, 1.0 / left_r}, (d + 1) % 4},
        {{0.5 * std::numbers::pi * right_r, -1.0 / right_r}, (d + 3) % 4},
    };
    for (const Turn& turn : turns) {
      Centerline conn;
      conn.start = end.head<2>();
      conn.start_heading = end.z();
      conn.pieces = {turn.piece};
      conn.half_width = kOffset;
      conn.left_type = BoundaryType::dashed;
      conn.right_type = BoundaryType::dashed;
      const int id = static_cast<int>(t.lanes.size());
      t.lanes.push_back(conn);
      t.connections.emplace_back(approach[d], id);
      t.connections.emplace_back(id, exit[turn.exit_dir]);
    }
  }
  return t;
}

// Lane chains an agent may drive along, derived from the template connections.
std::vector<std::vector<int>> candidate_paths(const LaneTemplate& t) {
  std::vector<std::vector<int>> out;
  std::vector<bool> has_pred(t.lanes.size(), false);
  for (const auto& [from, to] : t.connections) has_pred[to] = true;
  std::function<void(std::vector<int>)> extend = [&](std::vector<int> path) {
    bool extended = false;
    for (const auto& [from, to] : t.connections) {
      if (from != path.back()) continue;
      auto next = path;
      next.push_back(to);
      extend(std::move(next));
      extended = true;
    }
    if (!extended) out.push_back(std::move(path));
  };
  for (std::size_t i = 0; i < t.lanes.size(); ++i) {
    if (!has_pred[i]) extend({static_cast<int>(i)});
  }
  return out;
}

struct LanePath {
  std::vector<const Centerline*> lanes;
  std::vector<int> lane_ids;
  std::vector<double> offsets;  // arc length at which each lane starts
  double length = 0.0;

  Eigen::Vector3d pose_at(double s) const {
    std::size_t i = 0;
    while (i + 1 < lanes.size() && s > offsets[i + 1]) ++i;
    return lanes[i]->pose_at(s - offsets[i]);
  }
};

LanePath make_path(const LaneTemplate& t, const std::vector<int>& ids) {
  LanePath path;
  for (int id : ids) {
    path.lanes.push_back(&t.lanes[id]);
    path.lane_ids.push_back(id);
    path.offsets.push_back(path.length);
    path.length += t.lanes[id].length();
  }
  return path;
}

Eigen::Vector2d offset_position(const Eigen::Vector3d& pose, double lateral) {
  return pose.head<2>() + lateral * Eigen::Vector2d(-std::sin(pose.z()), std::cos(pose.z()));
}

}  // namespace

void to_json(json& j, const SceneConfig& c) { write_fields(j, c, [](auto& o, auto&& f) { visit_scene_config(o, f); }); }

void from_json(const json& j, SceneConfig& c) {
  read_fields(j, c, [](auto& o, auto&& f) { visit_scene_config(o, f); }, "scene");
}

void SceneConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError("scene config: " + what);
  };
  require(lane_template == "straight" || lane_template == "curved" ||
              lane_template == "intersection" || lane_template == "mixed",
          "unknown lane_template '" + lane_template + "'");
  require(min_agents >= 1 && max_agents >= min_agents, "agent count range");
  require(roi > 0, "roi must be positive");
  const double needed = lane_template == "mixed" ? min_roi_for("intersection") : min_roi_for(lane_template);
  require(roi >= needed, "roi too small for the lane template");
  require(min_speed >= 0 && max_speed >= min_speed, "speed range");
  require(max_accel >= 0, "max_accel must be nonnegative");
  require(static_fraction >= 0 && static_fraction <= 1, "static_fraction must be in [0, 1]");
  require(horizon >= 1, "horizon must be at least 1");
  require(waypoint_dt > 0 && sweep_dt > 0, "time steps must be positive");
  require(sweeps >= 1, "sweeps must be at least 1");
  require(point_density > 0 && noise_sigma >= 0 && clutter_points >= 0, "lidar settings");
  require(lateral_jitter >= 0 && lateral_jitter <= 0.5, "lateral_jitter must be in [0, 0.5]");
  require(min_length > 0 && max_length >= min_length, "length range");
  require(min_width > 0 && max_width >= min_width, "width range");
}

bool Agent::operator==(const Agent& o) const {
  return id == o.id && box.x == o.box.x && box.y == o.box.y && box.l == o.box.l &&
         box.w == o.box.w && box.theta == o.box.theta && box.confidence == o.box.confidence &&
         lane_path == o.lane_path && speed_profile == o.speed_profile && is_static == o.is_static;
}

bool Scene::operator==(const Scene& o) const {
  if (seed != o.seed || roi != o.roi || waypoint_dt != o.waypoint_dt || sweep_dt != o.sweep_dt ||
      !(lane_graph == o.lane_graph) || agents != o.agents || gt_trajectories != o.gt_trajectories ||
      sweeps.size() != o.sweeps.size()) {
    return false;
  }
  for (std::size_t i = 0; i < sweeps.size(); ++i) {
    if (sweeps[i].rows() != o.sweeps[i].rows() || sweeps[i] != o.sweeps[i]) return false;
  }
  return true;
}

bool is_static_trajectory(const std::vector<Eigen::Vector3d>& trajectory) {
  if (trajectory.empty()) return true;
  return (trajectory.back().head<2>() - trajectory.front().head<2>()).norm() < kStaticDisplacement;
}

LaneTemplate make_lane_template(const std::string& kind, double roi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::string chosen = kind;
  if (kind == "mixed") {
    const char* kinds[3] = {"straight", "curved", "intersection"};
    chosen = kinds[std::uniform_int_distribution<int>(0, 2)(rng)];
  }
  LaneTemplate t;
  if (chosen == "straight") {
    t = straight_template(roi, rng);
  } else if (chosen == "curved") {
    t = curved_template(roi, rng);
  } else if (chosen == "intersection") {
    t = intersection_template(roi);
  } else {
    throw ValidationError("unknown lane template '" + kind + "'");
  }
  if (roi < min_roi_for(chosen)) throw ValidationError("roi too small for the lane template");
  return t;
}

Scene generate_scene(const SceneConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(split_seed(seed, 0));
  const double rotation = config.random_rotation
                              ? std::uniform_real_distribution<double>(-std::numbers::pi, std::numbers::pi)(rng)
                              : 0.0;
  LaneTemplate lanes = make_lane_template(config.lane_template, config.roi, split_seed(seed, 1));
  rotate_template(lanes, rotation);
  const BuiltLaneGraph built = build_lane_graph(lanes);
  const auto paths = candidate_paths(lanes);

  Scene scene;
  scene.seed = seed;
  scene.roi = config.roi;
  scene.waypoint_dt = config.waypoint_dt;
  scene.sweep_dt = config.sweep_dt;
  scene.lane_graph = built.graph;

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const int target = std::uniform_int_distribution<int>(config.min_agents, config.max_agents)(rng);
  const int horizon = config.horizon;
  const double inner = config.roi - kSpawnMargin;

  for (int attempt = 0; attempt < 200 * target && static_cast<int>(scene.agents.size()) < target;
       ++attempt) {
    const auto& ids = paths[std::uniform_int_distribution<std::size_t>(0, paths.size() - 1)(rng)];
    const LanePath path = make_path(lanes, ids);
    const double s0 = uniform(0.0, path.length);
    const double lateral = uniform(-config.lateral_jitter, config.lateral_jitter);
    const bool is_static = unit(rng) < config.static_fraction;
    const double length = uniform(config.min_length, config.max_length);
    const double width = uniform(config.min_width, config.max_width);
    const double v0 = uniform(config.min_speed, config.max_speed);
    const double accel = uniform(-config.max_accel, config.max_accel);

    const Eigen::Vector3d pose0 = path.pose_at(s0);
    const Eigen::Vector2d p0 = offset_position(pose0, lateral);
    if (std::abs(p0.x()) > inner || std::abs(p0.y()) > inner) continue;
    const Box box{p0.x(), p0.y(), length, width, normalize_angle(pose0.z()), 1.0};
    const Box padded{box.x, box.y, box.l + 1.0, box.w + 0.4, box.theta, 1.0};
    bool overlaps = false;
    for (const auto& other : scene.agents) {
      if (rotated_iou(padded, Box{other.box.x, other.box.y, other.box.l + 1.0, other.box.w + 0.4,
                                  other.box.theta, 1.0}) > 0.0) {
        overlaps = true;
        break;
      }
    }
    if (overlaps) continue;

    Agent agent;
    agent.id = static_cast<int>(scene.agents.size());
    agent.box = box;
    agent.is_static = is_static;
    agent.speed_profile.resize(horizon);
    for (int t = 0; t < horizon; ++t) {
      agent.speed_profile[t] =
          is_static ? 0.0 : std::max(v0 + accel * t * config.waypoint_dt, 0.5);
    }
    std::vector<Eigen::Vector3d> traj(horizon);
    traj[0] = Eigen::Vector3d(box.x, box.y, box.theta);
    double s = s0;
    for (int t = 1; t < horizon; ++t) {
      s += 0.5 * (agent.speed_profile[t - 1] + agent.speed_profile[t]) * config.waypoint_dt;
      const Eigen::Vector2d p = offset_position(path.pose_at(s), lateral);
      const Eigen::Vector2d step = p - traj[t - 1].head<2>();
      const double heading = step.norm() < 0.1 ? traj[t - 1].z() : std::atan2(step.y(), step.x());
      traj[t] = Eigen::Vector3d(p.x(), p.y(), heading);
    }
    // Lane nodes whose segment centers the agent passes over the horizon.
    for (std::size_t k = 0; k < path.lane_ids.size(); ++k) {
      const int lane = path.lane_ids[k];
      for (int j = 0; j < built.lane_node_count[lane]; ++j) {
        const double center = path.offsets[k] + kLaneSegment * (j + 0.5);
        if (center >= s0 - 0.5 * kLaneSegment && center <= s + 0.5 * kLaneSegment)
          agent.lane_path.push_back(built.lane_first_node[lane] + j);
      }
    }
    scene.agents.push_back(std::move(agent));
    scene.gt_trajectories.push_back(std::move(traj));
  }
  if (scene.agents.empty()) throw ValidationError("could not place any agent inside the roi");

  for (int k = 0; k < config.sweeps; ++k) scene.sweeps.push_back(simulate_lidar(scene, config, k));
  return scene;
}

PointCloud simulate_lidar(const Scene& scene, const SceneConfig& config, int sweep_index) {
  if (sweep_index < 0 || sweep_index >= config.sweeps) throw ValidationError("sweep index out of range");
  std::mt19937_64 rng(split_seed(scene.seed, 1000 + static_cast<std::uint64_t>(sweep_index)));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double t = -(config.sweeps - 1 - sweep_index) * config.sweep_dt;

  std::vector<Eigen::Vector4d> points;
  for (const auto& agent : scene.agents) {
    const Box& b = agent.box;
    const double v = agent.speed_profile.empty() ? 0.0 : agent.speed_profile.front();
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    const double cx = b.x + v * t * c, cy = b.y + v * t * s;
    const double perimeter = 2.0 * (b.l + b.w);
    const long count = std::max(1L, std::lround(config.point_density * perimeter));
    for (long i = 0; i < count; ++i) {
      double u = unit(rng) * perimeter;
      double lx, ly;
      if (u < b.l) {
        lx = u - 0.5 * b.l, ly = 0.5 * b.w;
      } else if ((u -= b.l) < b.w) {
        lx = -0.5 * b.l, ly = 0.5 * b.w - u;
      } else if ((u -= b.w) < b.l) {
        lx = u - 0.5 * b.l, ly = -0.5 * b.w;
      } else {
        u -= b.l;
        lx = 0.5 * b.l, ly = u - 0.5 * b.w;
      }
      const double nx = config.noise_sigma * noise(rng);
      const double ny = config.noise_sigma * noise(rng);
      const double z = 2.0 * unit(rng);
      points.emplace_back(cx + c * lx - s * ly + nx, cy + s * lx + c * ly + ny, z, t);
    }
  }
  for (int i = 0; i < config.clutter_points; ++i) {
    const double x = (2.0 * unit(rng) - 1.0) * config.roi;
    const double y = (2.0 * unit(rng) - 1.0) * config.roi;
    points.emplace_back(x, y, 2.0 * unit(rng), t);
  }
  PointCloud cloud(static_cast<Eigen::Index>(points.size()), 4);
  for (std::size_t i = 0; i < points.size(); ++i) cloud.row(static_cast<Eigen::Index>(i)) = points[i].transpose();
  return cloud;
}

// ---- serialization ----

namespace {

class Writer {
 public:
  void raw(const std::string& s) { out_ << s; }
  void number(double v) { out_ << format_double(v); }
  void number(long long v) { out_ << v; }
  void key(const char* k) {
    out_ << '"' << k << "\":";
  }
  template <typename Range, typename Fn>
  void array(const Range& range, Fn&& fn) {
    out_ << '[';
    bool first = true;
    for (const auto& item : range) {
      if (!first) out_ << ',';
      first = false;
      fn(item);
    }
    out_ << ']';
  }
  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw ValidationError(std::string("scene: non-finite ") + what);
}

}  // namespace

std::string scene_to_json(const Scene& scene) {
  Writer w;
  w.raw("{");
  w.key("schema_version");
  w.number(static_cast<long long>(kSceneSchemaVersion));
  w.raw(",");
  w.key("seed");
  w.raw(std::to_string(scene.seed));
  w.raw(",");
  w.key("roi");
  w.number(scene.roi);
  w.raw(",");
  w.key("waypoint_dt");
  w.number(scene.waypoint_dt);
  w.raw(",");
  w.key("sweep_dt");
  w.number(scene.sweep_dt);
  w.raw(",");
  w.key("lane_graph");
  w.raw("{");
  w.key("nodes");
  w.array(scene.lane_graph.nodes, [&](const LaneNode& n) {
    w.raw("{");
    w.key("x"), w.number(n.position.x()), w.raw(",");
    w.key("y"), w.number(n.position.y()), w.raw(",");
    w.key("heading"), w.number(n.heading), w.raw(",");
    w.key("length"), w.number(n.length), w.raw(",");
    w.key("curvature"), w.number(n.curvature), w.raw(",");
    w.key("left_boundary"), w.number(n.left_boundary), w.raw(",");
    w.key("right_boundary"), w.number(n.right_boundary), w.raw(",");
    w.key("boundary_types");
    w.raw(std::string("[\"") + to_string(n.left_type) + "\",\"" + to_string(n.right_type) + "\"]");
    w.raw("}");
  });
  w.raw(",");
  w.key("edges");
  w.array(scene.lane_graph.edges, [&](const LaneEdge& e) {
    w.raw("{");
    w.key("src"), w.number(static_cast<long long>(e.src)), w.raw(",");
    w.key("dst"), w.number(static_cast<long long>(e.dst)), w.raw(",");
    w.key("kind"), w.raw(std::string("\"") + to_string(e.kind) + "\"");
    w.raw("}");
  });
  w.raw("}");
  w.raw(",");
  w.key("agents");
  std::vector<std::size_t> idx(scene.agents.size());
  std::iota(idx.begin(), idx.end(), 0);
  w.array(idx, [&](std::size_t i) {
    const Agent& a = scene.agents[i];
    w.raw("{");
    w.key("id"), w.number(static_cast<long long>(a.id)), w.raw(",");
    w.key("box");
    const double box[5] = {a.box.x, a.box.y, a.box.l, a.box.w, a.box.theta};
    w.array(box, [&](double v) { w.number(v); });
    w.raw(",");
    w.key("is_static"), w.raw(a.is_static ? "true" : "false"), w.raw(",");
    w.key("lane_path");
    w.array(a.lane_path, [&](int v) { w.number(static_cast<long long>(v)); });
    w.raw(",");
    w.key("speed_profile");
    w.array(a.speed_profile, [&](double v) { w.number(v); });
    w.raw(",");
    w.key("trajectory");
    w.array(scene.gt_trajectories[i], [&](const Eigen::Vector3d& p) {
      w.array(std::array<double, 3>{p.x(), p.y(), p.z()}, [&](double v) { w.number(v); });
    });
    w.raw("}");
  });
  w.raw(",");
  w.key("sweeps");
  w.array(scene.sweeps, [&](const PointCloud& cloud) {
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(cloud.rows()));
    std::iota(rows.begin(), rows.end(), 0);
    w.array(rows, [&](Eigen::Index r) {
      w.array(std::array<double, 4>{cloud(r, 0), cloud(r, 1), cloud(r, 2), cloud(r, 3)},
              [&](double v) { w.number(v); });
    });
  });
  w.raw("}\n");
  return w.str();
}

Scene scene_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("scene: malformed json: ") + e.what());
  }
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kSceneSchemaVersion) {
      throw ValidationError("scene: unsupported schema_version " + std::to_string(version));
    }
    Scene scene;
    scene.seed = j.at("seed").get<std::uint64_t>();
    scene.roi = j.at("roi").get<double>();
    scene.waypoint_dt = j.value("waypoint_dt", 0.5);
    scene.sweep_dt = j.value("sweep_dt", 0.1);
    const json& graph = j.at("lane_graph");
    for (const json& n : graph.at("nodes")) {
      LaneNode node;
      node.position = Eigen::Vector2d(n.at("x").get<double>(), n.at("y").get<double>());
      node.heading = n.at("heading").get<double>();
      node.length = n.at("length").get<double>();
      node.curvature = n.at("curvature").get<double>();
      node.left_boundary = n.at("left_boundary").get<double>();
      node.right_boundary = n.at("right_boundary").get<double>();
      if (n.contains("boundary_types")) {
        node.left_type = boundary_type_from_string(n["boundary_types"].at(0).get<std::string>());
        node.right_type = boundary_type_from_string(n["boundary_types"].at(1).get<std::string>());
      }
      check_finite(node.position.x() + node.position.y() + node.heading, "lane node");
      scene.lane_graph.nodes.push_back(node);
    }
    const int node_count = static_cast<int>(scene.lane_graph.nodes.size());
    for (const json& e : graph.at("edges")) {
      LaneEdge edge{e.at("src").get<int>(), e.at("dst").get<int>(),
                    edge_kind_from_string(e.at("kind").get<std::string>())};
      if (edge.src < 0 || edge.dst < 0 || edge.src >= node_count || edge.dst >= node_count)
        throw ValidationError("scene: edge references unknown node");
      scene.lane_graph.edges.push_back(edge);
    }
    for (const json& a : j.at("agents")) {
      Agent agent;
      agent.id = a.at("id").get<int>();
      const auto box = a.at("box").get<std::vector<double>>();
      if (box.size() != 5) throw ValidationError("scene: agent box needs 5 values");
      agent.box = Box{box[0], box[1], box[2], box[3], box[4], 1.0};
      if (!(agent.box.l > 0 && agent.box.w > 0)) throw ValidationError("scene: box dims must be positive");
      agent.is_static = a.at("is_static").get<bool>();
      if (a.contains("lane_path")) agent.lane_path = a["lane_path"].get<std::vector<int>>();
      if (a.contains("speed_profile")) agent.speed_profile = a["speed_profile"].get<std::vector<double>>();
      std::vector<Eigen::Vector3d> traj;
      for (const json& p : a.at("trajectory")) {
        const auto v = p.get<std::vector<double>>();
        if (v.size() != 3) throw ValidationError("scene: trajectory poses need 3 values");
        traj.emplace_back(v[0], v[1], v[2]);
      }
      if (traj.empty()) throw ValidationError("scene: empty trajectory");
      scene.agents.push_back(std::move(agent));
      scene.gt_trajectories.push_back(std::move(traj));
    }
    for (std::size_t i = 1; i < scene.gt_trajectories.size(); ++i) {
      if (scene.gt_trajectories[i].size() != scene.gt_trajectories[0].size())
        throw ValidationError("scene: trajectories differ in length");
    }
    for (const json& sweep : j.at("sweeps")) {
      PointCloud cloud(static_cast<Eigen::Index>(sweep.size()), 4);
      Eigen::Index r = 0;
      for (const json& p : sweep) {
        const auto v = p.get<std::vector<double>>();
        if (v.size() != 4) throw ValidationError("scene: points need 4 values");
        for (int c = 0; c < 4; ++c) cloud(r, c) = v[c];
        ++r;
      }
      scene.sweeps.push_back(std::move(cloud));
    }
    return scene;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("scene: ") + e.what());
  }
}

void save_scene(const Scene& scene, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << scene_to_json(scene);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Scene load_scene(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return scene_from_json(buffer.str());
}

}  // namespace detra
