#pragma once

#include "detra/geometry.hpp"
#include "detra/lane_graph.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace detra {

/// Rows are points (x, y, z, t) with t in seconds relative to the latest sweep.
using PointCloud = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;

struct SceneConfig {
  /// straight | curved | intersection | mixed (one of the three per seed).
  std::string lane_template = "mixed";
  int min_agents = 2;
  int max_agents = 6;
  double roi = 20.0;
  double min_speed = 2.0;
  double max_speed = 8.0;
  /// Bound on |acceleration| for dynamic agents (m/s^2).
  double max_accel = 1.0;
  double static_fraction = 0.5;
  /// Poses per trajectory including the current one.
  int horizon = 6;
  double waypoint_dt = 0.5;
  int sweeps = 5;
  double sweep_dt = 0.1;
  /// Perimeter points per meter per sweep.
  double point_density = 3.0;
  double noise_sigma = 0.03;
  int clutter_points = 48;
  double lateral_jitter = 0.2;
  double min_length = 3.8;
  double max_length = 5.0;
  double min_width = 1.7;
  double max_width = 2.1;
  bool random_rotation = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
/// Unknown keys are rejected.
void from_json(const nlohmann::json& j, SceneConfig& c);

struct Agent {
  int id = 0;
  Box box;
  std::vector<int> lane_path;
  std::vector<double> speed_profile;
  bool is_static = false;

  bool operator==(const Agent& o) const;
};

struct Scene {
  std::uint64_t seed = 0;
  double roi = 20.0;
  double waypoint_dt = 0.5;
  double sweep_dt = 0.1;
  LaneGraph lane_graph;
  std::vector<Agent> agents;
  /// gt_trajectories[n][t] = (x, y, theta), t = 0 is the current pose.
  std::vector<std::vector<Eigen::Vector3d>> gt_trajectories;
  /// Oldest sweep first; the last entry is the latest sweep (t = 0).
  std::vector<PointCloud> sweeps;

  int horizon() const {
    return gt_trajectories.empty() ? 0 : static_cast<int>(gt_trajectories.front().size());
  }
  bool operator==(const Scene& o) const;
};

/// Total ground-truth displacement below this marks an actor as static in metrics.
inline constexpr double kStaticDisplacement = 0.5;
bool is_static_trajectory(const std::vector<Eigen::Vector3d>& trajectory);

/// Lane template used for a scene; exposed for tests.
LaneTemplate make_lane_template(const std::string& kind, double roi, std::uint64_t seed);

Scene generate_scene(const SceneConfig& config, std::uint64_t seed);

/// Points for one sweep given the agents' current boxes and speeds. Agents are
/// placed at their constant-velocity past pose for earlier sweeps.
PointCloud simulate_lidar(const Scene& scene, const SceneConfig& config, int sweep_index);

inline constexpr int kSceneSchemaVersion = 1;

std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);

}  // namespace detra
