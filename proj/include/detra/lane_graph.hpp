#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace detra {

enum class BoundaryType { solid, dashed };
enum class EdgeKind { successor = 0, predecessor = 1, left_neighbor = 2, right_neighbor = 3 };
inline constexpr int kEdgeKinds = 4;

const char* to_string(BoundaryType type);
const char* to_string(EdgeKind kind);
BoundaryType boundary_type_from_string(const std::string& s);
EdgeKind edge_kind_from_string(const std::string& s);

struct LaneNode {
  Eigen::Vector2d position{0.0, 0.0};
  double heading = 0.0;
  double length = 3.0;
  double curvature = 0.0;
  double left_boundary = 1.75;
  double right_boundary = 1.75;
  BoundaryType left_type = BoundaryType::solid;
  BoundaryType right_type = BoundaryType::solid;

  bool operator==(const LaneNode&) const = default;
};

struct LaneEdge {
  int src = 0;
  int dst = 0;
  EdgeKind kind = EdgeKind::successor;

  bool operator==(const LaneEdge&) const = default;
};

struct LaneGraph {
  std::vector<LaneNode> nodes;
  std::vector<LaneEdge> edges;

  bool operator==(const LaneGraph&) const = default;
};

/// Constant-curvature stretch of a centerline.
struct CenterlinePiece {
  double length = 0.0;
  double curvature = 0.0;
};

struct Centerline {
  Eigen::Vector2d start{0.0, 0.0};
  double start_heading = 0.0;
  std::vector<CenterlinePiece> pieces;
  /// Closed loops get a successor edge from the last node back to the first.
  bool closed = false;
  double half_width = 1.75;
  BoundaryType left_type = BoundaryType::solid;
  BoundaryType right_type = BoundaryType::solid;

  double length() const;
  /// Pose at arc length s; beyond either end the tangent line is extended.
  Eigen::Vector3d pose_at(double s) const;
};

struct LaneTemplate {
  std::vector<Centerline> lanes;
  /// (from, to): the end of `from` continues into the start of `to`.
  std::vector<std::pair<int, int>> connections;
  /// (lane, left): `left` runs alongside `lane` on its left.
  std::vector<std::pair<int, int>> left_neighbors;
};

inline constexpr double kLaneSegment = 3.0;

/// First graph node of each lane alongside the graph.
struct BuiltLaneGraph {
  LaneGraph graph;
  std::vector<int> lane_first_node;
  std::vector<int> lane_node_count;
};

/// Samples one node per 3 m segment of every centerline and wires the four edge kinds.
/// Throws ValidationError for centerlines shorter than one segment.
BuiltLaneGraph build_lane_graph(const LaneTemplate& lane_template);

}  // namespace detra
