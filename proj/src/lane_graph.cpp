#include "detra/lane_graph.hpp"

#include "detra/errors.hpp"
#include "detra/geometry.hpp"

#include <cmath>

namespace detra {

const char* to_string(BoundaryType type) { return type == BoundaryType::solid ? "solid" : "dashed"; }

const char* to_string(EdgeKind kind) {
  switch (kind) {
    case EdgeKind::successor: return "successor";
    case EdgeKind::predecessor: return "predecessor";
    case EdgeKind::left_neighbor: return "left_neighbor";
    case EdgeKind::right_neighbor: return "right_neighbor";
  }
  return "successor";
}

BoundaryType boundary_type_from_string(const std::string& s) {
  if (s == "solid") return BoundaryType::solid;
  if (s == "dashed") return BoundaryType::dashed;
  throw ValidationError("unknown boundary type '" + s + "'");
}

EdgeKind edge_kind_from_string(const std::string& s) {
  for (int k = 0; k < kEdgeKinds; ++k) {
    if (s == to_string(static_cast<EdgeKind>(k))) return static_cast<EdgeKind>(k);
  }
  throw ValidationError("unknown edge kind '" + s + "'");
}

double Centerline::length() const {
  double total = 0.0;
  for (const auto& p : pieces) total += p.length;
  return total;
}

namespace {

// Advances pose (x, y, heading) by arc length s at constant curvature k.
Eigen::Vector3d advance(const Eigen::Vector3d& pose, double s, double k) {
  const double h = pose.z();
  if (std::abs(k) < 1e-12) {
    return {pose.x() + s * std::cos(h), pose.y() + s * std::sin(h), h};
  }
  const double h1 = h + k * s;
  return {pose.x() + (std::sin(h1) - std::sin(h)) / k, pose.y() - (std::cos(h1) - std::cos(h)) / k,
          h1};
}

}  // namespace

Eigen::Vector3d Centerline::pose_at(double s) const {
  Eigen::Vector3d pose(start.x(), start.y(), start_heading);
  if (s <= 0.0) return advance(pose, s, 0.0);
  double remaining = s;
  for (const auto& piece : pieces) {
    if (remaining <= piece.length) return advance(pose, remaining, piece.curvature);
    pose = advance(pose, piece.length, piece.curvature);
    remaining -= piece.length;
  }
  return advance(pose, remaining, 0.0);
}

BuiltLaneGraph build_lane_graph(const LaneTemplate& lane_template) {
  BuiltLaneGraph built;
  auto& nodes = built.graph.nodes;
  auto& edges = built.graph.edges;
  for (const auto& lane : lane_template.lanes) {
    const double total = lane.length();
    const int count = static_cast<int>(std::floor(total / kLaneSegment + 1e-9));
    if (count < 1) throw ValidationError("centerline shorter than one lane segment");
    const int first = static_cast<int>(nodes.size());
    built.lane_first_node.push_back(first);
    built.lane_node_count.push_back(count);
    for (int j = 0; j < count; ++j) {
      const double s0 = kLaneSegment * j;
      const Eigen::Vector3d mid = lane.pose_at(s0 + 0.5 * kLaneSegment);
      LaneNode node;
      node.position = mid.head<2>();
      node.heading = normalize_angle(mid.z());
      node.length = kLaneSegment;
      node.curvature = (lane.pose_at(s0 + kLaneSegment).z() - lane.pose_at(s0).z()) / kLaneSegment;
      node.left_boundary = lane.half_width;
      node.right_boundary = lane.half_width;
      node.left_type = lane.left_type;
      node.right_type = lane.right_type;
      nodes.push_back(node);
      if (j > 0) {
        edges.push_back({first + j - 1, first + j, EdgeKind::successor});
        edges.push_back({first + j, first + j - 1, EdgeKind::predecessor});
      }
    }
    if (lane.closed && count > 1) {
      edges.push_back({first + count - 1, first, EdgeKind::successor});
      edges.push_back({first, first + count - 1, EdgeKind::predecessor});
    }
  }
  const int lanes = static_cast<int>(lane_template.lanes.size());
  auto check_lane = [&](int lane) {
    if (lane < 0 || lane >= lanes) throw ValidationError("lane template references unknown lane");
  };
  for (const auto& [from, to] : lane_template.connections) {
    check_lane(from);
    check_lane(to);
    const int last = built.lane_first_node[from] + built.lane_node_count[from] - 1;
    const int first = built.lane_first_node[to];
    edges.push_back({last, first, EdgeKind::successor});
    edges.push_back({first, last, EdgeKind::predecessor});
  }
  for (const auto& [lane, left] : lane_template.left_neighbors) {
    check_lane(lane);
    check_lane(left);
    const int shared = std::min(built.lane_node_count[lane], built.lane_node_count[left]);
    for (int j = 0; j < shared; ++j) {
      const int a = built.lane_first_node[lane] + j;
      const int b = built.lane_first_node[left] + j;
      edges.push_back({a, b, EdgeKind::left_neighbor});
      edges.push_back({b, a, EdgeKind::right_neighbor});
    }
  }
  return built;
}

}  // namespace detra
