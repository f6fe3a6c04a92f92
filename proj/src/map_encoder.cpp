#include "detra/map_encoder.hpp"

#include <algorithm>
#include <cmath>

namespace detra {

Matrix map_node_features(const LaneGraph& graph) {
  Matrix f(static_cast<Eigen::Index>(graph.nodes.size()), kMapNodeFeatures);
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const LaneNode& n = graph.nodes[i];
    const auto r = static_cast<Eigen::Index>(i);
    f(r, 0) = n.length / kLaneSegment;
    f(r, 1) = std::clamp(n.curvature, -kCurvatureClip, kCurvatureClip);
    f(r, 2) = n.left_boundary;
    f(r, 3) = n.right_boundary;
    f(r, 4) = n.left_type == BoundaryType::solid ? 1.0 : 0.0;
    f(r, 5) = n.left_type == BoundaryType::dashed ? 1.0 : 0.0;
    f(r, 6) = n.right_type == BoundaryType::solid ? 1.0 : 0.0;
    f(r, 7) = n.right_type == BoundaryType::dashed ? 1.0 : 0.0;
    f(r, 8) = 1.0;
  }
  return f;
}

MapEncoder::MapEncoder(ParamStore& store, const std::string& name, int width, int rounds,
                       std::mt19937_64& rng)
    : width_(width) {
  input_ = Mlp::create(store, name + ".input", kMapNodeFeatures, width, width, rng);
  for (int r = 0; r < rounds; ++r) {
    const std::string prefix = name + ".round" + std::to_string(r);
    Round round;
    for (int k = 0; k < kEdgeKinds; ++k) {
      round.message[k] = Linear::create(store, prefix + ".message." + to_string(static_cast<EdgeKind>(k)),
                                        width + 4, width, rng);
    }
    round.update = Mlp::create(store, prefix + ".update", width * (1 + kEdgeKinds), width, width, rng);
    round.norm = LayerNorm::create(store, prefix + ".norm", width);
    rounds_.push_back(round);
  }
}

MapTokens MapEncoder::encode(Tape& tape, const LaneGraph& graph) const {
  MapTokens tokens;
  tokens.embeddings = encode_features(tape, graph, tape.constant(map_node_features(graph)));
  tokens.positions.resize(static_cast<Eigen::Index>(graph.nodes.size()), 2);
  for (std::size_t i = 0; i < graph.nodes.size(); ++i)
    tokens.positions.row(static_cast<Eigen::Index>(i)) = graph.nodes[i].position.transpose();
  return tokens;
}

Var MapEncoder::encode_features(Tape& tape, const LaneGraph& graph, const Var& features) const {
  const auto nodes = static_cast<Eigen::Index>(graph.nodes.size());

  // Per edge kind: sources, destinations, relative geometry in the receiver's
  // heading frame, and 1 / in-degree of each receiver.
  struct KindEdges {
    std::vector<int> src, dst;
    Matrix relative;
    Matrix inv_degree;
  };
  std::array<KindEdges, kEdgeKinds> kinds;
  for (const auto& e : graph.edges) {
    auto& k = kinds[static_cast<int>(e.kind)];
    k.src.push_back(e.src);
    k.dst.push_back(e.dst);
  }
  for (auto& k : kinds) {
    k.relative.resize(static_cast<Eigen::Index>(k.src.size()), 4);
    k.inv_degree = Matrix::Zero(nodes, 1);
    for (std::size_t i = 0; i < k.src.size(); ++i) {
      const LaneNode& s = graph.nodes[k.src[i]];
      const LaneNode& d = graph.nodes[k.dst[i]];
      const Eigen::Vector2d delta = s.position - d.position;
      const double c = std::cos(d.heading), sn = std::sin(d.heading);
      const double dtheta = s.heading - d.heading;
      const auto r = static_cast<Eigen::Index>(i);
      k.relative(r, 0) = (c * delta.x() + sn * delta.y()) / kLaneSegment;
      k.relative(r, 1) = (-sn * delta.x() + c * delta.y()) / kLaneSegment;
      k.relative(r, 2) = std::sin(dtheta);
      k.relative(r, 3) = std::cos(dtheta);
      k.inv_degree(k.dst[i], 0) += 1.0;
    }
    for (Eigen::Index i = 0; i < nodes; ++i) {
      if (k.inv_degree(i, 0) > 0) k.inv_degree(i, 0) = 1.0 / k.inv_degree(i, 0);
    }
  }

  Var h = input_(tape, features);
  for (const Round& round : rounds_) {
    std::vector<Var> parts{h};
    for (int kind = 0; kind < kEdgeKinds; ++kind) {
      const KindEdges& k = kinds[kind];
      if (k.src.empty()) {
        parts.push_back(tape.constant(Matrix::Zero(nodes, width_)));
        continue;
      }
      const Var inputs = ag::concat_cols(
          std::vector<Var>{ag::gather_rows(h, k.src), tape.constant(k.relative)});
      const Var messages = round.message[kind](tape, inputs);
      const Var summed = ag::scatter_add_rows(messages, k.dst, nodes);
      parts.push_back(ag::mul_col(summed, tape.constant(k.inv_degree)));
    }
    const Var update = round.update(tape, ag::concat_cols(parts));
    h = round.norm(tape, ag::add(h, update));
  }
  return h;
}

}  // namespace detra
