#pragma once

#include "detra/lane_graph.hpp"
#include "detra/nn.hpp"

#include <array>
#include <string>

namespace detra {

struct MapTokens {
  Var embeddings;     // N_map x d
  Matrix positions;   // N_map x 2, meters
};

/// Per-node input features: segment length, clipped curvature, boundary
/// distances, boundary type one-hots and a constant speed-limit placeholder.
inline constexpr int kMapNodeFeatures = 9;
inline constexpr double kCurvatureClip = 0.5;
Matrix map_node_features(const LaneGraph& graph);

/// Graph network over lane nodes. Messages only see heading-frame relative
/// geometry, so embeddings do not depend on the absolute pose of the graph.
class MapEncoder {
 public:
  MapEncoder() = default;
  MapEncoder(ParamStore& store, const std::string& name, int width, int rounds,
             std::mt19937_64& rng);

  MapTokens encode(Tape& tape, const LaneGraph& graph) const;
  /// Same as encode, with node features supplied as a (possibly differentiable) input.
  Var encode_features(Tape& tape, const LaneGraph& graph, const Var& features) const;

  int width() const { return width_; }

 private:
  int width_ = 0;
  Mlp input_;
  struct Round {
    std::array<Linear, kEdgeKinds> message;
    Mlp update;
    LayerNorm norm;
  };
  std::vector<Round> rounds_;
};

}  // namespace detra
