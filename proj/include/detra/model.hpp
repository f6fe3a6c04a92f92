#pragma once

#include "detra/bev_encoder.hpp"
#include "detra/learning.hpp"
#include "detra/map_encoder.hpp"
#include "detra/metrics.hpp"
#include "detra/refiner.hpp"
#include "detra/scene.hpp"

#include <cstdint>
#include <memory>
#include <vector>

namespace detra {

/// Encoder settings beyond the refiner keys. The BEV channel count and the map
/// embedding width follow the refiner width; the ROI follows the scene config.
struct EncoderConfig {
  double voxel_size = 0.25;
  int blocks_per_level = 1;
  int point_hidden = 16;
  double score_floor = 0.05;
  double nms_iou = 0.1;
  int map_rounds = 3;

  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct ModelConfig {
  RefinerConfig refiner;
  EncoderConfig encoder;
  double roi = 20.0;

  BevConfig bev() const;
};

/// Everything produced by one forward pass on a scene.
struct ForwardResult {
  SceneEncoding encoding;
  std::vector<RefinerOutput> outputs;  // blocks 0..B
  std::vector<bool> sentinel;
};

/// Full detector and forecaster: LiDAR encoder, map encoder and refiner sharing one parameter store.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t init_seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  ForwardResult forward(Tape& tape, const Scene& scene, RefineProbe* probe = nullptr) const;
  LossResult loss(Tape& tape, const Scene& scene, const LossWeights& weights, ForwardResult* forward_out = nullptr,
                  RefineProbe* probe = nullptr) const;

 private:
  ModelConfig config_;
  ParamStore store_;
  BevEncoder bev_;
  MapEncoder map_;
  Refiner refiner_;
};

/// Evaluation view of one refinement block's output; sentinel rows are dropped.
EvalFrame to_eval_frame(const RefinerOutput& out, const std::vector<bool>& sentinel, const Scene& scene,
                        int modes, int horizon);

}  // namespace detra
