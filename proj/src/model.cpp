#include "detra/model.hpp"

#include "detra/errors.hpp"
#include "detra/json_util.hpp"

#include <cmath>

namespace detra {

namespace {

template <typename C, typename F>
void visit_encoder_config(C& c, F&& f) {
  f("voxel_size", c.voxel_size);
  f("blocks_per_level", c.blocks_per_level);
  f("point_hidden", c.point_hidden);
  f("score_floor", c.score_floor);
  f("nms_iou", c.nms_iou);
  f("map_rounds", c.map_rounds);
}

}  // namespace

void EncoderConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("encoder config: ") + what);
  };
  require(voxel_size > 0.0, "voxel_size must be positive");
  require(blocks_per_level >= 0, "blocks_per_level must be >= 0");
  require(point_hidden >= 1, "point_hidden must be >= 1");
  require(score_floor >= 0.0 && score_floor < 1.0, "score_floor must be in [0, 1)");
  require(nms_iou >= 0.0 && nms_iou <= 1.0, "nms_iou must be in [0, 1]");
  require(map_rounds >= 0, "map_rounds must be >= 0");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  write_fields(j, c, [](auto& o, auto&& f) { visit_encoder_config(o, f); });
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  read_fields(j, c, [](auto& o, auto&& f) { visit_encoder_config(o, f); }, "encoder");
  c.validate();
}

BevConfig ModelConfig::bev() const {
  BevConfig b;
  b.roi = roi;
  b.voxel_size = encoder.voxel_size;
  b.channels = refiner.width;
  b.blocks_per_level = encoder.blocks_per_level;
  b.point_hidden = encoder.point_hidden;
  b.score_floor = encoder.score_floor;
  b.nms_iou = encoder.nms_iou;
  return b;
}

Model::Model(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.refiner.validate();
  config_.encoder.validate();
  if (!(config_.roi > 0.0)) throw ValidationError("model: roi must be positive");
  std::mt19937_64 bev_rng(split_seed(init_seed, 1));
  std::mt19937_64 map_rng(split_seed(init_seed, 2));
  std::mt19937_64 refiner_rng(split_seed(init_seed, 3));
  bev_ = BevEncoder(store_, "bev", config_.bev(), bev_rng);
  map_ = MapEncoder(store_, "map", config_.refiner.width, config_.encoder.map_rounds, map_rng);
  refiner_ = Refiner(store_, "refiner", config_.refiner, refiner_rng);
}

ForwardResult Model::forward(Tape& tape, const Scene& scene, RefineProbe* probe) const {
  ForwardResult r;
  const FeatureGrid voxels = bev_.voxelize(tape, scene.sweeps);
  r.encoding.lidar = bev_.backbone(tape, voxels);
  r.encoding.header = bev_.header(tape, r.encoding.lidar[0]);
  r.encoding.initial = bev_.decode(r.encoding.header, config_.refiner.max_objects);
  r.encoding.map = map_.encode(tape, scene.lane_graph);
  r.encoding.roi = config_.roi;
  r.outputs = refiner_.refine(tape, r.encoding, &r.sentinel, probe);
  return r;
}

LossResult Model::loss(Tape& tape, const Scene& scene, const LossWeights& weights,
                       ForwardResult* forward_out, RefineProbe* probe) const {
  ForwardResult fwd = forward(tape, scene, probe);
  const GroundTruth gt = ground_truth(scene);
  LossResult result = total_loss(tape, fwd.encoding.header, fwd.outputs, fwd.sentinel, gt, config_.refiner.modes,
                                 config_.refiner.horizon, config_.roi, weights);
  if (!std::isfinite(result.report.total)) throw NumericalFault("non-finite loss");
  if (forward_out) *forward_out = std::move(fwd);
  return result;
}

EvalFrame to_eval_frame(const RefinerOutput& out, const std::vector<bool>& sentinel, const Scene& scene,
                        int modes, int horizon) {
  EvalFrame frame;
  frame.gt = ground_truth(scene);
  for (std::size_t n = 0; n < out.detections.size(); ++n) {
    if (n < sentinel.size() && sentinel[n]) continue;
    FrameDetection det;
    det.box = out.detections[n];
    det.poses = Matrix(modes * horizon, 3);
    for (int f = 0; f < modes; ++f)
      for (int t = 0; t < horizon; ++t)
        det.poses.row(f * horizon + t) = out.poses.row(volume_row(static_cast<int>(n), f, t, modes, horizon));
    det.mode_probs = out.mode_probs.row(static_cast<Eigen::Index>(n)).transpose();
    frame.detections.push_back(std::move(det));
  }
  return frame;
}

}  // namespace detra
