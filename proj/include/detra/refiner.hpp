#pragma once

#include "detra/bev_encoder.hpp"
#include "detra/map_encoder.hpp"
#include "detra/nn.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace detra {

enum class AttentionKind { lidar, map, time, mode, object };
const char* to_string(AttentionKind kind);
AttentionKind attention_kind_from_string(const std::string& s);

struct RefinerConfig {
  int blocks = 3;
  int modes = 3;
  int horizon = 6;
  int width = 32;
  int max_objects = 32;
  int knn = 4;
  int heads = 4;
  /// Deformable sampling points per resolution level.
  int ell = 4;
  std::vector<std::string> attention_order{"lidar", "map", "time", "mode", "object"};
  /// Empty means {0, (T-1)/2, T-1}.
  std::vector<int> map_time_subset;
  /// Query-volume sizes; each is either 1 or the output size.
  int query_modes = 0;    // 0 means `modes`
  int query_horizon = 0;  // 0 means `horizon`
  /// detector | grid
  std::string pose_init = "detector";
  /// deformable | global | none
  std::string lidar_attention = "deformable";
  /// knn | global | none
  std::string map_attention = "knn";
  /// When false, poses keep the initialization and only confidences and forecasts update.
  bool refine_poses = true;
  /// Treat poses and detections as constants between blocks.
  bool stop_gradient = true;
  /// Scale from raw head outputs to meters.
  double offset_scale = 2.0;
  double waypoint_scale = 4.0;

  int q_modes() const { return query_modes > 0 ? query_modes : modes; }
  int q_horizon() const { return query_horizon > 0 ? query_horizon : horizon; }
  std::vector<int> time_subset() const;
  std::vector<AttentionKind> order() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const RefinerConfig& c);
void from_json(const nlohmann::json& j, RefinerConfig& c);

/// Detection state per object: x, y, log l, log w, theta, confidence logit.
inline constexpr int kDetState = 6;
inline constexpr double kMinScale = 1e-3;
inline constexpr double kMaxScale = 1e3;
/// Steps shorter than this keep the previous heading.
inline constexpr double kMinHeadingStep = 0.1;

/// Volume row index for (object, mode, time) in an N x F x T layout.
inline int volume_row(int n, int f, int t, int modes, int horizon) { return (n * modes + f) * horizon + t; }

struct RefinerOutput {
  Var det_state;              // N x 6
  std::vector<Box> detections;
  Matrix poses;               // (N*F*T) x 3
  Var pose_var;               // same values, as a tape node
  Var waypoints;              // (N*F*(T-1)) x 2
  Var scales;                 // (N*F*(T-1)) x 2
  Var mode_log_probs;         // N x F
  Matrix mode_probs;          // N x F
  Var queries;                // (N*Fq*Tq) x d
};

/// Sampled LiDAR tokens and map tokens for one scene.
struct SceneEncoding {
  std::array<FeatureGrid, kLevels> lidar;
  MapTokens map;
  HeaderOutput header;
  InitialDetections initial;
  double roi = 20.0;
};

/// Hooks used by locality and stop-gradient probes.
struct RefineProbe {
  /// When set, block inputs are replaced by tape leaves so gradients can be read back.
  bool leaf_inputs = false;
  std::vector<Var> pose_inputs;  // per block >= 1
  std::vector<Var> det_inputs;
};

class Refiner {
 public:
  Refiner() = default;
  Refiner(ParamStore& store, const std::string& name, const RefinerConfig& config,
          std::mt19937_64& rng);

  const RefinerConfig& config() const { return config_; }

  /// Q0[n, f, t] = mode[f] + time[t].
  Var init_queries(Tape& tape, int objects) const;
  /// Pads with sentinels; `sentinel` flags padded objects.
  static Matrix init_poses(const std::vector<Box>& dets, int objects, int modes, int horizon,
                           double roi, std::vector<Box>* padded = nullptr,
                           std::vector<bool>* sentinel = nullptr);
  /// Uniform grid of stationary poses covering the ROI.
  static std::vector<Box> grid_poses(int objects, double roi);

  /// One attention layer; `poses` is (N*F*T) x 3 with the full output dimensions.
  Var attention_layer(Tape& tape, AttentionKind kind, int block, const Var& queries,
                      const Var& poses, const SceneEncoding& scene, int objects,
                      ag::AttentionTrace* trace = nullptr) const;

  struct PoseUpdate {
    Var det_state;
    Var waypoints;
    Var scales;
    Var mode_logits;
  };
  PoseUpdate pose_update(Tape& tape, int block, const Var& queries, const Var& det_prev,
                         const Var& poses_prev, int objects) const;

  /// Block 0 is the initialization; blocks 1..B follow.
  std::vector<RefinerOutput> refine(Tape& tape, const SceneEncoding& scene,
                                    std::vector<bool>* sentinel = nullptr,
                                    RefineProbe* probe = nullptr) const;

  /// Poses from a detection state and waypoints (headings from step chords).
  Matrix assemble_poses(const Matrix& det_state, const Matrix& waypoints, int objects) const;

 private:
  struct Layer {
    Linear q, k, v, out;
    Linear pos_k, pos_v;     // relative position terms (map, global lidar)
    Linear sampling;         // deformable offsets + logits
    Mlp ffn;
    LayerNorm norm_att, norm_ffn;
  };
  struct Block {
    std::vector<Layer> layers;  // one per entry of the attention order
    Mlp detection;
    GruCell gru_forward, gru_backward;
    Mlp waypoint;
    Mlp mode;
  };

  Var finish_layer(Tape& tape, const Layer& layer, const Var& queries, const Var& attended) const;
  Var lidar_deformable(Tape& tape, const Layer& layer, const Var& queries, const Var& poses,
                       const SceneEncoding& scene, int objects) const;
  Var lidar_global(Tape& tape, const Layer& layer, const Var& queries, const Var& poses,
                   const SceneEncoding& scene, int objects, ag::AttentionTrace* trace) const;
  Var map_layer(Tape& tape, const Layer& layer, const Var& queries, const Var& poses,
                const SceneEncoding& scene, int objects, ag::AttentionTrace* trace) const;
  Var self_layer(Tape& tape, const Layer& layer, AttentionKind axis, const Var& queries,
                 int objects, ag::AttentionTrace* trace) const;
  /// Pose row (full volume) associated with query row (n, fq, tq).
  int pose_row_for_query(int n, int fq, int tq) const;

  RefinerConfig config_;
  std::vector<AttentionKind> order_;
  Param* mode_params_ = nullptr;  // Fq x d
  Param* time_params_ = nullptr;  // Tq x d
  std::vector<Block> blocks_;
};

/// Converts a detection state row to a box (confidence = sigmoid of the logit).
Box state_to_box(const Eigen::Ref<const Eigen::RowVectorXd>& state);
Eigen::RowVectorXd box_to_state(const Box& box);

/// Indices of the k nearest token positions to p; ties go to the lower index.
std::vector<int> nearest_tokens(const Matrix& positions, const Eigen::Vector2d& p, int k);

}  // namespace detra
