#pragma once

#include "detra/bev_encoder.hpp"
#include "detra/geometry.hpp"
#include "detra/json_util.hpp"
#include "detra/learning.hpp"

#include <optional>
#include <string>
#include <vector>

namespace detra {

/// One detection with its forecast modes.
struct FrameDetection {
  Box box;
  /// (F * T) x 3 rows of (x, y, theta), row f * T + t; t = 0 is the detection itself.
  Matrix poses;
  Eigen::VectorXd mode_probs;
};

struct EvalFrame {
  std::vector<FrameDetection> detections;
  GroundTruth gt;
  /// Ground-truth actors whose matches are discarded by TrajAP; may be empty.
  std::vector<bool> ignore;
  int modes() const;
  int horizon() const;
};

inline constexpr double kMissRadius = 2.0;
inline constexpr int kOccThresholds = 100;

/// All-point AP at the given IoU; nullopt when there is no ground truth.
std::optional<double> detection_ap(const std::vector<EvalFrame>& frames, double iou_threshold);

struct PrPoint {
  double threshold;
  double recall;
  double precision;
};
/// Pooled precision/recall at each distinct confidence, high to low.
std::vector<PrPoint> precision_recall_curve(const std::vector<EvalFrame>& frames, double iou_threshold);

/// Largest confidence threshold whose surviving detections reach the target
/// recall; nullopt when the target is unreachable.
std::optional<double> recall_point_threshold(const std::vector<EvalFrame>& frames, double target_recall = 0.8,
                                             double iou = 0.5);

/// Greedy confidence-ordered matching within one frame; returns gt index per
/// detection or -1. Detections below `min_confidence` are skipped (-1).
std::vector<int> greedy_match(const std::vector<FrameDetection>& dets, const std::vector<Box>& gts,
                              double iou_threshold, double min_confidence = -1.0);

struct ForecastErrors {
  std::optional<double> mr;
  std::optional<double> ade;
  std::optional<double> fde;
  std::optional<double> bfde;
  int count = 0;
};

struct ForecastMetrics {
  ForecastErrors macro;
  ForecastErrors static_bucket;
  ForecastErrors dynamic_bucket;
};

/// Best-of-K errors for matched detections at or above `threshold`.
ForecastMetrics forecasting_metrics(const std::vector<EvalFrame>& frames, int k, double threshold);

struct OccupancySpec {
  double roi = 20.0;
  double cell_size = 0.5;
};

/// Occupancy cell probabilities/labels pooled over frames and timesteps.
struct OccupancyCells {
  std::vector<double> predicted;
  std::vector<bool> occupied;
};
OccupancyCells rasterize_occupancy(const std::vector<EvalFrame>& frames, const OccupancySpec& spec);
/// AP over kOccThresholds evenly spaced thresholds in [0, 1].
std::optional<double> occupancy_ap(const OccupancyCells& cells);
std::optional<double> occ_ap(const std::vector<EvalFrame>& frames, const OccupancySpec& spec);

/// Waypoint steps standing in for the short and long horizons.
std::vector<int> traj_ap_horizons(int horizon);
/// Confidence threshold maximizing detection F1 at the IoU.
double max_f1_threshold(const std::vector<EvalFrame>& frames, double iou);
/// TrajAP for one (horizon step, IoU, static or dynamic) bucket; nullopt for an empty bucket.
std::optional<double> traj_ap_bucket(const std::vector<EvalFrame>& frames, int step, double iou, bool static_slice);
std::optional<double> traj_ap(const std::vector<EvalFrame>& frames);

struct MetricsReport {
  std::optional<double> ap_03, ap_05, ap_07;
  int k = 6;
  std::optional<double> recall_threshold;
  ForecastMetrics k1;
  ForecastMetrics kk;
  std::optional<double> occ_ap;
  std::optional<double> traj_ap;
  std::string config_digest;
  std::uint64_t seed = 0;
};

MetricsReport compute_metrics(const std::vector<EvalFrame>& frames, int k, const OccupancySpec& occ);

json metrics_to_json(const MetricsReport& report);
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& report);

}  // namespace detra
