#pragma once

#include "detra/refiner.hpp"
#include "detra/scene.hpp"

#include <Eigen/Dense>
#include <unsupported/Eigen/AutoDiff>

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace detra {

struct LossWeights {
  double alpha = 0.1;   // forecasting
  double beta = 0.01;   // detection L1
  double gamma = 0.1;   // detection gIoU
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// Boxes and trajectories of all agents at the current time.
struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<std::vector<Eigen::Vector3d>> trajectories;  // [n][t], t = 0 current
  std::vector<bool> is_static;
};
GroundTruth ground_truth(const Scene& scene);

/// Probabilities are clamped to [1e-7, 1 - 1e-7].
inline constexpr double kFocalClamp = 1e-7;

/// Mean binary focal loss over elements.
double focal_loss(const Eigen::ArrayXd& prob, const Eigen::ArrayXd& target, double alpha, double gamma);
/// Same loss from logits, differentiable; `target` has the shape of `logits`.
Var focal_loss_logits(const Var& logits, const Matrix& target, double alpha, double gamma);

/// Per-row scalar function with forward-mode derivatives in up to five inputs.
using Ad5 = Eigen::AutoDiffScalar<Eigen::Matrix<double, 5, 1>>;
using RowScalarFn = std::function<Ad5(int row, const std::array<Ad5, 5>& x)>;
/// Applies `fn` to each row of `input` (at most 5 columns); returns rows x 1.
Var row_scalar_op(const Var& input, const RowScalarFn& fn);

/// IoU of two boxes treated as axis-aligned in the second box's heading frame.
template <typename S>
S heading_aligned_iou(const BoxBEV<S>& pred, const Box& gt) {
  using std::cos;
  using std::sin;
  const double c = std::cos(gt.theta), s = std::sin(gt.theta);
  const S dx = pred.x - gt.x, dy = pred.y - gt.y;
  const S lon = c * dx + s * dy;
  const S lat = -s * dx + c * dy;
  auto overlap = [](S lo1, S hi1, double lo2, double hi2) {
    const S lo = lo1 > S(lo2) ? lo1 : S(lo2);
    const S hi = hi1 < S(hi2) ? hi1 : S(hi2);
    return hi > lo ? S(hi - lo) : S(0);
  };
  const S ix = overlap(lon - 0.5 * pred.l, lon + 0.5 * pred.l, -0.5 * gt.l, 0.5 * gt.l);
  const S iy = overlap(lat - 0.5 * pred.w, lat + 0.5 * pred.w, -0.5 * gt.w, 0.5 * gt.w);
  const S inter = ix * iy;
  return inter / (pred.l * pred.w + gt.l * gt.w - inter);
}

struct InitLossTerms {
  Var focal;
  Var box;
};
/// Heatmap focal loss with single-pixel positives plus (1 - aligned IoU) and a
/// heading sin/cos L1 on positive pixels.
Var initial_pose_loss(const HeaderOutput& out, const std::vector<Box>& gts, const LossWeights& weights,
                      InitLossTerms* terms = nullptr);
/// Level-0 pixel index holding the box centroid, clamped into the grid.
int centroid_pixel(const GridSpec& grid, const Box& box);

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (detection, ground truth), ascending detection
  std::vector<int> unmatched_detections;
  std::vector<int> unmatched_gt;
};

/// Minimum-cost assignment; result[r] is the column for row r or -1.
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost);

/// Box parameters used by the L1 term: x, y, l, w normalized by the ROI extent, sin, cos.
Eigen::Matrix<double, 1, 6> l1_box_params(const Box& box, double roi);
Eigen::MatrixXd match_cost(const std::vector<Box>& dets, const std::vector<Box>& gts,
                           const LossWeights& weights, double roi);
/// Detections flagged in `ignore` never match.
MatchResult hungarian_match(const std::vector<Box>& dets, const std::vector<Box>& gts,
                            const LossWeights& weights, double roi, const std::vector<bool>& ignore = {});

struct DetectionTerms {
  Var cls;
  Var l1;
  Var giou;
};
DetectionTerms detection_loss(Tape& tape, const Var& det_state, const std::vector<Box>& gts,
                              const MatchResult& match, const std::vector<bool>& sentinel, double roi,
                              const LossWeights& weights);

inline constexpr double kForecastIouGate = 0.5;

struct ForecastTerms {
  Var nll;
  Var cls;
  int supervised = 0;
};
/// Winner-takes-all Laplacian mixture loss on matched detections above the IoU gate.
ForecastTerms forecasting_loss(Tape& tape, const RefinerOutput& out, int modes, int horizon,
                               const GroundTruth& gt, const MatchResult& match);
/// Mode whose waypoints have the smallest summed L1 distance to the trajectory.
int winner_mode(const Matrix& waypoints, int object, int modes, int horizon,
                const std::vector<Eigen::Vector3d>& trajectory);

struct BlockLoss {
  double det_cls = 0;
  double det_l1 = 0;
  double det_giou = 0;
  double for_nll = 0;
  double for_cls = 0;
};

struct LossReport {
  double l_init = 0;
  std::vector<BlockLoss> blocks;  // blocks 1..B
  double total = 0;
  LossWeights weights;
};

struct LossResult {
  Var total;
  LossReport report;
};

/// L_init + sum over blocks >= 1 of (cls + beta l1 + gamma giou + alpha (nll + cls)).
LossResult total_loss(Tape& tape, const HeaderOutput& header, const std::vector<RefinerOutput>& outputs,
                      const std::vector<bool>& sentinel, const GroundTruth& gt, int modes, int horizon,
                      double roi, const LossWeights& weights);

std::string loss_csv_header(int blocks);
std::string loss_csv_row(long step, const LossReport& report);

}  // namespace detra
