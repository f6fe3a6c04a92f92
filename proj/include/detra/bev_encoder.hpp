#pragma once

#include "detra/geometry.hpp"
#include "detra/nn.hpp"
#include "detra/scene.hpp"

#include <array>
#include <vector>

namespace detra {

/// Feature grid stored as (rows * cols) x channels, row-major over (row, col).
struct FeatureGrid {
  Var values;
  int rows = 0;
  int cols = 0;
  Eigen::Vector2d origin{0.0, 0.0};  // center of cell (0, 0)
  double cell_size = 1.0;
  /// -1 for the voxel grid, 0..2 for backbone outputs.
  int level = -1;

  Eigen::Vector2d cell_center(int row, int col) const {
    return origin + cell_size * Eigen::Vector2d(col, row);
  }
};

struct GridSpec {
  int rows = 0;
  int cols = 0;
  Eigen::Vector2d origin{0.0, 0.0};
  double cell_size = 1.0;
};

/// Square grid covering [-roi, roi)^2 at the given voxel size.
GridSpec voxel_grid_spec(double roi, double voxel_size);

struct BevConfig {
  double roi = 20.0;
  double voxel_size = 0.25;
  int channels = 32;
  int blocks_per_level = 4;
  int point_hidden = 16;
  double score_floor = 0.05;
  double nms_iou = 0.1;
};

inline constexpr int kLevels = 3;
inline constexpr int kPointFeatures = 4;
inline constexpr int kBoxChannels = 6;
/// Box sizes are regressed as log ratios to these priors.
inline constexpr double kLengthPrior = 4.4;
inline constexpr double kWidthPrior = 1.9;
inline constexpr double kScorePrior = 0.01;

/// Per-pixel header outputs on the level-0 grid.
struct HeaderOutput {
  Var score_logits;  // (rows * cols) x 1
  Var box;           // (rows * cols) x 6: dx, dy, log l ratio, log w ratio, sin, cos
  GridSpec grid;
};

struct InitialDetections {
  std::vector<Box> boxes;  // descending confidence
  Grid2D score_heatmap;
};

/// Box decoded from one header pixel; (dx, dy) are in cell units.
Box decode_box(const Eigen::Vector2d& cell_center, double cell_size,
               const Eigen::Ref<const Eigen::RowVectorXd>& raw, double confidence);
/// Inverse of decode_box for a box centered within the cell.
Eigen::RowVectorXd encode_box(const Box& box, const Eigen::Vector2d& cell_center, double cell_size);

class BevEncoder {
 public:
  BevEncoder() = default;
  BevEncoder(ParamStore& store, const std::string& name, const BevConfig& config,
             std::mt19937_64& rng);

  /// Per-point perceptron, sum-aggregated into cells. Points outside the ROI
  /// are dropped; within a cell, points are summed in (t, x, y, z) order.
  FeatureGrid voxelize(Tape& tape, const std::vector<PointCloud>& sweeps) const;
  /// Differentiable in the per-point features (n x 4, already cell-relative).
  Var voxelize_features(Tape& tape, const Var& point_features, const std::vector<int>& cells,
                        int cell_count) const;
  /// Cell-relative point features and target cell per kept point, sorted for summation.
  void prepare_points(const std::vector<PointCloud>& sweeps, Matrix& features,
                      std::vector<int>& cells) const;

  std::array<FeatureGrid, kLevels> backbone(Tape& tape, const FeatureGrid& grid) const;
  HeaderOutput header(Tape& tape, const FeatureGrid& level0) const;
  InitialDetections decode(const HeaderOutput& out, int max_detections) const;

  const BevConfig& config() const { return config_; }
  GridSpec base_grid() const { return voxel_grid_spec(config_.roi, config_.voxel_size); }

 private:
  struct ResidualBlock {
    Conv2d conv1, conv2;
    LayerNorm norm1, norm2;
  };
  Var residual(Tape& tape, const ResidualBlock& block, const Var& x, int rows, int cols) const;

  BevConfig config_;
  Mlp point_encoder_;
  Conv2d stem_;
  LayerNorm stem_norm_;
  std::array<Conv2d, kLevels> down_;
  std::array<LayerNorm, kLevels> down_norm_;
  std::array<std::vector<ResidualBlock>, kLevels> blocks_;
  Conv2d score_hidden_, score_out_, box_hidden_, box_out_;
};

}  // namespace detra
