#include "detra/bev_encoder.hpp"

#include "detra/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace detra {

GridSpec voxel_grid_spec(double roi, double voxel_size) {
  if (!(voxel_size > 0)) throw ValidationError("voxel_size must be positive");
  GridSpec g;
  g.rows = g.cols = static_cast<int>(std::lround(2.0 * roi / voxel_size));
  g.origin = Eigen::Vector2d::Constant(-roi + 0.5 * voxel_size);
  g.cell_size = voxel_size;
  return g;
}

Box decode_box(const Eigen::Vector2d& cell_center, double cell_size,
               const Eigen::Ref<const Eigen::RowVectorXd>& raw, double confidence) {
  Box b;
  b.x = cell_center.x() + raw(0) * cell_size;
  b.y = cell_center.y() + raw(1) * cell_size;
  b.l = kLengthPrior * std::exp(raw(2));
  b.w = kWidthPrior * std::exp(raw(3));
  const double norm = std::hypot(raw(4), raw(5));
  b.theta = norm > 0 ? normalize_angle(std::atan2(raw(4) / norm, raw(5) / norm)) : 0.0;
  b.confidence = confidence;
  return b;
}

Eigen::RowVectorXd encode_box(const Box& box, const Eigen::Vector2d& cell_center, double cell_size) {
  Eigen::RowVectorXd raw(kBoxChannels);
  raw << (box.x - cell_center.x()) / cell_size, (box.y - cell_center.y()) / cell_size,
      std::log(box.l / kLengthPrior), std::log(box.w / kWidthPrior), std::sin(box.theta),
      std::cos(box.theta);
  return raw;
}

BevEncoder::BevEncoder(ParamStore& store, const std::string& name, const BevConfig& config,
                       std::mt19937_64& rng)
    : config_(config) {
  const int d = config.channels;
  point_encoder_ = Mlp::create(store, name + ".points", kPointFeatures, config.point_hidden, d, rng);
  stem_ = Conv2d::create(store, name + ".stem", d, d, 3, 2, rng);
  stem_norm_ = LayerNorm::create(store, name + ".stem_norm", d);
  for (int level = 0; level < kLevels; ++level) {
    const std::string prefix = name + ".level" + std::to_string(level);
    down_[level] = Conv2d::create(store, prefix + ".down", d, d, 3, 2, rng);
    down_norm_[level] = LayerNorm::create(store, prefix + ".down_norm", d);
    for (int b = 0; b < config.blocks_per_level; ++b) {
      const std::string block = prefix + ".block" + std::to_string(b);
      ResidualBlock rb;
      rb.conv1 = Conv2d::create(store, block + ".conv1", d, d, 3, 1, rng);
      rb.conv2 = Conv2d::create(store, block + ".conv2", d, d, 3, 1, rng);
      rb.norm1 = LayerNorm::create(store, block + ".norm1", d);
      rb.norm2 = LayerNorm::create(store, block + ".norm2", d);
      blocks_[level].push_back(rb);
    }
  }
  score_hidden_ = Conv2d::create(store, name + ".score.hidden", d, d, 3, 1, rng);
  score_out_ = Conv2d::create(store, name + ".score.out", d, 1, 1, 1, rng, 0.1);
  score_out_.bias->value.setConstant(-std::log((1.0 - kScorePrior) / kScorePrior));
  box_hidden_ = Conv2d::create(store, name + ".box.hidden", d, d, 3, 1, rng);
  box_out_ = Conv2d::create(store, name + ".box.out", d, kBoxChannels, 1, 1, rng, 0.1);
}

void BevEncoder::prepare_points(const std::vector<PointCloud>& sweeps, Matrix& features,
                                std::vector<int>& cells) const {
  const GridSpec g = base_grid();
  const double lo = -config_.roi;
  struct Kept {
    int cell;
    Eigen::Vector4d feat;
  };
  std::vector<Kept> kept;
  for (const auto& sweep : sweeps) {
    for (Eigen::Index i = 0; i < sweep.rows(); ++i) {
      const double x = sweep(i, 0), y = sweep(i, 1);
      const double fc = std::floor((x - lo) / g.cell_size);
      const double fr = std::floor((y - lo) / g.cell_size);
      if (!(fc >= 0 && fr >= 0 && fc < g.cols && fr < g.rows)) continue;
      const int c = static_cast<int>(fc), r = static_cast<int>(fr);
      const Eigen::Vector2d center = g.origin + g.cell_size * Eigen::Vector2d(c, r);
      kept.push_back({r * g.cols + c, Eigen::Vector4d((x - center.x()) / g.cell_size,
                                                      (y - center.y()) / g.cell_size, sweep(i, 2),
                                                      sweep(i, 3))});
    }
  }
  // Summation order within a cell depends only on point content, so any
  // input permutation produces a bit-identical grid.
  std::sort(kept.begin(), kept.end(), [](const Kept& a, const Kept& b) {
    if (a.cell != b.cell) return a.cell < b.cell;
    const int order[4] = {3, 0, 1, 2};
    for (int k : order) {
      if (a.feat[k] != b.feat[k]) return a.feat[k] < b.feat[k];
    }
    return false;
  });
  features.resize(static_cast<Eigen::Index>(kept.size()), kPointFeatures);
  cells.resize(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    features.row(static_cast<Eigen::Index>(i)) = kept[i].feat.transpose();
    cells[i] = kept[i].cell;
  }
}

Var BevEncoder::voxelize_features(Tape& tape, const Var& point_features,
                                  const std::vector<int>& cells, int cell_count) const {
  if (cells.empty()) return tape.constant(Matrix::Zero(cell_count, config_.channels));
  return ag::scatter_add_rows(point_encoder_(tape, point_features), cells, cell_count);
}

FeatureGrid BevEncoder::voxelize(Tape& tape, const std::vector<PointCloud>& sweeps) const {
  const GridSpec g = base_grid();
  Matrix features;
  std::vector<int> cells;
  prepare_points(sweeps, features, cells);
  FeatureGrid grid;
  grid.values = voxelize_features(tape, tape.constant(std::move(features)), cells, g.rows * g.cols);
  grid.rows = g.rows;
  grid.cols = g.cols;
  grid.origin = g.origin;
  grid.cell_size = g.cell_size;
  grid.level = -1;
  return grid;
}

Var BevEncoder::residual(Tape& tape, const ResidualBlock& block, const Var& x, int rows,
                         int cols) const {
  Var h = ag::relu(block.norm1(tape, block.conv1(tape, x, rows, cols)));
  h = block.norm2(tape, block.conv2(tape, h, rows, cols));
  return ag::relu(ag::add(h, x));
}

std::array<FeatureGrid, kLevels> BevEncoder::backbone(Tape& tape, const FeatureGrid& grid) const {
  auto half = [](int n) { return (n - 1) / 2 + 1; };
  int rows = half(grid.rows), cols = half(grid.cols);
  double cell = grid.cell_size * 2.0;
  Var h = ag::relu(stem_norm_(tape, stem_(tape, grid.values, grid.rows, grid.cols)));
  std::array<FeatureGrid, kLevels> out;
  for (int level = 0; level < kLevels; ++level) {
    h = ag::relu(down_norm_[level](tape, down_[level](tape, h, rows, cols)));
    rows = half(rows);
    cols = half(cols);
    cell *= 2.0;
    for (const auto& block : blocks_[level]) h = residual(tape, block, h, rows, cols);
    out[level] = FeatureGrid{h, rows, cols, grid.origin, cell, level};
  }
  return out;
}

HeaderOutput BevEncoder::header(Tape& tape, const FeatureGrid& level0) const {
  HeaderOutput out;
  const int r = level0.rows, c = level0.cols;
  out.score_logits = score_out_(tape, ag::relu(score_hidden_(tape, level0.values, r, c)), r, c);
  out.box = box_out_(tape, ag::relu(box_hidden_(tape, level0.values, r, c)), r, c);
  out.grid = GridSpec{r, c, level0.origin, level0.cell_size};
  return out;
}

InitialDetections BevEncoder::decode(const HeaderOutput& out, int max_detections) const {
  InitialDetections dets;
  const GridSpec& g = out.grid;
  const Matrix& logits = out.score_logits.value();
  const Matrix& box = out.box.value();
  dets.score_heatmap.values.resize(g.rows, g.cols);
  dets.score_heatmap.origin = g.origin;
  dets.score_heatmap.cell_size = g.cell_size;
  std::vector<Box> candidates;
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      const int i = r * g.cols + c;
      const double p = 1.0 / (1.0 + std::exp(-logits(i, 0)));
      dets.score_heatmap.values(r, c) = p;
      if (p <= config_.score_floor) continue;
      const Eigen::Vector2d center = g.origin + g.cell_size * Eigen::Vector2d(c, r);
      candidates.push_back(decode_box(center, g.cell_size, box.row(i), p));
    }
  }
  const auto keep = nms(candidates, config_.nms_iou, static_cast<std::size_t>(std::max(0, max_detections)));
  for (int k : keep) dets.boxes.push_back(candidates[k]);
  return dets;
}

}  // namespace detra
