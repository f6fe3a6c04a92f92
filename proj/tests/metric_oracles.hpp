#pragma once

// Brute-force counting references for the evaluation metrics.

#include "detra/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace oracle {

inline bool inside_box(const detra::Box& b, double x, double y) {
  const double dx = x - b.x, dy = y - b.y;
  const double lon = std::cos(b.theta) * dx + std::sin(b.theta) * dy;
  const double lat = -std::sin(b.theta) * dx + std::cos(b.theta) * dy;
  return std::abs(lon) <= 0.5 * b.l && std::abs(lat) <= 0.5 * b.w;
}

/// Number of true positives when only the `keep` most confident pooled
/// detections survive, recomputed from scratch.
inline int prefix_true_positives(const std::vector<detra::EvalFrame>& frames,
                                 const std::vector<std::pair<int, int>>& order, std::size_t keep, double iou) {
  int tp = 0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    std::vector<bool> used(frames[f].gt.boxes.size(), false);
    for (std::size_t i = 0; i < keep; ++i) {
      if (order[i].first != static_cast<int>(f)) continue;
      const detra::Box& d = frames[f].detections[order[i].second].box;
      int best = -1;
      double best_iou = 0.0;
      for (std::size_t g = 0; g < used.size(); ++g) {
        const double v = detra::rotated_iou(d, frames[f].gt.boxes[g]);
        if (!used[g] && v >= iou && v > best_iou) {
          best = static_cast<int>(g);
          best_iou = v;
        }
      }
      if (best >= 0) {
        used[best] = true;
        ++tp;
      }
    }
  }
  return tp;
}

inline std::vector<std::pair<int, int>> confidence_order(const std::vector<detra::EvalFrame>& frames) {
  std::vector<std::pair<int, int>> order;
  for (std::size_t f = 0; f < frames.size(); ++f)
    for (std::size_t d = 0; d < frames[f].detections.size(); ++d) order.emplace_back(f, d);
  std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    return frames[a.first].detections[a.second].box.confidence >
           frames[b.first].detections[b.second].box.confidence;
  });
  return order;
}

/// Area under the all-point PR curve from per-prefix recounts.
inline double brute_force_ap(const std::vector<detra::EvalFrame>& frames, double iou) {
  int positives = 0;
  for (const auto& f : frames) positives += static_cast<int>(f.gt.boxes.size());
  const auto order = confidence_order(frames);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t n = 1; n <= order.size(); ++n) {
    const int tp = prefix_true_positives(frames, order, n, iou);
    const double recall = static_cast<double>(tp) / positives;
    ap += (recall - prev_recall) * static_cast<double>(tp) / static_cast<double>(n);
    prev_recall = recall;
  }
  return ap;
}

/// Largest pooled confidence whose surviving set reaches the target recall, or -1.
inline double brute_force_recall_threshold(const std::vector<detra::EvalFrame>& frames, double target, double iou) {
  int positives = 0;
  for (const auto& f : frames) positives += static_cast<int>(f.gt.boxes.size());
  std::vector<double> candidates;
  for (const auto& f : frames)
    for (const auto& d : f.detections) candidates.push_back(d.box.confidence);
  std::sort(candidates.begin(), candidates.end(), std::greater<>());
  const auto order = confidence_order(frames);
  for (double c : candidates) {
    std::size_t keep = 0;
    while (keep < order.size() && frames[order[keep].first].detections[order[keep].second].box.confidence >= c)
      ++keep;
    if (prefix_true_positives(frames, order, keep, iou) >= target * positives - 1e-12) return c;
  }
  return -1.0;
}

/// Occupancy AP by visiting every cell, timestep and box with no culling.
inline double brute_force_occ_ap(const std::vector<detra::EvalFrame>& frames, const detra::OccupancySpec& spec) {
  const int side = static_cast<int>(std::lround(2.0 * spec.roi / spec.cell_size));
  std::vector<double> prob;
  std::vector<int> label;
  for (const auto& frame : frames) {
    int horizon = 0;
    if (!frame.gt.trajectories.empty())
      horizon = static_cast<int>(frame.gt.trajectories.front().size());
    else if (!frame.detections.empty())
      horizon = static_cast<int>(frame.detections.front().poses.rows() / frame.detections.front().mode_probs.size());
    for (int t = 0; t < horizon; ++t)
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
          const double x = -spec.roi + (c + 0.5) * spec.cell_size;
          const double y = -spec.roi + (r + 0.5) * spec.cell_size;
          int occ = 0;
          for (std::size_t g = 0; g < frame.gt.boxes.size(); ++g) {
            detra::Box b = frame.gt.boxes[g];
            b.x = frame.gt.trajectories[g][t].x();
            b.y = frame.gt.trajectories[g][t].y();
            b.theta = frame.gt.trajectories[g][t].z();
            if (inside_box(b, x, y)) occ = 1;
          }
          double none = 1.0;
          for (const auto& d : frame.detections)
            for (int f = 0; f < d.mode_probs.size(); ++f) {
              detra::Box b = d.box;
              b.x = d.poses(f * horizon + t, 0);
              b.y = d.poses(f * horizon + t, 1);
              b.theta = d.poses(f * horizon + t, 2);
              if (inside_box(b, x, y)) none *= 1.0 - d.box.confidence * d.mode_probs(f);
            }
          prob.push_back(1.0 - none);
          label.push_back(occ);
        }
  }
  int positives = 0;
  for (int l : label) positives += l;
  double ap = 0.0, prev_recall = 0.0;
  for (int k = detra::kOccThresholds - 1; k >= 0; --k) {
    const double tau = static_cast<double>(k) / (detra::kOccThresholds - 1);
    int tp = 0, fp = 0;
    for (std::size_t i = 0; i < prob.size(); ++i)
      if (prob[i] >= tau) (label[i] ? tp : fp)++;
    const double recall = static_cast<double>(tp) / positives;
    const double precision = tp + fp ? static_cast<double>(tp) / (tp + fp) : 1.0;
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

/// Small random frames: detections are jittered copies of ground truth plus clutter.
inline std::vector<detra::EvalFrame> random_frames(std::mt19937_64& rng, int frames, int max_boxes, int modes,
                                                   int horizon, double spread) {
  std::uniform_real_distribution<double> pos(-spread, spread), jitter(-0.4, 0.4), conf(0.05, 1.0);
  std::uniform_real_distribution<double> dim(0.8, 2.5), ang(-3.0, 3.0), step(-0.6, 0.6), u(0, 1);
  std::vector<detra::EvalFrame> out;
  for (int fi = 0; fi < frames; ++fi) {
    detra::EvalFrame frame;
    const int n_gt = static_cast<int>(rng() % (max_boxes + 1));
    for (int g = 0; g < n_gt; ++g) {
      detra::Box b{pos(rng), pos(rng), dim(rng), dim(rng), ang(rng), 1.0};
      frame.gt.boxes.push_back(b);
      std::vector<Eigen::Vector3d> traj;
      const double vx = step(rng), vy = step(rng);
      for (int t = 0; t < horizon; ++t) traj.emplace_back(b.x + vx * t, b.y + vy * t, b.theta);
      frame.gt.trajectories.push_back(traj);
      frame.gt.is_static.push_back(detra::is_static_trajectory(traj));
    }
    const int n_det = static_cast<int>(rng() % (max_boxes + 1));
    for (int d = 0; d < n_det; ++d) {
      detra::FrameDetection det;
      if (n_gt > 0 && u(rng) < 0.7) {
        det.box = frame.gt.boxes[rng() % n_gt];
        det.box.x += jitter(rng);
        det.box.y += jitter(rng);
        det.box.theta += 0.3 * jitter(rng);
      } else {
        det.box = detra::Box{pos(rng), pos(rng), dim(rng), dim(rng), ang(rng), 1.0};
      }
      det.box.confidence = std::round(conf(rng) * 20.0) / 20.0;  // ties are common
      det.mode_probs = Eigen::VectorXd(modes);
      for (int f = 0; f < modes; ++f) det.mode_probs(f) = 0.1 + u(rng);
      det.mode_probs /= det.mode_probs.sum();
      det.poses = detra::Matrix(modes * horizon, 3);
      for (int f = 0; f < modes; ++f) {
        const double vx = step(rng), vy = step(rng);
        for (int t = 0; t < horizon; ++t)
          det.poses.row(f * horizon + t) << det.box.x + vx * t, det.box.y + vy * t, det.box.theta;
      }
      frame.detections.push_back(det);
    }
    out.push_back(frame);
  }
  return out;
}

}  // namespace oracle
