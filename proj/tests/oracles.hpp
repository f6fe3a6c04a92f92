#pragma once

// Independent brute-force references shared by the unit and acceptance suites.

#include "detra/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

inline detra::Box random_box(std::mt19937_64& rng, double spread = 3.0) {
  std::uniform_real_distribution<double> pos(-spread, spread);
  std::uniform_real_distribution<double> dim(0.5, 4.0);
  std::uniform_real_distribution<double> ang(-3.14159, 3.14159);
  std::uniform_real_distribution<double> conf(0.0, 1.0);
  return detra::Box{pos(rng), pos(rng), dim(rng), dim(rng), ang(rng), conf(rng)};
}

/// Monte-Carlo IoU over the bounding box of both boxes' corners.
inline double monte_carlo_iou(const detra::Box& a, const detra::Box& b, int samples,
                              std::mt19937_64& rng) {
  double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
  for (const auto* box : {&a, &b}) {
    for (const auto& p : detra::box_to_polygon(*box).vertices) {
      lo_x = std::min(lo_x, p.x());
      hi_x = std::max(hi_x, p.x());
      lo_y = std::min(lo_y, p.y());
      hi_y = std::max(hi_y, p.y());
    }
  }
  std::uniform_real_distribution<double> ux(lo_x, hi_x), uy(lo_y, hi_y);
  long both = 0, either = 0;
  for (int i = 0; i < samples; ++i) {
    const Eigen::Vector2d p(ux(rng), uy(rng));
    const bool in_a = detra::box_contains(a, p);
    const bool in_b = detra::box_contains(b, p);
    both += in_a && in_b;
    either += in_a || in_b;
  }
  return either == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(either);
}

/// Greedy NMS by repeated arg-max over the survivors.
inline std::vector<int> greedy_nms(const std::vector<detra::Box>& boxes, double threshold) {
  std::vector<bool> alive(boxes.size(), true);
  std::vector<int> kept;
  while (true) {
    int best = -1;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (!alive[i]) continue;
      if (best < 0 || boxes[i].confidence > boxes[best].confidence) best = static_cast<int>(i);
    }
    if (best < 0) break;
    kept.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (alive[i] && detra::rotated_iou(boxes[best], boxes[i]) > threshold) alive[i] = false;
    }
  }
  return kept;
}

/// Minimum assignment cost by enumerating every injection of the smaller side.
inline double brute_force_assignment(const Eigen::MatrixXd& cost) {
  const bool transpose = cost.rows() > cost.cols();
  const Eigen::MatrixXd c = transpose ? Eigen::MatrixXd(cost.transpose()) : cost;
  std::vector<int> cols(c.cols());
  std::iota(cols.begin(), cols.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (Eigen::Index r = 0; r < c.rows(); ++r) total += c(r, cols[r]);
    best = std::min(best, total);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

}  // namespace oracle
