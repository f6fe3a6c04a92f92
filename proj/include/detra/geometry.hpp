#pragma once

// Bird's-eye-view box geometry. Every routine is templated on the scalar type
// so the same formulas run on plain doubles (matching, metrics) and on
// Eigen::AutoDiffScalar (differentiable gIoU loss).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

namespace detra {

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double theta) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double wrapped = std::fmod(theta, kTwoPi);
  if (wrapped <= -std::numbers::pi) wrapped += kTwoPi;
  if (wrapped > std::numbers::pi) wrapped -= kTwoPi;
  return wrapped;
}

template <typename Scalar>
using Point2 = Eigen::Matrix<Scalar, 2, 1>;

/// Oriented BEV box: centroid, length along heading, width, heading, confidence.
template <typename Scalar>
struct BoxBEV {
  Scalar x{0};
  Scalar y{0};
  Scalar l{1};
  Scalar w{1};
  Scalar theta{0};
  Scalar confidence{1};

  Scalar area() const { return l * w; }
};

using Box = BoxBEV<double>;

/// Counter-clockwise convex polygon.
template <typename Scalar>
struct ConvexPolygon {
  std::vector<Point2<Scalar>> vertices;
};

/// Regular grid of scalars, row index along y and column index along x.
/// `origin` is the center of cell (0, 0).
struct Grid2D {
  Eigen::MatrixXd values;
  Eigen::Vector2d origin{0.0, 0.0};
  double cell_size{1.0};
};

namespace geometry_detail {

// Vertices closer than this are merged during clipping.
inline constexpr double kMergeTolerance = 1e-9;

template <typename Scalar>
Scalar cross(const Point2<Scalar>& a, const Point2<Scalar>& b) {
  return a.x() * b.y() - a.y() * b.x();
}

template <typename Scalar>
Scalar side_of(const Point2<Scalar>& p, const Point2<Scalar>& a, const Point2<Scalar>& b) {
  return cross<Scalar>(b - a, p - a);
}

template <typename Scalar>
void push_unique(std::vector<Point2<Scalar>>& out, const Point2<Scalar>& p) {
  using std::abs;
  if (!out.empty()) {
    const Point2<Scalar>& last = out.back();
    if (abs(last.x() - p.x()) < Scalar(kMergeTolerance) &&
        abs(last.y() - p.y()) < Scalar(kMergeTolerance)) {
      return;
    }
  }
  out.push_back(p);
}

}  // namespace geometry_detail

/// Corners of the oriented rectangle in counter-clockwise order, starting at
/// the front-left corner in the box frame (+l/2, +w/2).
template <typename Scalar>
ConvexPolygon<Scalar> box_to_polygon(const BoxBEV<Scalar>& box) {
  using std::cos;
  using std::sin;
  const Scalar c = cos(box.theta);
  const Scalar s = sin(box.theta);
  const Scalar hl = box.l * Scalar(0.5);
  const Scalar hw = box.w * Scalar(0.5);
  const Scalar local[4][2] = {{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}};
  ConvexPolygon<Scalar> poly;
  poly.vertices.reserve(4);
  for (const auto& corner : local) {
    poly.vertices.emplace_back(box.x + c * corner[0] - s * corner[1],
                               box.y + s * corner[0] + c * corner[1]);
  }
  return poly;
}

/// Signed shoelace area; positive for counter-clockwise polygons.
template <typename Scalar>
Scalar polygon_area(const ConvexPolygon<Scalar>& poly) {
  const auto& v = poly.vertices;
  if (v.size() < 3) return Scalar(0);
  Scalar twice_area(0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto& a = v[i];
    const auto& b = v[(i + 1) % v.size()];
    twice_area += a.x() * b.y() - b.x() * a.y();
  }
  return twice_area * Scalar(0.5);
}

/// Sutherland-Hodgman clipping of `subject` against the convex, CCW `clip`.
template <typename Scalar>
ConvexPolygon<Scalar> clip_polygon(const ConvexPolygon<Scalar>& subject,
                                   const ConvexPolygon<Scalar>& clip) {
  using geometry_detail::push_unique;
  using geometry_detail::side_of;
  std::vector<Point2<Scalar>> output = subject.vertices;
  const auto& edges = clip.vertices;
  for (std::size_t e = 0; e < edges.size() && !output.empty(); ++e) {
    const Point2<Scalar>& a = edges[e];
    const Point2<Scalar>& b = edges[(e + 1) % edges.size()];
    std::vector<Point2<Scalar>> input;
    input.swap(output);
    for (std::size_t i = 0; i < input.size(); ++i) {
      const Point2<Scalar>& cur = input[i];
      const Point2<Scalar>& prev = input[(i + input.size() - 1) % input.size()];
      const Scalar s_cur = side_of<Scalar>(cur, a, b);
      const Scalar s_prev = side_of<Scalar>(prev, a, b);
      const bool cur_in = s_cur >= Scalar(0);
      const bool prev_in = s_prev >= Scalar(0);
      if (cur_in != prev_in) {
        const Scalar t = s_prev / (s_prev - s_cur);
        push_unique<Scalar>(output, Point2<Scalar>(prev + (cur - prev) * t));
      }
      if (cur_in) push_unique<Scalar>(output, cur);
    }
    if (output.size() > 1) {
      const auto& first = output.front();
      const auto& last = output.back();
      using std::abs;
      if (abs(first.x() - last.x()) < Scalar(geometry_detail::kMergeTolerance) &&
          abs(first.y() - last.y()) < Scalar(geometry_detail::kMergeTolerance)) {
        output.pop_back();
      }
    }
  }
  ConvexPolygon<Scalar> result;
  result.vertices = std::move(output);
  return result;
}

template <typename Scalar>
Scalar intersection_area(const BoxBEV<Scalar>& a, const BoxBEV<Scalar>& b) {
  const ConvexPolygon<Scalar> inter = clip_polygon(box_to_polygon(a), box_to_polygon(b));
  if (inter.vertices.size() < 3) return Scalar(0);
  const Scalar area = polygon_area(inter);
  return area > Scalar(0) ? area : Scalar(0);
}

/// Exact oriented-box IoU via polygon clipping and the shoelace formula.
template <typename Scalar>
Scalar rotated_iou(const BoxBEV<Scalar>& a, const BoxBEV<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  if (inter <= Scalar(1e-12)) return Scalar(0);
  const Scalar uni = a.area() + b.area() - inter;
  return inter / uni;
}

/// Generalized IoU with the axis-aligned bounding box of both boxes' corners
/// as the enclosing region.
template <typename Scalar>
Scalar giou(const BoxBEV<Scalar>& a, const BoxBEV<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = a.area() + b.area() - inter;
  const Scalar iou = inter / uni;
  const auto pa = box_to_polygon(a);
  const auto pb = box_to_polygon(b);
  Scalar min_x = pa.vertices[0].x(), max_x = min_x;
  Scalar min_y = pa.vertices[0].y(), max_y = min_y;
  auto extend = [&](const Point2<Scalar>& p) {
    if (p.x() < min_x) min_x = p.x();
    if (p.x() > max_x) max_x = p.x();
    if (p.y() < min_y) min_y = p.y();
    if (p.y() > max_y) max_y = p.y();
  };
  for (const auto& p : pa.vertices) extend(p);
  for (const auto& p : pb.vertices) extend(p);
  const Scalar enclosing = (max_x - min_x) * (max_y - min_y);
  return iou - (enclosing - uni) / enclosing;
}

/// gIoU with the enclosing box aligned to `b`'s heading instead of the world
/// axes, so identical boxes score 1 at any heading.
template <typename Scalar>
Scalar giou_in_frame_of(const BoxBEV<Scalar>& a, const BoxBEV<double>& b) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const Scalar dx = a.x - b.x, dy = a.y - b.y;
  BoxBEV<Scalar> ra = a;
  ra.x = c * dx + s * dy;
  ra.y = -s * dx + c * dy;
  ra.theta = a.theta - b.theta;
  BoxBEV<Scalar> rb;
  rb.x = Scalar(0);
  rb.y = Scalar(0);
  rb.l = Scalar(b.l);
  rb.w = Scalar(b.w);
  rb.theta = Scalar(0);
  return giou(ra, rb);
}

/// Radius of the circle circumscribing the box, for cheap overlap rejection.
inline double circumradius(const Box& box) { return 0.5 * std::hypot(box.l, box.w); }

/// Greedy non-maximum suppression in descending confidence (ties: lower index
/// first). Stops once `max_keep` boxes survive; the kept prefix is identical
/// to running to completion.
inline std::vector<int> nms(std::span<const Box> boxes, double iou_threshold,
                            std::size_t max_keep = static_cast<std::size_t>(-1)) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return boxes[a].confidence > boxes[b].confidence;
  });
  std::vector<int> kept;
  for (int idx : order) {
    if (kept.size() >= max_keep) break;
    const Box& cand = boxes[idx];
    bool suppressed = false;
    for (int k : kept) {
      const Box& other = boxes[k];
      const double reach = circumradius(cand) + circumradius(other);
      if (std::hypot(cand.x - other.x, cand.y - other.y) >= reach) continue;
      if (rotated_iou(cand, other) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

/// One tap of a bilinear lookup: flattened cell index (row * cols + col) and weight.
struct BilinearTap {
  int index{-1};
  double weight{0.0};
};

/// Up to four taps around `point`; cells outside the grid are dropped (zero padding).
/// Also returns the fractional position within the cell quad through `frac`.
inline int bilinear_taps(int rows, int cols, const Eigen::Vector2d& origin, double cell_size,
                         const Eigen::Vector2d& point, BilinearTap taps[4],
                         Eigen::Vector2d* frac = nullptr) {
  const double u = (point.x() - origin.x()) / cell_size;
  const double v = (point.y() - origin.y()) / cell_size;
  const double c0 = std::floor(u);
  const double r0 = std::floor(v);
  const double a = u - c0;
  const double b = v - r0;
  if (frac) *frac = Eigen::Vector2d(a, b);
  int count = 0;
  const double weights[4] = {(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b};
  const double dc[4] = {0, 1, 0, 1};
  const double dr[4] = {0, 0, 1, 1};
  for (int k = 0; k < 4; ++k) {
    const double r = r0 + dr[k];
    const double c = c0 + dc[k];
    if (r < 0 || c < 0 || r >= rows || c >= cols) {
      taps[k] = BilinearTap{};
      continue;
    }
    taps[k] = BilinearTap{static_cast<int>(r) * cols + static_cast<int>(c), weights[k]};
    ++count;
  }
  return count;
}

/// Bilinear interpolation of a scalar grid with zero padding.
inline double bilinear_sample(const Grid2D& grid, const Eigen::Vector2d& point) {
  BilinearTap taps[4];
  const int rows = static_cast<int>(grid.values.rows());
  const int cols = static_cast<int>(grid.values.cols());
  bilinear_taps(rows, cols, grid.origin, grid.cell_size, point, taps);
  double out = 0.0;
  for (const auto& tap : taps) {
    if (tap.index < 0) continue;
    out += tap.weight * grid.values(tap.index / cols, tap.index % cols);
  }
  return out;
}

/// Bilinear interpolation of a d-channel feature grid stored as (rows*cols) x d.
template <typename Derived>
Eigen::RowVectorXd bilinear_sample(const Eigen::MatrixBase<Derived>& features, int rows, int cols,
                                   const Eigen::Vector2d& origin, double cell_size,
                                   const Eigen::Vector2d& point) {
  BilinearTap taps[4];
  bilinear_taps(rows, cols, origin, cell_size, point, taps);
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(features.cols());
  for (const auto& tap : taps) {
    if (tap.index < 0) continue;
    out += tap.weight * features.row(tap.index);
  }
  return out;
}

/// Whether `p` lies inside the oriented box (boundary inclusive).
inline bool box_contains(const Box& box, const Eigen::Vector2d& p) {
  const double c = std::cos(box.theta);
  const double s = std::sin(box.theta);
  const double dx = p.x() - box.x;
  const double dy = p.y() - box.y;
  const double lon = c * dx + s * dy;
  const double lat = -s * dx + c * dy;
  return std::abs(lon) <= 0.5 * box.l && std::abs(lat) <= 0.5 * box.w;
}

}  // namespace detra
