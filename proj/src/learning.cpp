#include "detra/learning.hpp"

#include "detra/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace detra {

namespace {

template <typename C, typename F>
void visit_loss_weights(C& c, F&& f) {
  f("alpha", c.alpha);
  f("beta", c.beta);
  f("gamma", c.gamma);
  f("focal_alpha", c.focal_alpha);
  f("focal_gamma", c.focal_gamma);
}

Var zero(Tape& tape) { return tape.constant(Matrix::Zero(1, 1)); }

}  // namespace

void to_json(json& j, const LossWeights& w) {
  write_fields(j, w, [](auto& o, auto&& f) { visit_loss_weights(o, f); });
}

void from_json(const json& j, LossWeights& w) {
  read_fields(j, w, [](auto& o, auto&& f) { visit_loss_weights(o, f); }, "loss_weights");
}

GroundTruth ground_truth(const Scene& scene) {
  GroundTruth gt;
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    gt.boxes.push_back(scene.agents[i].box);
    gt.trajectories.push_back(scene.gt_trajectories[i]);
    gt.is_static.push_back(is_static_trajectory(scene.gt_trajectories[i]));
  }
  return gt;
}

double focal_loss(const Eigen::ArrayXd& prob, const Eigen::ArrayXd& target, double alpha, double gamma) {
  if (prob.size() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < prob.size(); ++i) {
    const double p = std::clamp(prob(i), kFocalClamp, 1.0 - kFocalClamp);
    if (target(i) > 0.5) {
      total += -alpha * std::pow(1.0 - p, gamma) * std::log(p);
    } else {
      total += -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
    }
  }
  return total / static_cast<double>(prob.size());
}

Var focal_loss_logits(const Var& logits, const Matrix& target, double alpha, double gamma) {
  // With p = sigmoid(z): -log p = softplus(-z), -log(1 - p) = softplus(z).
  const Var sp_pos = ag::softplus(logits);
  const Var sp_neg = ag::softplus(ag::neg(logits));
  const Var pos = ag::scale(ag::mul(ag::exp(ag::scale(sp_pos, -gamma)), sp_neg), alpha);
  const Var neg = ag::scale(ag::mul(ag::exp(ag::scale(sp_neg, -gamma)), sp_pos), 1.0 - alpha);
  const Matrix not_target = Matrix::Ones(target.rows(), target.cols()) - target;
  return ag::mean(ag::add(ag::mul_const(pos, target), ag::mul_const(neg, not_target)));
}

Var row_scalar_op(const Var& input, const RowScalarFn& fn) {
  const Matrix& x = input.value();
  const Eigen::Index rows = x.rows(), cols = x.cols();
  if (cols > 5) throw std::invalid_argument("row_scalar_op: at most 5 columns");
  Matrix out(rows, 1);
  Matrix jac = Matrix::Zero(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    std::array<Ad5, 5> args;
    for (int k = 0; k < 5; ++k) {
      const double value = k < cols ? x(r, k) : 0.0;
      args[k] = Ad5(value, Eigen::Matrix<double, 5, 1>::Unit(k));
    }
    const Ad5 y = fn(static_cast<int>(r), args);
    out(r, 0) = y.value();
    if (y.derivatives().size() == 5) {
      for (Eigen::Index k = 0; k < cols; ++k) jac(r, k) = y.derivatives()(k);
    }
  }
  const int id = input.id();
  return input.tape()->make(std::move(out), input.requires_grad(),
                            [id, jac = std::move(jac)](Tape& tp, const Matrix& g) {
                              tp.accumulate(id, jac.array().colwise() * g.col(0).array());
                            });
}

int centroid_pixel(const GridSpec& grid, const Box& box) {
  const int c = std::clamp(static_cast<int>(std::lround((box.x - grid.origin.x()) / grid.cell_size)), 0,
                           grid.cols - 1);
  const int r = std::clamp(static_cast<int>(std::lround((box.y - grid.origin.y()) / grid.cell_size)), 0,
                           grid.rows - 1);
  return r * grid.cols + c;
}

Var initial_pose_loss(const HeaderOutput& out, const std::vector<Box>& gts, const LossWeights& weights,
                      InitLossTerms* terms) {
  Tape& tape = *out.score_logits.tape();
  const GridSpec& g = out.grid;
  Matrix target = Matrix::Zero(g.rows * g.cols, 1);
  std::vector<int> pixels;
  std::vector<Box> owners;
  for (const Box& b : gts) {
    const int p = centroid_pixel(g, b);
    if (target(p, 0) > 0) continue;  // first ground truth claims the pixel
    target(p, 0) = 1.0;
    pixels.push_back(p);
    owners.push_back(b);
  }
  const Var focal = focal_loss_logits(out.score_logits, target, weights.focal_alpha, weights.focal_gamma);
  Var box = zero(tape);
  if (!pixels.empty()) {
    const Var raw = ag::gather_rows(out.box, pixels);
    const Var iou = row_scalar_op(ag::slice_cols(raw, 0, 4), [&](int r, const std::array<Ad5, 5>& x) {
      const int p = pixels[r];
      const Eigen::Vector2d center = g.origin + g.cell_size * Eigen::Vector2d(p % g.cols, p / g.cols);
      BoxBEV<Ad5> pred;
      pred.x = center.x() + x[0] * g.cell_size;
      pred.y = center.y() + x[1] * g.cell_size;
      pred.l = kLengthPrior * exp(x[2]);
      pred.w = kWidthPrior * exp(x[3]);
      return heading_aligned_iou(pred, owners[r]);
    });
    Matrix heading(static_cast<Eigen::Index>(owners.size()), 2);
    for (std::size_t i = 0; i < owners.size(); ++i)
      heading.row(static_cast<Eigen::Index>(i)) << std::sin(owners[i].theta), std::cos(owners[i].theta);
    const Var heading_l1 = ag::sum_cols(ag::abs(ag::add_const(ag::slice_cols(raw, 4, 2), -heading)));
    box = ag::mean(ag::add(ag::neg(ag::add_scalar(iou, -1.0)), heading_l1));
  }
  if (terms) *terms = InitLossTerms{focal, box};
  return ag::add(focal, box);
}

std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  const int rows = static_cast<int>(cost.rows()), cols = static_cast<int>(cost.cols());
  std::vector<int> result(rows, -1);
  if (rows == 0 || cols == 0) return result;
  const bool transposed = rows > cols;
  const Eigen::MatrixXd a = transposed ? Eigen::MatrixXd(cost.transpose()) : cost;
  const int n = static_cast<int>(a.rows()), m = static_cast<int>(a.cols());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // Shortest augmenting path with row/column potentials (1-indexed, column 0 is a sentinel).
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> owner(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    owner[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const int i0 = owner[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const int j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= m; ++j) {
    if (owner[j] == 0) continue;
    if (transposed) {
      result[j - 1] = owner[j] - 1;
    } else {
      result[owner[j] - 1] = j - 1;
    }
  }
  return result;
}

Eigen::Matrix<double, 1, 6> l1_box_params(const Box& b, double roi) {
  const double extent = 2.0 * roi;
  Eigen::Matrix<double, 1, 6> p;
  p << b.x / extent, b.y / extent, b.l / extent, b.w / extent, std::sin(b.theta), std::cos(b.theta);
  return p;
}

Eigen::MatrixXd match_cost(const std::vector<Box>& dets, const std::vector<Box>& gts, const LossWeights& w,
                           double roi) {
  Eigen::MatrixXd cost(dets.size(), gts.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto pd = l1_box_params(dets[i], roi);
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double l1 = (pd - l1_box_params(gts[j], roi)).cwiseAbs().sum();
      cost(i, j) = -dets[i].confidence + w.beta * l1 - w.gamma * giou_in_frame_of(dets[i], gts[j]);
    }
  }
  return cost;
}

MatchResult hungarian_match(const std::vector<Box>& dets, const std::vector<Box>& gts, const LossWeights& w,
                            double roi, const std::vector<bool>& ignore) {
  std::vector<int> active;
  std::vector<Box> kept;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (i < ignore.size() && ignore[i]) continue;
    active.push_back(static_cast<int>(i));
    kept.push_back(dets[i]);
  }
  const std::vector<int> assign = solve_assignment(match_cost(kept, gts, w, roi));
  MatchResult result;
  std::vector<bool> gt_used(gts.size(), false);
  for (std::size_t k = 0; k < active.size(); ++k) {
    if (assign[k] >= 0) {
      result.pairs.emplace_back(active[k], assign[k]);
      gt_used[assign[k]] = true;
    }
  }
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const bool matched = std::any_of(result.pairs.begin(), result.pairs.end(),
                                     [&](const auto& p) { return p.first == static_cast<int>(i); });
    if (!matched) result.unmatched_detections.push_back(static_cast<int>(i));
  }
  for (std::size_t j = 0; j < gts.size(); ++j)
    if (!gt_used[j]) result.unmatched_gt.push_back(static_cast<int>(j));
  return result;
}

DetectionTerms detection_loss(Tape& tape, const Var& det_state, const std::vector<Box>& gts,
                              const MatchResult& match, const std::vector<bool>& sentinel, double roi,
                              const LossWeights& w) {
  DetectionTerms terms{zero(tape), zero(tape), zero(tape)};
  std::vector<int> real;
  for (int i = 0; i < static_cast<int>(det_state.rows()); ++i)
    if (i >= static_cast<int>(sentinel.size()) || !sentinel[i]) real.push_back(i);
  if (!real.empty()) {
    Matrix target = Matrix::Zero(static_cast<Eigen::Index>(real.size()), 1);
    for (std::size_t k = 0; k < real.size(); ++k)
      for (const auto& [d, g] : match.pairs)
        if (d == real[k]) target(static_cast<Eigen::Index>(k), 0) = 1.0;
    terms.cls = focal_loss_logits(ag::slice_cols(ag::gather_rows(det_state, real), 5, 1), target, w.focal_alpha,
                                  w.focal_gamma);
  }
  if (match.pairs.empty()) return terms;

  std::vector<int> rows;
  std::vector<Box> targets;
  Matrix target_params(static_cast<Eigen::Index>(match.pairs.size()), 6);
  for (const auto& [d, g] : match.pairs) {
    target_params.row(static_cast<Eigen::Index>(rows.size())) = l1_box_params(gts[g], roi);
    rows.push_back(d);
    targets.push_back(gts[g]);
  }
  const Var s = ag::gather_rows(det_state, rows);
  const double extent = 2.0 * roi;
  const Var theta = ag::slice_cols(s, 4, 1);
  const Var params = ag::concat_cols(std::vector<Var>{
      ag::scale(ag::slice_cols(s, 0, 2), 1.0 / extent), ag::scale(ag::exp(ag::slice_cols(s, 2, 2)), 1.0 / extent),
      ag::sin(theta), ag::cos(theta)});
  terms.l1 = ag::scale(ag::sum(ag::abs(ag::add_const(params, -target_params))), 1.0 / rows.size());
  const Var g = row_scalar_op(ag::slice_cols(s, 0, 5), [&](int r, const std::array<Ad5, 5>& x) {
    BoxBEV<Ad5> pred;
    pred.x = x[0];
    pred.y = x[1];
    pred.l = exp(x[2]);
    pred.w = exp(x[3]);
    pred.theta = x[4];
    return giou_in_frame_of(pred, targets[r]);
  });
  terms.giou = ag::mean(ag::neg(ag::add_scalar(g, -1.0)));
  return terms;
}

int winner_mode(const Matrix& waypoints, int object, int modes, int horizon,
                const std::vector<Eigen::Vector3d>& trajectory) {
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int f = 0; f < modes; ++f) {
    double dist = 0.0;
    for (int t = 1; t < horizon; ++t) {
      const auto w = waypoints.row((object * modes + f) * (horizon - 1) + t - 1);
      dist += std::abs(w(0) - trajectory[t].x()) + std::abs(w(1) - trajectory[t].y());
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = f;
    }
  }
  return best;
}

ForecastTerms forecasting_loss(Tape& tape, const RefinerOutput& out, int modes, int horizon, const GroundTruth& gt,
                               const MatchResult& match) {
  ForecastTerms terms{zero(tape), zero(tape), 0};
  std::vector<int> wp_rows, prob_rows;
  std::vector<Eigen::RowVector2d> targets;
  for (const auto& [d, g] : match.pairs) {
    if (rotated_iou(out.detections[d], gt.boxes[g]) <= kForecastIouGate) continue;
    const int f = winner_mode(out.waypoints.value(), d, modes, horizon, gt.trajectories[g]);
    for (int t = 1; t < horizon; ++t) {
      wp_rows.push_back((d * modes + f) * (horizon - 1) + t - 1);
      targets.emplace_back(gt.trajectories[g][t].x(), gt.trajectories[g][t].y());
    }
    prob_rows.push_back(d * modes + f);
  }
  terms.supervised = static_cast<int>(prob_rows.size());
  if (prob_rows.empty()) return terms;
  Matrix target(static_cast<Eigen::Index>(targets.size()), 2);
  for (std::size_t i = 0; i < targets.size(); ++i) target.row(static_cast<Eigen::Index>(i)) = targets[i];
  const Var mu = ag::gather_rows(out.waypoints, wp_rows);
  const Var sigma = ag::gather_rows(out.scales, wp_rows);
  // Per waypoint: sum over both axes of log(2 sigma) + |x - mu| / sigma.
  const Var per_axis = ag::add(ag::add_scalar(ag::log(sigma), std::log(2.0)),
                               ag::mul(ag::abs(ag::add_const(ag::neg(mu), target)), ag::exp(ag::neg(ag::log(sigma)))));
  terms.nll = ag::scale(ag::sum(per_axis), 1.0 / static_cast<double>(wp_rows.size()));
  const Var log_probs = ag::reshape(out.mode_log_probs, out.mode_log_probs.rows() * modes, 1);
  terms.cls = ag::neg(ag::mean(ag::gather_rows(log_probs, prob_rows)));
  return terms;
}

LossResult total_loss(Tape& tape, const HeaderOutput& header, const std::vector<RefinerOutput>& outputs,
                      const std::vector<bool>& sentinel, const GroundTruth& gt, int modes, int horizon, double roi,
                      const LossWeights& w) {
  LossResult result;
  result.report.weights = w;
  Var total = initial_pose_loss(header, gt.boxes, w);
  result.report.l_init = total.value()(0, 0);
  for (std::size_t b = 1; b < outputs.size(); ++b) {
    const RefinerOutput& out = outputs[b];
    const MatchResult match = hungarian_match(out.detections, gt.boxes, w, roi, sentinel);
    const DetectionTerms det = detection_loss(tape, out.det_state, gt.boxes, match, sentinel, roi, w);
    const ForecastTerms fc = forecasting_loss(tape, out, modes, horizon, gt, match);
    const Var l_det = ag::add(det.cls, ag::add(ag::scale(det.l1, w.beta), ag::scale(det.giou, w.gamma)));
    const Var l_for = ag::add(fc.nll, fc.cls);
    total = ag::add(total, ag::add(l_det, ag::scale(l_for, w.alpha)));
    result.report.blocks.push_back(BlockLoss{det.cls.value()(0, 0), det.l1.value()(0, 0),
                                             det.giou.value()(0, 0), fc.nll.value()(0, 0),
                                             fc.cls.value()(0, 0)});
  }
  result.total = total;
  result.report.total = total.value()(0, 0);
  return result;
}

std::string loss_csv_header(int blocks) {
  std::ostringstream os;
  os << "step,l_init";
  for (int b = 1; b <= blocks; ++b)
    os << ",l_det_cls_" << b << ",l_det_l1_" << b << ",l_det_giou_" << b << ",l_for_nll_" << b << ",l_for_cls_"
       << b;
  os << ",total";
  return os.str();
}

std::string loss_csv_row(long step, const LossReport& r) {
  std::ostringstream os;
  os << step << ',' << format_double(r.l_init);
  for (const auto& b : r.blocks)
    os << ',' << format_double(b.det_cls) << ',' << format_double(b.det_l1) << ',' << format_double(b.det_giou)
       << ',' << format_double(b.for_nll) << ',' << format_double(b.for_cls);
  os << ',' << format_double(r.total);
  return os.str();
}

}  // namespace detra
