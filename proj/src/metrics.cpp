#include "detra/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace detra {

namespace {

struct Ranked {
  double score;
  bool tp;
};

/// Detections pooled over frames in descending confidence, ties by (frame, index).
struct Pooled {
  double confidence;
  int frame;
  int det;
};

std::vector<Pooled> pool(const std::vector<EvalFrame>& frames) {
  std::vector<Pooled> items;
  for (std::size_t f = 0; f < frames.size(); ++f)
    for (std::size_t d = 0; d < frames[f].detections.size(); ++d)
      items.push_back({frames[f].detections[d].box.confidence, static_cast<int>(f), static_cast<int>(d)});
  std::stable_sort(items.begin(), items.end(),
                   [](const Pooled& a, const Pooled& b) { return a.confidence > b.confidence; });
  return items;
}

/// TP flag per pooled item under per-frame greedy matching.
std::vector<bool> pooled_tp(const std::vector<EvalFrame>& frames, const std::vector<Pooled>& items, double iou) {
  std::vector<std::vector<int>> matches;
  for (const auto& fr : frames) matches.push_back(greedy_match(fr.detections, fr.gt.boxes, iou));
  std::vector<bool> tp;
  for (const auto& it : items) tp.push_back(matches[it.frame][it.det] >= 0);
  return tp;
}

int total_gt(const std::vector<EvalFrame>& frames) {
  int n = 0;
  for (const auto& f : frames) n += static_cast<int>(f.gt.boxes.size());
  return n;
}

/// All-point AP: sum over true positives of precision times the recall step.
double average_precision(std::vector<Ranked> ranked, int positives) {
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  double ap = 0.0;
  int tp = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (!ranked[i].tp) continue;
    ++tp;
    ap += static_cast<double>(tp) / static_cast<double>(i + 1) / positives;
  }
  return ap;
}

std::optional<double> mean_of(double sum, int count) {
  if (count == 0) return std::nullopt;
  return sum / count;
}

std::optional<double> macro(const std::optional<double>& a, const std::optional<double>& b) {
  if (a && b) return 0.5 * (*a + *b);
  if (a) return a;
  return b;
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string csv(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

Eigen::Vector2d pose_xy(const FrameDetection& d, int mode, int t, int horizon) {
  return d.poses.row(mode * horizon + t).head<2>().transpose();
}

}  // namespace

int EvalFrame::modes() const {
  return detections.empty() ? 0 : static_cast<int>(detections.front().mode_probs.size());
}

int EvalFrame::horizon() const {
  if (!gt.trajectories.empty()) return static_cast<int>(gt.trajectories.front().size());
  if (detections.empty() || modes() == 0) return 0;
  return static_cast<int>(detections.front().poses.rows()) / modes();
}

std::vector<int> greedy_match(const std::vector<FrameDetection>& dets, const std::vector<Box>& gts,
                              double iou_threshold, double min_confidence) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[a].box.confidence > dets[b].box.confidence; });
  std::vector<int> result(dets.size(), -1);
  std::vector<bool> used(gts.size(), false);
  for (int d : order) {
    if (dets[d].box.confidence < min_confidence) continue;
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double iou = rotated_iou(dets[d].box, gts[g]);
      if (iou >= best_iou && (best < 0 || iou > best_iou)) {
        best = static_cast<int>(g);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      used[best] = true;
      result[d] = best;
    }
  }
  return result;
}

std::optional<double> detection_ap(const std::vector<EvalFrame>& frames, double iou_threshold) {
  const int positives = total_gt(frames);
  if (positives == 0) return std::nullopt;
  const auto items = pool(frames);
  const auto tp = pooled_tp(frames, items, iou_threshold);
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < items.size(); ++i) ranked.push_back({items[i].confidence, tp[i]});
  return average_precision(ranked, positives);
}

std::vector<PrPoint> precision_recall_curve(const std::vector<EvalFrame>& frames, double iou_threshold) {
  std::vector<PrPoint> curve;
  const int positives = total_gt(frames);
  if (positives == 0) return curve;
  const auto items = pool(frames);
  const auto tp = pooled_tp(frames, items, iou_threshold);
  int hits = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    const bool group_end = i + 1 == items.size() || items[i + 1].confidence != items[i].confidence;
    if (!group_end) continue;
    curve.push_back({items[i].confidence, static_cast<double>(hits) / positives,
                     static_cast<double>(hits) / static_cast<double>(i + 1)});
  }
  return curve;
}

std::optional<double> recall_point_threshold(const std::vector<EvalFrame>& frames, double target_recall,
                                             double iou) {
  const int positives = total_gt(frames);
  if (positives == 0) return std::nullopt;
  const auto items = pool(frames);
  const auto tp = pooled_tp(frames, items, iou);
  int hits = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    const bool group_end = i + 1 == items.size() || items[i + 1].confidence != items[i].confidence;
    if (group_end && hits >= target_recall * positives - 1e-12) return items[i].confidence;
  }
  return std::nullopt;
}

ForecastMetrics forecasting_metrics(const std::vector<EvalFrame>& frames, int k, double threshold) {
  struct Acc {
    double mr = 0, ade = 0, fde = 0, bfde = 0;
    int count = 0;
  } acc[2];
  for (const auto& frame : frames) {
    const int horizon = frame.horizon();
    const auto match = greedy_match(frame.detections, frame.gt.boxes, 0.5, threshold);
    for (std::size_t d = 0; d < frame.detections.size(); ++d) {
      const int g = match[d];
      if (g < 0) continue;
      const FrameDetection& det = frame.detections[d];
      const auto& traj = frame.gt.trajectories[g];
      const int modes = static_cast<int>(det.mode_probs.size());
      std::vector<int> order(modes);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return det.mode_probs(a) > det.mode_probs(b); });
      double best_ade = std::numeric_limits<double>::infinity();
      double best_fde = best_ade;
      int best_mode = order[0];
      for (int i = 0; i < std::min(k, modes); ++i) {
        const int f = order[i];
        double ade = 0.0;
        for (int t = 1; t < horizon; ++t) ade += (pose_xy(det, f, t, horizon) - traj[t].head<2>()).norm();
        ade /= horizon - 1;
        const double fde = (pose_xy(det, f, horizon - 1, horizon) - traj[horizon - 1].head<2>()).norm();
        best_ade = std::min(best_ade, ade);
        if (fde < best_fde) {
          best_fde = fde;
          best_mode = f;
        }
      }
      Acc& a = acc[frame.gt.is_static[g] ? 0 : 1];
      a.ade += best_ade;
      a.fde += best_fde;
      a.mr += best_fde > kMissRadius ? 1.0 : 0.0;
      const double miss_prob = 1.0 - det.mode_probs(best_mode);
      a.bfde += best_fde + miss_prob * miss_prob;
      ++a.count;
    }
  }
  ForecastMetrics out;
  auto bucket = [](const Acc& a) {
    return ForecastErrors{mean_of(a.mr, a.count), mean_of(a.ade, a.count), mean_of(a.fde, a.count),
                          mean_of(a.bfde, a.count), a.count};
  };
  out.static_bucket = bucket(acc[0]);
  out.dynamic_bucket = bucket(acc[1]);
  out.macro.mr = macro(out.static_bucket.mr, out.dynamic_bucket.mr);
  out.macro.ade = macro(out.static_bucket.ade, out.dynamic_bucket.ade);
  out.macro.fde = macro(out.static_bucket.fde, out.dynamic_bucket.fde);
  out.macro.bfde = macro(out.static_bucket.bfde, out.dynamic_bucket.bfde);
  out.macro.count = acc[0].count + acc[1].count;
  return out;
}

OccupancyCells rasterize_occupancy(const std::vector<EvalFrame>& frames, const OccupancySpec& spec) {
  const int side = static_cast<int>(std::lround(2.0 * spec.roi / spec.cell_size));
  const double origin = -spec.roi + 0.5 * spec.cell_size;
  OccupancyCells cells;
  // Visits the cells whose centers lie inside the box.
  auto for_cells = [&](const Box& box, auto&& visit) {
    const double r = circumradius(box);
    const int c0 = std::max(0, static_cast<int>(std::floor((box.x - r - origin) / spec.cell_size)));
    const int c1 = std::min(side - 1, static_cast<int>(std::ceil((box.x + r - origin) / spec.cell_size)));
    const int r0 = std::max(0, static_cast<int>(std::floor((box.y - r - origin) / spec.cell_size)));
    const int r1 = std::min(side - 1, static_cast<int>(std::ceil((box.y + r - origin) / spec.cell_size)));
    for (int row = r0; row <= r1; ++row)
      for (int col = c0; col <= c1; ++col)
        if (box_contains(box, Eigen::Vector2d(origin + col * spec.cell_size, origin + row * spec.cell_size)))
          visit(row * side + col);
  };
  for (const auto& frame : frames) {
    const int horizon = frame.horizon();
    for (int t = 0; t < horizon; ++t) {
      std::vector<bool> occupied(static_cast<std::size_t>(side) * side, false);
      std::vector<double> empty_prob(static_cast<std::size_t>(side) * side, 1.0);
      for (std::size_t g = 0; g < frame.gt.boxes.size(); ++g) {
        Box b = frame.gt.boxes[g];
        const auto& p = frame.gt.trajectories[g][t];
        b.x = p.x();
        b.y = p.y();
        b.theta = p.z();
        for_cells(b, [&](int i) { occupied[i] = true; });
      }
      for (const auto& det : frame.detections) {
        for (int f = 0; f < static_cast<int>(det.mode_probs.size()); ++f) {
          Box b = det.box;
          const auto row = det.poses.row(f * horizon + t);
          b.x = row(0);
          b.y = row(1);
          b.theta = row(2);
          const double p = det.box.confidence * det.mode_probs(f);
          for_cells(b, [&](int i) { empty_prob[i] *= 1.0 - p; });
        }
      }
      for (std::size_t i = 0; i < occupied.size(); ++i) {
        cells.occupied.push_back(occupied[i]);
        cells.predicted.push_back(1.0 - empty_prob[i]);
      }
    }
  }
  return cells;
}

std::optional<double> occupancy_ap(const OccupancyCells& cells) {
  const auto positives = std::count(cells.occupied.begin(), cells.occupied.end(), true);
  if (positives == 0) return std::nullopt;
  double ap = 0.0, prev_recall = 0.0;
  for (int k = kOccThresholds - 1; k >= 0; --k) {
    const double tau = static_cast<double>(k) / (kOccThresholds - 1);
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < cells.predicted.size(); ++i) {
      if (cells.predicted[i] < tau) continue;
      if (cells.occupied[i]) {
        ++tp;
      } else {
        ++fp;
      }
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 1.0;
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

std::optional<double> occ_ap(const std::vector<EvalFrame>& frames, const OccupancySpec& spec) {
  return occupancy_ap(rasterize_occupancy(frames, spec));
}

std::vector<int> traj_ap_horizons(int horizon) {
  const int last = horizon - 1;
  const int early = std::max(1, static_cast<int>(std::ceil(0.6 * last - 1e-9)));
  if (early == last) return {last};
  return {early, last};
}

double max_f1_threshold(const std::vector<EvalFrame>& frames, double iou) {
  const int positives = total_gt(frames);
  const auto items = pool(frames);
  if (items.empty()) return std::numeric_limits<double>::infinity();
  const auto tp = pooled_tp(frames, items, iou);
  double best_f1 = -1.0, best = items.front().confidence;
  int hits = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    const bool group_end = i + 1 == items.size() || items[i + 1].confidence != items[i].confidence;
    if (!group_end) continue;
    const double f1 = 2.0 * hits / static_cast<double>(static_cast<int>(i + 1) + positives);
    if (f1 > best_f1) {
      best_f1 = f1;
      best = items[i].confidence;
    }
  }
  return best;
}

std::optional<double> traj_ap_bucket(const std::vector<EvalFrame>& frames, int step, double iou, bool static_slice) {
  const double threshold = max_f1_threshold(frames, iou);
  int positives = 0;
  std::vector<Ranked> ranked;
  for (const auto& frame : frames) {
    const int horizon = frame.horizon();
    auto ignored = [&](int g) { return g < static_cast<int>(frame.ignore.size()) && frame.ignore[g]; };
    for (std::size_t g = 0; g < frame.gt.boxes.size(); ++g)
      if (!ignored(static_cast<int>(g)) && frame.gt.is_static[g] == static_slice) ++positives;
    const auto match = greedy_match(frame.detections, frame.gt.boxes, iou, threshold);
    for (std::size_t d = 0; d < frame.detections.size(); ++d) {
      const FrameDetection& det = frame.detections[d];
      if (det.box.confidence < threshold) continue;
      const int g = match[d];
      if (g >= 0 && (ignored(g) || frame.gt.is_static[g] != static_slice)) continue;
      Eigen::Index best_mode = 0;
      const double p_best = det.mode_probs.maxCoeff(&best_mode);
      bool hit = false;
      if (g >= 0) {
        const double err =
            (pose_xy(det, static_cast<int>(best_mode), step, horizon) - frame.gt.trajectories[g][step].head<2>())
                .norm();
        hit = err <= kMissRadius;
      }
      ranked.push_back({det.box.confidence * p_best, hit});
    }
  }
  if (positives == 0) return std::nullopt;
  return average_precision(ranked, positives);
}

std::optional<double> traj_ap(const std::vector<EvalFrame>& frames) {
  int horizon = 0;
  for (const auto& f : frames) horizon = std::max(horizon, f.horizon());
  if (horizon < 2) return std::nullopt;
  double sum = 0.0;
  int count = 0;
  for (int step : traj_ap_horizons(horizon))
    for (double iou : {0.5, 0.7})
      for (bool slice : {true, false}) {
        const auto v = traj_ap_bucket(frames, step, iou, slice);
        if (!v) continue;
        sum += *v;
        ++count;
      }
  return mean_of(sum, count);
}

MetricsReport compute_metrics(const std::vector<EvalFrame>& frames, int k, const OccupancySpec& occ) {
  MetricsReport r;
  r.k = k;
  r.ap_03 = detection_ap(frames, 0.3);
  r.ap_05 = detection_ap(frames, 0.5);
  r.ap_07 = detection_ap(frames, 0.7);
  r.recall_threshold = recall_point_threshold(frames, 0.8, 0.5);
  if (r.recall_threshold) {
    r.k1 = forecasting_metrics(frames, 1, *r.recall_threshold);
    r.kk = forecasting_metrics(frames, k, *r.recall_threshold);
  }
  r.occ_ap = occ_ap(frames, occ);
  r.traj_ap = traj_ap(frames);
  return r;
}

json metrics_to_json(const MetricsReport& r) {
  const std::string kk = "k" + std::to_string(r.k);
  json j;
  j["ap_iou"] = {{"0.3", opt(r.ap_03)}, {"0.5", opt(r.ap_05)}, {"0.7", opt(r.ap_07)}};
  j["k"] = r.k;
  j["recall_threshold"] = opt(r.recall_threshold);
  if (!r.recall_threshold) j["forecast_reason"] = "recall point unreachable";
  auto errors = [&](const ForecastErrors& e1, const ForecastErrors& ek) {
    json b;
    b["count"] = ek.count;
    b["mr"] = {{"k1", opt(e1.mr)}, {kk, opt(ek.mr)}};
    b["ade"] = {{"k1", opt(e1.ade)}, {kk, opt(ek.ade)}};
    b["fde"] = {{"k1", opt(e1.fde)}, {kk, opt(ek.fde)}};
    b["bfde"] = {{kk, opt(ek.bfde)}};
    return b;
  };
  const json overall = errors(r.k1.macro, r.kk.macro);
  for (const char* key : {"mr", "ade", "fde", "bfde"}) j[key] = overall[key];
  j["occ_ap"] = opt(r.occ_ap);
  j["traj_ap"] = opt(r.traj_ap);
  j["buckets"] = {{"static", errors(r.k1.static_bucket, r.kk.static_bucket)},
                  {"dynamic", errors(r.k1.dynamic_bucket, r.kk.dynamic_bucket)}};
  j["config_digest"] = r.config_digest;
  j["seed"] = r.seed;
  return j;
}

std::string metrics_csv_header() {
  return "config_digest,seed,k,ap_0.3,ap_0.5,ap_0.7,recall_threshold,mr_k1,ade_k1,fde_k1,mr_kK,ade_kK,fde_kK,"
         "bfde_kK,occ_ap,traj_ap";
}

std::string metrics_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os << r.config_digest << ',' << r.seed << ',' << r.k << ',' << csv(r.ap_03) << ',' << csv(r.ap_05) << ','
     << csv(r.ap_07) << ',' << csv(r.recall_threshold) << ',' << csv(r.k1.macro.mr) << ',' << csv(r.k1.macro.ade)
     << ',' << csv(r.k1.macro.fde) << ',' << csv(r.kk.macro.mr) << ',' << csv(r.kk.macro.ade) << ','
     << csv(r.kk.macro.fde) << ',' << csv(r.kk.macro.bfde) << ',' << csv(r.occ_ap) << ',' << csv(r.traj_ap);
  return os.str();
}

}  // namespace detra
