#include "detra/refiner.hpp"

#include "detra/errors.hpp"
#include "detra/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

namespace detra {

namespace {

template <typename C, typename F>
void visit_refiner_config(C& c, F&& f) {
  f("B", c.blocks);
  f("F", c.modes);
  f("T", c.horizon);
  f("d", c.width);
  f("N", c.max_objects);
  f("k", c.knn);
  f("n_heads", c.heads);
  f("ell", c.ell);
  f("attention_order", c.attention_order);
  f("map_time_subset", c.map_time_subset);
  f("query_modes", c.query_modes);
  f("query_horizon", c.query_horizon);
  f("pose_init", c.pose_init);
  f("lidar_attention", c.lidar_attention);
  f("map_attention", c.map_attention);
  f("refine_poses", c.refine_poses);
  f("stop_gradient", c.stop_gradient);
  f("offset_scale", c.offset_scale);
  f("waypoint_scale", c.waypoint_scale);
}

std::vector<Var> split_cols(const Var& v) {
  std::vector<Var> cols;
  for (Eigen::Index c = 0; c < v.cols(); ++c) cols.push_back(ag::slice_cols(v, c, 1));
  return cols;
}

/// Rotates row vectors (x, y) by per-row angles given as cos/sin columns.
Var rotate(const Var& xy, const Var& c, const Var& s) {
  const Var x = ag::slice_cols(xy, 0, 1), y = ag::slice_cols(xy, 1, 1);
  return ag::concat_cols(
      std::vector<Var>{ag::sub(ag::mul(c, x), ag::mul(s, y)), ag::add(ag::mul(s, x), ag::mul(c, y))});
}

std::vector<int> repeat_each(const std::vector<int>& idx, int times) {
  std::vector<int> out;
  out.reserve(idx.size() * times);
  for (int i : idx)
    for (int k = 0; k < times; ++k) out.push_back(i);
  return out;
}

double logit(double p) {
  const double c = std::clamp(p, 1e-4, 1.0 - 1e-4);
  return std::log(c / (1.0 - c));
}

}  // namespace

const char* to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::lidar: return "lidar";
    case AttentionKind::map: return "map";
    case AttentionKind::time: return "time";
    case AttentionKind::mode: return "mode";
    case AttentionKind::object: return "object";
  }
  return "lidar";
}

AttentionKind attention_kind_from_string(const std::string& s) {
  for (auto k : {AttentionKind::lidar, AttentionKind::map, AttentionKind::time, AttentionKind::mode,
                 AttentionKind::object}) {
    if (s == to_string(k)) return k;
  }
  throw ValidationError("unknown attention layer '" + s + "'");
}

std::vector<int> RefinerConfig::time_subset() const {
  std::vector<int> subset = map_time_subset;
  if (subset.empty()) subset = {0, (horizon - 1) / 2, horizon - 1};
  std::set<int> unique(subset.begin(), subset.end());
  return {unique.begin(), unique.end()};
}

std::vector<AttentionKind> RefinerConfig::order() const {
  std::vector<AttentionKind> out;
  for (const auto& s : attention_order) out.push_back(attention_kind_from_string(s));
  return out;
}

void RefinerConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError("model config: " + what);
  };
  require(blocks >= 0, "B must be nonnegative");
  require(modes >= 1 && horizon >= 2, "F >= 1 and T >= 2 required");
  require(width >= 1 && heads >= 1 && width % heads == 0, "d must be divisible by n_heads");
  require(max_objects >= 1, "N must be positive");
  require(knn >= 1, "k must be positive");
  require(ell >= 1, "ell must be positive");
  require(query_modes == 0 || query_modes == 1 || query_modes == modes, "query_modes must be 1 or F");
  require(query_horizon == 0 || query_horizon == 1 || query_horizon == horizon,
          "query_horizon must be 1 or T");
  for (int t : map_time_subset) require(t >= 0 && t < horizon, "map_time_subset outside [0, T)");
  order();
  require(pose_init == "detector" || pose_init == "grid", "pose_init must be detector or grid");
  require(lidar_attention == "deformable" || lidar_attention == "global" || lidar_attention == "none",
          "lidar_attention must be deformable, global or none");
  require(map_attention == "knn" || map_attention == "global" || map_attention == "none",
          "map_attention must be knn, global or none");
  require(offset_scale > 0 && waypoint_scale > 0, "scales must be positive");
}

void to_json(json& j, const RefinerConfig& c) {
  write_fields(j, c, [](auto& o, auto&& f) { visit_refiner_config(o, f); });
}

void from_json(const json& j, RefinerConfig& c) {
  read_fields(j, c, [](auto& o, auto&& f) { visit_refiner_config(o, f); }, "model");
}

Box state_to_box(const Eigen::Ref<const Eigen::RowVectorXd>& s) {
  return Box{s(0), s(1), std::exp(s(2)), std::exp(s(3)), normalize_angle(s(4)),
             1.0 / (1.0 + std::exp(-s(5)))};
}

Eigen::RowVectorXd box_to_state(const Box& b) {
  Eigen::RowVectorXd s(kDetState);
  s << b.x, b.y, std::log(b.l), std::log(b.w), b.theta, logit(b.confidence);
  return s;
}

Refiner::Refiner(ParamStore& store, const std::string& name, const RefinerConfig& config,
                 std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  order_ = config_.order();
  const int d = config_.width;
  const int fq = config_.q_modes(), tq = config_.q_horizon();
  mode_params_ = &store.uniform(name + ".mode_params", fq, d, 1.0, rng);
  time_params_ = &store.uniform(name + ".time_params", tq, d, 1.0, rng);
  const int group = config_.modes / fq;
  const int steps_per_query = tq == config_.horizon ? 1 : config_.horizon - 1;

  for (int b = 0; b < config_.blocks; ++b) {
    const std::string bname = name + ".block" + std::to_string(b + 1);
    Block block;
    for (std::size_t i = 0; i < order_.size(); ++i) {
      const AttentionKind kind = order_[i];
      const std::string lname = bname + "." + std::to_string(i) + "_" + to_string(kind);
      Layer layer;
      const bool deformable = kind == AttentionKind::lidar && config_.lidar_attention == "deformable";
      if (deformable) {
        const int samples = kLevels * config_.ell;
        layer.sampling = Linear::create(store, lname + ".sampling", d, samples * 3, rng, 0.1);
        Matrix& bias = layer.sampling.bias->value;
        for (int l = 0; l < kLevels; ++l) {
          for (int j = 0; j < config_.ell; ++j) {
            const double angle = 2.0 * std::numbers::pi * j / config_.ell;
            const double radius = 0.5 * (l + 1);
            const int col = (l * config_.ell + j) * 2;
            bias(0, col) = radius * std::cos(angle);
            bias(0, col + 1) = radius * std::sin(angle);
          }
        }
      } else {
        layer.q = Linear::create(store, lname + ".q", d, d, rng);
        layer.k = Linear::create(store, lname + ".k", d, d, rng);
        layer.v = Linear::create(store, lname + ".v", d, d, rng);
        if (kind == AttentionKind::lidar || kind == AttentionKind::map) {
          layer.pos_k = Linear::create(store, lname + ".pos_k", 2, d, rng);
          layer.pos_v = Linear::create(store, lname + ".pos_v", 2, d, rng);
        }
      }
      layer.out = Linear::create(store, lname + ".out", d, d, rng);
      layer.ffn = Mlp::create(store, lname + ".ffn", d, 2 * d, d, rng);
      layer.norm_att = LayerNorm::create(store, lname + ".norm_att", d);
      layer.norm_ffn = LayerNorm::create(store, lname + ".norm_ffn", d);
      block.layers.push_back(layer);
    }
    block.detection = Mlp::create(store, bname + ".detection", d, d, kDetState, rng, 0.1);
    block.gru_forward = GruCell::create(store, bname + ".gru_fwd", d, d, rng);
    block.gru_backward = GruCell::create(store, bname + ".gru_bwd", d, d, rng);
    block.waypoint = Mlp::create(store, bname + ".waypoint", 2 * d, d, 4 * group * steps_per_query, rng, 0.1);
    block.mode = Mlp::create(store, bname + ".mode", 2 * d, d, group, rng, 0.1);
    blocks_.push_back(block);
  }
}

Var Refiner::init_queries(Tape& tape, int objects) const {
  const int fq = config_.q_modes(), tq = config_.q_horizon();
  std::vector<int> fi, ti;
  for (int n = 0; n < objects; ++n)
    for (int f = 0; f < fq; ++f)
      for (int t = 0; t < tq; ++t) {
        fi.push_back(f);
        ti.push_back(t);
      }
  return ag::add(ag::gather_rows(tape.param(*mode_params_), fi),
                 ag::gather_rows(tape.param(*time_params_), ti));
}

std::vector<Box> Refiner::grid_poses(int objects, double roi) {
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(objects))));
  std::vector<Box> boxes;
  const double step = 2.0 * roi / side;
  for (int i = 0; i < objects; ++i) {
    const int r = i / side, c = i % side;
    boxes.push_back(Box{-roi + step * (c + 0.5), -roi + step * (r + 0.5), kLengthPrior, kWidthPrior,
                        0.0, 0.5});
  }
  return boxes;
}

Matrix Refiner::init_poses(const std::vector<Box>& dets, int objects, int modes, int horizon,
                           double roi, std::vector<Box>* padded, std::vector<bool>* sentinel) {
  Matrix poses(objects * modes * horizon, 3);
  if (padded) padded->clear();
  if (sentinel) sentinel->assign(objects, false);
  for (int n = 0; n < objects; ++n) {
    Box b;
    if (n < static_cast<int>(dets.size())) {
      b = dets[n];
    } else {
      b = Box{-roi, -roi, kLengthPrior, kWidthPrior, 0.0, 0.0};
      if (sentinel) (*sentinel)[n] = true;
    }
    if (padded) padded->push_back(b);
    for (int f = 0; f < modes; ++f)
      for (int t = 0; t < horizon; ++t) poses.row(volume_row(n, f, t, modes, horizon)) << b.x, b.y, b.theta;
  }
  return poses;
}

int Refiner::pose_row_for_query(int n, int fq, int tq) const {
  const int f = config_.q_modes() == config_.modes ? fq : 0;
  const int t = config_.q_horizon() == config_.horizon ? tq : 0;
  return volume_row(n, f, t, config_.modes, config_.horizon);
}

Var Refiner::finish_layer(Tape& tape, const Layer& layer, const Var& queries, const Var& attended) const {
  const Var att = layer.norm_att(tape, ag::add(queries, layer.out(tape, attended)));
  return layer.norm_ffn(tape, ag::add(att, layer.ffn(tape, att)));
}

Var Refiner::attention_layer(Tape& tape, AttentionKind kind, int block, const Var& queries,
                             const Var& poses, const SceneEncoding& scene, int objects,
                             ag::AttentionTrace* trace) const {
  // Layer index: first occurrence of this kind in the configured order.
  const auto it = std::find(order_.begin(), order_.end(), kind);
  if (it == order_.end()) throw std::logic_error("attention kind not in the configured order");
  const Layer& layer = blocks_.at(block - 1).layers[static_cast<std::size_t>(it - order_.begin())];
  switch (kind) {
    case AttentionKind::lidar:
      if (config_.lidar_attention == "none") return queries;
      if (config_.lidar_attention == "global")
        return lidar_global(tape, layer, queries, poses, scene, objects, trace);
      return lidar_deformable(tape, layer, queries, poses, scene, objects);
    case AttentionKind::map:
      if (config_.map_attention == "none") return queries;
      return map_layer(tape, layer, queries, poses, scene, objects, trace);
    default:
      return self_layer(tape, layer, kind, queries, objects, trace);
  }
}

Var Refiner::lidar_deformable(Tape& tape, const Layer& layer, const Var& queries, const Var& poses,
                              const SceneEncoding& scene, int objects) const {
  const int fq = config_.q_modes(), tq = config_.q_horizon();
  const int ell = config_.ell, d = config_.width;
  std::vector<int> rows, pose_rows;
  for (int n = 0; n < objects; ++n)
    for (int f = 0; f < fq; ++f) {
      rows.push_back((n * fq + f) * tq);
      pose_rows.push_back(pose_row_for_query(n, f, 0));
    }
  const Var q = ag::gather_rows(queries, rows);
  const Var raw = layer.sampling(tape, q);
  // Reference poses repeated once per sampling point.
  const Var ref = ag::gather_rows(poses, repeat_each(pose_rows, ell));
  const Var ref_xy = ag::slice_cols(ref, 0, 2);
  const Var theta = ag::slice_cols(ref, 2, 1);
  const Var c = ag::cos(theta), s = ag::sin(theta);
  const Var logits = ag::slice_cols(raw, kLevels * ell * 2, kLevels * ell);
  const Var weights = ag::softmax_rows(logits);
  Var acc;
  for (int l = 0; l < kLevels; ++l) {
    const FeatureGrid& grid = scene.lidar[l];
    const Var local = ag::reshape(ag::slice_cols(raw, l * ell * 2, ell * 2),
                                  static_cast<Eigen::Index>(rows.size()) * ell, 2);
    const Var points = ag::add(ref_xy, rotate(ag::scale(local, config_.offset_scale), c, s));
    const Var sampled = ag::reshape(
        ag::bilinear_sample(grid.values, grid.rows, grid.cols, grid.origin, grid.cell_size, points),
        static_cast<Eigen::Index>(rows.size()), ell * d);
    for (int j = 0; j < ell; ++j) {
      const Var term = ag::mul_col(ag::slice_cols(sampled, j * d, d), ag::slice_cols(weights, l * ell + j, 1));
      acc = acc.valid() ? ag::add(acc, term) : term;
    }
  }
  return ag::set_rows(queries, rows, finish_layer(tape, layer, q, acc));
}

Var Refiner::lidar_global(Tape& tape, const Layer& layer, const Var& queries, const Var& poses,
                          const SceneEncoding& scene, int objects, ag::AttentionTrace* trace) const {
  const int fq = config_.q_modes(), tq = config_.q_horizon();
  const FeatureGrid& grid = scene.lidar[kLevels - 1];
  const int tokens = grid.rows * grid.cols;
  std::vector<int> rows;
  std::vector<int> token_idx;
  std::vector<std::vector<int>> key_sets;
  Matrix rel(0, 2);
  const Matrix& pv = poses.value();
  std::vector<Eigen::RowVector2d> rel_rows;
  for (int n = 0; n < objects; ++n)
    for (int f = 0; f < fq; ++f) {
      rows.push_back((n * fq + f) * tq);
      const auto p = pv.row(pose_row_for_query(n, f, 0));
      const double c = std::cos(p(2)), s = std::sin(p(2));
      std::vector<int> set;
      for (int j = 0; j < tokens; ++j) {
        const Eigen::Vector2d center = grid.cell_center(j / grid.cols, j % grid.cols);
        const double dx = center.x() - p(0), dy = center.y() - p(1);
        set.push_back(static_cast<int>(token_idx.size()));
        token_idx.push_back(j);
        rel_rows.emplace_back((c * dx + s * dy) / 10.0, (-s * dx + c * dy) / 10.0);
      }
      key_sets.push_back(std::move(set));
    }
  rel.resize(static_cast<Eigen::Index>(rel_rows.size()), 2);
  for (std::size_t i = 0; i < rel_rows.size(); ++i) rel.row(static_cast<Eigen::Index>(i)) = rel_rows[i];
  const Var relv = tape.constant(std::move(rel));
  const Var q = ag::gather_rows(queries, rows);
  const Var keys = ag::add(ag::gather_rows(layer.k(tape, grid.values), token_idx), layer.pos_k(tape, relv));
  const Var vals = ag::add(ag::gather_rows(layer.v(tape, grid.values), token_idx), layer.pos_v(tape, relv));
  const Var att = ag::attention(layer.q(tape, q), keys, vals, key_sets, config_.heads, trace);
  return ag::set_rows(queries, rows, finish_layer(tape, layer, q, att));
}

std::vector<int> nearest_tokens(const Matrix& positions, const Eigen::Vector2d& p, int k) {
  std::vector<int> idx(static_cast<std::size_t>(positions.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> dist(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    dist[i] = (positions.row(static_cast<Eigen::Index>(i)).transpose() - p).squaredNorm();
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                    [&](int a, int b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
  idx.resize(keep);
  return idx;
}

Var Refiner::map_layer(Tape& tape, const Layer& layer, const Var& queries, const Var& poses,
                       const SceneEncoding& scene, int objects, ag::AttentionTrace* trace) const {
  const int tokens = static_cast<int>(scene.map.positions.rows());
  if (tokens == 0) return queries;
  const int fq = config_.q_modes(), tq = config_.q_horizon();
  const int k = config_.map_attention == "global" ? tokens : std::min(config_.knn, tokens);
  std::vector<int> subset;
  if (tq == config_.horizon) {
    subset = config_.time_subset();
  } else {
    subset = {0};
  }
  const Matrix& pv = poses.value();
  std::vector<int> rows, token_idx;
  std::vector<std::vector<int>> key_sets;
  std::vector<Eigen::RowVector2d> rel_rows;
  for (int n = 0; n < objects; ++n)
    for (int f = 0; f < fq; ++f)
      for (int t : subset) {
        rows.push_back((n * fq + f) * tq + t);
        const auto p = pv.row(pose_row_for_query(n, f, t));
        const double c = std::cos(p(2)), s = std::sin(p(2));
        std::vector<int> set;
        for (int j : nearest_tokens(scene.map.positions, Eigen::Vector2d(p(0), p(1)), k)) {
          const double dx = scene.map.positions(j, 0) - p(0), dy = scene.map.positions(j, 1) - p(1);
          set.push_back(static_cast<int>(token_idx.size()));
          token_idx.push_back(j);
          rel_rows.emplace_back((c * dx + s * dy) / 10.0, (-s * dx + c * dy) / 10.0);
        }
        key_sets.push_back(std::move(set));
      }
  Matrix rel(static_cast<Eigen::Index>(rel_rows.size()), 2);
  for (std::size_t i = 0; i < rel_rows.size(); ++i) rel.row(static_cast<Eigen::Index>(i)) = rel_rows[i];
  const Var relv = tape.constant(std::move(rel));
  const Var q = ag::gather_rows(queries, rows);
  const Var& emb = scene.map.embeddings;
  const Var keys = ag::add(ag::gather_rows(layer.k(tape, emb), token_idx), layer.pos_k(tape, relv));
  const Var vals = ag::add(ag::gather_rows(layer.v(tape, emb), token_idx), layer.pos_v(tape, relv));
  const Var att = ag::attention(layer.q(tape, q), keys, vals, key_sets, config_.heads, trace);
  return ag::set_rows(queries, rows, finish_layer(tape, layer, q, att));
}

Var Refiner::self_layer(Tape& tape, const Layer& layer, AttentionKind axis, const Var& queries,
                        int objects, ag::AttentionTrace* trace) const {
  const int fq = config_.q_modes(), tq = config_.q_horizon();
  std::vector<std::vector<int>> key_sets;
  key_sets.reserve(static_cast<std::size_t>(objects * fq * tq));
  for (int n = 0; n < objects; ++n)
    for (int f = 0; f < fq; ++f)
      for (int t = 0; t < tq; ++t) {
        std::vector<int> set;
        if (axis == AttentionKind::time) {
          for (int u = 0; u < tq; ++u) set.push_back((n * fq + f) * tq + u);
        } else if (axis == AttentionKind::mode) {
          for (int g = 0; g < fq; ++g) set.push_back((n * fq + g) * tq + t);
        } else {
          for (int m = 0; m < objects; ++m) set.push_back((m * fq + f) * tq + t);
        }
        key_sets.push_back(std::move(set));
      }
  const Var att = ag::attention(layer.q(tape, queries), layer.k(tape, queries), layer.v(tape, queries),
                                key_sets, config_.heads, trace);
  return finish_layer(tape, layer, queries, att);
}

Refiner::PoseUpdate Refiner::pose_update(Tape& tape, int block, const Var& queries, const Var& det_prev,
                                         const Var& poses_prev, int objects) const {
  const Block& blk = blocks_.at(block - 1);
  const int fq = config_.q_modes(), tq = config_.q_horizon();
  const int modes = config_.modes, horizon = config_.horizon;
  const int group = modes / fq;
  const int seqs = objects * fq;
  PoseUpdate out;

  // Detection residual from the mode-averaged t = 0 queries.
  std::vector<int> t0_rows, owner;
  for (int n = 0; n < objects; ++n)
    for (int f = 0; f < fq; ++f) {
      t0_rows.push_back((n * fq + f) * tq);
      owner.push_back(n);
    }
  const Var pooled = ag::scale(ag::scatter_add_rows(ag::gather_rows(queries, t0_rows), owner, objects), 1.0 / fq);
  const Var delta = blk.detection(tape, pooled);
  {
    const auto prev = split_cols(det_prev);
    const auto dl = split_cols(delta);
    const Var c = ag::cos(prev[4]), s = ag::sin(prev[4]);
    const Var shift = rotate(ag::concat_cols(std::vector<Var>{dl[0], dl[1]}), c, s);
    std::vector<Var> cols{ag::add(prev[0], ag::slice_cols(shift, 0, 1)),
                          ag::add(prev[1], ag::slice_cols(shift, 1, 1)),
                          ag::add(prev[2], dl[2]),
                          ag::add(prev[3], dl[3]),
                          ag::add(prev[4], dl[4]),
                          ag::add(prev[5], dl[5])};
    if (!config_.refine_poses) {
      for (int i = 0; i < 5; ++i) cols[i] = prev[i];
    }
    out.det_state = ag::concat_cols(cols);
  }

  // Bidirectional GRU over the query time axis for every (object, query mode).
  const Var x_fwd = blk.gru_forward.input(tape, queries);
  const Var x_bwd = blk.gru_backward.input(tape, queries);
  std::vector<std::vector<int>> step_rows(tq);
  for (int t = 0; t < tq; ++t)
    for (int s = 0; s < seqs; ++s) step_rows[t].push_back(s * tq + t);
  const Var h0 = tape.constant(Matrix::Zero(seqs, config_.width));
  std::vector<Var> fwd(tq), bwd(tq);
  Var h = h0;
  for (int t = 0; t < tq; ++t) fwd[t] = h = blk.gru_forward.step(tape, ag::gather_rows(x_fwd, step_rows[t]), h);
  h = h0;
  for (int t = tq - 1; t >= 0; --t)
    bwd[t] = h = blk.gru_backward.step(tape, ag::gather_rows(x_bwd, step_rows[t]), h);
  std::vector<Var> states(tq);
  Var state_sum;
  for (int t = 0; t < tq; ++t) {
    states[t] = ag::concat_cols(std::vector<Var>{fwd[t], bwd[t]});
    state_sum = state_sum.valid() ? ag::add(state_sum, states[t]) : states[t];
  }

  // Raw waypoint outputs reordered to (n, f, t) rows of 4 values.
  std::vector<Var> raw_parts;
  std::vector<int> gather;
  gather.reserve(static_cast<std::size_t>(objects * modes * (horizon - 1)));
  if (tq == horizon) {
    for (int t = 1; t < horizon; ++t)
      raw_parts.push_back(ag::reshape(blk.waypoint(tape, states[t]), seqs * group, 4));
    for (int n = 0; n < objects; ++n)
      for (int f = 0; f < modes; ++f)
        for (int t = 1; t < horizon; ++t)
          gather.push_back((t - 1) * seqs * group + (n * fq + f / group) * group + f % group);
  } else {
    raw_parts.push_back(ag::reshape(blk.waypoint(tape, states[0]), seqs * group * (horizon - 1), 4));
    for (int n = 0; n < objects; ++n)
      for (int f = 0; f < modes; ++f)
        for (int t = 1; t < horizon; ++t)
          gather.push_back(((n * fq + f / group) * group + f % group) * (horizon - 1) + (t - 1));
  }
  const Var raw = ag::gather_rows(ag::concat_rows(raw_parts), gather);
  const Var offsets = ag::scale(ag::slice_cols(raw, 0, 2), config_.waypoint_scale);
  out.scales = ag::clamp(ag::exp(ag::slice_cols(raw, 2, 2)), kMinScale, kMaxScale);

  // Waypoints: new detection frame applied to the previous trajectory (in the
  // previous detection frame) plus the predicted offsets.
  std::vector<int> wp_owner, wp_prev_rows;
  for (int n = 0; n < objects; ++n)
    for (int f = 0; f < modes; ++f)
      for (int t = 1; t < horizon; ++t) {
        wp_owner.push_back(n);
        wp_prev_rows.push_back(volume_row(n, f, t, modes, horizon));
      }
  const Var prev_det = ag::gather_rows(det_prev, wp_owner);
  const Var next_det = ag::gather_rows(out.det_state, wp_owner);
  const Var prev_xy = ag::slice_cols(prev_det, 0, 2);
  const Var prev_theta = ag::slice_cols(prev_det, 4, 1);
  const Var rel_prev = rotate(ag::sub(ag::slice_cols(ag::gather_rows(poses_prev, wp_prev_rows), 0, 2), prev_xy),
                              ag::cos(prev_theta), ag::neg(ag::sin(prev_theta)));
  const Var next_theta = ag::slice_cols(next_det, 4, 1);
  out.waypoints = ag::add(ag::slice_cols(next_det, 0, 2),
                          rotate(ag::add(rel_prev, offsets), ag::cos(next_theta), ag::sin(next_theta)));

  out.mode_logits = ag::reshape(blk.mode(tape, ag::scale(state_sum, 1.0 / tq)), objects, modes);
  return out;
}

Matrix Refiner::assemble_poses(const Matrix& det_state, const Matrix& waypoints, int objects) const {
  const int modes = config_.modes, horizon = config_.horizon;
  Matrix poses(objects * modes * horizon, 3);
  for (int n = 0; n < objects; ++n) {
    const double x = det_state(n, 0), y = det_state(n, 1), theta = normalize_angle(det_state(n, 4));
    for (int f = 0; f < modes; ++f) {
      poses.row(volume_row(n, f, 0, modes, horizon)) << x, y, theta;
      Eigen::Vector2d prev(x, y);
      double heading = theta;
      for (int t = 1; t < horizon; ++t) {
        const auto w = waypoints.row((n * modes + f) * (horizon - 1) + (t - 1));
        const Eigen::Vector2d p(w(0), w(1));
        const Eigen::Vector2d step = p - prev;
        if (step.norm() >= kMinHeadingStep) heading = std::atan2(step.y(), step.x());
        poses.row(volume_row(n, f, t, modes, horizon)) << p.x(), p.y(), heading;
        prev = p;
      }
    }
  }
  return poses;
}

std::vector<RefinerOutput> Refiner::refine(Tape& tape, const SceneEncoding& scene,
                                           std::vector<bool>* sentinel_out, RefineProbe* probe) const {
  const int objects = config_.max_objects;
  const int modes = config_.modes, horizon = config_.horizon;
  std::vector<Box> init_boxes;
  std::vector<bool> sentinel;
  const std::vector<Box> source =
      config_.pose_init == "grid" ? grid_poses(objects, scene.roi) : scene.initial.boxes;
  const Matrix poses0 = init_poses(source, objects, modes, horizon, scene.roi, &init_boxes, &sentinel);
  if (sentinel_out) *sentinel_out = sentinel;

  Matrix det0(objects, kDetState);
  for (int n = 0; n < objects; ++n) det0.row(n) = box_to_state(init_boxes[n]);
  Matrix static_wp(objects * modes * (horizon - 1), 2);
  for (int n = 0; n < objects; ++n)
    for (int r = 0; r < modes * (horizon - 1); ++r) static_wp.row(n * modes * (horizon - 1) + r) = det0.block(n, 0, 1, 2);

  std::vector<RefinerOutput> outputs;
  {
    RefinerOutput o;
    o.det_state = tape.constant(det0);
    o.detections = init_boxes;
    o.poses = poses0;
    o.pose_var = tape.constant(poses0);
    o.waypoints = tape.constant(static_wp);
    o.scales = tape.constant(Matrix::Ones(static_wp.rows(), 2));
    o.mode_probs = Matrix::Constant(objects, modes, 1.0 / modes);
    o.mode_log_probs = tape.constant(o.mode_probs.array().log().matrix());
    o.queries = init_queries(tape, objects);
    outputs.push_back(std::move(o));
  }

  for (int b = 1; b <= config_.blocks; ++b) {
    const RefinerOutput& prev = outputs.back();
    Var pose_in = prev.pose_var, det_in = prev.det_state;
    if (probe && probe->leaf_inputs) {
      pose_in = tape.leaf(prev.poses);
      det_in = tape.leaf(prev.det_state.value());
      probe->pose_inputs.push_back(pose_in);
      probe->det_inputs.push_back(det_in);
    }
    if (config_.stop_gradient) {
      pose_in = ag::stop_gradient(pose_in);
      det_in = ag::stop_gradient(det_in);
    }
    Var q = prev.queries;
    for (AttentionKind kind : order_) q = attention_layer(tape, kind, b, q, pose_in, scene, objects);
    const PoseUpdate upd = pose_update(tape, b, q, det_in, pose_in, objects);

    RefinerOutput o;
    o.det_state = upd.det_state;
    o.waypoints = upd.waypoints;
    o.scales = upd.scales;
    o.mode_log_probs = ag::log_softmax_rows(upd.mode_logits);
    o.mode_probs = o.mode_log_probs.value().array().exp().matrix();
    o.queries = q;
    const Matrix& ds = o.det_state.value();
    for (const Matrix* m : {&ds, &o.waypoints.value(), &o.scales.value(), &q.value()}) {
      if (!m->allFinite()) throw NumericalFault("non-finite value in refinement block " + std::to_string(b));
    }
    for (int n = 0; n < objects; ++n) o.detections.push_back(state_to_box(ds.row(n)));
    o.poses = assemble_poses(ds, o.waypoints.value(), objects);

    // Differentiable pose volume: positions from the detection and waypoints,
    // t = 0 heading from the detection, later headings as constants.
    std::vector<int> xy_rows, theta_rows;
    Matrix later_headings(objects * modes * (horizon - 1), 1);
    for (int n = 0; n < objects; ++n)
      for (int f = 0; f < modes; ++f)
        for (int t = 0; t < horizon; ++t) {
          if (t == 0) {
            xy_rows.push_back(n);
            theta_rows.push_back(n);
          } else {
            const int w = (n * modes + f) * (horizon - 1) + (t - 1);
            xy_rows.push_back(objects + w);
            theta_rows.push_back(objects + w);
            later_headings(w, 0) = o.poses(volume_row(n, f, t, modes, horizon), 2);
          }
        }
    const Var det_xy = ag::slice_cols(o.det_state, 0, 2);
    const Var det_theta = ag::slice_cols(o.det_state, 4, 1);
    const Var xy = ag::gather_rows(ag::concat_rows(std::vector<Var>{det_xy, o.waypoints}), xy_rows);
    const Var theta = ag::gather_rows(
        ag::concat_rows(std::vector<Var>{det_theta, tape.constant(later_headings)}), theta_rows);
    o.pose_var = ag::concat_cols(std::vector<Var>{xy, theta});
    outputs.push_back(std::move(o));
  }
  return outputs;
}

}  // namespace detra
