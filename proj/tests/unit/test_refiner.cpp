#include "detra/errors.hpp"
#include "detra/gradcheck.hpp"
#include "detra/json_util.hpp"
#include "detra/refiner.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

using namespace detra;

namespace {

constexpr double kRoi = 4.0;

struct SceneData {
  std::array<Matrix, kLevels> grids;
  Matrix map_embeddings;
  Matrix map_positions;
  std::vector<Box> dets;
};

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

int grid_side(int level) { return 8 >> level; }

SceneData random_scene(int width, int tokens, int dets, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SceneData s;
  for (int l = 0; l < kLevels; ++l) s.grids[l] = random_matrix(grid_side(l) * grid_side(l), width, rng);
  s.map_embeddings = random_matrix(tokens, width, rng);
  s.map_positions = random_matrix(tokens, 2, rng, kRoi);
  std::uniform_real_distribution<double> pos(-3, 3), ang(-3, 3), conf(0.2, 0.9);
  for (int i = 0; i < dets; ++i) s.dets.push_back(Box{pos(rng), pos(rng), 4.0, 1.8, ang(rng), conf(rng)});
  return s;
}

SceneEncoding encode(Tape& tape, const SceneData& s, const std::array<Var, kLevels>* grids = nullptr,
                     const Var* map = nullptr) {
  SceneEncoding e;
  for (int l = 0; l < kLevels; ++l) {
    const double cell = 1.0 * (1 << l);
    e.lidar[l] = FeatureGrid{grids ? (*grids)[l] : tape.constant(s.grids[l]), grid_side(l), grid_side(l),
                             Eigen::Vector2d(-kRoi + 0.5 * cell, -kRoi + 0.5 * cell), cell, l};
  }
  e.map = MapTokens{map ? *map : tape.constant(s.map_embeddings), s.map_positions};
  e.initial.boxes = s.dets;
  e.roi = kRoi;
  return e;
}

RefinerConfig small_config() {
  RefinerConfig c;
  c.blocks = 2;
  c.modes = 2;
  c.horizon = 4;
  c.width = 8;
  c.max_objects = 3;
  c.knn = 3;
  c.heads = 2;
  c.ell = 2;
  return c;
}

struct Fixture {
  ParamStore store;
  Refiner refiner;
  explicit Fixture(const RefinerConfig& c, std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    refiner = Refiner(store, "refiner", c, rng);
  }
};

Matrix random_poses(const RefinerConfig& c, int objects, std::mt19937_64& rng) {
  Matrix p = random_matrix(objects * c.modes * c.horizon, 3, rng, 3.0);
  return p;
}

// Query row index in the (N, Fq, Tq) query volume.
int qrow(const RefinerConfig& c, int n, int f, int t) { return (n * c.q_modes() + f) * c.q_horizon() + t; }

bool same_slice(AttentionKind axis, int n, int f, int t, int n2, int f2, int t2) {
  switch (axis) {
    case AttentionKind::time: return n == n2 && f == f2;
    case AttentionKind::mode: return n == n2 && t == t2;
    default: return f == f2 && t == t2;
  }
}

Matrix layer_norm_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    out.row(r) = (x.row(r).array() - mu) / std::sqrt(var + 1e-5);
  }
  return out;
}

}  // namespace

TEST(RefinerInit, PosesAreStationaryWithSentinelPadding) {
  const std::vector<Box> dets{{1.0, 2.0, 4.0, 2.0, 0.5, 0.9}, {-1.0, 0.0, 4.0, 2.0, -0.2, 0.6}};
  std::vector<Box> padded;
  std::vector<bool> sentinel;
  const Matrix p = Refiner::init_poses(dets, 4, 2, 3, 10.0, &padded, &sentinel);
  ASSERT_EQ(p.rows(), 4 * 2 * 3);
  EXPECT_EQ(sentinel, (std::vector<bool>{false, false, true, true}));
  for (int f = 0; f < 2; ++f)
    for (int t = 0; t < 3; ++t) {
      EXPECT_EQ(p.row(volume_row(0, f, t, 2, 3)), Eigen::RowVector3d(1.0, 2.0, 0.5));
      EXPECT_EQ(p.row(volume_row(1, f, t, 2, 3)), Eigen::RowVector3d(-1.0, 0.0, -0.2));
      EXPECT_EQ(p.row(volume_row(3, f, t, 2, 3)), Eigen::RowVector3d(-10.0, -10.0, 0.0));
    }
  EXPECT_EQ(padded[2].confidence, 0.0);
}

TEST(RefinerInit, GridPosesCoverRoi) {
  const auto boxes = Refiner::grid_poses(4, 10.0);
  ASSERT_EQ(boxes.size(), 4u);
  EXPECT_DOUBLE_EQ(boxes[0].x, -5.0);
  EXPECT_DOUBLE_EQ(boxes[3].y, 5.0);
}

TEST(RefinerInit, QueriesSumModeAndTimeParameters) {
  Fixture fx(small_config());
  Tape tape;
  const Matrix q = fx.refiner.init_queries(tape, 2).value();
  const Matrix& modes = fx.store.get("refiner.mode_params").value;
  const Matrix& times = fx.store.get("refiner.time_params").value;
  for (int n = 0; n < 2; ++n)
    for (int f = 0; f < 2; ++f)
      for (int t = 0; t < 4; ++t) EXPECT_EQ(q.row(qrow(small_config(), n, f, t)), modes.row(f) + times.row(t));
}

TEST(RefinerConfigTest, RejectsBadValues) {
  RefinerConfig c = small_config();
  c.width = 9;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config();
  c.attention_order = {"lidar", "sideways"};
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config();
  c.query_modes = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  json j = small_config();
  j["bogus"] = 1;
  EXPECT_THROW(j.get<RefinerConfig>(), ValidationError);
  const RefinerConfig round = json(small_config()).get<RefinerConfig>();
  EXPECT_EQ(json(round), json(small_config()));
}

TEST(FactorizedAttention, SelfAttentionIsLocalToItsSlice) {
  const RefinerConfig c = small_config();
  Fixture fx(c);
  const SceneData s = random_scene(c.width, 5, 3, 2);
  std::mt19937_64 rng(3);
  const int rows = c.max_objects * c.modes * c.horizon;
  const Matrix q = random_matrix(rows, c.width, rng);
  const Matrix poses = random_poses(c, c.max_objects, rng);
  for (auto axis : {AttentionKind::time, AttentionKind::mode, AttentionKind::object}) {
    Tape tape;
    const SceneEncoding e = encode(tape, s);
    const Matrix base =
        fx.refiner.attention_layer(tape, axis, 1, tape.constant(q), tape.constant(poses), e, c.max_objects).value();
    for (int trial = 0; trial < 10; ++trial) {
      const int target = static_cast<int>(rng() % rows);
      const int n = target / (c.modes * c.horizon), f = (target / c.horizon) % c.modes, t = target % c.horizon;
      Matrix perturbed = q;
      std::vector<int> outside;
      for (int m = 0; m < c.max_objects; ++m)
        for (int g = 0; g < c.modes; ++g)
          for (int u = 0; u < c.horizon; ++u)
            if (!same_slice(axis, n, f, t, m, g, u)) perturbed.row(qrow(c, m, g, u)).array() += 5.0;
      const Matrix out = fx.refiner
                             .attention_layer(tape, axis, 1, tape.constant(perturbed), tape.constant(poses), e,
                                              c.max_objects)
                             .value();
      EXPECT_LE((out.row(target) - base.row(target)).cwiseAbs().maxCoeff(), 1e-12) << to_string(axis);
      // Perturbing a slice member does change the output.
      Matrix inside = q;
      const int member = axis == AttentionKind::time   ? qrow(c, n, f, (t + 1) % c.horizon)
                         : axis == AttentionKind::mode ? qrow(c, n, (f + 1) % c.modes, t)
                                                       : qrow(c, (n + 1) % c.max_objects, f, t);
      inside.row(member).array() += 5.0;
      const Matrix out2 = fx.refiner
                              .attention_layer(tape, axis, 1, tape.constant(inside), tape.constant(poses), e,
                                               c.max_objects)
                              .value();
      EXPECT_GT((out2.row(target) - base.row(target)).cwiseAbs().maxCoeff(), 1e-9) << to_string(axis);
    }
  }
}

TEST(FactorizedAttention, LidarIgnoresLaterPoses) {
  for (const std::string variant : {"deformable", "global"}) {
    RefinerConfig c = small_config();
    c.lidar_attention = variant;
    Fixture fx(c);
    const SceneData s = random_scene(c.width, 5, 3, 4);
    std::mt19937_64 rng(5);
    const Matrix q = random_matrix(c.max_objects * c.modes * c.horizon, c.width, rng);
    const Matrix poses = random_poses(c, c.max_objects, rng);
    Matrix moved = poses;
    for (int n = 0; n < c.max_objects; ++n)
      for (int f = 0; f < c.modes; ++f)
        for (int t = 1; t < c.horizon; ++t) moved.row(volume_row(n, f, t, c.modes, c.horizon)).array() += 1.7;
    Tape tape;
    const SceneEncoding e = encode(tape, s);
    const Matrix a = fx.refiner
                         .attention_layer(tape, AttentionKind::lidar, 1, tape.constant(q), tape.constant(poses), e,
                                          c.max_objects)
                         .value();
    const Matrix b = fx.refiner
                         .attention_layer(tape, AttentionKind::lidar, 1, tape.constant(q), tape.constant(moved), e,
                                          c.max_objects)
                         .value();
    EXPECT_EQ(a, b) << variant;
    // Only t = 0 rows change.
    for (int n = 0; n < c.max_objects; ++n)
      for (int f = 0; f < c.modes; ++f)
        for (int t = 1; t < c.horizon; ++t) EXPECT_EQ(a.row(qrow(c, n, f, t)), q.row(qrow(c, n, f, t)));
  }
}

TEST(FactorizedAttention, DeformableReducesToBilinearSample) {
  RefinerConfig c = small_config();
  c.ell = 1;
  Fixture fx(c);
  // Zero offsets and uniform logits; only level 0 carries features.
  for (auto& [name, p] : fx.store.all()) {
    if (name.find("lidar.sampling") != std::string::npos) p.value.setZero();
  }
  SceneData s = random_scene(c.width, 5, 3, 6);
  s.grids[1].setZero();
  s.grids[2].setZero();
  std::mt19937_64 rng(7);
  const Matrix poses = random_poses(c, c.max_objects, rng);
  const Matrix q = random_matrix(c.max_objects * c.modes * c.horizon, c.width, rng);
  // With a zero output projection and zero FFN the layer output is LN(LN(q)); to
  // see the attended value, compare the pre-norm sums through a one-hot out layer.
  const std::string prefix = "refiner.block1.0_lidar";
  fx.store.get(prefix + ".out.weight").value.setIdentity();
  fx.store.get(prefix + ".out.bias").value.setZero();
  fx.store.get(prefix + ".ffn.fc2.weight").value.setZero();
  fx.store.get(prefix + ".ffn.fc2.bias").value.setZero();
  Tape tape;
  const SceneEncoding e = encode(tape, s);
  const Matrix out = fx.refiner
                         .attention_layer(tape, AttentionKind::lidar, 1, tape.constant(q), tape.constant(poses), e,
                                          c.max_objects)
                         .value();
  for (int n = 0; n < c.max_objects; ++n)
    for (int f = 0; f < c.modes; ++f) {
      const auto p = poses.row(volume_row(n, f, 0, c.modes, c.horizon));
      const Eigen::RowVectorXd sampled =
          bilinear_sample(s.grids[0], 8, 8, e.lidar[0].origin, 1.0, Eigen::Vector2d(p(0), p(1))) / 3.0;
      const Matrix expected = layer_norm_rows(layer_norm_rows(q.row(qrow(c, n, f, 0)) + sampled));
      EXPECT_LE((out.row(qrow(c, n, f, 0)) - expected.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(FactorizedAttention, MapLayerLeavesOtherTimestepsBitIdentical) {
  RefinerConfig c = small_config();
  c.horizon = 6;
  c.map_time_subset = {0, 3};
  Fixture fx(c);
  const SceneData s = random_scene(c.width, 7, 3, 8);
  std::mt19937_64 rng(9);
  const Matrix q = random_matrix(c.max_objects * c.modes * c.horizon, c.width, rng);
  const Matrix poses = random_poses(c, c.max_objects, rng);
  Tape tape;
  const SceneEncoding e = encode(tape, s);
  const Matrix out = fx.refiner
                         .attention_layer(tape, AttentionKind::map, 1, tape.constant(q), tape.constant(poses), e,
                                          c.max_objects)
                         .value();
  for (int n = 0; n < c.max_objects; ++n)
    for (int f = 0; f < c.modes; ++f)
      for (int t = 0; t < c.horizon; ++t) {
        const bool in_subset = t == 0 || t == 3;
        if (in_subset) {
          EXPECT_NE(out.row(qrow(c, n, f, t)), q.row(qrow(c, n, f, t)));
        } else {
          EXPECT_EQ(out.row(qrow(c, n, f, t)), q.row(qrow(c, n, f, t)));
        }
      }
}

TEST(FactorizedAttention, MapLayerWithoutTokensIsIdentity) {
  const RefinerConfig c = small_config();
  Fixture fx(c);
  SceneData s = random_scene(c.width, 0, 3, 8);
  std::mt19937_64 rng(9);
  const Matrix q = random_matrix(c.max_objects * c.modes * c.horizon, c.width, rng);
  Tape tape;
  const SceneEncoding e = encode(tape, s);
  const Matrix out = fx.refiner
                         .attention_layer(tape, AttentionKind::map, 1, tape.constant(q),
                                          tape.constant(random_poses(c, c.max_objects, rng)), e, c.max_objects)
                         .value();
  EXPECT_EQ(out, q);
}

TEST(FactorizedAttention, NearestTokensMatchBruteForce) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 12);
    Matrix pos = random_matrix(n, 2, rng, 5.0);
    if (trial % 3 == 0) pos = pos.array().round();  // force ties
    const Eigen::Vector2d p = random_matrix(2, 1, rng, 5.0).array().round();
    const int k = 1 + static_cast<int>(rng() % 5);
    std::vector<std::pair<double, int>> all;
    for (int i = 0; i < n; ++i) all.emplace_back((pos.row(i).transpose() - p).squaredNorm(), i);
    std::sort(all.begin(), all.end());
    std::vector<int> expected;
    for (int i = 0; i < std::min(k, n); ++i) expected.push_back(all[i].second);
    EXPECT_EQ(nearest_tokens(pos, p, k), expected);
  }
}

TEST(FactorizedAttention, ZeroAttentionAndFfnGiveDoubleLayerNorm) {
  const RefinerConfig c = small_config();
  Fixture fx(c);
  for (auto& [name, p] : fx.store.all()) {
    if (name.find("2_time.out") != std::string::npos || name.find("2_time.ffn.fc2") != std::string::npos)
      p.value.setZero();
  }
  std::mt19937_64 rng(11);
  const Matrix q = random_matrix(c.max_objects * c.modes * c.horizon, c.width, rng);
  Tape tape;
  const SceneData s = random_scene(c.width, 3, 3, 1);
  const SceneEncoding e = encode(tape, s);
  const Matrix out = fx.refiner
                         .attention_layer(tape, AttentionKind::time, 1, tape.constant(q),
                                          tape.constant(random_poses(c, c.max_objects, rng)), e, c.max_objects)
                         .value();
  EXPECT_LE((out - layer_norm_rows(layer_norm_rows(q))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PoseUpdate, ZeroHeadsKeepPreviousPoses) {
  const RefinerConfig c = small_config();
  Fixture fx(c);
  for (auto& [name, p] : fx.store.all()) {
    if (name.find("block1.detection.fc2") != std::string::npos ||
        name.find("block1.waypoint.fc2") != std::string::npos || name.find("block1.mode.fc2") != std::string::npos)
      p.value.setZero();
  }
  std::mt19937_64 rng(12);
  const Matrix q = random_matrix(c.max_objects * c.modes * c.horizon, c.width, rng);
  Matrix det = random_matrix(c.max_objects, kDetState, rng);
  const Matrix poses = random_poses(c, c.max_objects, rng);
  Tape tape;
  const auto upd =
      fx.refiner.pose_update(tape, 1, tape.constant(q), tape.constant(det), tape.constant(poses), c.max_objects);
  EXPECT_LE((upd.det_state.value() - det).cwiseAbs().maxCoeff(), 1e-15);
  for (int n = 0; n < c.max_objects; ++n)
    for (int f = 0; f < c.modes; ++f)
      for (int t = 1; t < c.horizon; ++t) {
        const auto w = upd.waypoints.value().row((n * c.modes + f) * (c.horizon - 1) + t - 1);
        const auto p = poses.row(volume_row(n, f, t, c.modes, c.horizon));
        EXPECT_NEAR(w(0), p(0), 1e-12);
        EXPECT_NEAR(w(1), p(1), 1e-12);
      }
  EXPECT_TRUE(upd.scales.value().isOnes());
  EXPECT_TRUE(upd.mode_logits.value().isZero());
}

TEST(Refine, OutputsPerBlockAreWellFormed) {
  for (int blocks : {0, 1, 3}) {
    RefinerConfig c = small_config();
    c.blocks = blocks;
    Fixture fx(c);
    const SceneData s = random_scene(c.width, 6, 2, 13);
    Tape tape;
    std::vector<bool> sentinel;
    const auto outs = fx.refiner.refine(tape, encode(tape, s), &sentinel);
    ASSERT_EQ(outs.size(), static_cast<std::size_t>(blocks + 1));
    EXPECT_EQ(sentinel, (std::vector<bool>{false, false, true}));
    for (const auto& o : outs) {
      EXPECT_EQ(o.det_state.rows(), c.max_objects);
      EXPECT_EQ(o.poses.rows(), c.max_objects * c.modes * c.horizon);
      EXPECT_EQ(o.waypoints.rows(), c.max_objects * c.modes * (c.horizon - 1));
      EXPECT_LE((o.mode_probs.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
      EXPECT_GE(o.mode_probs.minCoeff(), 0.0);
      EXPECT_GT(o.scales.value().minCoeff(), 0.0);
      EXPECT_EQ(o.pose_var.value(), o.poses);
    }
  }
}

TEST(Refine, QueryVolumeAblationsProduceFullOutputs) {
  for (auto [fq, tq] : {std::pair{1, 1}, std::pair{1, 4}, std::pair{2, 1}}) {
    RefinerConfig c = small_config();
    c.query_modes = fq;
    c.query_horizon = tq;
    Fixture fx(c);
    const SceneData s = random_scene(c.width, 6, 3, 14);
    Tape tape;
    const auto outs = fx.refiner.refine(tape, encode(tape, s));
    EXPECT_EQ(outs.back().queries.rows(), c.max_objects * fq * tq);
    EXPECT_EQ(outs.back().waypoints.rows(), c.max_objects * c.modes * (c.horizon - 1));
    EXPECT_EQ(outs.back().mode_probs.cols(), c.modes);
  }
}

TEST(Refine, Deterministic) {
  const RefinerConfig c = small_config();
  Fixture a(c, 3), b(c, 3);
  const SceneData s = random_scene(c.width, 6, 3, 15);
  Tape ta, tb;
  const auto oa = a.refiner.refine(ta, encode(ta, s));
  const auto ob = b.refiner.refine(tb, encode(tb, s));
  EXPECT_EQ(oa.back().poses, ob.back().poses);
  EXPECT_EQ(oa.back().mode_probs, ob.back().mode_probs);
}

TEST(Refine, PermutingObjectsPermutesOutputs) {
  const RefinerConfig c = small_config();
  Fixture fx(c);
  SceneData s = random_scene(c.width, 6, 3, 16);
  SceneData permuted = s;
  const std::vector<int> perm{2, 0, 1};
  for (int i = 0; i < 3; ++i) permuted.dets[i] = s.dets[perm[i]];
  Tape tape;
  const auto a = fx.refiner.refine(tape, encode(tape, s)).back();
  const auto b = fx.refiner.refine(tape, encode(tape, permuted)).back();
  for (int i = 0; i < 3; ++i) {
    EXPECT_LE((b.det_state.value().row(i) - a.det_state.value().row(perm[i])).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((b.mode_probs.row(i) - a.mode_probs.row(perm[i])).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Refine, StopGradientBlocksPoseInputs) {
  for (bool stop : {true, false}) {
    RefinerConfig c = small_config();
    c.stop_gradient = stop;
    Fixture fx(c);
    const SceneData s = random_scene(c.width, 6, 3, 17);
    Tape tape;
    RefineProbe probe;
    probe.leaf_inputs = true;
    const auto outs = fx.refiner.refine(tape, encode(tape, s), nullptr, &probe);
    const Var loss = ag::add(ag::sum(ag::square(outs[1].waypoints)), ag::sum(ag::square(outs[1].det_state)));
    tape.backward(loss);
    const Matrix& g = probe.pose_inputs[0].grad();
    const Matrix& gd = probe.det_inputs[0].grad();
    const double pose_grad = g.size() ? g.cwiseAbs().maxCoeff() : 0.0;
    const double det_grad = gd.size() ? gd.cwiseAbs().maxCoeff() : 0.0;
    if (stop) {
      EXPECT_LE(pose_grad, 1e-15);
      EXPECT_LE(det_grad, 1e-15);
    } else {
      EXPECT_GT(pose_grad + det_grad, 1e-6);
    }
  }
}

class AttentionGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(AttentionGradients, MatchFiniteDifferences) {
  RefinerConfig c = small_config();
  c.max_objects = 2;
  const bool global = GetParam() == "global_lidar";
  if (global) c.lidar_attention = "global";
  const AttentionKind kind = global ? AttentionKind::lidar : attention_kind_from_string(GetParam());
  Fixture fx(c, 21);
  const SceneData s = random_scene(c.width, 5, 2, 22);
  std::mt19937_64 rng(23);
  const Matrix q = random_matrix(c.max_objects * c.modes * c.horizon, c.width, rng);
  const Matrix poses = random_poses(c, c.max_objects, rng);
  const bool poses_differentiable = kind == AttentionKind::lidar && c.lidar_attention == "deformable";
  std::vector<Matrix> inputs{q, s.grids[0], s.grids[1], s.grids[2], s.map_embeddings};
  if (poses_differentiable) inputs.push_back(poses);
  const auto result = gradcheck(
      [&](Tape& tape, const std::vector<Var>& in) {
        const std::array<Var, kLevels> grids{in[1], in[2], in[3]};
        const SceneEncoding e = encode(tape, s, &grids, &in[4]);
        const Var p = poses_differentiable ? in[5] : tape.constant(poses);
        return fx.refiner.attention_layer(tape, kind, 1, in[0], p, e, c.max_objects);
      },
      inputs, &fx.store, 24, 1e-6, 24);
  EXPECT_GT(result.checked, 50);
  EXPECT_LE(result.max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(AllVariants, AttentionGradients,
                         ::testing::Values("lidar", "global_lidar", "map", "time", "mode", "object"));

TEST(PoseUpdate, GradientsMatchFiniteDifferences) {
  for (auto [fq, tq] : {std::pair{2, 4}, std::pair{1, 1}}) {
    RefinerConfig c = small_config();
    c.query_modes = fq;
    c.query_horizon = tq;
    Fixture fx(c, 31);
    std::mt19937_64 rng(32);
    const Matrix q = random_matrix(c.max_objects * fq * tq, c.width, rng);
    const Matrix det = random_matrix(c.max_objects, kDetState, rng);
    const Matrix poses = random_poses(c, c.max_objects, rng);
    const auto result = gradcheck(
        [&](Tape& tape, const std::vector<Var>& in) {
          const auto u = fx.refiner.pose_update(tape, 1, in[0], in[1], in[2], c.max_objects);
          auto flat = [](const Var& v) { return ag::reshape(v, 1, v.rows() * v.cols()); };
          return ag::concat_cols(std::vector<Var>{flat(u.det_state), flat(u.waypoints), flat(u.scales),
                                                  flat(ag::log_softmax_rows(u.mode_logits))});
        },
        {q, det, poses}, &fx.store, 33, 1e-6, 24);
    EXPECT_GT(result.checked, 50);
    EXPECT_LE(result.max_rel_error, 1e-4);
  }
}
