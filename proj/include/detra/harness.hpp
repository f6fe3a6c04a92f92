#pragma once

#include "detra/learning.hpp"
#include "detra/metrics.hpp"
#include "detra/model.hpp"
#include "detra/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace detra {

struct OptimizerConfig {
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  long steps = 2000;
  int batch_size = 4;
  double clip_norm = 5.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// 0 disables periodic checkpoints; the final checkpoint is always written.
  long checkpoint_every = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

struct RunConfig {
  RefinerConfig model;
  EncoderConfig encoder;
  SceneConfig scene;
  OptimizerConfig optimizer;
  LossWeights loss_weights;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  /// Directory of scene JSON files; empty means generated scenes.
  std::string scene_dir;
  /// Size of a fixed generated training set; 0 generates a fresh scene per (seed, sample).
  int train_scenes = 0;

  ModelConfig model_config() const;
  void validate() const;
};

/// Unknown keys anywhere in the document are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// Hex FNV-1a digest of the canonical config JSON without the output directory.
std::string config_digest(const RunConfig& c);

/// Cosine decay from the start rate at step 0 to 0 at `total`.
double cosine_lr(double start, long step, long total);

/// Decoupled weight decay Adam with global-norm clipping.
class AdamW {
 public:
  explicit AdamW(const OptimizerConfig& config) : config_(config) {}
  /// Applies one update from the accumulated gradients at schedule position `step`.
  /// Returns the gradient norm before clipping.
  double step(ParamStore& store, long step);

  std::map<std::string, Matrix>& first_moments() { return m_; }
  std::map<std::string, Matrix>& second_moments() { return v_; }
  const std::map<std::string, Matrix>& first_moments() const { return m_; }
  const std::map<std::string, Matrix>& second_moments() const { return v_; }

 private:
  OptimizerConfig config_;
  std::map<std::string, Matrix> m_, v_;
};

inline constexpr char kCheckpointMagic[8] = {'D', 'E', 'T', 'R', 'A', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Parameters, optimizer moments and run identity in one binary file: magic,
/// version, JSON header length and header, then per parameter in name order
/// the row-major values, first moments and second moments as raw doubles.
struct Checkpoint {
  nlohmann::json config;
  std::string config_digest;
  std::uint64_t seed = 0;
  long step = 0;
  std::map<std::string, Matrix> params;
  std::map<std::string, Matrix> first_moments;
  std::map<std::string, Matrix> second_moments;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const RunConfig& config, const Model& model, const AdamW& optimizer, long step);
/// Copies parameter values into the model; names and shapes must match.
void restore_parameters(const Checkpoint& ckpt, Model& model);

/// Training scene for (run seed, global sample index).
Scene training_scene(const RunConfig& config, long sample, const std::vector<Scene>& fixed);
/// Fixed training scenes: the loaded directory, the generated set, or empty for on-the-fly.
std::vector<Scene> training_set(const RunConfig& config);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  /// Stop after this many total steps (the schedule still spans optimizer.steps).
  std::optional<long> until;
  /// Called after each step with the loss report.
  std::function<void(long, const LossReport&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossReport> log;  // steps run in this call
  std::filesystem::path checkpoint_path;
};

/// Trains and writes config.json, train_log.csv and checkpoint.bin into the output directory.
TrainResult train(const RunConfig& config, const TrainOptions& options = {});

/// Scenes from a directory of JSON files or a "gen:<seed>:<count>" spec.
std::vector<Scene> load_scenes(const std::string& spec, const SceneConfig& scene_config);
/// Held-out scene `index` of a generated set with the given seed.
Scene held_out_scene(const SceneConfig& config, std::uint64_t seed, int index);

struct EvalOptions {
  OccupancySpec occupancy;
  /// Best-of-K modes; 0 means min(6, F).
  int k = 0;
};

struct BlockEvaluation {
  MetricsReport report;
  std::vector<PrPoint> pr_curve;  // IoU 0.5
};

/// Evaluates every block's predictions (block 0 is the initialization).
std::vector<BlockEvaluation> evaluate(const Model& model, const std::vector<Scene>& scenes, const EvalOptions& options,
                                      const std::string& digest, std::uint64_t seed);
/// Writes metrics_block<i>.json, pr_block<i>.csv and metrics.csv.
void write_evaluation(const std::vector<BlockEvaluation>& blocks, const std::filesystem::path& dir);
/// Loads a checkpoint, rebuilds its model and evaluates.
std::vector<BlockEvaluation> evaluate_checkpoint(const std::filesystem::path& ckpt, const std::vector<Scene>& scenes,
                                                 const EvalOptions& options);

/// Named config overrides merged into the base config JSON.
struct AblationVariant {
  std::string name;
  nlohmann::json overrides;
};

struct AblationSpec {
  std::vector<AblationVariant> variants;
  /// Evaluation scenes, "gen:<seed>:<count>" or a directory.
  std::string eval_scenes = "gen:1000:8";
  bool include_base = true;
};

AblationSpec ablation_spec_from_json(const nlohmann::json& j);
/// Recursively merges `overrides` into `base`; keys absent from base are rejected.
nlohmann::json merge_overrides(const nlohmann::json& base, const nlohmann::json& overrides);

struct AblationRow {
  std::string variant;
  bool ok = false;
  std::string error;
  std::vector<BlockEvaluation> blocks;
};

/// Trains and evaluates the base and each variant with the base seed; writes
/// per-variant run directories and ablation.csv. Failures are recorded per row.
std::vector<AblationRow> ablate(const RunConfig& base, const AblationSpec& spec, const std::filesystem::path& out);

struct ReportResult {
  std::vector<std::filesystem::path> written;
  std::vector<std::string> warnings;
};

/// Plots and summaries for a run or ablation directory, written under <dir>/report.
ReportResult report(const std::filesystem::path& dir);

}  // namespace detra
