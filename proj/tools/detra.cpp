// Command-line front end: train, eval, ablate, gen-scenes, report.

#include "detra/errors.hpp"
#include "detra/harness.hpp"
#include "detra/json_util.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace detra;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return json::parse(buffer.str());
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

/// Accepts a scene config or a run config (its "scene" section).
SceneConfig scene_config_from_file(const fs::path& path) {
  const json j = read_json_file(path);
  if (j.is_object() && (j.contains("model") || j.contains("optimizer"))) return run_config_from_json(j).scene;
  SceneConfig c = j.get<SceneConfig>();
  c.validate();
  return c;
}

std::string final_line(const std::vector<BlockEvaluation>& blocks) {
  const MetricsReport& r = blocks.back().report;
  std::ostringstream os;
  os << "final block " << blocks.size() - 1 << ": AP@0.5=" << (r.ap_05 ? format_double(*r.ap_05) : "null")
     << " ADE(K=1)=" << (r.k1.macro.ade ? format_double(*r.k1.macro.ade) : "null");
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint detection and forecasting on synthetic BEV scenes"};
  app.require_subcommand(1);

  std::string config_path, resume_path, ckpt_path, scenes_spec, out_dir, spec_path, run_dir;
  long until = -1;
  int count = 0, k = 0;
  std::uint64_t seed = 0;

  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--config", config_path, "Run config JSON")->required();
  train_cmd->add_option("--resume", resume_path, "Checkpoint to resume from");
  train_cmd->add_option("--until", until, "Stop after this many total steps");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate every refinement block of a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  eval_cmd->add_option("--scenes", scenes_spec, "Scene directory or gen:<seed>:<count>")->required();
  eval_cmd->add_option("--out", out_dir, "Output directory")->required();
  eval_cmd->add_option("--k", k, "Best-of-K modes (default min(6, F))");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate config variants");
  ablate_cmd->add_option("--config", config_path, "Base run config JSON")->required();
  ablate_cmd->add_option("--spec", spec_path, "Ablation spec JSON")->required();
  ablate_cmd->add_option("--out", out_dir, "Output directory")->required();

  auto* gen_cmd = app.add_subcommand("gen-scenes", "Write synthetic scenes as JSON");
  gen_cmd->add_option("--config", config_path, "Scene config (or run config) JSON")->required();
  gen_cmd->add_option("--count", count, "Number of scenes")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", seed, "Seed")->required();
  gen_cmd->add_option("--out", out_dir, "Output directory")->required();

  auto* report_cmd = app.add_subcommand("report", "Plots and summaries for a run or ablation directory");
  report_cmd->add_option("--run", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) {
      const RunConfig config = load_run_config(config_path);
      TrainOptions options;
      if (!resume_path.empty()) options.resume = resume_path;
      if (until >= 0) options.until = until;
      const TrainResult r = train(config, options);
      std::cout << "trained to step " << r.checkpoint.step << "; checkpoint " << r.checkpoint_path.string() << "\n";
    } else if (*eval_cmd) {
      const Checkpoint ckpt = load_checkpoint(ckpt_path);
      const RunConfig config = run_config_from_json(ckpt.config);
      const auto scenes = load_scenes(scenes_spec, config.scene);
      EvalOptions options;
      options.k = k;
      const auto blocks = evaluate_checkpoint(ckpt_path, scenes, options);
      write_evaluation(blocks, out_dir);
      std::cout << blocks.size() << " block reports written to " << out_dir << "\n" << final_line(blocks) << "\n";
    } else if (*ablate_cmd) {
      const RunConfig base = load_run_config(config_path);
      const AblationSpec spec = ablation_spec_from_json(read_json_file(spec_path));
      const auto rows = ablate(base, spec, out_dir);
      int failed = 0;
      for (const auto& row : rows) {
        if (row.ok) {
          std::cout << row.variant << ": " << final_line(row.blocks) << "\n";
        } else {
          ++failed;
          std::cout << row.variant << ": failed: " << row.error << "\n";
        }
      }
      std::cout << rows.size() << " variants, " << failed << " failed; table in " << out_dir << "/ablation.csv\n";
    } else if (*gen_cmd) {
      const SceneConfig scene_config = scene_config_from_file(config_path);
      fs::create_directories(out_dir);
      for (int i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%05d.json", i);
        save_scene(held_out_scene(scene_config, seed, i), fs::path(out_dir) / name);
      }
      std::cout << count << " scenes written to " << out_dir << "\n";
    } else if (*report_cmd) {
      const ReportResult r = report(run_dir);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      if (r.written.empty()) {
        std::cout << "nothing to report\n";
      } else {
        for (const auto& p : r.written) std::cout << p.string() << "\n";
      }
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fault: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
