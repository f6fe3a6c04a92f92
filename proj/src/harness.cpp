#include "detra/harness.hpp"

#include "detra/errors.hpp"
#include "detra/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace detra {

namespace fs = std::filesystem;

namespace {

// Seed streams split from the run seed.
constexpr std::uint64_t kInitStream = 2;
constexpr std::uint64_t kSceneStream = 10;

template <typename C, typename F>
void visit_optimizer_config(C& c, F&& f) {
  f("learning_rate", c.learning_rate);
  f("weight_decay", c.weight_decay);
  f("steps", c.steps);
  f("batch_size", c.batch_size);
  f("clip_norm", c.clip_norm);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("eps", c.eps);
  f("checkpoint_every", c.checkpoint_every);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<fs::path> sorted_json_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

LossReport mean_report(const std::vector<LossReport>& reports) {
  LossReport out = reports.front();
  const double inv = 1.0 / static_cast<double>(reports.size());
  out.l_init = out.total = 0.0;
  for (auto& b : out.blocks) b = BlockLoss{};
  for (const auto& r : reports) {
    out.l_init += inv * r.l_init;
    out.total += inv * r.total;
    for (std::size_t i = 0; i < r.blocks.size(); ++i) {
      out.blocks[i].det_cls += inv * r.blocks[i].det_cls;
      out.blocks[i].det_l1 += inv * r.blocks[i].det_l1;
      out.blocks[i].det_giou += inv * r.blocks[i].det_giou;
      out.blocks[i].for_nll += inv * r.blocks[i].for_nll;
      out.blocks[i].for_cls += inv * r.blocks[i].for_cls;
    }
  }
  return out;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ValidationError("checkpoint truncated");
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Matrix read_matrix(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw ValidationError("checkpoint truncated");
  return m;
}

std::string csv_safe(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

}  // namespace

void OptimizerConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("optimizer config: ") + what);
  };
  require(learning_rate >= 0.0, "learning_rate must be >= 0");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(steps >= 1, "steps must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(clip_norm > 0.0, "clip_norm must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0, 1)");
  require(eps > 0.0, "eps must be positive");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  write_fields(j, c, [](auto& o, auto&& f) { visit_optimizer_config(o, f); });
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  read_fields(j, c, [](auto& o, auto&& f) { visit_optimizer_config(o, f); }, "optimizer");
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.refiner = model;
  m.encoder = encoder;
  m.roi = scene.roi;
  return m;
}

void RunConfig::validate() const {
  model.validate();
  encoder.validate();
  scene.validate();
  optimizer.validate();
  if (loss_weights.alpha < 0 || loss_weights.beta < 0 || loss_weights.gamma < 0 || loss_weights.focal_alpha < 0 ||
      loss_weights.focal_gamma < 0)
    throw ValidationError("loss_weights must be >= 0");
  if (scene.horizon != model.horizon) throw ValidationError("scene.horizon must equal model.T");
  if (train_scenes < 0) throw ValidationError("train_scenes must be >= 0");
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  read_fields(
      j, c,
      [](auto& o, auto&& f) {
        f("model", o.model);
        f("encoder", o.encoder);
        f("scene", o.scene);
        f("optimizer", o.optimizer);
        f("loss_weights", o.loss_weights);
        f("seed", o.seed);
        f("output_dir", o.output_dir);
        f("scene_dir", o.scene_dir);
        f("train_scenes", o.train_scenes);
      },
      "config");
  c.validate();
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  json j;
  j["model"] = c.model;
  j["encoder"] = c.encoder;
  j["scene"] = c.scene;
  j["optimizer"] = c.optimizer;
  j["loss_weights"] = c.loss_weights;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["scene_dir"] = c.scene_dir;
  j["train_scenes"] = c.train_scenes;
  return j;
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string config_digest(const RunConfig& c) {
  json j = run_config_to_json(c);
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double cosine_lr(double start, long step, long total) {
  if (step >= total) return 0.0;
  return 0.5 * start * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

double AdamW::step(ParamStore& store, long step) {
  double sq = 0.0;
  for (auto& [name, p] : store.all())
    if (p.grad.size() == p.value.size()) sq += p.grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalFault("non-finite gradient norm");
  const double clip = norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
  const double lr = cosine_lr(config_.learning_rate, step, config_.steps);
  const double t = static_cast<double>(step + 1);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (auto& [name, p] : store.all()) {
    Matrix g = p.grad.size() == p.value.size() ? Matrix(clip * p.grad) : Matrix(Matrix::Zero(p.value.rows(), p.value.cols()));
    Matrix& m = m_[name];
    Matrix& v = v_[name];
    if (m.size() != p.value.size()) m = Matrix::Zero(p.value.rows(), p.value.cols());
    if (v.size() != p.value.size()) v = Matrix::Zero(p.value.rows(), p.value.cols());
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    const Matrix update = (m.array() / c1) / ((v.array() / c2).sqrt() + config_.eps);
    p.value -= lr * (update + config_.weight_decay * p.value);
  }
  return norm;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  json header;
  header["schema_version"] = kCheckpointVersion;
  header["config"] = ckpt.config;
  header["config_digest"] = ckpt.config_digest;
  header["seed"] = ckpt.seed;
  header["step"] = ckpt.step;
  header["params"] = json::array();
  for (const auto& [name, m] : ckpt.params) {
    header["params"].push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"moments", ckpt.first_moments.count(name) != 0}});
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod(out, kCheckpointVersion);
  write_pod(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : ckpt.params) {
    write_matrix(out, m);
    auto mi = ckpt.first_moments.find(name);
    auto vi = ckpt.second_moments.find(name);
    if (mi != ckpt.first_moments.end()) {
      write_matrix(out, mi->second);
      write_matrix(out, vi->second);
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw ValidationError(path.string() + ": not a checkpoint");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw ValidationError(path.string() + ": unsupported checkpoint version");
  const auto length = read_pod<std::uint64_t>(in);
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw ValidationError("checkpoint truncated");
  Checkpoint ckpt;
  try {
    const json header = json::parse(text);
    ckpt.config = header.at("config");
    ckpt.config_digest = header.at("config_digest").get<std::string>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.step = header.at("step").get<long>();
    for (const auto& p : header.at("params")) {
      const std::string name = p.at("name").get<std::string>();
      const auto rows = p.at("shape").at(0).get<Eigen::Index>();
      const auto cols = p.at("shape").at(1).get<Eigen::Index>();
      ckpt.params[name] = read_matrix(in, rows, cols);
      if (p.at("moments").get<bool>()) {
        ckpt.first_moments[name] = read_matrix(in, rows, cols);
        ckpt.second_moments[name] = read_matrix(in, rows, cols);
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": bad checkpoint header: " + e.what());
  }
  return ckpt;
}

Checkpoint make_checkpoint(const RunConfig& config, const Model& model, const AdamW& optimizer, long step) {
  Checkpoint c;
  // The output directory does not affect results, so it stays out of the checkpoint.
  c.config = run_config_to_json(config);
  c.config.erase("output_dir");
  c.config_digest = config_digest(config);
  c.seed = config.seed;
  c.step = step;
  for (const auto& [name, p] : model.params().all()) {
    c.params[name] = p.value;
    auto mi = optimizer.first_moments().find(name);
    if (mi != optimizer.first_moments().end()) {
      c.first_moments[name] = mi->second;
      c.second_moments[name] = optimizer.second_moments().at(name);
    }
  }
  return c;
}

void restore_parameters(const Checkpoint& ckpt, Model& model) {
  auto& all = model.params().all();
  if (all.size() != ckpt.params.size()) throw ValidationError("checkpoint parameter count does not match the model");
  for (auto& [name, p] : all) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end()) throw ValidationError("checkpoint lacks parameter " + name);
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())
      throw ValidationError("checkpoint shape mismatch for " + name);
    p.value = it->second;
  }
}

Scene training_scene(const RunConfig& config, long sample, const std::vector<Scene>& fixed) {
  if (!fixed.empty()) return fixed[static_cast<std::size_t>(sample) % fixed.size()];
  return generate_scene(config.scene, split_seed(split_seed(config.seed, kSceneStream), static_cast<std::uint64_t>(sample)));
}

std::vector<Scene> training_set(const RunConfig& config) {
  std::vector<Scene> scenes;
  if (!config.scene_dir.empty()) {
    for (const auto& f : sorted_json_files(config.scene_dir)) scenes.push_back(load_scene(f));
    if (scenes.empty()) throw ValidationError("no scenes in " + config.scene_dir);
    return scenes;
  }
  for (int i = 0; i < config.train_scenes; ++i)
    scenes.push_back(generate_scene(config.scene, split_seed(split_seed(config.seed, kSceneStream), i)));
  return scenes;
}

TrainResult train(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const std::string digest = config_digest(config);
  Model model(config.model_config(), split_seed(config.seed, kInitStream));
  AdamW optimizer(config.optimizer);
  long start = 0;
  if (options.resume) {
    const Checkpoint ckpt = load_checkpoint(*options.resume);
    if (ckpt.config_digest != digest) throw ValidationError("config digest mismatch on resume");
    restore_parameters(ckpt, model);
    optimizer.first_moments() = ckpt.first_moments;
    optimizer.second_moments() = ckpt.second_moments;
    start = ckpt.step;
  }
  const long end = std::min(config.optimizer.steps, options.until.value_or(config.optimizer.steps));
  const std::vector<Scene> fixed = training_set(config);

  const fs::path out_dir = config.output_dir;
  fs::create_directories(out_dir);
  write_text(out_dir / "config.json", run_config_to_json(config).dump(2) + "\n");

  // The log keeps rows up to the resume step so a resumed run matches an uninterrupted one.
  const fs::path log_path = out_dir / "train_log.csv";
  std::string log_text = loss_csv_header(config.model.blocks) + "\n";
  if (start > 0 && fs::exists(log_path)) {
    std::istringstream existing(read_text(log_path));
    std::string line;
    std::getline(existing, line);
    while (std::getline(existing, line)) {
      if (line.empty()) continue;
      if (std::stol(line.substr(0, line.find(','))) > start) break;
      log_text += line + "\n";
    }
  }
  write_text(log_path, log_text);
  std::ofstream log(log_path, std::ios::binary | std::ios::app);

  TrainResult result;
  const int batch = config.optimizer.batch_size;
  for (long s = start; s < end; ++s) {
    model.params().zero_grad();
    std::vector<LossReport> reports;
    try {
      for (int b = 0; b < batch; ++b) {
        const Scene scene = training_scene(config, s * batch + b, fixed);
        Tape tape;
        LossResult r = model.loss(tape, scene, config.loss_weights);
        tape.backward(ag::scale(r.total, 1.0 / batch));
        reports.push_back(std::move(r.report));
      }
      optimizer.step(model.params(), s);
    } catch (const NumericalFault& e) {
      const std::string msg = "step " + std::to_string(s + 1) + ": " + e.what();
      write_text(out_dir / "failure.txt", msg + "\n");
      throw NumericalFault(msg);
    }
    const LossReport mean = mean_report(reports);
    log << loss_csv_row(s + 1, mean) << "\n";
    result.log.push_back(mean);
    if (options.on_step) options.on_step(s + 1, mean);
    const long every = config.optimizer.checkpoint_every;
    if (every > 0 && (s + 1) % every == 0 && s + 1 < end)
      save_checkpoint(make_checkpoint(config, model, optimizer, s + 1),
                      out_dir / ("checkpoint_step" + std::to_string(s + 1) + ".bin"));
  }
  log.flush();
  result.checkpoint = make_checkpoint(config, model, optimizer, std::max(start, end));
  result.checkpoint_path = out_dir / "checkpoint.bin";
  save_checkpoint(result.checkpoint, result.checkpoint_path);
  return result;
}

Scene held_out_scene(const SceneConfig& config, std::uint64_t seed, int index) {
  return generate_scene(config, split_seed(seed, static_cast<std::uint64_t>(index)));
}

std::vector<Scene> load_scenes(const std::string& spec, const SceneConfig& scene_config) {
  std::vector<Scene> scenes;
  if (spec.rfind("gen:", 0) == 0) {
    const auto second = spec.find(':', 4);
    if (second == std::string::npos) throw ValidationError("scene spec must be gen:<seed>:<count>");
    std::uint64_t seed = 0;
    int count = 0;
    try {
      seed = std::stoull(spec.substr(4, second - 4));
      count = std::stoi(spec.substr(second + 1));
    } catch (const std::exception&) {
      throw ValidationError("scene spec must be gen:<seed>:<count>");
    }
    if (count < 1) throw ValidationError("scene count must be >= 1");
    for (int i = 0; i < count; ++i) scenes.push_back(held_out_scene(scene_config, seed, i));
    return scenes;
  }
  for (const auto& f : sorted_json_files(spec)) scenes.push_back(load_scene(f));
  if (scenes.empty()) throw ValidationError("no scenes in " + spec);
  return scenes;
}

std::vector<BlockEvaluation> evaluate(const Model& model, const std::vector<Scene>& scenes, const EvalOptions& options,
                                      const std::string& digest, std::uint64_t seed) {
  const RefinerConfig& rc = model.config().refiner;
  std::vector<std::vector<EvalFrame>> frames(rc.blocks + 1);
  for (const Scene& scene : scenes) {
    if (scene.horizon() != 0 && scene.horizon() != rc.horizon)
      throw ValidationError("scene horizon does not match the model horizon");
    Tape tape;
    const ForwardResult fwd = model.forward(tape, scene);
    for (int b = 0; b <= rc.blocks; ++b)
      frames[b].push_back(to_eval_frame(fwd.outputs[b], fwd.sentinel, scene, rc.modes, rc.horizon));
  }
  OccupancySpec occ = options.occupancy;
  occ.roi = model.config().roi;
  const int k = options.k > 0 ? options.k : std::min(6, rc.modes);
  std::vector<BlockEvaluation> out;
  for (int b = 0; b <= rc.blocks; ++b) {
    BlockEvaluation e;
    e.report = compute_metrics(frames[b], k, occ);
    e.report.config_digest = digest;
    e.report.seed = seed;
    e.pr_curve = precision_recall_curve(frames[b], 0.5);
    out.push_back(std::move(e));
  }
  return out;
}

void write_evaluation(const std::vector<BlockEvaluation>& blocks, const fs::path& dir) {
  fs::create_directories(dir);
  std::string table = "block," + metrics_csv_header() + "\n";
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    json j = metrics_to_json(blocks[b].report);
    j["block"] = b;
    write_text(dir / ("metrics_block" + std::to_string(b) + ".json"), j.dump(2) + "\n");
    std::string pr = "threshold,recall,precision\n";
    for (const auto& p : blocks[b].pr_curve)
      pr += format_double(p.threshold) + "," + format_double(p.recall) + "," + format_double(p.precision) + "\n";
    write_text(dir / ("pr_block" + std::to_string(b) + ".csv"), pr);
    table += std::to_string(b) + "," + metrics_csv_row(blocks[b].report) + "\n";
  }
  write_text(dir / "metrics.csv", table);
}

std::vector<BlockEvaluation> evaluate_checkpoint(const fs::path& ckpt_path, const std::vector<Scene>& scenes,
                                                 const EvalOptions& options) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RunConfig config = run_config_from_json(ckpt.config);
  Model model(config.model_config(), 0);
  restore_parameters(ckpt, model);
  return evaluate(model, scenes, options, ckpt.config_digest, ckpt.seed);
}

AblationSpec ablation_spec_from_json(const nlohmann::json& j) {
  AblationSpec spec;
  if (!j.is_object()) throw ValidationError("ablation spec: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (key == "eval_scenes") {
      spec.eval_scenes = it->get<std::string>();
    } else if (key == "include_base") {
      spec.include_base = it->get<bool>();
    } else if (key == "variants") {
      for (const auto& v : *it) {
        if (!v.is_object() || !v.contains("name") || !v.contains("overrides") || v.size() != 2)
          throw ValidationError("ablation spec: variants need exactly 'name' and 'overrides'");
        spec.variants.push_back({v.at("name").get<std::string>(), v.at("overrides")});
      }
    } else {
      throw ValidationError("ablation spec: unknown key '" + key + "'");
    }
  }
  std::set<std::string> names;
  for (const auto& v : spec.variants) {
    if (v.name.empty() || v.name == "base" || !names.insert(v.name).second)
      throw ValidationError("ablation spec: variant names must be unique, nonempty and not 'base'");
    if (v.name.find_first_of("/\\,") != std::string::npos)
      throw ValidationError("ablation spec: variant names may not contain '/', '\\' or ','");
  }
  return spec;
}

nlohmann::json merge_overrides(const nlohmann::json& base, const nlohmann::json& overrides) {
  if (!overrides.is_object()) throw ValidationError("overrides must be an object");
  json out = base;
  for (auto it = overrides.begin(); it != overrides.end(); ++it) {
    if (!out.contains(it.key())) throw ValidationError("override of unknown key '" + it.key() + "'");
    json& slot = out[it.key()];
    // Nested config sections merge; refiner defaults are written out in full so every key exists.
    if (slot.is_object() && it->is_object()) {
      slot = merge_overrides(slot, *it);
    } else {
      slot = *it;
    }
  }
  return out;
}

std::vector<AblationRow> ablate(const RunConfig& base, const AblationSpec& spec, const fs::path& out) {
  fs::create_directories(out);
  const json base_json = run_config_to_json(base);
  const std::vector<Scene> scenes = load_scenes(spec.eval_scenes, base.scene);
  std::vector<AblationVariant> runs;
  if (spec.include_base) runs.push_back({"base", json::object()});
  for (const auto& v : spec.variants) runs.push_back(v);

  std::vector<AblationRow> rows;
  for (const auto& v : runs) {
    AblationRow row;
    row.variant = v.name;
    try {
      RunConfig cfg = run_config_from_json(merge_overrides(base_json, v.overrides));
      cfg.seed = base.seed;
      cfg.output_dir = (out / v.name).string();
      const TrainResult tr = train(cfg);
      Model model(cfg.model_config(), 0);
      restore_parameters(tr.checkpoint, model);
      row.blocks = evaluate(model, scenes, EvalOptions{}, config_digest(cfg), cfg.seed);
      write_evaluation(row.blocks, out / v.name / "eval");
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }

  std::string table = "variant,status,error,block," + metrics_csv_header() + "\n";
  for (const auto& row : rows) {
    if (row.ok) {
      const std::size_t last = row.blocks.size() - 1;
      table += row.variant + ",ok,," + std::to_string(last) + "," + metrics_csv_row(row.blocks[last].report) + "\n";
    } else {
      table += row.variant + ",failed," + csv_safe(row.error) + ",\n";
    }
  }
  write_text(out / "ablation.csv", table);
  return rows;
}

}  // namespace detra
