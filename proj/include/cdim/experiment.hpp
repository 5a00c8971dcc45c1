#pragma once

// JSON-driven experiments: one training run, or an ablation grid of
// (axis value x seed) cells evaluated on a shared test split.

#include <chrono>
#include <sstream>

#include "cdim/checkpoint.hpp"
#include "cdim/train.hpp"

namespace cdim {

enum class Objective { kTriplet, kClassification };

inline std::string to_string(Objective o) {
  return o == Objective::kTriplet ? "triplet" : "classification";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "triplet") return Objective::kTriplet;
  if (s == "classification") return Objective::kClassification;
  throw ConfigError("unknown objective '" + s + "' (expected triplet or classification)");
}

/// One row of the "layers" ablation axis. A frozen cell trains without
/// fusion and applies `fusion` only at evaluation time.
struct LayerCell {
  std::string name;
  FusionSpec fusion;
  bool frozen = false;
};

struct ExperimentConfig {
  synth::DatasetConfig dataset;
  std::optional<std::string> dataset_path;  // load instead of generating
  BackboneConfig backbone = mini_aligned_net();
  FusionSpec fusion;
  Objective objective = Objective::kTriplet;
  OptimizerConfig optimizer;
  AugmentConfig augment;
  EarlyStopConfig early_stop;
  RetrievalProtocol evaluation;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<LayerCell> layer_cells;
  std::vector<Pooling> pooling_values{Pooling::kFlatten, Pooling::kGap};
  std::string output_dir = "runs/experiment";
};

namespace detail {

inline std::vector<std::size_t> as_pair(const nlohmann::json& j) { return j.get<std::vector<std::size_t>>(); }

}  // namespace detail

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      c.dataset.mode = synth::alignment_from_string(d.value("mode", std::string("aligned")));
      c.dataset.instances = d.value("instances", c.dataset.instances);
      c.dataset.train_instances = d.value("train_instances", c.dataset.instances / 2);
      c.dataset.renders = d.value("renders", c.dataset.renders);
      if (!d.contains("seed")) throw ConfigError("dataset.seed must be given explicitly");
      c.dataset.seed = d.at("seed").get<std::uint64_t>();
      c.dataset.image_size = d.value("image_size", c.dataset.image_size);
      c.dataset.channels = d.value("channels", c.dataset.channels);
      c.dataset.noise_std = d.value("noise_std", c.dataset.noise_std);
      c.dataset.contour_jitter = d.value("contour_jitter", c.dataset.contour_jitter);
      if (d.contains("path")) c.dataset_path = d.at("path").get<std::string>();
    }
    if (j.contains("backbone")) c.backbone = backbone_from_json(j.at("backbone"));
    if (j.contains("fusion")) c.fusion = fusion_from_json(j.at("fusion"));
    if (j.contains("objective")) c.objective = objective_from_string(j.at("objective").get<std::string>());
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      if (o.contains("profile")) c.optimizer = optimizer_profile(o.at("profile").get<std::string>());
      if (o.contains("kind")) c.optimizer.kind = optimizer_kind_from_string(o.at("kind").get<std::string>());
      c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
      if (o.contains("lr_decay")) {
        c.optimizer.lr_decay = o.at("lr_decay").is_null() ? std::nullopt
                                                          : std::optional<double>(o.at("lr_decay").get<double>());
      }
      c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.eps = o.value("eps", c.optimizer.eps);
      c.optimizer.max_iterations = o.value("max_iterations", c.optimizer.max_iterations);
      c.optimizer.batch_size = o.value("batch_size", c.optimizer.batch_size);
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      c.augment.flip_probability = a.value("flip_probability", c.augment.flip_probability);
      if (a.contains("flip_policy"))
        c.augment.flip_policy = flip_policy_from_string(a.at("flip_policy").get<std::string>());
      if (a.contains("crop") && !a.at("crop").is_null()) {
        const auto hw = detail::as_pair(a.at("crop"));
        if (hw.size() != 2) throw ConfigError("augment.crop must be [H, W]");
        c.augment.crop = std::pair{hw[0], hw[1]};
      }
    } else if (c.dataset.mode == synth::Alignment::kPerturbed) {
      c.augment.flip_policy = FlipPolicy::kIndependent;
    }
    if (j.contains("early_stop")) {
      const auto& e = j.at("early_stop");
      c.early_stop.enabled = e.value("enabled", c.early_stop.enabled);
      c.early_stop.validation_fraction = e.value("validation_fraction", c.early_stop.validation_fraction);
      c.early_stop.patience = e.value("patience", c.early_stop.patience);
    }
    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      c.evaluation.ks = e.value("k", c.evaluation.ks);
      if (e.contains("query_domain"))
        c.evaluation.query_domain = synth::domain_from_string(e.at("query_domain").get<std::string>());
      if (e.contains("gallery_domain"))
        c.evaluation.gallery_domain = synth::domain_from_string(e.at("gallery_domain").get<std::string>());
      c.evaluation.multi_query = e.value("multi_query", false);
    }
    if (!j.contains("seed") && !j.contains("seeds")) throw ConfigError("seed or seeds must be given explicitly");
    c.seeds = j.value("seeds", c.seeds);
    if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
    c.seed = j.value("seed", c.seeds.front());
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      for (const auto& cell : a.value("layers", nlohmann::json::array())) {
        c.layer_cells.push_back({cell.at("name").get<std::string>(), fusion_from_json(cell.at("fusion")),
                                 cell.value("frozen", false)});
      }
      if (a.contains("pooling")) {
        c.pooling_values.clear();
        for (const auto& p : a.at("pooling")) c.pooling_values.push_back(pooling_from_string(p.get<std::string>()));
      }
    }
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
  c.optimizer.validate();
  c.augment.validate();
  if (c.early_stop.enabled) c.early_stop.validate();
  validate(c.fusion, with_taps_for(c.backbone, c.fusion));
  for (std::size_t k : c.evaluation.ks)
    if (k < 1) throw ConfigError("evaluation K values must be >= 1");
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

inline synth::Dataset experiment_dataset(const ExperimentConfig& c) {
  return c.dataset_path ? synth::load_dataset(*c.dataset_path) : synth::generate_dataset(c.dataset);
}

struct RunResult {
  Checkpoint checkpoint;
  std::vector<TrainLogRecord> log;
  RetrievalReport report;
  double seconds = 0.0;
};

/// Trains with `fusion` (the backbone's taps are set to the fused ones) and
/// evaluates with `eval_fusion` if given, otherwise with `fusion`.
inline RunResult run_training(const ExperimentConfig& c, const synth::Dataset& ds,
                              const FusionSpec& fusion, std::uint64_t seed,
                              const std::optional<FusionSpec>& eval_fusion = std::nullopt,
                              const TrainHooks<float>& hooks = {}) {
  const auto start = std::chrono::steady_clock::now();
  const BackboneConfig config = with_taps_for(c.backbone, fusion);
  TrainResult<float> trained =
      c.objective == Objective::kTriplet
          ? train_triplet_model<float>(ds, config, fusion, c.optimizer, c.augment, c.early_stop, seed, hooks)
          : train_classification_model<float>(ds, config, fusion, c.optimizer, c.augment, seed, hooks);
  RunResult r;
  r.log = std::move(trained.log);
  r.checkpoint = {config, fusion, std::move(trained.params)};
  const FusionSpec& ef = eval_fusion ? *eval_fusion : fusion;
  const BackboneConfig eval_config = with_taps_for(c.backbone, ef);
  NetworkParams<float> eval_params = r.checkpoint.params;
  init_fusion_params(eval_params, eval_config, ef, seed);
  r.report = evaluate_model(eval_params, eval_config, ef, ds, c.evaluation);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline void write_log(const std::filesystem::path& path, const std::vector<TrainLogRecord>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : log) out << to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Ablation

enum class AblationAxis { kLayers, kPooling, kVanilla };

inline AblationAxis ablation_axis_from_string(const std::string& s) {
  if (s == "layers") return AblationAxis::kLayers;
  if (s == "pooling") return AblationAxis::kPooling;
  if (s == "vanilla") return AblationAxis::kVanilla;
  throw ConfigError("unknown ablation axis '" + s + "' (expected layers, pooling or vanilla)");
}

struct AblationCellSpec {
  std::string axis_value;
  FusionSpec train_fusion;
  std::optional<FusionSpec> eval_fusion;  // frozen cells only
};

inline std::vector<AblationCellSpec> ablation_cells(const ExperimentConfig& c, AblationAxis axis) {
  std::vector<AblationCellSpec> cells;
  switch (axis) {
    case AblationAxis::kLayers:
      if (c.layer_cells.empty()) throw ConfigError("layers ablation needs ablation.layers cells");
      for (const auto& cell : c.layer_cells) {
        if (cell.frozen)
          cells.push_back({cell.name, FusionSpec{}, cell.fusion});
        else
          cells.push_back({cell.name, cell.fusion, std::nullopt});
      }
      break;
    case AblationAxis::kPooling:
      if (c.fusion.empty()) throw ConfigError("pooling ablation needs fusion taps");
      for (Pooling p : c.pooling_values) {
        FusionSpec f = c.fusion;
        for (auto& t : f.taps) t.mode = p;
        cells.push_back({to_string(p), f, std::nullopt});
      }
      break;
    case AblationAxis::kVanilla:
      if (c.fusion.empty()) throw ConfigError("vanilla ablation needs fusion taps for the fused row");
      cells.push_back({"vanilla", FusionSpec{}, std::nullopt});
      cells.push_back({"fused", c.fusion, std::nullopt});
      break;
  }
  for (const auto& cell : cells) {
    validate(cell.train_fusion, with_taps_for(c.backbone, cell.train_fusion));
    if (cell.eval_fusion) validate(*cell.eval_fusion, with_taps_for(c.backbone, *cell.eval_fusion));
  }
  return cells;
}

struct AblationRow {
  std::string axis_value;
  std::uint64_t seed = 0;
  double acc1 = 0, acc5 = 0, acc10 = 0, map = 0;
};

struct AblationTable {
  std::string axis;
  std::vector<AblationRow> rows;

  /// Mean of each metric per axis value, in first-appearance order.
  std::vector<AblationRow> means() const {
    std::vector<AblationRow> out;
    std::map<std::string, std::size_t> count;
    for (const auto& r : rows) {
      auto it = std::find_if(out.begin(), out.end(), [&](const AblationRow& m) { return m.axis_value == r.axis_value; });
      if (it == out.end()) {
        out.push_back({r.axis_value, 0, 0, 0, 0, 0});
        it = out.end() - 1;
      }
      it->acc1 += r.acc1;
      it->acc5 += r.acc5;
      it->acc10 += r.acc10;
      it->map += r.map;
      ++count[r.axis_value];
    }
    for (auto& m : out) {
      const double n = static_cast<double>(count[m.axis_value]);
      m.acc1 /= n;
      m.acc5 /= n;
      m.acc10 /= n;
      m.map /= n;
    }
    return out;
  }

  AblationRow mean_of(const std::string& value) const {
    for (const auto& m : means())
      if (m.axis_value == value) return m;
    throw ConfigError("no ablation rows for '" + value + "'");
  }
};

inline std::string to_csv(const AblationTable& t) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << "axis_value,seed,acc1,acc5,acc10,map\n";
  for (const auto& r : t.rows)
    out << r.axis_value << ',' << r.seed << ',' << r.acc1 << ',' << r.acc5 << ',' << r.acc10 << ',' << r.map << '\n';
  for (const auto& m : t.means())
    out << m.axis_value << ",mean," << m.acc1 << ',' << m.acc5 << ',' << m.acc10 << ',' << m.map << '\n';
  return out.str();
}

inline nlohmann::json to_json(const AblationTable& t) {
  auto row = [](const AblationRow& r) {
    return nlohmann::json{{"axis_value", r.axis_value}, {"acc1", r.acc1}, {"acc5", r.acc5},
                          {"acc10", r.acc10}, {"map", r.map}};
  };
  nlohmann::json rows = nlohmann::json::array(), means = nlohmann::json::array();
  for (const auto& r : t.rows) {
    auto j = row(r);
    j["seed"] = r.seed;
    rows.push_back(j);
  }
  for (const auto& m : t.means()) means.push_back(row(m));
  return {{"axis", t.axis}, {"rows", rows}, {"means", means}};
}

inline AblationRow row_from(const std::string& value, std::uint64_t seed, const RetrievalReport& r) {
  auto acc = [&](std::size_t k) { return r.acc.count(k) ? r.acc.at(k) : std::nan(""); };
  return {value, seed, acc(1), acc(5), acc(10), r.map};
}

/// Trains and evaluates every (cell, seed) pair. Each cell's artifacts go
/// to <out>/<axis_value>/seed<k>/ when `out` is non-empty.
inline AblationTable run_ablation(const ExperimentConfig& c, AblationAxis axis, const synth::Dataset& ds,
                                  const std::filesystem::path& out = {},
                                  const std::function<void(const AblationRow&, const RunResult&)>& on_cell = {}) {
  ExperimentConfig cfg = c;
  for (std::size_t k : {1, 5, 10})
    if (std::find(cfg.evaluation.ks.begin(), cfg.evaluation.ks.end(), k) == cfg.evaluation.ks.end())
      cfg.evaluation.ks.push_back(k);
  AblationTable table;
  table.axis = axis == AblationAxis::kLayers ? "layers" : axis == AblationAxis::kPooling ? "pooling" : "vanilla";
  for (const auto& cell : ablation_cells(cfg, axis)) {
    for (std::uint64_t seed : cfg.seeds) {
      RunResult r = run_training(cfg, ds, cell.train_fusion, seed, cell.eval_fusion);
      table.rows.push_back(row_from(cell.axis_value, seed, r.report));
      if (!out.empty()) {
        const auto dir = out / cell.axis_value / ("seed" + std::to_string(seed));
        save_checkpoint(r.checkpoint, dir / "checkpoint");
        write_log(dir / "train_log.jsonl", r.log);
        write_json(dir / "report.json", to_json(r.report));
      }
      if (on_cell) on_cell(table.rows.back(), r);
    }
  }
  return table;
}

}  // namespace cdim
