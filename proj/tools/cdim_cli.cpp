// cdim: data generation, training, evaluation, gradient checks, heatmaps
// and ablations. Every command prints one JSON line on stdout.
//
// Exit codes: 0 ok, 2 configuration or usage error, 3 IO error,
// 4 numerical failure (NaN, divergence, gradient check above tolerance).

#include <CLI11.hpp>

#include <iostream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "cdim/checkpoint.hpp"
#include "cdim/experiment.hpp"
#include "cdim/model_check.hpp"

namespace fs = std::filesystem;
using namespace cdim;
using nlohmann::json;

namespace {

constexpr double kGradTolerance = 1e-3;

void emit(const json& j) { std::cout << j.dump() << std::endl; }

/// The tape allocates many large short-lived buffers; keep them in the heap
/// instead of returning them to the kernel every iteration.
void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    try {
      const long v = std::stol(tok);
      if (v < 1) throw ConfigError("K values must be >= 1");
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("bad K list '" + s + "'");
    }
  }
  if (ks.empty()) throw ConfigError("empty K list");
  return ks;
}

json report_summary(const RetrievalReport& r) {
  json acc = json::object();
  for (const auto& [k, v] : r.acc) acc[std::to_string(k)] = v;
  return {{"acc", acc},
          {"map", r.map},
          {"queries", r.per_query.size()},
          {"gallery_instances", r.gallery_instances},
          {"skipped_queries", r.skipped_queries}};
}

Tensor<float> load_image(const fs::path& path, const Shape& input_shape) {
  if (path.extension() != ".pgm") return cdtf::read<float>(path);
  const GrayImage g = read_pgm(path);
  const std::size_t c = input_shape.size() == 3 ? input_shape[2] : 1;
  Tensor<float> t(Shape{g.height, g.width, c});
  for (std::size_t i = 0; i < g.pixels.size(); ++i)
    for (std::size_t k = 0; k < c; ++k) t[i * c + k] = static_cast<float>(g.pixels[i]) / 255.f;
  return t;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config, mode = "aligned", out;
  std::size_t instances = 0, renders = 1;
  std::optional<std::size_t> train_instances;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const GenDataArgs& a) {
  synth::DatasetConfig dc;
  fs::path out = a.out;
  if (!a.config.empty()) {
    const ExperimentConfig c = load_experiment(a.config);
    dc = c.dataset;
    if (out.empty()) out = fs::path(c.output_dir) / "data";
  } else {
    if (!a.seed) throw ConfigError("--seed is required without --config");
    if (a.instances == 0) throw ConfigError("--instances is required without --config");
    dc.mode = synth::alignment_from_string(a.mode);
    dc.instances = a.instances;
    dc.renders = a.renders;
    dc.seed = *a.seed;
    dc.train_instances = a.instances / 2;
  }
  if (a.train_instances) dc.train_instances = *a.train_instances;
  if (out.empty()) throw ConfigError("--out is required");
  const synth::Dataset ds = synth::generate_dataset(dc);
  const fs::path manifest = synth::write_dataset(ds, out);
  emit({{"command", "gen-data"},
        {"manifest", manifest.string()},
        {"images", ds.items.size()},
        {"instances", dc.instances},
        {"train_instances", ds.instances(synth::Split::kTrain).size()},
        {"test_instances", ds.instances(synth::Split::kTest).size()},
        {"mode", synth::to_string(dc.mode)},
        {"seed", dc.seed}});
  return 0;
}

struct TrainArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  ExperimentConfig c = load_experiment(a.config);
  if (a.seed) c.seed = *a.seed;
  const fs::path out = a.out.empty() ? fs::path(c.output_dir) : fs::path(a.out);
  const synth::Dataset ds = experiment_dataset(c);
  const RunResult r = run_training(c, ds, c.fusion, c.seed);
  save_checkpoint(r.checkpoint, out / "checkpoint");
  write_log(out / "train_log.jsonl", r.log);
  write_json(out / "report.json", to_json(r.report));
  json s = report_summary(r.report);
  s["command"] = "train";
  s["checkpoint"] = (out / "checkpoint").string();
  s["epochs"] = r.log.size();
  s["iterations"] = r.log.empty() ? 0 : r.log.back().iteration;
  s["final_loss"] = r.log.empty() ? 0.0 : r.log.back().loss;
  s["seed"] = c.seed;
  s["seconds"] = r.seconds;
  emit(s);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, protocol = "single", ks = "1,5,10", out;
  std::string query_domain = "contour", gallery_domain = "filled", split = "test";
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const synth::Dataset ds = synth::load_dataset(a.data);
  RetrievalProtocol p;
  if (a.protocol != "single" && a.protocol != "multi") {
    throw ConfigError("--protocol must be single or multi, got '" + a.protocol + "'");
  }
  p.multi_query = a.protocol == "multi";
  p.ks = parse_ks(a.ks);
  p.query_domain = synth::domain_from_string(a.query_domain);
  p.gallery_domain = synth::domain_from_string(a.gallery_domain);
  p.split = synth::split_from_string(a.split);
  const RetrievalReport r = evaluate_model(ck.params, ck.backbone, ck.fusion, ds, p);
  if (!a.out.empty()) write_json(a.out, to_json(r));
  json s = report_summary(r);
  s["command"] = "eval";
  s["protocol"] = a.protocol;
  s["chance_acc1"] = r.gallery_instances ? 1.0 / static_cast<double>(r.gallery_instances) : 0.0;
  emit(s);
  return 0;
}

struct GradCheckArgs {
  std::string preset = "all";
  std::uint64_t seed = 1;
  std::size_t coordinates = 16;
  double h = 1e-6;
};

/// The composite each preset is trained with: aligned net with its flattened
/// tap under the triplet loss, view net with both GAP taps reduced to 64
/// under the classification loss.
std::pair<FusionSpec, Objective> preset_composite(const std::string& name) {
  if (name == "mini_aligned_net") return {{{{"conv3", Pooling::kFlatten}}, std::nullopt, true}, Objective::kTriplet};
  if (name == "mini_view_net") {
    return {{{{"blockA", Pooling::kGap}, {"blockB", Pooling::kGap}}, 64, true}, Objective::kClassification};
  }
  throw ConfigError("unknown backbone preset '" + name + "'");
}

int cmd_grad_check(const GradCheckArgs& a) {
  std::vector<std::string> names = a.preset == "all" ? preset_names() : std::vector<std::string>{a.preset};
  json per = json::object();
  double worst = 0;
  for (const auto& name : names) {
    const auto [spec, objective] = preset_composite(name);
    ModelCheckOptions opt;
    opt.coordinates_per_tensor = a.coordinates;
    opt.h = a.h;
    const ModelCheck m = check_model_gradients<float>(preset(name), spec, objective, a.seed, opt);
    per[name] = to_json(m);
    worst = std::max(worst, m.max_relative_error());
  }
  const bool ok = worst < kGradTolerance;
  emit({{"command", "grad-check"},
        {"max_relative_error", worst},
        {"tolerance", kGradTolerance},
        {"pass", ok},
        {"presets", per}});
  return ok ? 0 : 4;
}

struct VisualizeArgs {
  std::string checkpoint, image, tap, out;
  std::size_t channel = 0;
};

int cmd_visualize(const VisualizeArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Tensor<float> image = load_image(a.image, ck.backbone.input_shape);
  const GrayImage img = export_activation_heatmap(ck.params, ck.backbone, image, a.tap, a.channel, a.out);
  emit({{"command", "visualize"},
        {"out", a.out},
        {"tap", a.tap},
        {"channel", a.channel},
        {"width", img.width},
        {"height", img.height}});
  return 0;
}

struct AblateArgs {
  std::string config, axis, out;
};

int cmd_ablate(const AblateArgs& a) {
  const ExperimentConfig c = load_experiment(a.config);
  const AblationAxis axis = ablation_axis_from_string(a.axis);
  const fs::path out = a.out.empty() ? fs::path(c.output_dir) / ("ablate_" + a.axis) : fs::path(a.out);
  const synth::Dataset ds = experiment_dataset(c);
  const AblationTable t = run_ablation(c, axis, ds, out, [](const AblationRow& row, const RunResult& r) {
    std::cerr << row.axis_value << " seed " << row.seed << ": acc1 " << row.acc1 << " map " << row.map
              << " (" << r.seconds << " s)\n";
  });
  {
    std::ofstream csv(out / "table.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write " + (out / "table.csv").string());
    csv << to_csv(t);
  }
  write_json(out / "table.json", to_json(t));
  json s = to_json(t);
  s.erase("rows");
  s["command"] = "ablate";
  s["table"] = (out / "table.csv").string();
  emit(s);
  return 0;
}

int fail(int code, const std::string& kind, const std::string& what) {
  std::cerr << "error: " << what << '\n';
  emit({{"error", kind}, {"message", what}, {"exit_code", code}});
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"cdim: cross-domain instance matching with mid-level feature fusion"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Render a synthetic two-domain dataset");
  g->add_option("--config", gen.config, "Experiment config (dataset section)");
  g->add_option("--mode", gen.mode, "aligned or perturbed")->check(CLI::IsMember({"aligned", "perturbed"}));
  g->add_option("--instances", gen.instances, "Number of instances");
  g->add_option("--train-instances", gen.train_instances, "Instances in the training split (default half)");
  g->add_option("--renders", gen.renders, "Renders per instance and domain");
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--out", gen.out, "Output directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one model and evaluate it on the test split");
  t->add_option("--config", tr.config, "Experiment config")->required();
  t->add_option("--seed", tr.seed, "Override the config seed");
  t->add_option("--out", tr.out, "Override the output directory");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--protocol", ev.protocol, "single or multi query");
  e->add_option("--k", ev.ks, "Comma-separated K values");
  e->add_option("--query-domain", ev.query_domain, "filled or contour");
  e->add_option("--gallery-domain", ev.gallery_domain, "filled or contour");
  e->add_option("--split", ev.split, "train or test");
  e->add_option("--out", ev.out, "Write the full per-query report here");

  GradCheckArgs gc;
  auto* c = app.add_subcommand("grad-check", "Finite-difference check of the preset models");
  c->add_option("--preset", gc.preset, "Preset name or all");
  c->add_option("--seed", gc.seed, "Seed for parameters and inputs");
  c->add_option("--coordinates", gc.coordinates, "Coordinates per parameter tensor (0 = all)");
  c->add_option("--step", gc.h, "Finite-difference step");

  VisualizeArgs vi;
  auto* v = app.add_subcommand("visualize", "Write a channel activation heatmap as PGM");
  v->add_option("--checkpoint", vi.checkpoint, "Checkpoint directory")->required();
  v->add_option("--image", vi.image, "Input image (.cdtf or .pgm)")->required();
  v->add_option("--tap", vi.tap, "Layer name")->required();
  v->add_option("--channel", vi.channel, "Channel index")->required();
  v->add_option("--out", vi.out, "Output .pgm path")->required();

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Train and evaluate every cell of an ablation axis");
  a->add_option("--config", ab.config, "Experiment config")->required();
  a->add_option("--axis", ab.axis, "layers, pooling or vanilla")->required();
  a->add_option("--out", ab.out, "Override the output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*c) return cmd_grad_check(gc);
    if (*v) return cmd_visualize(vi);
    if (*a) return cmd_ablate(ab);
  } catch (const NumericalError& ex) {
    return fail(4, "numerical", ex.what());
  } catch (const IoError& ex) {
    return fail(3, "io", ex.what());
  } catch (const std::invalid_argument& ex) {  // ConfigError, ShapeError
    return fail(2, "config", ex.what());
  }
  return 2;
}
