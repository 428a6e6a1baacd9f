#include "ranwatch/runner.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ranwatch {

void to_json(json& j, const AnnotationConfig& c) {
  auto areas = json::array();
  for (auto a : c.areas) areas.push_back(to_string(a));
  j = {{"anomaly_prob", c.anomaly_prob}, {"areas", areas},       {"amplitude", c.amplitude},
       {"propagate", c.propagate},       {"damping", c.damping}, {"scenario", to_string(c.scenario)},
       {"shift_width", c.shift_width}};
}

void from_json(const json& j, AnnotationConfig& c) {
  AnnotationConfig d;
  c.anomaly_prob = j.value("anomaly_prob", d.anomaly_prob);
  c.areas = d.areas;
  if (j.contains("areas")) {
    c.areas.clear();
    for (const auto& a : j.at("areas")) c.areas.push_back(area_from_string(a.get<std::string>()));
  }
  c.amplitude = j.value("amplitude", d.amplitude);
  c.propagate = j.value("propagate", d.propagate);
  c.damping = j.value("damping", d.damping);
  c.scenario = scenario_from_string(j.value("scenario", to_string(d.scenario)));
  c.shift_width = j.value("shift_width", d.shift_width);
}

void to_json(json& j, const SyntheticProfile& p) {
  j = {{"baseline_min", p.baseline_min},
       {"baseline_max", p.baseline_max},
       {"cell_scale_spread", p.cell_scale_spread},
       {"daily_amplitude", p.daily_amplitude},
       {"daily_period", p.daily_period},
       {"noise_std", p.noise_std},
       {"coupling", p.coupling},
       {"start", format_iso8601(p.start)},
       {"step", p.step}};
}

void from_json(const json& j, SyntheticProfile& p) {
  SyntheticProfile d;
  p.baseline_min = j.value("baseline_min", d.baseline_min);
  p.baseline_max = j.value("baseline_max", d.baseline_max);
  p.cell_scale_spread = j.value("cell_scale_spread", d.cell_scale_spread);
  p.daily_amplitude = j.value("daily_amplitude", d.daily_amplitude);
  p.daily_period = j.value("daily_period", d.daily_period);
  p.noise_std = j.value("noise_std", d.noise_std);
  p.coupling = j.value("coupling", d.coupling);
  p.start = j.contains("start") ? parse_iso8601(j.at("start").get<std::string>()) : d.start;
  p.step = j.value("step", d.step);
}

}  // namespace ranwatch

namespace ranwatch::runner {

// ---------------------------------------------------------------------------
// Configuration

std::array<AnnotationConfig, 3> ExperimentConfig::default_annotations() {
  std::array<AnnotationConfig, 3> a;
  a[0].areas.clear();
  a[0].anomaly_prob = 0.0;
  a[2].propagate = true;
  return a;
}

nn::ModelConfig ExperimentConfig::desk_model() {
  nn::ModelConfig m;
  m.embed_dim = 8;
  m.depth = 1;
  m.cheb_order = 2;
  m.history = 12;
  return m;
}

nn::TrainConfig ExperimentConfig::desk_train() {
  nn::TrainConfig t;
  t.learning_rate = 1e-2;
  t.batch_size = 64;
  t.epochs = 20;
  return t;
}

WindowSpec ExperimentConfig::windows() const {
  return {model.history, model.horizon, stride, train.batch_size};
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (dataset < 0 || dataset > 2) fail("dataset id must be 0, 1 or 2");
  if (data.source != "generate" && data.source != "csv") fail("data.source must be 'generate' or 'csv'");
  if (data.source == "csv" && !fs::exists(data.csv)) fail("panel CSV '" + data.csv.string() + "' does not exist");
  if (!data.sw_graph.empty() && !fs::exists(data.sw_graph)) {
    fail("SW graph file '" + data.sw_graph.string() + "' does not exist");
  }
  if (data.source == "generate") {
    if (data.n_cells < 1 || data.k < 1) fail("data.n_cells and data.k must be positive");
    if (data.length < model.history + model.horizon + 1) fail("data.length is too short for one window");
  }
  if (model.feature_dim != 1) fail("model.feature_dim must be 1");
  if (stride < 1) fail("stride must be at least 1");
  if (!(holdout >= 0.0 && holdout <= 0.9)) fail("holdout must be in [0, 0.9]");
  if (!detector.method_map.empty() && data.source == "generate" && detector.method_map.size() != data.k) {
    fail("detector.method_map needs one entry per signal");
  }
  try {
    model.validate();
    train.validate();
    detector.validate();
    for (std::size_t id = 1; id < annotation.size(); ++id) annotation[id].validate();
    if (fl) {
      if (fl->strategies.empty() || fl->layouts.empty()) fail("fl.strategies and fl.layouts must be non-empty");
      for (const auto& layout : fl->layouts) {
        auto p = fed::FlConfig::preset(fl->strategies[0], layout, fl->lambda);
        p.mp_steps = fl->mp_steps;
        p.validate();
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    fail(e.what());
  }
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"seed", c.seed},
           {"data",
            {{"source", c.data.source},
             {"csv", c.data.csv.string()},
             {"n_cells", c.data.n_cells},
             {"k", c.data.k},
             {"length", c.data.length},
             {"sw_graph", c.data.sw_graph.string()},
             {"profile", c.data.profile}}},
           {"dataset", c.dataset},
           {"annotation", {{"1", c.annotation[1]}, {"2", c.annotation[2]}}},
           {"model", c.model},
           {"train", c.train},
           {"stride", c.stride},
           {"detect", c.detector},
           {"calibrate", c.calibrate},
           {"baseline", c.baseline},
           {"holdout", c.holdout},
           {"out", c.out.string()}};
  if (c.fl) {
    auto strategies = json::array();
    for (auto s : c.fl->strategies) strategies.push_back(fed::to_string(s));
    j["fl"] = {{"strategies", strategies}, {"layouts", c.fl->layouts},   {"lambda", c.fl->lambda},
               {"sim_clamp", c.fl->sim_clamp}, {"mp_steps", c.fl->mp_steps}, {"parallel", c.fl->parallel}};
  }
}

void from_json(const json& j, ExperimentConfig& c) {
  static const std::vector<std::string> known = {"seed",   "data",      "dataset",  "annotation", "model",
                                                 "train",  "stride",    "detect",   "calibrate",  "baseline",
                                                 "holdout", "fl",       "out"};
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    ExperimentConfig d;
    c = d;
    c.seed = j.value("seed", d.seed);
    if (j.contains("data")) {
      const auto& s = j.at("data");
      c.data.source = s.value("source", d.data.source);
      c.data.csv = s.value("csv", std::string{});
      c.data.n_cells = s.value("n_cells", d.data.n_cells);
      c.data.k = s.value("k", d.data.k);
      c.data.length = s.value("length", d.data.length);
      c.data.sw_graph = s.value("sw_graph", std::string{});
      if (s.contains("profile")) c.data.profile = s.at("profile").get<SyntheticProfile>();
    }
    c.dataset = j.value("dataset", d.dataset);
    if (j.contains("annotation")) {
      for (const auto& [key, value] : j.at("annotation").items()) {
        if (key != "1" && key != "2") throw ConfigError("annotation keys must be \"1\" or \"2\"");
        auto& slot = c.annotation[key == "1" ? 1 : 2];
        json base = slot;
        base.merge_patch(value);
        slot = base.get<AnnotationConfig>();
      }
    }
    // Sub-objects may be partial: fill from the desk defaults.
    auto merged = [&](const char* key, json base) {
      if (j.contains(key)) base.merge_patch(j.at(key));
      return base;
    };
    c.model = merged("model", d.model).get<nn::ModelConfig>();
    c.train = merged("train", d.train).get<nn::TrainConfig>();
    c.stride = j.value("stride", d.stride);
    if (j.contains("detect")) c.detector = j.at("detect").get<detect::DetectorConfig>();
    c.calibrate = j.value("calibrate", d.calibrate);
    c.baseline = j.value("baseline", d.baseline);
    c.holdout = j.value("holdout", d.holdout);
    if (j.contains("fl") && !j.at("fl").is_null()) {
      const auto& s = j.at("fl");
      FlSection f;
      if (s.contains("strategies")) {
        f.strategies.clear();
        for (const auto& name : s.at("strategies")) f.strategies.push_back(fed::strategy_from_string(name.get<std::string>()));
      }
      f.layouts = s.value("layouts", f.layouts);
      f.lambda = s.value("lambda", f.lambda);
      f.sim_clamp = s.value("sim_clamp", f.sim_clamp);
      f.mp_steps = s.value("mp_steps", f.mp_steps);
      f.parallel = s.value("parallel", f.parallel);
      c.fl = f;
    }
    c.out = j.value("out", d.out.string());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return j.get<ExperimentConfig>();
}

// ---------------------------------------------------------------------------
// Pipelines

namespace {

SwGraph load_sw_graph(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw RunError("cannot open SW graph '" + path.string() + "'");
  return SwGraph::from_json(json::parse(in));
}

nn::Model model_from(const nn::ModelConfig& cfg, const std::vector<double>& values) {
  return nn::Model(cfg, nn::ModelWeights{nn::model_manifest(cfg), values});
}

std::vector<detect::Method> choose_methods(const ExperimentConfig& cfg, const detect::ResidualPanel& res,
                                           const LabelSet& truth, std::size_t k) {
  if (!cfg.detector.method_map.empty()) return cfg.detector.method_map;
  if (cfg.calibrate && truth.count() > 0) return detect::calibrate_methods(res, truth, cfg.detector);
  return std::vector<detect::Method>(k, detect::Method::zscore);
}

// Restricts residuals to the scored steps so detection never sees the rest.
void restrict_to_scored(const ExperimentConfig& cfg, detect::ResidualPanel& res) {
  const auto keep = scored_steps(cfg, res);
  for (std::size_t t = 0; t < keep.size(); ++t) {
    if (keep[t]) continue;
    res.evaluable[t] = false;
    for (auto& m : res.residual) m.col(static_cast<Eigen::Index>(t)).setZero();
  }
}

}  // namespace

PreparedData prepare_from(TimeSeriesPanel raw, LabelSet truth, std::vector<CellMeta> cells, SwGraph sw) {
  raw.validate();
  if (cells.size() != raw.num_cells()) throw RunError("cell metadata does not match the panel");
  if (sw.num_nodes() != raw.num_signals()) throw RunError("SW graph does not match the panel's signal count");
  PreparedData d;
  d.scaled = robust_scale(raw).panel;
  d.panel_hash = panel_fingerprint(raw);
  d.raw = std::move(raw);
  d.truth = std::move(truth);
  d.cells = std::move(cells);
  d.sw = std::move(sw);
  return d;
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  cfg.validate();
  TimeSeriesPanel panel;
  std::vector<CellMeta> cells;
  SwGraph sw = cfg.data.sw_graph.empty() ? chain_sw_graph(cfg.data.k) : load_sw_graph(cfg.data.sw_graph);
  if (cfg.data.source == "csv") {
    panel = load_panel_csv(cfg.data.csv);
    if (cfg.data.sw_graph.empty()) sw = chain_sw_graph(panel.num_signals());
    cells = default_cells(panel.num_cells());
    for (std::size_t c = 0; c < cells.size(); ++c) cells[c].id = panel.cell_ids[c];
  } else {
    cells = default_cells(cfg.data.n_cells);
    std::vector<std::string> ids;
    for (const auto& m : cells) ids.push_back(m.id);
    if (sw.num_nodes() != cfg.data.k) throw ConfigError("SW graph has a different node count than data.k");
    panel = generate_synthetic_panel(ids, sw, cfg.data.length, cfg.seed, cfg.data.profile);
  }
  LabelSet truth = LabelSet::empty_like(panel);
  if (cfg.dataset > 0) {
    auto a = annotate(panel, cells, cfg.annotation[static_cast<std::size_t>(cfg.dataset)], sw, cfg.seed + 1);
    panel = std::move(a.panel);
    truth = std::move(a.labels);
  }
  return prepare_from(std::move(panel), std::move(truth), std::move(cells), std::move(sw));
}

std::vector<bool> scored_steps(const ExperimentConfig& cfg, const detect::ResidualPanel& res) {
  auto keep = res.evaluable;
  if (cfg.holdout > 0.0) {
    const auto cut = static_cast<std::size_t>(std::floor((1.0 - cfg.holdout) * static_cast<double>(keep.size())));
    for (std::size_t t = 0; t < std::min(cut, keep.size()); ++t) keep[t] = false;
  }
  return keep;
}

CentralRun run_central(const PreparedData& data, const ExperimentConfig& cfg, bool no_edges) {
  const SwGraph sw = no_edges ? data.sw.without_edges() : data.sw;
  const auto spec = cfg.windows();
  auto tc = cfg.train;
  tc.seed = cfg.seed;

  TimeSeriesPanel train_panel = data.scaled;
  if (cfg.holdout > 0.0) {
    const auto cut = static_cast<std::size_t>(std::floor((1.0 - cfg.holdout) * static_cast<double>(data.scaled.length())));
    if (cut < spec.history + spec.horizon) throw ConfigError("holdout leaves no training window");
    train_panel = data.scaled.slice_time(0, cut);
  }
  auto model = nn::Model::initialized(cfg.model, cfg.seed);
  CentralRun run;
  run.epoch_mse = nn::train(model, WindowSampler(train_panel, sw, spec), tc).epoch_mse;
  run.weights = model.weights();

  run.residuals = detect::residuals(model, data.scaled, sw, spec);
  restrict_to_scored(cfg, run.residuals);
  run.loss = run.residuals.mse();
  auto det_cfg = cfg.detector;
  det_cfg.method_map = choose_methods(cfg, run.residuals, data.truth, data.scaled.num_signals());
  run.detection = detect::detect_panel(run.residuals, det_cfg);
  if (data.truth.count() > 0) run.scores = metrics::prf1(run.detection.labels, data.truth, run.residuals.evaluable);
  spdlog::info("central{} loss {:.6f}{}", no_edges ? " (no edges)" : "", run.loss,
               run.scores ? fmt::format(", f1 {:.3f}", run.scores->f1) : std::string{});
  return run;
}

std::vector<fed::FlConfig> fl_presets(const ExperimentConfig& cfg) {
  std::vector<fed::FlConfig> out;
  if (!cfg.fl) return out;
  for (auto s : cfg.fl->strategies) {
    for (const auto& layout : cfg.fl->layouts) {
      auto p = fed::FlConfig::preset(s, layout, cfg.fl->lambda);
      p.seed = cfg.seed;
      p.sim_clamp = cfg.fl->sim_clamp;
      p.mp_steps = cfg.fl->mp_steps;
      p.parallel = cfg.fl->parallel;
      out.push_back(p);
    }
  }
  return out;
}

FedRun run_federated(const PreparedData& data, const ExperimentConfig& cfg, const fed::FlConfig& fl,
                     const metrics::ClReference& reference, const std::vector<detect::Method>& methods) {
  fed::LocalSetup setup;
  setup.model = cfg.model;
  setup.train = cfg.train;
  setup.windows = cfg.windows();
  setup.sw = data.sw;
  setup.detector = cfg.detector;
  setup.detector->method_map = methods;

  const auto clients =
      fed::make_clients(fed::partition_clients(data.scaled, build_nw_graph(data.cells), &reference.labels), setup);
  FedRun run;
  run.config = fl;
  run.result = fed::run_rounds(clients, fl, setup);

  auto& o = run.outcome;
  o.strategy = fl.name();
  o.panel_hash = data.panel_hash;
  o.footprint = run.result.footprint;

  auto res = detect::residuals(model_from(cfg.model, run.result.global), data.scaled, data.sw, setup.windows);
  restrict_to_scored(cfg, res);
  o.central_loss = res.mse();
  o.central_labels = detect::detect_panel(res, *setup.detector).labels;
  run.mean_local_loss = o.central_loss;

  if (fl.personalized()) {
    LabelSet labels;
    double total = 0.0;
    for (std::size_t c = 0; c < data.scaled.num_cells(); ++c) {
      const auto slice = data.scaled.slice_cell(c);
      auto local = detect::residuals(model_from(cfg.model, run.result.personalized[c]), slice, data.sw, setup.windows);
      restrict_to_scored(cfg, local);
      total += local.mse();
      labels.flags.push_back(detect::detect_panel(local, *setup.detector).labels.flags[0]);
    }
    o.personalized_loss = total / static_cast<double>(data.scaled.num_cells());
    o.personalized_labels = std::move(labels);
    run.mean_local_loss = *o.personalized_loss;
  }
  return run;
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  return format_iso8601(static_cast<Timestamp>(now));
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw RunError("cannot create output directory '" + dir.string() + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunError("cannot write '" + path.string() + "'");
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw RunError("cannot read '" + path.string() + "'");
  return json::parse(in);
}

// Everything but `created_at` is a pure function of the inputs.
void write_metadata(const ExperimentConfig& cfg, const std::string& command, std::uint64_t panel_hash,
                    json extra = json::object()) {
  json meta = {{"command", command}, {"seed", cfg.seed}, {"panel_hash", hex(panel_hash)}, {"config", cfg},
               {"created_at", now_iso8601()}};
  meta.update(extra);
  write_text(cfg.out / (command + ".meta.json"), meta.dump(2) + "\n");
}

json cells_to_json(const std::vector<CellMeta>& cells) {
  auto arr = json::array();
  for (const auto& c : cells) {
    json j = {{"id", c.id}, {"area", to_string(c.area)}};
    if (c.position) j["position"] = {c.position->first, c.position->second};
    arr.push_back(j);
  }
  return arr;
}

std::vector<CellMeta> cells_from_json(const json& arr) {
  std::vector<CellMeta> cells;
  for (const auto& j : arr) {
    CellMeta c{j.at("id").get<std::string>(), area_from_string(j.at("area").get<std::string>()), std::nullopt};
    if (j.contains("position")) c.position = std::pair{j["position"][0].get<double>(), j["position"][1].get<double>()};
    cells.push_back(c);
  }
  return cells;
}

// Inputs written by `generate`.
PreparedData load_generated(const ExperimentConfig& cfg) {
  const auto panel_path = cfg.out / "panel.csv";
  if (!fs::exists(panel_path)) throw RunError("no panel at '" + panel_path.string() + "'; run generate first");
  auto panel = load_panel_csv(panel_path);
  auto labels = load_labels_csv(panel, cfg.out / "labels.csv");
  auto cells = cells_from_json(read_json(cfg.out / "cells.json"));
  auto sw = SwGraph::from_json(read_json(cfg.out / "sw_graph.json"));
  return prepare_from(std::move(panel), std::move(labels), std::move(cells), std::move(sw));
}

std::string train_log_csv(const std::vector<double>& epoch_mse) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,mse\n";
  for (std::size_t e = 0; e < epoch_mse.size(); ++e) out << e + 1 << ',' << epoch_mse[e] << '\n';
  return out.str();
}

json methods_json(const std::vector<detect::Method>& methods) {
  auto arr = json::array();
  for (auto m : methods) arr.push_back(detect::to_string(m));
  return arr;
}

std::vector<detect::Method> methods_from(const json& arr) {
  std::vector<detect::Method> out;
  for (const auto& m : arr) out.push_back(detect::method_from_string(m.get<std::string>()));
  return out;
}

struct StoredReference {
  metrics::ClReference reference;
  std::vector<detect::Method> methods;
};

StoredReference load_reference(const ExperimentConfig& cfg, const TimeSeriesPanel& panel) {
  const auto path = cfg.out / "cl_reference.json";
  if (!fs::exists(path)) throw RunError("no CL reference at '" + path.string() + "'; run train-central first");
  const auto j = read_json(path);
  StoredReference s;
  s.reference.panel_hash = std::stoull(j.at("panel_hash").get<std::string>(), nullptr, 16);
  s.reference.dataset = j.at("dataset").get<std::string>();
  s.reference.loss = j.at("loss").get<double>();
  s.reference.evaluable = j.at("evaluable").get<std::vector<bool>>();
  s.reference.labels = load_labels_csv(panel, cfg.out / "cl_labels.csv");
  s.methods = methods_from(j.at("methods"));
  return s;
}

}  // namespace

void cmd_generate(const ExperimentConfig& cfg) {
  const auto data = prepare_data(cfg);
  ensure_dir(cfg.out);
  save_panel_csv(data.raw, cfg.out / "panel.csv");
  save_labels_csv(data.raw, data.truth, cfg.out / "labels.csv");
  write_text(cfg.out / "cells.json", cells_to_json(data.cells).dump(2) + "\n");
  write_text(cfg.out / "sw_graph.json", data.sw.to_json().dump(2) + "\n");
  write_metadata(cfg, "generate", data.panel_hash,
                 {{"labeled_points", data.truth.count()}, {"injection_units", "raw, before robust scaling"}});
  spdlog::info("generated {} cells x {} signals x {} steps, {} labeled points", data.raw.num_cells(),
               data.raw.num_signals(), data.raw.length(), data.truth.count());
}

void cmd_train_central(const ExperimentConfig& cfg, bool no_edges) {
  cfg.validate();
  const auto data = load_generated(cfg);
  const std::string dataset = std::to_string(cfg.dataset);

  auto emit = [&](const CentralRun& run, const std::string& sub, const std::string& name) {
    const auto dir = cfg.out / sub;
    ensure_dir(dir);
    nn::save_checkpoint(dir / "model", cfg.model, run.weights);
    write_text(dir / "train_log.csv", train_log_csv(run.epoch_mse));
    detect::save_detections_csv(data.scaled, run.residuals, run.detection, dir / "detections.csv");
    save_labels_csv(data.raw, run.detection.labels, dir / "pred_labels.csv");
    metrics::Report report;
    report.panel_hash = data.panel_hash;
    report.rows.push_back({name, dataset, "central", run.loss, run.scores, std::nullopt, std::nullopt});
    report.save(dir / "report.json", dir / "report.csv");
  };

  ensure_dir(cfg.out);
  if (no_edges) {
    emit(run_central(data, cfg, true), "baseline", "Disconnected");
  } else {
    const auto run = run_central(data, cfg, false);
    emit(run, "central", "GNN-based");
    // The CL reference the FL runs are scored against.
    save_labels_csv(data.raw, run.detection.labels, cfg.out / "cl_labels.csv");
    const json ref = {{"panel_hash", hex(data.panel_hash)},
                      {"dataset", dataset},
                      {"loss", run.loss},
                      {"methods", methods_json(run.detection.methods)},
                      {"evaluable", run.residuals.evaluable}};
    write_text(cfg.out / "cl_reference.json", ref.dump() + "\n");
    if (cfg.baseline) emit(run_central(data, cfg, true), "baseline", "Disconnected");
  }
  write_metadata(cfg, no_edges ? "train-central-baseline" : "train-central", data.panel_hash);
}

void cmd_train_fed(const ExperimentConfig& cfg) {
  cfg.validate();
  if (!cfg.fl) throw ConfigError("config has no fl section");
  const auto data = load_generated(cfg);
  const auto stored = load_reference(cfg, data.raw);
  if (stored.reference.panel_hash != data.panel_hash) throw RunError("CL reference was built on a different panel");

  const auto root = cfg.out / "fed";
  ensure_dir(root);
  std::vector<metrics::FlOutcome> outcomes;
  for (const auto& fl : fl_presets(cfg)) {
    const auto run = run_federated(data, cfg, fl, stored.reference, stored.methods);
    const auto dir = root / fl.name();
    ensure_dir(dir);
    write_text(dir / "rounds.ndjson", fed::round_log_ndjson(run.result, fl));
    write_text(dir / "similarity.csv", fed::similarity_csv(run.result));
    nn::save_checkpoint(dir / "global", cfg.model, nn::ModelWeights{nn::model_manifest(cfg.model), run.result.global});
    save_labels_csv(data.raw, run.outcome.central_labels, dir / "labels_central.csv");
    if (run.outcome.personalized_labels) {
      save_labels_csv(data.raw, *run.outcome.personalized_labels, dir / "labels_personalized.csv");
    }
    outcomes.push_back(run.outcome);
  }
  metrics::fl_vs_cl_report(outcomes, stored.reference).save(root / "report.json", root / "report.csv");
  write_metadata(cfg, "train-fed", data.panel_hash);
}

void cmd_detect(const ExperimentConfig& cfg, const fs::path& checkpoint) {
  cfg.validate();
  const auto data = load_generated(cfg);
  const fs::path stem = checkpoint.empty() ? cfg.out / "central" / "model" : checkpoint;
  const auto model_cfg = nn::read_checkpoint_config(stem);
  const nn::Model model(model_cfg, nn::load_checkpoint(stem, model_cfg));
  WindowSpec spec = cfg.windows();
  spec.history = model_cfg.history;
  spec.horizon = model_cfg.horizon;

  auto res = detect::residuals(model, data.scaled, data.sw, spec);
  restrict_to_scored(cfg, res);
  auto det_cfg = cfg.detector;
  if (det_cfg.method_map.empty() && fs::exists(cfg.out / "cl_reference.json")) {
    det_cfg.method_map = methods_from(read_json(cfg.out / "cl_reference.json").at("methods"));
  } else if (det_cfg.method_map.empty()) {
    det_cfg.method_map.assign(data.scaled.num_signals(), detect::Method::zscore);
  }
  const auto det = detect::detect_panel(res, det_cfg);
  const auto dir = cfg.out / "detect";
  ensure_dir(dir);
  detect::save_detections_csv(data.scaled, res, det, dir / "detections.csv");
  save_labels_csv(data.raw, det.labels, dir / "pred_labels.csv");
  write_metadata(cfg, "detect", data.panel_hash);
  spdlog::info("{} points flagged, residual MSE {:.6f}", det.labels.count(), res.mse());
}

void cmd_evaluate(const ExperimentConfig& cfg, const fs::path& pred, const fs::path& truth) {
  const auto panel_path = cfg.out / "panel.csv";
  if (!fs::exists(panel_path)) throw RunError("no panel at '" + panel_path.string() + "'");
  const auto panel = load_panel_csv(panel_path);
  const auto p = load_labels_csv(panel, pred);
  const auto t = load_labels_csv(panel, truth);
  const auto scores = metrics::prf1(p, t);
  metrics::Report report;
  report.panel_hash = panel_fingerprint(panel);
  report.rows.push_back({pred.stem().string(), std::to_string(cfg.dataset), "central", std::nullopt, scores,
                         std::nullopt, std::nullopt});
  ensure_dir(cfg.out);
  report.save(cfg.out / "evaluation.json", cfg.out / "evaluation.csv");
  std::cout << report.to_csv();
}

void cmd_report(const ExperimentConfig& cfg) {
  metrics::Report merged;
  bool any = false;
  for (const auto* sub : {"central", "baseline", "fed"}) {
    const auto path = cfg.out / sub / "report.json";
    if (!fs::exists(path)) continue;
    const auto r = metrics::Report::from_json(read_json(path));
    if (any && r.panel_hash != merged.panel_hash) throw RunError("reports come from different panels");
    merged.panel_hash = r.panel_hash;
    merged.rows.insert(merged.rows.end(), r.rows.begin(), r.rows.end());
    any = true;
  }
  if (!any) throw RunError("no reports under '" + cfg.out.string() + "'");
  merged.save(cfg.out / "report.json", cfg.out / "report.csv");
  std::cout << merged.to_csv();
}

// ---------------------------------------------------------------------------
// CLI

void configure_logging() {
  const char* env = std::getenv("RANWATCH_LOG");
  if (!env) return;
  const auto level = spdlog::level::from_str(env);
  spdlog::set_level(level);
}

int run_cli(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Graph-based anomaly detection on RAN telemetry with federated learning simulation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "experiment config (JSON)");
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--out", out_dir, "output directory");

  auto* generate = app.add_subcommand("generate", "write a synthetic (or loaded) annotated panel");
  auto* central = app.add_subcommand("train-central", "train the centralized model and detect anomalies");
  std::string edges = "sw";
  central->add_option("--edges", edges, "'sw' for the SW graph, 'none' for the disconnected baseline")
      ->check(CLI::IsMember({"sw", "none"}));
  auto* fedcmd = app.add_subcommand("train-fed", "run every configured FL preset");
  auto* detectcmd = app.add_subcommand("detect", "detect anomalies with a stored checkpoint");
  std::string checkpoint;
  detectcmd->add_option("--checkpoint", checkpoint, "checkpoint stem (default <out>/central/model)");
  auto* evaluate = app.add_subcommand("evaluate", "score a predicted label CSV against a reference");
  std::string pred, truth;
  evaluate->add_option("--pred", pred, "predicted labels CSV")->required();
  evaluate->add_option("--truth", truth, "reference labels CSV")->required();
  auto* report = app.add_subcommand("report", "merge the central, baseline and FL reports");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    if (generate->parsed()) cmd_generate(cfg);
    if (central->parsed()) cmd_train_central(cfg, edges == "none");
    if (fedcmd->parsed()) cmd_train_fed(cfg);
    if (detectcmd->parsed()) cmd_detect(cfg, checkpoint);
    if (evaluate->parsed()) cmd_evaluate(cfg, pred, truth);
    if (report->parsed()) cmd_report(cfg);
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 2;
  } catch (const nn::DivergenceError& e) {
    spdlog::error("numeric divergence: {}", e.what());
    return 3;
  } catch (const fed::AllClientsFailed& e) {
    spdlog::error("numeric divergence: {}", e.what());
    return 3;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}

}  // namespace ranwatch::runner
