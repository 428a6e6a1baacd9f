// Experiment configuration, centralized and federated pipelines, and the
// command-line front end that writes their artifacts.
#pragma once

#include "ranwatch/dataset.hpp"
#include "ranwatch/detect.hpp"
#include "ranwatch/fedsim.hpp"
#include "ranwatch/graphcore.hpp"
#include "ranwatch/metrics.hpp"
#include "ranwatch/nn.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ranwatch {

void to_json(nlohmann::json& j, const AnnotationConfig& c);
void from_json(const nlohmann::json& j, AnnotationConfig& c);
void to_json(nlohmann::json& j, const SyntheticProfile& p);
void from_json(const nlohmann::json& j, SyntheticProfile& p);

}  // namespace ranwatch

namespace ranwatch::runner {

/// Invalid or inconsistent experiment configuration (exit code 2).
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A pipeline precondition is not met, e.g. a missing input artifact.
class RunError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct DataSection {
  std::string source = "generate";  // "generate" or "csv"
  std::filesystem::path csv;        // panel CSV when source == "csv"
  std::size_t n_cells = 10;
  std::size_t k = 8;
  std::size_t length = 1024;
  std::filesystem::path sw_graph;   // JSON graph file; a chain of K counters when empty
  SyntheticProfile profile;
};

struct FlSection {
  std::vector<fed::Strategy> strategies{fed::Strategy::fedavg, fed::Strategy::fedavg_reg, fed::Strategy::fedgraph,
                                        fed::Strategy::fedgraph_reg};
  std::vector<std::string> layouts{"5x20", "10x10", "20x5"};
  double lambda = 0.1;
  bool sim_clamp = true;
  std::size_t mp_steps = 1;
  bool parallel = false;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataSection data;
  /// 0: no annotation, 1: injected anomalies, 2: injected anomalies with
  /// one-hop propagation. Index 0 of `annotation` is unused.
  int dataset = 1;
  std::array<AnnotationConfig, 3> annotation = default_annotations();
  nn::ModelConfig model = desk_model();
  nn::TrainConfig train = desk_train();
  std::size_t stride = 1;
  detect::DetectorConfig detector;
  /// Choose z-score or ESD per signal by F1 against the injected labels.
  bool calibrate = true;
  /// Also train the disconnected baseline in train-central.
  bool baseline = false;
  /// Fraction of the time axis held out from training and used alone for
  /// scoring. Zero trains and scores on the same data.
  double holdout = 0.0;
  std::optional<FlSection> fl;
  std::filesystem::path out = "out";

  static std::array<AnnotationConfig, 3> default_annotations();
  /// Single-core defaults; nn::ModelConfig{} holds the full-size ones.
  static nn::ModelConfig desk_model();
  static nn::TrainConfig desk_train();

  WindowSpec windows() const;
  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown top-level keys are rejected.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// In-memory pipelines

struct PreparedData {
  TimeSeriesPanel raw;     // annotated, original units
  TimeSeriesPanel scaled;  // robust-scaled per cell and signal
  LabelSet truth;          // injected labels (all false for dataset 0)
  std::vector<CellMeta> cells;
  SwGraph sw;
  std::uint64_t panel_hash = 0;  // fingerprint of `raw`
};

/// Generates (or loads) and annotates the panel described by `cfg`.
PreparedData prepare_data(const ExperimentConfig& cfg);
/// Builds the same structure from an existing panel and label set.
PreparedData prepare_from(TimeSeriesPanel raw, LabelSet truth, std::vector<CellMeta> cells, SwGraph sw);

struct CentralRun {
  nn::ModelWeights weights;
  std::vector<double> epoch_mse;
  detect::ResidualPanel residuals;
  detect::PanelDetection detection;
  double loss = 0.0;  // final MSE over the scored windows
  std::optional<metrics::ClassificationScores> scores;  // against injected labels, when there are any
};

/// Trains on the scaled panel and runs detection. With `no_edges` the SW
/// graph loses every edge (the disconnected baseline).
CentralRun run_central(const PreparedData& data, const ExperimentConfig& cfg, bool no_edges = false);

struct FedRun {
  fed::FlConfig config;
  fed::FlResult result;
  metrics::FlOutcome outcome;
  double mean_local_loss = 0.0;  // mean over clients of their own model's local MSE
};

/// One FL experiment. Clients score locally against `reference` labels and
/// detect with `methods`.
FedRun run_federated(const PreparedData& data, const ExperimentConfig& cfg, const fed::FlConfig& fl,
                     const metrics::ClReference& reference, const std::vector<detect::Method>& methods);

/// Every preset in `cfg.fl` in strategy-major order.
std::vector<fed::FlConfig> fl_presets(const ExperimentConfig& cfg);

/// Mask of time steps used for scoring: evaluable and, with a holdout,
/// inside the held-out tail.
std::vector<bool> scored_steps(const ExperimentConfig& cfg, const detect::ResidualPanel& res);

// ---------------------------------------------------------------------------
// Commands. Each writes into `cfg.out` and returns normally or throws.

void cmd_generate(const ExperimentConfig& cfg);
void cmd_train_central(const ExperimentConfig& cfg, bool no_edges);
void cmd_train_fed(const ExperimentConfig& cfg);
void cmd_detect(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint);
void cmd_evaluate(const ExperimentConfig& cfg, const std::filesystem::path& pred, const std::filesystem::path& truth);
void cmd_report(const ExperimentConfig& cfg);

/// Full CLI: parses arguments, runs one subcommand, maps errors to exit
/// codes (0 ok, 1 other failure, 2 configuration, 3 numeric divergence).
int run_cli(int argc, char** argv);

/// Applies RANWATCH_LOG (trace, debug, info, warn, error, off) to spdlog.
void configure_logging();

}  // namespace ranwatch::runner
