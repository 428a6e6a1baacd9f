// Single-process federated learning simulation: one client per cell, local
// GConvLSTM training, FedAvg or similarity-graph (FedGraph) aggregation.
#pragma once

#include "ranwatch/dataset.hpp"
#include "ranwatch/detect.hpp"
#include "ranwatch/graphcore.hpp"
#include "ranwatch/metrics.hpp"
#include "ranwatch/nn.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ranwatch::fed {

class FlError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Every client of a round diverged.
class AllClientsFailed : public FlError {
public:
  using FlError::FlError;
};

enum class Strategy { fedavg, fedavg_reg, fedgraph, fedgraph_reg };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct FlConfig {
  Strategy strategy = Strategy::fedavg;
  double lambda = 0.1;  // used by the _reg strategies
  std::size_t rounds = 5;
  std::size_t local_epochs = 20;
  std::uint64_t seed = 0;
  bool sim_clamp = true;
  std::size_t mp_steps = 1;
  bool parallel = false;        // train clients of a round on worker threads
  bool record_weights = false;  // keep every round's weight vectors in the records

  bool regularized() const { return strategy == Strategy::fedavg_reg || strategy == Strategy::fedgraph_reg; }
  bool personalized() const { return strategy == Strategy::fedgraph || strategy == Strategy::fedgraph_reg; }
  std::size_t total_epochs() const { return rounds * local_epochs; }
  /// "FedAvg-5x20", "FedGraphReg-20x5", ...
  std::string name() const;
  void validate() const;

  /// `layout` is "IxE", e.g. "10x10".
  static FlConfig preset(Strategy s, const std::string& layout, double lambda = 0.1);
};

void to_json(nlohmann::json& j, const FlConfig& c);
void from_json(const nlohmann::json& j, FlConfig& c);

/// The standard round/epoch splits of a 100-epoch budget.
const std::vector<std::string>& preset_layouts();

// ---------------------------------------------------------------------------
// Aggregation (server side: sees weight vectors only)

using WeightVec = std::vector<double>;

/// Unweighted mean in client order. Computed as offsets from the first
/// vector, so N identical inputs return that vector bit-exactly.
WeightVec fedavg_aggregate(const std::vector<WeightVec>& weights);

/// Cosine similarity; 0 when either vector is zero.
double cosine_sim(std::span<const double> a, std::span<const double> b);

/// Symmetric N x N cosine matrix with unit diagonal.
Eigen::MatrixXd similarity_matrix(const std::vector<WeightVec>& weights);

struct FedGraphResult {
  std::vector<WeightVec> personalized;
  WeightVec global;
  Eigen::MatrixXd similarity;  // raw cosine
  Eigen::MatrixXd relation;    // clamped (if requested), unit diagonal
  Eigen::MatrixXd mixing;      // row-stochastic: personalized = mixing * weights
};

/// Personalized weights by `mp_steps` row-normalized message-passing hops
/// over the complete client graph with relation weights; the global model
/// is the mean of the personalized ones.
FedGraphResult fedgraph_aggregate(const std::vector<WeightVec>& weights, bool clamp = true, std::size_t mp_steps = 1);

/// I * n_params / n_points, as a fraction.
double comm_footprint(std::size_t rounds, std::size_t n_params, std::size_t n_points);

// ---------------------------------------------------------------------------
// Clients

struct ClientData {
  CellMeta meta;
  TimeSeriesPanel slice;             // this cell only
  std::optional<LabelSet> reference; // labels for local scoring, this cell only
};

/// One client per cell, each holding only its own slice. `reference`, when
/// given, is split the same way.
std::vector<ClientData> partition_clients(const TimeSeriesPanel& panel, const NwGraph& nw,
                                          const LabelSet* reference = nullptr);

/// Everything a client needs to train and score locally.
struct LocalSetup {
  nn::ModelConfig model;
  nn::TrainConfig train;  // learning rate, batch size, optimizer; epochs/seed/loss are set per round
  WindowSpec windows;
  SwGraph sw;
  std::optional<detect::DetectorConfig> detector;  // enables precision/recall/F1 per round
};

struct LocalMetrics {
  double loss = 0.0;  // MSE of the trained local model on its own windows
  std::optional<metrics::ClassificationScores> scores;
};

/// What a client sends to the server. Aggregation reads nothing else.
struct ClientUpdate {
  std::string cell_id;
  WeightVec weights;
  LocalMetrics metrics;
  bool failed = false;
};

class Client {
public:
  Client(ClientData data, const LocalSetup& setup);

  const std::string& cell_id() const { return data_.meta.id; }
  std::size_t num_points() const;

  /// Trains `epochs` epochs from `incoming`. A regularized loss is anchored
  /// at `incoming`. Divergence yields a failed update instead of throwing.
  ClientUpdate local_train(std::span<const double> incoming, std::size_t epochs, const nn::LossMode& loss,
                           std::uint64_t seed) const;

  /// Local MSE and scores of arbitrary weights on this client's data.
  LocalMetrics evaluate(std::span<const double> weights) const;

private:
  ClientData data_;
  LocalSetup setup_;
};

std::vector<Client> make_clients(std::vector<ClientData> data, const LocalSetup& setup);

/// Seed of client `index` in round `round`; round 0 of client 0 uses `seed`.
std::uint64_t client_seed(std::uint64_t seed, std::size_t round, std::size_t index);

// ---------------------------------------------------------------------------
// Rounds

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  std::vector<std::string> cell_ids;
  std::vector<LocalMetrics> metrics;
  std::vector<bool> failed;
  Eigen::MatrixXd similarity;  // raw cosine of the local weights; NaN rows for failed clients
  double footprint = 0.0;      // communication to date
  // Filled only with FlConfig::record_weights.
  std::vector<WeightVec> local;
  std::vector<WeightVec> personalized;
  WeightVec global;
};

struct FlResult {
  std::vector<RoundRecord> rounds;
  WeightVec global;
  std::vector<WeightVec> personalized;  // per client, what it would start the next round from
  double footprint = 0.0;
};

/// Runs `cfg.rounds` rounds from init_weights(setup.model, cfg.seed).
/// Throws AllClientsFailed if every client fails in some round.
FlResult run_rounds(const std::vector<Client>& clients, const FlConfig& cfg, const LocalSetup& setup);

/// One JSON object per round.
std::string round_log_ndjson(const FlResult& result, const FlConfig& cfg);
nlohmann::json round_to_json(const RoundRecord& r, const FlConfig& cfg);

/// `round,<a>|<b>,...`: one row per round, one column per client pair.
std::string similarity_csv(const FlResult& result);

}  // namespace ranwatch::fed
