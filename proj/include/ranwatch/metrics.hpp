// Classification and reconstruction scores, and the FL-versus-centralized
// comparison report.
#pragma once

#include "ranwatch/dataset.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ranwatch::metrics {

class MetricsError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct ClassificationScores {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;

  /// Zero denominators give zero precision, recall or F1.
  static ClassificationScores from_counts(std::size_t tp, std::size_t fp, std::size_t fn);
};

void to_json(nlohmann::json& j, const ClassificationScores& s);

/// Counts over every (cell, signal, t). When `evaluable` is non-empty only
/// time steps marked true are scored.
ClassificationScores prf1(const LabelSet& pred, const LabelSet& truth, const std::vector<bool>& evaluable = {});
ClassificationScores prf1(const std::vector<bool>& pred, const std::vector<bool>& truth);

/// Mean squared difference over evaluable time steps of every cell.
double mse_metric(const TimeSeriesPanel& pred, const TimeSeriesPanel& target, const std::vector<bool>& evaluable = {});

/// One line of a results table: an architecture or FL strategy on a dataset.
struct ReportRow {
  std::string name;     // "GNN-based", "LSTM", "FedGraph-20x5", ...
  std::string dataset;  // "0", "1", "2"
  std::string model;    // "central" or "personalized"
  std::optional<double> loss;  // absent when only labels were compared
  std::optional<ClassificationScores> scores;
  std::optional<double> footprint;
  std::optional<double> loss_ratio;  // loss / centralized loss
};

struct Report {
  std::uint64_t panel_hash = 0;
  std::vector<ReportRow> rows;

  nlohmann::json to_json() const;
  static Report from_json(const nlohmann::json& j);
  /// `name,dataset,model,loss,precision,recall,f1,footprint,loss_ratio`.
  std::string to_csv() const;
  void save(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const;
};

/// Centralized outputs the FL runs are scored against.
struct ClReference {
  std::uint64_t panel_hash = 0;
  std::string dataset;
  LabelSet labels;
  std::vector<bool> evaluable;
  double loss = 0.0;
};

/// Final state of one FL run as seen by the evaluator.
struct FlOutcome {
  std::string strategy;
  std::uint64_t panel_hash = 0;
  double central_loss = 0.0;
  LabelSet central_labels;
  std::optional<double> personalized_loss;
  std::optional<LabelSet> personalized_labels;
  double footprint = 0.0;
};

/// Scores FL detections against the centralized reference labels (not the
/// injected ground truth), with loss ratios and communication footprint.
Report fl_vs_cl_report(const std::vector<FlOutcome>& runs, const ClReference& reference);

}  // namespace ranwatch::metrics
