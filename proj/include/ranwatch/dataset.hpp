// Telemetry panels: synthetic generation, CSV ingestion, robust scaling,
// anomaly injection and sliding-window batching.
#pragma once

#include "ranwatch/graphcore.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ranwatch {

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Seconds since the Unix epoch, UTC.
using Timestamp = std::int64_t;

inline constexpr Timestamp kQuarterHour = 15 * 60;
/// 2022-10-01T00:00:00Z
inline constexpr Timestamp kDefaultStart = 1664582400;

std::string format_iso8601(Timestamp t);
Timestamp parse_iso8601(const std::string& s);

/// Per-cell K x T counter matrices on a shared time axis.
struct TimeSeriesPanel {
  std::vector<std::string> cell_ids;
  std::vector<std::string> signal_names;
  std::vector<Timestamp> timestamps;
  std::vector<Eigen::MatrixXd> values;  // one K x T matrix per cell

  std::size_t num_cells() const { return cell_ids.size(); }
  std::size_t num_signals() const { return signal_names.size(); }
  std::size_t length() const { return timestamps.size(); }

  /// Single-cell view copy, used to hand a client its own slice.
  TimeSeriesPanel slice_cell(std::size_t cell) const;
  /// Columns [begin, end) of every cell.
  TimeSeriesPanel slice_time(std::size_t begin, std::size_t end) const;

  /// Throws DataError if shapes disagree or any value is non-finite.
  void validate() const;
};

/// 64-bit FNV-1a over ids, timestamps and values. Identifies a panel in reports.
std::uint64_t panel_fingerprint(const TimeSeriesPanel& panel);

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Point labels: one K x T mask per cell, true for anomalous points.
struct LabelSet {
  std::vector<Mask> flags;

  static LabelSet empty_like(const TimeSeriesPanel& panel);
  std::size_t count() const;
  std::size_t num_cells() const { return flags.size(); }
  friend bool operator==(const LabelSet& a, const LabelSet& b);
};

struct SyntheticProfile {
  double baseline_min = 50.0;
  double baseline_max = 500.0;
  double cell_scale_spread = 0.5;  // per-cell multiplier drawn in [1 - s, 1 + s]
  double daily_amplitude = 0.3;    // fraction of baseline
  std::size_t daily_period = 96;   // steps per day at 15 minutes
  double noise_std = 0.05;         // fraction of baseline
  double coupling = 0.6;           // lag-1 flow of parents' stochastic component
  Timestamp start = kDefaultStart;
  Timestamp step = kQuarterHour;
};

/// baseline + daily sinusoid + lagged flow along SW-graph edges + Gaussian noise.
/// Deterministic for a given seed. `sw` may be empty of edges (no flow).
TimeSeriesPanel generate_synthetic_panel(const std::vector<std::string>& cell_ids, const SwGraph& sw,
                                         std::size_t length, std::uint64_t seed,
                                         const SyntheticProfile& profile = {});

/// Closed-form noiseless part (baseline + sinusoid) of a generated signal.
double synthetic_deterministic_part(std::size_t cell, std::size_t signal, std::size_t t,
                                    std::size_t n_signals, std::uint64_t seed,
                                    const SyntheticProfile& profile);

/// Convenience overload with ids "cell_000"... and a chain SW graph.
TimeSeriesPanel generate_synthetic_panel(std::size_t n_cells, std::size_t k, std::size_t length,
                                         std::uint64_t seed, const SyntheticProfile& profile = {});

TimeSeriesPanel load_panel_csv(const std::filesystem::path& path);
void save_panel_csv(const TimeSeriesPanel& panel, const std::filesystem::path& path);

/// Labels in the same row layout as the panel CSV, with 0/1 entries.
void save_labels_csv(const TimeSeriesPanel& panel, const LabelSet& labels,
                     const std::filesystem::path& path);
LabelSet load_labels_csv(const TimeSeriesPanel& panel, const std::filesystem::path& path);

struct ScalerParams {
  static constexpr double kEpsilon = 1e-8;
  std::vector<Eigen::VectorXd> median;  // per cell, length K
  std::vector<Eigen::VectorXd> iqr;     // per cell, length K, floored at kEpsilon
};

/// Linear-interpolation quantile of an unsorted sample.
double quantile(std::vector<double> values, double q);
double median(std::vector<double> values);
/// 1.4826 * median absolute deviation.
double robust_std(const std::vector<double>& values);

struct ScaledPanel {
  TimeSeriesPanel panel;
  ScalerParams params;
};

ScaledPanel robust_scale(const TimeSeriesPanel& panel);
TimeSeriesPanel robust_unscale(const TimeSeriesPanel& scaled, const ScalerParams& params);

enum class Scenario { spike, drop_to_zero, level_shift };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

struct AnnotationConfig {
  double anomaly_prob = 0.01;
  /// Areas whose cells are degraded; an empty list selects no cell.
  std::vector<Area> areas{Area::airport};
  /// Per-signal amplitude in units of the signal's robust std. A single
  /// entry applies to every signal.
  std::vector<double> amplitude{8.0};
  bool propagate = false;
  double damping = 0.5;
  Scenario scenario = Scenario::spike;
  std::size_t shift_width = 8;

  bool selects(const CellMeta& cell) const;
  double amplitude_for(std::size_t signal) const;
  void validate() const;
};

struct Annotation {
  TimeSeriesPanel panel;
  LabelSet labels;
  std::vector<std::size_t> abnormal_cells;
};

/// Injects degradations into the cells selected by `cfg` and labels every
/// degraded point, including one-hop propagation along SW-graph out-edges.
/// `cells` must align with the panel's cell order.
Annotation annotate(const TimeSeriesPanel& panel, const std::vector<CellMeta>& cells,
                    const AnnotationConfig& cfg, const SwGraph& sw, std::uint64_t seed);

/// Origin of one window inside a panel.
struct WindowRef {
  std::size_t cell = 0;
  std::size_t start = 0;  // first history step
};

/// Row-major rank-3 buffer.
struct Tensor3 {
  std::size_t d0 = 0, d1 = 0, d2 = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(std::size_t a, std::size_t b, std::size_t c) : d0(a), d1(b), d2(c), data(a * b * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j, std::size_t k) { return data[(i * d1 + j) * d2 + k]; }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const { return data[(i * d1 + j) * d2 + k]; }
};

/// x: (K*B) x F x history, y: (K*B) x F x horizon, plus the batched graph.
struct WindowBatch {
  Tensor3 x;
  Tensor3 y;
  BatchedGraph graph;
  std::vector<WindowRef> origin;  // one per sample

  std::size_t num_samples() const { return origin.size(); }
};

struct WindowSpec {
  std::size_t history = 192;
  std::size_t horizon = 1;
  std::size_t stride = 1;
  std::size_t batch_size = 64;
};

std::size_t windows_per_cell(std::size_t length, const WindowSpec& spec);

/// Random access over the batches of a panel, materialized on demand.
class BatchSource {
public:
  virtual ~BatchSource() = default;
  virtual std::size_t size() const = 0;
  virtual WindowBatch at(std::size_t i) const = 0;
};

/// Windows enumerated cell by cell, start by start, chunked into batches;
/// the last partial batch is kept.
class WindowSampler final : public BatchSource {
public:
  WindowSampler(const TimeSeriesPanel& panel, const SwGraph& sw, WindowSpec spec);

  std::size_t size() const override;
  WindowBatch at(std::size_t i) const override;

  std::size_t num_windows() const { return refs_.size(); }
  const WindowSpec& spec() const { return spec_; }
  const TimeSeriesPanel& panel() const { return *panel_; }

private:
  const TimeSeriesPanel* panel_;
  SwGraph sw_;
  WindowSpec spec_;
  std::vector<WindowRef> refs_;
};

class VectorBatchSource final : public BatchSource {
public:
  explicit VectorBatchSource(std::vector<WindowBatch> batches) : batches_(std::move(batches)) {}
  std::size_t size() const override { return batches_.size(); }
  WindowBatch at(std::size_t i) const override { return batches_.at(i); }

private:
  std::vector<WindowBatch> batches_;
};

std::vector<WindowBatch> window_split(const TimeSeriesPanel& panel, const SwGraph& sw,
                                      const WindowSpec& spec);

}  // namespace ranwatch
