// Outlier decision on reconstruction residuals: z-score thresholding and
// Generalized ESD test, with per-signal method selection.
#pragma once

#include "ranwatch/dataset.hpp"
#include "ranwatch/nn.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ranwatch::detect {

class DetectError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Student-t distribution

double t_cdf(double t, double df);
/// Inverse CDF of Student's t. Requires 0 < p < 1 and df >= 1.
double t_quantile(double p, double df);

// ---------------------------------------------------------------------------
// Single-series detectors

struct Detection {
  std::vector<bool> flags;
  std::vector<double> scores;  // |z| for z-score, R_i (or final deviation) for ESD

  std::size_t count() const;
};

/// Flags points with |x - mean| / s > threshold, s the sample standard
/// deviation. A constant series produces no flags.
Detection zscore_detect(std::span<const double> series, double threshold);

/// Generalized ESD test for up to `k_max` outliers. Robust mode
/// uses the median and 1.4826 * MAD; an iteration whose MAD is zero falls
/// back to mean and standard deviation. Requires n > k_max + 2.
Detection esd_detect(std::span<const double> series, double alpha, std::size_t k_max, bool robust);

/// Critical value lambda_i for the i-th ESD iteration (1-based) on n points.
double esd_critical_value(std::size_t n, std::size_t i, double alpha);

// ---------------------------------------------------------------------------
// Panel-level detection

enum class Method { zscore, esd };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct DetectorConfig {
  double z_threshold = 3.0;
  double esd_alpha = 0.05;
  double esd_kmax_frac = 0.10;
  bool robust = false;
  std::vector<Method> method_map;  // one entry per signal

  void validate() const;
  std::size_t k_max(std::size_t n) const;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

/// |prediction - observation| per (cell, signal, t). Points never predicted
/// (the first `history` steps, or gaps left by a stride > 1) are marked
/// not evaluable and hold zero.
struct ResidualPanel {
  std::vector<Eigen::MatrixXd> residual;     // per cell, K x T
  std::vector<Eigen::MatrixXd> prediction;   // per cell, K x T
  std::vector<bool> evaluable;               // length T, shared by all cells

  std::size_t num_cells() const { return residual.size(); }
  std::size_t num_signals() const { return residual.empty() ? 0 : static_cast<std::size_t>(residual[0].rows()); }
  std::size_t length() const { return evaluable.size(); }
  std::size_t evaluable_count() const;
  /// Evaluable residuals of one (cell, signal) series, in time order.
  std::vector<double> series(std::size_t cell, std::size_t signal) const;
  /// Mean squared residual over evaluable points.
  double mse() const;
};

/// Next-step residuals of `model` on every window of `panel`. With horizon
/// > 1 only the first predicted step is scored.
ResidualPanel residuals(const nn::Model& model, const TimeSeriesPanel& panel, const SwGraph& sw,
                        const WindowSpec& spec);

struct PanelDetection {
  LabelSet labels;
  std::vector<Eigen::MatrixXd> scores;  // per cell, K x T
  std::vector<Method> methods;
};

PanelDetection detect_panel(const ResidualPanel& res, const DetectorConfig& cfg);

/// Picks, per signal, the method with the higher F1 against `validation`
/// over all cells; ties go to z-score. With no positive label anywhere the
/// result is all z-score.
std::vector<Method> calibrate_methods(const ResidualPanel& res, const LabelSet& validation,
                                      const DetectorConfig& cfg);

/// `cell_id,signal,timestamp,flag,score,method`, one row per evaluable point.
void save_detections_csv(const TimeSeriesPanel& panel, const ResidualPanel& res, const PanelDetection& det,
                         const std::filesystem::path& path);

}  // namespace ranwatch::detect
