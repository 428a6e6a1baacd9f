#include "ranwatch/detect.hpp"

#include "ranwatch/metrics.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace ranwatch::detect {

double t_cdf(double t, double df) {
  if (!(df >= 1.0) || !std::isfinite(t)) throw DetectError("t_cdf: domain violation");
  return boost::math::cdf(boost::math::students_t_distribution<double>(df), t);
}

double t_quantile(double p, double df) {
  if (!(p > 0.0 && p < 1.0) || !(df >= 1.0)) throw DetectError("t_quantile: domain violation");
  if (p == 0.5) return 0.0;
  return boost::math::quantile(boost::math::students_t_distribution<double>(df), p);
}

std::size_t Detection::count() const {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
}

// ---------------------------------------------------------------------------
// z-score

Detection zscore_detect(std::span<const double> series, double threshold) {
  const std::size_t n = series.size();
  Detection d{std::vector<bool>(n, false), std::vector<double>(n, 0.0)};
  if (n < 2) return d;
  long double sum = 0.0L;
  for (double x : series) sum += x;
  const long double mean = sum / static_cast<long double>(n);
  long double ss = 0.0L;
  for (double x : series) ss += (x - mean) * (x - mean);
  const double sd = static_cast<double>(std::sqrt(ss / static_cast<long double>(n - 1)));
  if (sd == 0.0) return d;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = std::abs(static_cast<double>(series[i] - mean)) / sd;
    d.scores[i] = z;
    d.flags[i] = z > threshold;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Generalized ESD
//
// The remaining points are kept as a contiguous range of a value-sorted
// index array: the most extreme point relative to any center is always at
// one of the two ends. Classical statistics are updated by subtracting the
// removed point; the median is read off the middle of the range and the MAD
// comes from merging outward from it.

double esd_critical_value(std::size_t n, std::size_t i, double alpha) {
  if (i == 0 || n < i + 2) throw DetectError("esd_critical_value: need n >= i + 2");
  const double cnt = static_cast<double>(n - i + 1);
  const double df = static_cast<double>(n - i - 1);
  const double p = 1.0 - alpha / (2.0 * cnt);
  const double t = t_quantile(p, df);
  return static_cast<double>(n - i) * t / std::sqrt((df + t * t) * cnt);
}

namespace {

constexpr double kMadScale = 1.4826;

class EsdState {
public:
  explicit EsdState(std::span<const double> x) : x_(x), order_(x.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) {
      return x_[a] < x_[b] || (x_[a] == x_[b] && a < b);
    });
    lo_ = 0;
    hi_ = x.size() - 1;
    long double total = 0.0L;
    for (double v : x) total += v;
    center_ = total / static_cast<long double>(x.size());
    for (double v : x) {
      sum_ += v - center_;
      sumsq_ += (v - center_) * (v - center_);
    }
  }

  std::size_t remaining() const { return hi_ - lo_ + 1; }

  // Mean and sample standard deviation of the remaining points.
  std::pair<double, double> classical() const {
    const auto cnt = static_cast<long double>(remaining());
    const long double mean_off = sum_ / cnt;
    long double var = (sumsq_ - sum_ * mean_off) / (cnt - 1.0L);
    if (var < 0.0L) var = 0.0L;
    return {static_cast<double>(center_ + mean_off), static_cast<double>(std::sqrt(var))};
  }

  // Median and 1.4826 * MAD of the remaining points.
  std::pair<double, double> robust() const {
    const std::size_t cnt = remaining();
    const double med = middle(cnt, [&](std::size_t k) { return value(lo_ + k); });
    // Deviations in increasing order: walk left from below the median and
    // right from at-or-above it.
    std::size_t r = lo_ + cnt / 2;
    while (r > lo_ && value(r - 1) >= med) --r;
    std::ptrdiff_t l = static_cast<std::ptrdiff_t>(r) - 1;
    const std::size_t need = cnt / 2 + 1;
    double prev = 0.0, cur = 0.0;
    for (std::size_t taken = 0; taken < need; ++taken) {
      const bool has_l = l >= static_cast<std::ptrdiff_t>(lo_);
      const bool has_r = r <= hi_;
      const double dl = has_l ? med - value(static_cast<std::size_t>(l)) : 0.0;
      const double dr = has_r ? value(r) - med : 0.0;
      prev = cur;
      if (has_l && (!has_r || dl < dr)) {
        cur = dl;
        --l;
      } else {
        cur = dr;
        ++r;
      }
    }
    const double mad = (cnt % 2 == 1) ? cur : 0.5 * (prev + cur);
    return {med, kMadScale * mad};
  }

  // Position (lo_ or hi_) of the point farthest from `m`, ties to the
  // smaller original index. Within a run of equal values at the high end
  // the smallest index is moved to hi_ first.
  std::size_t extreme(double m) {
    std::size_t best = hi_;
    for (std::size_t p = hi_; p > lo_ && value(p - 1) == value(hi_); --p) {
      if (order_[p - 1] < order_[best]) best = p - 1;
    }
    std::swap(order_[best], order_[hi_]);
    const double dlo = std::abs(value(lo_) - m);
    const double dhi = std::abs(value(hi_) - m);
    if (dlo > dhi) return lo_;
    if (dhi > dlo) return hi_;
    return order_[lo_] < order_[hi_] ? lo_ : hi_;
  }

  std::size_t remove(std::size_t pos) {
    const std::size_t idx = order_[pos];
    const long double off = x_[idx] - center_;
    sum_ -= off;
    sumsq_ -= off * off;
    if (pos == lo_) {
      ++lo_;
    } else {
      --hi_;
    }
    return idx;
  }

  double value(std::size_t pos) const { return x_[order_[pos]]; }

  template <typename F>
  static double middle(std::size_t cnt, F at) {
    if (cnt % 2 == 1) return at(cnt / 2);
    return 0.5 * (at(cnt / 2 - 1) + at(cnt / 2));
  }

private:
  std::span<const double> x_;
  std::vector<std::size_t> order_;
  std::size_t lo_ = 0, hi_ = 0;
  long double center_ = 0.0L, sum_ = 0.0L, sumsq_ = 0.0L;
};

}  // namespace

Detection esd_detect(std::span<const double> series, double alpha, std::size_t k_max, bool robust) {
  const std::size_t n = series.size();
  if (!(alpha > 0.0 && alpha < 1.0)) throw DetectError("esd_detect: alpha must be in (0, 1)");
  if (n <= k_max + 2) throw DetectError("esd_detect: series too short for k_max");
  Detection d{std::vector<bool>(n, false), std::vector<double>(n, 0.0)};
  if (k_max == 0) return d;

  EsdState state(series);
  bool warned = false;
  auto stats = [&]() {
    if (robust) {
      auto rs = state.robust();
      if (rs.second > 0.0) return rs;
      if (!warned) {
        spdlog::warn("robust ESD: MAD is zero, using mean and standard deviation");
        warned = true;
      }
    }
    return state.classical();
  };

  std::vector<std::size_t> removed;
  std::vector<double> r_values;
  std::size_t j = 0;
  for (std::size_t i = 1; i <= k_max; ++i) {
    const auto [m, s] = stats();
    const std::size_t pos = state.extreme(m);
    const double dev = std::abs(state.value(pos) - m);
    const double r = s > 0.0 ? dev / s : 0.0;
    removed.push_back(state.remove(pos));
    r_values.push_back(r);
    if (r > esd_critical_value(n, i, alpha)) j = i;
  }

  const auto [m, s] = stats();
  for (std::size_t i = 0; i < n; ++i) d.scores[i] = s > 0.0 ? std::abs(series[i] - m) / s : 0.0;
  for (std::size_t i = 0; i < removed.size(); ++i) {
    d.scores[removed[i]] = r_values[i];
    if (i < j) d.flags[removed[i]] = true;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(Method m) { return m == Method::zscore ? "zscore" : "esd"; }

Method method_from_string(const std::string& s) {
  if (s == "zscore") return Method::zscore;
  if (s == "esd") return Method::esd;
  throw DetectError("unknown detection method '" + s + "'");
}

void DetectorConfig::validate() const {
  if (!(z_threshold > 0.0)) throw DetectError("z_threshold must be positive");
  if (!(esd_alpha > 0.0 && esd_alpha < 1.0)) throw DetectError("esd_alpha must be in (0, 1)");
  if (!(esd_kmax_frac > 0.0 && esd_kmax_frac <= 0.5)) throw DetectError("esd_kmax_frac must be in (0, 0.5]");
}

std::size_t DetectorConfig::k_max(std::size_t n) const {
  return static_cast<std::size_t>(std::floor(esd_kmax_frac * static_cast<double>(n)));
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
  auto methods = nlohmann::json::array();
  for (auto m : c.method_map) methods.push_back(to_string(m));
  j = {{"z_threshold", c.z_threshold},
       {"esd_alpha", c.esd_alpha},
       {"esd_kmax_frac", c.esd_kmax_frac},
       {"robust", c.robust},
       {"method_map", methods}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
  c = DetectorConfig{};
  c.z_threshold = j.value("z_threshold", c.z_threshold);
  c.esd_alpha = j.value("esd_alpha", c.esd_alpha);
  c.esd_kmax_frac = j.value("esd_kmax_frac", c.esd_kmax_frac);
  c.robust = j.value("robust", c.robust);
  if (j.contains("method_map")) {
    for (const auto& m : j.at("method_map")) c.method_map.push_back(method_from_string(m.get<std::string>()));
  }
  c.validate();
}

// ---------------------------------------------------------------------------
// Residuals

std::size_t ResidualPanel::evaluable_count() const {
  return static_cast<std::size_t>(std::count(evaluable.begin(), evaluable.end(), true));
}

std::vector<double> ResidualPanel::series(std::size_t cell, std::size_t signal) const {
  std::vector<double> out;
  out.reserve(evaluable_count());
  const auto& m = residual.at(cell);
  for (std::size_t t = 0; t < evaluable.size(); ++t) {
    if (evaluable[t]) out.push_back(m(static_cast<Eigen::Index>(signal), static_cast<Eigen::Index>(t)));
  }
  return out;
}

double ResidualPanel::mse() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& m : residual) {
    for (std::size_t t = 0; t < evaluable.size(); ++t) {
      if (!evaluable[t]) continue;
      sum += m.col(static_cast<Eigen::Index>(t)).squaredNorm();
      n += static_cast<std::size_t>(m.rows());
    }
  }
  if (n == 0) throw DetectError("no evaluable residuals");
  return sum / static_cast<double>(n);
}

ResidualPanel residuals(const nn::Model& model, const TimeSeriesPanel& panel, const SwGraph& sw,
                        const WindowSpec& spec) {
  const auto& cfg = model.config();
  if (cfg.history != spec.history || cfg.horizon != spec.horizon) {
    throw nn::ShapeError("window spec does not match the model's history/horizon");
  }
  if (cfg.feature_dim != 1) throw nn::ShapeError("residuals expect a single feature per node");
  if (sw.num_nodes() != panel.num_signals()) throw nn::ShapeError("SW graph size does not match the panel");

  const auto k = static_cast<Eigen::Index>(panel.num_signals());
  const auto t_len = static_cast<Eigen::Index>(panel.length());
  ResidualPanel res;
  res.residual.assign(panel.num_cells(), Eigen::MatrixXd::Zero(k, t_len));
  res.prediction.assign(panel.num_cells(), Eigen::MatrixXd::Zero(k, t_len));
  res.evaluable.assign(panel.length(), false);

  WindowSampler sampler(panel, sw, spec);
  for (std::size_t b = 0; b < sampler.size(); ++b) {
    const WindowBatch batch = sampler.at(b);
    const Eigen::MatrixXd out = model.forward(batch);
    for (std::size_t s = 0; s < batch.num_samples(); ++s) {
      const auto& ref = batch.origin[s];
      const auto t = static_cast<Eigen::Index>(ref.start + spec.history);
      for (Eigen::Index node = 0; node < k; ++node) {
        const double pred = out(static_cast<Eigen::Index>(s) * k + node, 0);
        res.prediction[ref.cell](node, t) = pred;
        res.residual[ref.cell](node, t) = std::abs(pred - panel.values[ref.cell](node, t));
      }
      res.evaluable[static_cast<std::size_t>(t)] = true;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Panel detection

namespace {

Detection run_method(Method m, std::span<const double> series, const DetectorConfig& cfg) {
  if (m == Method::zscore) return zscore_detect(series, cfg.z_threshold);
  const std::size_t k = cfg.k_max(series.size());
  if (k == 0 || series.size() <= k + 2) {
    return Detection{std::vector<bool>(series.size(), false), std::vector<double>(series.size(), 0.0)};
  }
  return esd_detect(series, cfg.esd_alpha, k, cfg.robust);
}

// Scatters a detection over the evaluable columns of row `signal`.
void scatter(const Detection& d, const std::vector<bool>& evaluable, std::size_t signal, Mask& flags,
             Eigen::MatrixXd& scores) {
  std::size_t i = 0;
  const auto row = static_cast<Eigen::Index>(signal);
  for (std::size_t t = 0; t < evaluable.size(); ++t) {
    if (!evaluable[t]) continue;
    flags(row, static_cast<Eigen::Index>(t)) = d.flags[i];
    scores(row, static_cast<Eigen::Index>(t)) = d.scores[i];
    ++i;
  }
}

}  // namespace

PanelDetection detect_panel(const ResidualPanel& res, const DetectorConfig& cfg) {
  cfg.validate();
  const std::size_t k = res.num_signals();
  if (cfg.method_map.size() != k) throw DetectError("method_map must name one method per signal");
  const auto rows = static_cast<Eigen::Index>(k);
  const auto cols = static_cast<Eigen::Index>(res.length());

  PanelDetection out;
  out.methods = cfg.method_map;
  out.labels.flags.assign(res.num_cells(), Mask::Constant(rows, cols, false));
  out.scores.assign(res.num_cells(), Eigen::MatrixXd::Zero(rows, cols));
  for (std::size_t c = 0; c < res.num_cells(); ++c) {
    for (std::size_t s = 0; s < k; ++s) {
      const auto series = res.series(c, s);
      scatter(run_method(cfg.method_map[s], series, cfg), res.evaluable, s, out.labels.flags[c], out.scores[c]);
    }
  }
  return out;
}

std::vector<Method> calibrate_methods(const ResidualPanel& res, const LabelSet& validation,
                                      const DetectorConfig& cfg) {
  cfg.validate();
  const std::size_t k = res.num_signals();
  std::vector<Method> methods(k, Method::zscore);
  if (validation.num_cells() != res.num_cells()) throw DetectError("validation labels cover a different panel");

  std::size_t positives = 0;
  for (const auto& m : validation.flags) {
    for (std::size_t t = 0; t < res.length(); ++t) {
      if (res.evaluable[t]) positives += static_cast<std::size_t>(m.col(static_cast<Eigen::Index>(t)).count());
    }
  }
  if (positives == 0) {
    spdlog::warn("no labeled validation points; every signal uses z-score");
    return methods;
  }

  for (std::size_t s = 0; s < k; ++s) {
    std::vector<bool> truth, z_pred, esd_pred;
    for (std::size_t c = 0; c < res.num_cells(); ++c) {
      const auto series = res.series(c, s);
      const auto z = run_method(Method::zscore, series, cfg);
      const auto e = run_method(Method::esd, series, cfg);
      z_pred.insert(z_pred.end(), z.flags.begin(), z.flags.end());
      esd_pred.insert(esd_pred.end(), e.flags.begin(), e.flags.end());
      for (std::size_t t = 0; t < res.length(); ++t) {
        if (res.evaluable[t]) {
          truth.push_back(validation.flags[c](static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)));
        }
      }
    }
    const double f1_z = metrics::prf1(z_pred, truth).f1;
    const double f1_e = metrics::prf1(esd_pred, truth).f1;
    methods[s] = f1_e > f1_z ? Method::esd : Method::zscore;
    spdlog::debug("signal {}: F1 zscore {:.4f}, esd {:.4f}", s, f1_z, f1_e);
  }
  return methods;
}

void save_detections_csv(const TimeSeriesPanel& panel, const ResidualPanel& res, const PanelDetection& det,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DetectError("cannot write " + path.string());
  out << "cell_id,signal,timestamp,flag,score,method\n";
  char buf[64];
  for (std::size_t c = 0; c < res.num_cells(); ++c) {
    for (std::size_t s = 0; s < res.num_signals(); ++s) {
      const std::string method = to_string(det.methods.at(s));
      for (std::size_t t = 0; t < res.length(); ++t) {
        if (!res.evaluable[t]) continue;
        const auto row = static_cast<Eigen::Index>(s), col = static_cast<Eigen::Index>(t);
        auto end = std::to_chars(buf, buf + sizeof buf, det.scores[c](row, col)).ptr;
        out << panel.cell_ids[c] << ',' << panel.signal_names[s] << ',' << format_iso8601(panel.timestamps[t]) << ','
            << (det.labels.flags[c](row, col) ? 1 : 0) << ',' << std::string_view(buf, end - buf) << ',' << method
            << '\n';
      }
    }
  }
}

}  // namespace ranwatch::detect
