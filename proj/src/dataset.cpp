#include "ranwatch/dataset.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ctime>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <unordered_map>

namespace ranwatch {

// ---------------------------------------------------------------------------
// Time axis

std::string format_iso8601(Timestamp t) {
  std::time_t tt = static_cast<std::time_t>(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Timestamp parse_iso8601(const std::string& s) {
  std::tm tm{};
  int consumed = 0;
  if (std::sscanf(s.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%n", &tm.tm_year, &tm.tm_mon, &tm.tm_mday,
                  &tm.tm_hour, &tm.tm_min, &tm.tm_sec, &consumed) != 6) {
    throw DataError("malformed timestamp '" + s + "'");
  }
  auto rest = s.substr(static_cast<std::size_t>(consumed));
  if (!rest.empty() && rest != "Z") throw DataError("unsupported timestamp suffix in '" + s + "'");
  tm.tm_year -= 1900;
  tm.tm_mon -= 1;
  return static_cast<Timestamp>(timegm(&tm));
}

// ---------------------------------------------------------------------------
// Panel

TimeSeriesPanel TimeSeriesPanel::slice_cell(std::size_t cell) const {
  TimeSeriesPanel out;
  out.cell_ids = {cell_ids.at(cell)};
  out.signal_names = signal_names;
  out.timestamps = timestamps;
  out.values = {values.at(cell)};
  return out;
}

TimeSeriesPanel TimeSeriesPanel::slice_time(std::size_t begin, std::size_t end) const {
  if (begin > end || end > length()) throw DataError("time slice out of range");
  TimeSeriesPanel out;
  out.cell_ids = cell_ids;
  out.signal_names = signal_names;
  out.timestamps.assign(timestamps.begin() + static_cast<std::ptrdiff_t>(begin),
                        timestamps.begin() + static_cast<std::ptrdiff_t>(end));
  for (const auto& m : values) {
    out.values.push_back(m.middleCols(static_cast<Eigen::Index>(begin),
                                      static_cast<Eigen::Index>(end - begin)));
  }
  return out;
}

void TimeSeriesPanel::validate() const {
  if (values.size() != cell_ids.size()) throw DataError("cell count mismatch");
  for (std::size_t c = 0; c < values.size(); ++c) {
    const auto& m = values[c];
    if (static_cast<std::size_t>(m.rows()) != num_signals() ||
        static_cast<std::size_t>(m.cols()) != length()) {
      throw DataError("cell '" + cell_ids[c] + "' has shape " + std::to_string(m.rows()) + "x" +
                      std::to_string(m.cols()));
    }
    if (!m.allFinite()) throw DataError("cell '" + cell_ids[c] + "' contains non-finite values");
  }
  for (std::size_t t = 1; t < timestamps.size(); ++t) {
    if (timestamps[t] <= timestamps[t - 1]) throw DataError("timestamps are not increasing");
  }
}

namespace {

struct Fnv1a {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  }
  void str(const std::string& s) {
    bytes(s.data(), s.size());
    bytes("\0", 1);
  }
};

}  // namespace

std::uint64_t panel_fingerprint(const TimeSeriesPanel& panel) {
  Fnv1a f;
  for (const auto& id : panel.cell_ids) f.str(id);
  for (const auto& s : panel.signal_names) f.str(s);
  f.bytes(panel.timestamps.data(), panel.timestamps.size() * sizeof(Timestamp));
  for (const auto& m : panel.values) f.bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  return f.h;
}

LabelSet LabelSet::empty_like(const TimeSeriesPanel& panel) {
  LabelSet l;
  for (std::size_t c = 0; c < panel.num_cells(); ++c) {
    l.flags.push_back(Mask::Constant(static_cast<Eigen::Index>(panel.num_signals()),
                                     static_cast<Eigen::Index>(panel.length()), false));
  }
  return l;
}

std::size_t LabelSet::count() const {
  std::size_t n = 0;
  for (const auto& m : flags) n += static_cast<std::size_t>(m.count());
  return n;
}

bool operator==(const LabelSet& a, const LabelSet& b) {
  if (a.flags.size() != b.flags.size()) return false;
  for (std::size_t c = 0; c < a.flags.size(); ++c) {
    if (a.flags[c].rows() != b.flags[c].rows() || a.flags[c].cols() != b.flags[c].cols()) return false;
    if ((a.flags[c] != b.flags[c]).any()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Synthetic generation

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform in [0, 1) keyed on (seed, tag, a, b).
double keyed_uniform(std::uint64_t seed, std::uint64_t tag, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = splitmix64(seed ^ splitmix64(tag ^ splitmix64(a ^ splitmix64(b))));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

struct SignalParams {
  double baseline;
  double amplitude;
  double phase;
  double noise;
};

SignalParams signal_params(std::size_t cell, std::size_t signal, std::uint64_t seed,
                           const SyntheticProfile& p) {
  double base = p.baseline_min + (p.baseline_max - p.baseline_min) * keyed_uniform(seed, 1, 0, signal);
  double cell_scale = 1.0 + p.cell_scale_spread * (2.0 * keyed_uniform(seed, 2, cell, 0) - 1.0);
  double phase = static_cast<double>(p.daily_period) * keyed_uniform(seed, 3, cell, signal) * 0.25;
  double level = base * cell_scale;
  return {level, p.daily_amplitude * level, phase, p.noise_std * level};
}

}  // namespace

double synthetic_deterministic_part(std::size_t cell, std::size_t signal, std::size_t t,
                                    std::size_t /*n_signals*/, std::uint64_t seed,
                                    const SyntheticProfile& profile) {
  auto sp = signal_params(cell, signal, seed, profile);
  double angle = 2.0 * std::numbers::pi * (static_cast<double>(t) + sp.phase) /
                 static_cast<double>(profile.daily_period);
  return sp.baseline + sp.amplitude * std::sin(angle);
}

TimeSeriesPanel generate_synthetic_panel(const std::vector<std::string>& cell_ids, const SwGraph& sw,
                                         std::size_t length, std::uint64_t seed,
                                         const SyntheticProfile& profile) {
  const std::size_t k = sw.num_nodes();
  if (cell_ids.empty() || k == 0 || length == 0) {
    throw DataError("synthetic panel dimensions must be positive");
  }
  if (profile.daily_period == 0) throw DataError("daily period must be positive");

  TimeSeriesPanel panel;
  panel.cell_ids = cell_ids;
  panel.signal_names = sw.node_names();
  panel.timestamps.resize(length);
  for (std::size_t t = 0; t < length; ++t) {
    panel.timestamps[t] = profile.start + static_cast<Timestamp>(t) * profile.step;
  }

  std::vector<std::vector<std::size_t>> parents(k);
  for (const auto& e : sw.edges()) {
    if (e.src != e.dst) parents[e.dst].push_back(e.src);
  }

  std::mt19937_64 rng(splitmix64(seed ^ 0x5eedULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t c = 0; c < cell_ids.size(); ++c) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(length));
    std::vector<SignalParams> params;
    for (std::size_t s = 0; s < k; ++s) params.push_back(signal_params(c, s, seed, profile));

    // Stochastic component in units of each signal's own noise scale; a
    // signal inherits `coupling` times the mean of its parents' previous value.
    std::vector<double> prev(k, 0.0), cur(k, 0.0);
    for (std::size_t t = 0; t < length; ++t) {
      for (std::size_t s = 0; s < k; ++s) {
        double flow = 0.0;
        if (!parents[s].empty()) {
          for (auto p : parents[s]) flow += prev[p];
          flow /= static_cast<double>(parents[s].size());
        }
        cur[s] = gauss(rng) + (t > 0 ? profile.coupling * flow : 0.0);
        m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) =
            synthetic_deterministic_part(c, s, t, k, seed, profile) + params[s].noise * cur[s];
      }
      std::swap(prev, cur);
    }
    panel.values.push_back(std::move(m));
  }
  return panel;
}

TimeSeriesPanel generate_synthetic_panel(std::size_t n_cells, std::size_t k, std::size_t length,
                                         std::uint64_t seed, const SyntheticProfile& profile) {
  if (n_cells == 0 || k == 0 || length == 0) throw DataError("synthetic panel dimensions must be positive");
  std::vector<std::string> ids;
  for (const auto& c : default_cells(n_cells)) ids.push_back(c.id);
  return generate_synthetic_panel(ids, chain_sw_graph(k), length, seed, profile);
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\r')) --e;
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e && std::isfinite(out);
}

struct CsvTable {
  std::vector<std::string> signal_names;
  std::vector<std::string> cell_ids;
  std::vector<Timestamp> timestamps;
  std::vector<Eigen::MatrixXd> values;
};

CsvTable read_csv_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty CSV '" + path.string() + "'");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_csv_line(line);
  if (header.empty() || header[0] != "timestamp") throw DataError("missing timestamp column");
  if (header.size() < 2 || header[1] != "cell_id") throw DataError("missing cell_id column");
  if (header.size() < 3) throw DataError("no signal columns");

  CsvTable table;
  table.signal_names.assign(header.begin() + 2, header.end());
  const std::size_t k = table.signal_names.size();

  std::unordered_map<std::string, std::size_t> cell_index;
  std::unordered_map<Timestamp, std::size_t> time_index;
  struct Row {
    std::size_t cell, time;
    std::vector<double> v;
  };
  std::vector<Row> rows;
  std::size_t r = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++r;
    auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw DataError("ragged row " + std::to_string(r) + ": expected " + std::to_string(header.size()) +
                      " fields, got " + std::to_string(fields.size()));
    }
    Timestamp ts = parse_iso8601(fields[0]);
    auto [tit, tnew] = time_index.emplace(ts, table.timestamps.size());
    if (tnew) {
      if (!table.timestamps.empty() && ts <= table.timestamps.back()) {
        throw DataError("timestamps out of order at row " + std::to_string(r));
      }
      table.timestamps.push_back(ts);
    }
    auto [cit, cnew] = cell_index.emplace(fields[1], table.cell_ids.size());
    if (cnew) table.cell_ids.push_back(fields[1]);
    Row row{cit->second, tit->second, std::vector<double>(k)};
    for (std::size_t s = 0; s < k; ++s) {
      if (!parse_double(fields[s + 2], row.v[s])) {
        throw DataError("non-numeric value at row " + std::to_string(r));
      }
    }
    rows.push_back(std::move(row));
  }

  const auto T = table.timestamps.size();
  std::vector<std::vector<bool>> seen(table.cell_ids.size(), std::vector<bool>(T, false));
  table.values.assign(table.cell_ids.size(),
                      Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(T)));
  for (const auto& row : rows) {
    if (seen[row.cell][row.time]) {
      throw DataError("duplicate row for cell '" + table.cell_ids[row.cell] + "' at " +
                      format_iso8601(table.timestamps[row.time]));
    }
    seen[row.cell][row.time] = true;
    for (std::size_t s = 0; s < k; ++s) {
      table.values[row.cell](static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(row.time)) = row.v[s];
    }
  }
  for (std::size_t c = 0; c < seen.size(); ++c) {
    for (std::size_t t = 0; t < T; ++t) {
      if (!seen[c][t]) {
        throw DataError("ragged panel: cell '" + table.cell_ids[c] + "' has no row at " +
                        format_iso8601(table.timestamps[t]));
      }
    }
  }
  return table;
}

template <typename Cell>
void write_csv_table(const TimeSeriesPanel& panel, const std::filesystem::path& path, Cell&& cell) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "timestamp,cell_id";
  for (const auto& s : panel.signal_names) out << ',' << s;
  out << '\n';
  for (std::size_t t = 0; t < panel.length(); ++t) {
    auto ts = format_iso8601(panel.timestamps[t]);
    for (std::size_t c = 0; c < panel.num_cells(); ++c) {
      out << ts << ',' << panel.cell_ids[c];
      for (std::size_t s = 0; s < panel.num_signals(); ++s) out << ',' << cell(c, s, t);
    }
  }
}

}  // namespace

TimeSeriesPanel load_panel_csv(const std::filesystem::path& path) {
  auto table = read_csv_table(path);
  TimeSeriesPanel panel{std::move(table.cell_ids), std::move(table.signal_names),
                        std::move(table.timestamps), std::move(table.values)};
  panel.validate();
  return panel;
}

void save_panel_csv(const TimeSeriesPanel& panel, const std::filesystem::path& path) {
  write_csv_table(panel, path, [&](std::size_t c, std::size_t s, std::size_t t) {
    return format_double(panel.values[c](static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t))) +
           (s + 1 == panel.num_signals() ? "\n" : "");
  });
}

void save_labels_csv(const TimeSeriesPanel& panel, const LabelSet& labels,
                     const std::filesystem::path& path) {
  if (labels.num_cells() != panel.num_cells()) throw DataError("label set does not match panel");
  write_csv_table(panel, path, [&](std::size_t c, std::size_t s, std::size_t t) {
    bool f = labels.flags[c](static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t));
    return std::string(f ? "1" : "0") + (s + 1 == panel.num_signals() ? "\n" : "");
  });
}

LabelSet load_labels_csv(const TimeSeriesPanel& panel, const std::filesystem::path& path) {
  auto table = read_csv_table(path);
  if (table.cell_ids != panel.cell_ids || table.signal_names != panel.signal_names ||
      table.timestamps != panel.timestamps) {
    throw DataError("label file '" + path.string() + "' does not match the panel layout");
  }
  LabelSet labels;
  for (const auto& m : table.values) {
    if (((m.array() != 0.0) && (m.array() != 1.0)).any()) throw DataError("labels must be 0 or 1");
    labels.flags.push_back(m.array() != 0.0);
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Scaling

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("quantile of empty sample");
  std::sort(values.begin(), values.end());
  double pos = q * static_cast<double>(values.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  auto hi = std::min(lo + 1, values.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

double robust_std(const std::vector<double>& values) {
  double m = median(values);
  std::vector<double> dev(values.size());
  std::transform(values.begin(), values.end(), dev.begin(), [m](double v) { return std::abs(v - m); });
  return 1.4826 * median(std::move(dev));
}

ScaledPanel robust_scale(const TimeSeriesPanel& panel) {
  if (panel.length() < 2) throw DataError("robust scaling needs at least two time steps");
  ScaledPanel out{panel, {}};
  const auto k = static_cast<Eigen::Index>(panel.num_signals());
  for (std::size_t c = 0; c < panel.num_cells(); ++c) {
    Eigen::VectorXd med(k), iqr(k);
    auto& m = out.panel.values[c];
    for (Eigen::Index s = 0; s < k; ++s) {
      std::vector<double> row(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index t = 0; t < m.cols(); ++t) row[static_cast<std::size_t>(t)] = m(s, t);
      med(s) = quantile(row, 0.5);
      iqr(s) = std::max(quantile(row, 0.75) - quantile(row, 0.25), ScalerParams::kEpsilon);
      m.row(s) = (m.row(s).array() - med(s)) / iqr(s);
    }
    out.params.median.push_back(med);
    out.params.iqr.push_back(iqr);
  }
  return out;
}

TimeSeriesPanel robust_unscale(const TimeSeriesPanel& scaled, const ScalerParams& params) {
  if (params.median.size() != scaled.num_cells()) throw DataError("scaler does not match panel");
  TimeSeriesPanel out = scaled;
  for (std::size_t c = 0; c < scaled.num_cells(); ++c) {
    auto& m = out.values[c];
    for (Eigen::Index s = 0; s < m.rows(); ++s) {
      m.row(s) = m.row(s).array() * params.iqr[c](s) + params.median[c](s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Annotation

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::spike: return "spike";
    case Scenario::drop_to_zero: return "drop_to_zero";
    case Scenario::level_shift: return "level_shift";
  }
  return "unknown";
}

Scenario scenario_from_string(const std::string& s) {
  if (s == "spike") return Scenario::spike;
  if (s == "drop_to_zero") return Scenario::drop_to_zero;
  if (s == "level_shift") return Scenario::level_shift;
  throw DataError("unknown scenario '" + s + "'");
}

bool AnnotationConfig::selects(const CellMeta& cell) const {
  return std::find(areas.begin(), areas.end(), cell.area) != areas.end();
}

double AnnotationConfig::amplitude_for(std::size_t signal) const {
  if (amplitude.empty()) return 0.0;
  if (amplitude.size() == 1) return amplitude.front();
  return amplitude.at(signal);
}

void AnnotationConfig::validate() const {
  if (!(anomaly_prob >= 0.0 && anomaly_prob <= 1.0)) throw DataError("anomaly probability must be in [0, 1]");
  if (!(damping > 0.0 && damping <= 1.0)) throw DataError("propagation damping must be in (0, 1]");
  if (scenario == Scenario::level_shift && shift_width == 0) throw DataError("level shift width must be positive");
}

Annotation annotate(const TimeSeriesPanel& panel, const std::vector<CellMeta>& cells,
                    const AnnotationConfig& cfg, const SwGraph& sw, std::uint64_t seed) {
  cfg.validate();
  if (cells.size() != panel.num_cells()) throw DataError("cell metadata does not align with the panel");
  if (cfg.propagate && sw.num_nodes() != panel.num_signals()) {
    throw DataError("SW graph does not match the panel's signals");
  }
  if (cfg.amplitude.size() > 1 && cfg.amplitude.size() != panel.num_signals()) {
    throw DataError("amplitude map must have one entry per signal");
  }

  Annotation out{panel, LabelSet::empty_like(panel), {}};
  const auto T = panel.length();
  const auto K = panel.num_signals();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  std::vector<std::vector<std::size_t>> succ(K);
  if (cfg.propagate) {
    for (std::size_t s = 0; s < K; ++s) succ[s] = sw.successors(s);
  }

  for (std::size_t c = 0; c < panel.num_cells(); ++c) {
    if (!cfg.selects(cells[c])) continue;
    out.abnormal_cells.push_back(c);
    const auto& orig = panel.values[c];
    auto& x = out.panel.values[c];
    auto& lab = out.labels.flags[c];

    Eigen::VectorXd rstd(static_cast<Eigen::Index>(K));
    for (std::size_t s = 0; s < K; ++s) {
      auto row = orig.row(static_cast<Eigen::Index>(s));
      rstd(static_cast<Eigen::Index>(s)) = robust_std(std::vector<double>(row.begin(), row.end()));
    }

    // `scale` is 1 at the source signal and the damping factor at successors.
    auto degrade = [&](std::size_t s, std::size_t t, double delta, double scale) {
      auto si = static_cast<Eigen::Index>(s);
      std::size_t end = cfg.scenario == Scenario::level_shift ? std::min(t + cfg.shift_width, T) : t + 1;
      for (std::size_t u = t; u < end; ++u) {
        auto ui = static_cast<Eigen::Index>(u);
        if (cfg.scenario == Scenario::drop_to_zero) {
          x(si, ui) *= 1.0 - scale;
        } else {
          x(si, ui) += scale * delta;
        }
        lab(si, ui) = true;
      }
    };

    for (std::size_t s = 0; s < K; ++s) {
      double delta = cfg.amplitude_for(s) * rstd(static_cast<Eigen::Index>(s));
      for (std::size_t t = 0; t < T; ++t) {
        if (unif(rng) >= cfg.anomaly_prob) continue;
        degrade(s, t, delta, 1.0);
        for (auto d : succ[s]) degrade(d, t, delta, cfg.damping);
      }
    }
  }
  if (out.abnormal_cells.empty() && cfg.anomaly_prob > 0.0) {
    spdlog::warn("annotation rule matched no cells; panel left unannotated");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windows

std::size_t windows_per_cell(std::size_t length, const WindowSpec& spec) {
  if (spec.history == 0 || spec.horizon == 0 || spec.stride == 0) throw DataError("window sizes must be positive");
  if (spec.history + spec.horizon > length) {
    throw DataError("history + horizon (" + std::to_string(spec.history + spec.horizon) +
                    ") exceeds series length " + std::to_string(length));
  }
  return (length - spec.history - spec.horizon) / spec.stride + 1;
}

WindowSampler::WindowSampler(const TimeSeriesPanel& panel, const SwGraph& sw, WindowSpec spec)
    : panel_(&panel), sw_(sw), spec_(spec) {
  if (spec.batch_size == 0) throw DataError("batch size must be positive");
  if (sw.num_nodes() != panel.num_signals()) throw DataError("SW graph does not match the panel's signals");
  auto per_cell = windows_per_cell(panel.length(), spec);
  refs_.reserve(per_cell * panel.num_cells());
  for (std::size_t c = 0; c < panel.num_cells(); ++c) {
    for (std::size_t w = 0; w < per_cell; ++w) refs_.push_back({c, w * spec.stride});
  }
}

std::size_t WindowSampler::size() const { return (refs_.size() + spec_.batch_size - 1) / spec_.batch_size; }

WindowBatch WindowSampler::at(std::size_t i) const {
  if (i >= size()) throw DataError("batch index out of range");
  const std::size_t begin = i * spec_.batch_size;
  const std::size_t end = std::min(begin + spec_.batch_size, refs_.size());
  const std::size_t b = end - begin;
  const std::size_t k = panel_->num_signals();

  WindowBatch batch;
  batch.x = Tensor3(k * b, 1, spec_.history);
  batch.y = Tensor3(k * b, 1, spec_.horizon);
  batch.origin.assign(refs_.begin() + static_cast<std::ptrdiff_t>(begin),
                      refs_.begin() + static_cast<std::ptrdiff_t>(end));
  for (std::size_t s = 0; s < b; ++s) {
    const auto& ref = batch.origin[s];
    const auto& m = panel_->values[ref.cell];
    for (std::size_t n = 0; n < k; ++n) {
      auto row = static_cast<Eigen::Index>(n);
      for (std::size_t t = 0; t < spec_.history; ++t) {
        batch.x(s * k + n, 0, t) = m(row, static_cast<Eigen::Index>(ref.start + t));
      }
      for (std::size_t t = 0; t < spec_.horizon; ++t) {
        batch.y(s * k + n, 0, t) = m(row, static_cast<Eigen::Index>(ref.start + spec_.history + t));
      }
    }
  }
  batch.graph = disjoint_union_batch(sw_, b);
  return batch;
}

std::vector<WindowBatch> window_split(const TimeSeriesPanel& panel, const SwGraph& sw,
                                      const WindowSpec& spec) {
  WindowSampler sampler(panel, sw, spec);
  std::vector<WindowBatch> out;
  out.reserve(sampler.size());
  for (std::size_t i = 0; i < sampler.size(); ++i) out.push_back(sampler.at(i));
  return out;
}

}  // namespace ranwatch
