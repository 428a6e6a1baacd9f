#include "ranwatch/metrics.hpp"

#include <fstream>
#include <sstream>

namespace ranwatch::metrics {

ClassificationScores ClassificationScores::from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  ClassificationScores s{tp, fp, fn, 0.0, 0.0, 0.0};
  if (tp + fp > 0) s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

void to_json(nlohmann::json& j, const ClassificationScores& s) {
  j = {{"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}, {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

ClassificationScores prf1(const LabelSet& pred, const LabelSet& truth, const std::vector<bool>& evaluable) {
  if (pred.num_cells() != truth.num_cells()) throw MetricsError("label sets cover different cell counts");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t c = 0; c < pred.num_cells(); ++c) {
    const auto& p = pred.flags[c];
    const auto& t = truth.flags[c];
    if (p.rows() != t.rows() || p.cols() != t.cols()) throw MetricsError("label sets have different shapes");
    if (!evaluable.empty() && evaluable.size() != static_cast<std::size_t>(p.cols())) {
      throw MetricsError("evaluable mask does not match the time axis");
    }
    for (Eigen::Index col = 0; col < p.cols(); ++col) {
      if (!evaluable.empty() && !evaluable[static_cast<std::size_t>(col)]) continue;
      for (Eigen::Index row = 0; row < p.rows(); ++row) {
        bool a = p(row, col), b = t(row, col);
        tp += a && b;
        fp += a && !b;
        fn += !a && b;
      }
    }
  }
  return ClassificationScores::from_counts(tp, fp, fn);
}

ClassificationScores prf1(const std::vector<bool>& pred, const std::vector<bool>& truth) {
  if (pred.size() != truth.size()) throw MetricsError("label series have different lengths");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    tp += pred[i] && truth[i];
    fp += pred[i] && !truth[i];
    fn += !pred[i] && truth[i];
  }
  return ClassificationScores::from_counts(tp, fp, fn);
}

double mse_metric(const TimeSeriesPanel& pred, const TimeSeriesPanel& target, const std::vector<bool>& evaluable) {
  if (pred.num_cells() != target.num_cells()) throw MetricsError("panels cover different cell counts");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < pred.num_cells(); ++c) {
    const auto& a = pred.values[c];
    const auto& b = target.values[c];
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw MetricsError("panels have different shapes");
    if (!evaluable.empty() && evaluable.size() != static_cast<std::size_t>(a.cols())) {
      throw MetricsError("evaluable mask does not match the time axis");
    }
    for (Eigen::Index t = 0; t < a.cols(); ++t) {
      if (!evaluable.empty() && !evaluable[static_cast<std::size_t>(t)]) continue;
      sum += (a.col(t) - b.col(t)).squaredNorm();
      n += static_cast<std::size_t>(a.rows());
    }
  }
  if (n == 0) throw MetricsError("no evaluable points");
  return sum / static_cast<double>(n);
}

nlohmann::json Report::to_json() const {
  auto rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = {{"name", r.name}, {"dataset", r.dataset}, {"model", r.model}};
    if (r.loss) j["loss"] = *r.loss;
    if (r.scores) j["scores"] = *r.scores;
    if (r.footprint) j["footprint"] = *r.footprint;
    if (r.loss_ratio) j["loss_ratio"] = *r.loss_ratio;
    rows_json.push_back(std::move(j));
  }
  return {{"panel_hash", panel_hash}, {"rows", rows_json}};
}

Report Report::from_json(const nlohmann::json& j) {
  Report r;
  r.panel_hash = j.at("panel_hash").get<std::uint64_t>();
  for (const auto& row : j.at("rows")) {
    ReportRow rr;
    rr.name = row.at("name");
    rr.dataset = row.at("dataset");
    rr.model = row.at("model");
    if (row.contains("loss")) rr.loss = row["loss"].get<double>();
    if (row.contains("scores")) {
      const auto& s = row["scores"];
      rr.scores = ClassificationScores{s.at("tp"), s.at("fp"), s.at("fn"), s.at("precision"), s.at("recall"), s.at("f1")};
    }
    if (row.contains("footprint")) rr.footprint = row["footprint"].get<double>();
    if (row.contains("loss_ratio")) rr.loss_ratio = row["loss_ratio"].get<double>();
    r.rows.push_back(std::move(rr));
  }
  return r;
}

std::string Report::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "name,dataset,model,loss,precision,recall,f1,footprint,loss_ratio\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.dataset << ',' << r.model << ',';
    if (r.loss) out << *r.loss; else out << '-';
    out << ',';
    if (r.scores) {
      out << r.scores->precision << ',' << r.scores->recall << ',' << r.scores->f1;
    } else {
      out << "-,-,-";
    }
    out << ',';
    if (r.footprint) out << *r.footprint; else out << '-';
    out << ',';
    if (r.loss_ratio) out << *r.loss_ratio; else out << '-';
    out << '\n';
  }
  return out.str();
}

void Report::save(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const {
  std::ofstream js(json_path);
  std::ofstream csv(csv_path);
  if (!js || !csv) throw MetricsError("cannot write report files");
  js << to_json().dump(2) << '\n';
  csv << to_csv();
}

Report fl_vs_cl_report(const std::vector<FlOutcome>& runs, const ClReference& reference) {
  Report report;
  report.panel_hash = reference.panel_hash;
  for (const auto& run : runs) {
    if (run.panel_hash != reference.panel_hash) {
      throw MetricsError("run '" + run.strategy + "' was produced on a different panel than the reference");
    }
    auto ratio = [&](double loss) -> std::optional<double> {
      if (reference.loss > 0.0) return loss / reference.loss;
      return std::nullopt;
    };
    if (run.personalized_labels && run.personalized_loss) {
      report.rows.push_back({run.strategy, reference.dataset, "personalized", *run.personalized_loss,
                             prf1(*run.personalized_labels, reference.labels, reference.evaluable), run.footprint,
                             ratio(*run.personalized_loss)});
    }
    report.rows.push_back({run.strategy, reference.dataset, "central", run.central_loss,
                           prf1(run.central_labels, reference.labels, reference.evaluable), run.footprint,
                           ratio(run.central_loss)});
  }
  return report;
}

}  // namespace ranwatch::metrics
