#include "ranwatch/metrics.hpp"
#include "ranwatch/nn.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace ranwatch;
using namespace ranwatch::metrics;

namespace {

TimeSeriesPanel panel_of(std::size_t cells, std::size_t k, std::size_t t, double fill) {
  TimeSeriesPanel p;
  for (std::size_t c = 0; c < cells; ++c) p.cell_ids.push_back("cell_" + std::to_string(c));
  for (std::size_t s = 0; s < k; ++s) p.signal_names.push_back("signal_" + std::to_string(s + 1));
  for (std::size_t i = 0; i < t; ++i) p.timestamps.push_back(kDefaultStart + static_cast<Timestamp>(i) * kQuarterHour);
  p.values.assign(cells, Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(t), fill));
  return p;
}

LabelSet random_labels(std::size_t cells, std::size_t k, std::size_t t, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  LabelSet l;
  for (std::size_t c = 0; c < cells; ++c) {
    Mask m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(t));
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = b(rng);
    l.flags.push_back(m);
  }
  return l;
}

}  // namespace

TEST_CASE("precision, recall and F1 of a small example") {
  // predicted {1,2,3}, truth {2,3,4,5}
  std::vector<bool> pred(6, false), truth(6, false);
  pred[1] = pred[2] = pred[3] = true;
  truth[2] = truth[3] = truth[4] = truth[5] = true;
  const auto s = prf1(pred, truth);
  CHECK(s.tp == 2);
  CHECK(s.fp == 1);
  CHECK(s.fn == 2);
  CHECK(s.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(s.recall == 0.5);
  CHECK(s.f1 == doctest::Approx(4.0 / 7.0).epsilon(1e-15));
}

TEST_CASE("identical label sets score 1, empty ones 0") {
  std::mt19937_64 rng(1);
  const auto l = random_labels(3, 4, 50, 0.1, rng);
  const auto s = prf1(l, l);
  CHECK(s.precision == 1.0);
  CHECK(s.recall == 1.0);
  CHECK(s.f1 == 1.0);
  const auto none = prf1(std::vector<bool>(5, false), std::vector<bool>(5, false));
  CHECK(none.precision == 0.0);
  CHECK(none.recall == 0.0);
  CHECK(none.f1 == 0.0);
}

TEST_CASE("F1 is zero exactly when there are no true positives") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_labels(1, 2, 10, 0.15, rng);
    const auto b = random_labels(1, 2, 10, 0.15, rng);
    const auto s = prf1(a, b);
    CHECK((s.f1 == 0.0) == (s.tp == 0));
    CHECK(s.f1 >= 0.0);
    CHECK(s.f1 <= 1.0);
    CHECK(s.f1 <= std::max(s.precision, s.recall) + 1e-15);
    CHECK(s.f1 >= std::min(s.precision, s.recall) - 1e-15);
  }
}

TEST_CASE("counts over a label set match a flat recount") {
  std::mt19937_64 rng(3);
  const auto a = random_labels(4, 3, 30, 0.2, rng);
  const auto b = random_labels(4, 3, 30, 0.2, rng);
  std::vector<bool> pa, pb;
  for (std::size_t c = 0; c < 4; ++c) {
    for (Eigen::Index i = 0; i < a.flags[c].size(); ++i) {
      pa.push_back(a.flags[c](i));
      pb.push_back(b.flags[c](i));
    }
  }
  const auto s = prf1(a, b);
  const auto flat = prf1(pa, pb);
  CHECK(s.tp == flat.tp);
  CHECK(s.fp == flat.fp);
  CHECK(s.fn == flat.fn);
}

TEST_CASE("non-evaluable steps are ignored") {
  LabelSet pred, truth;
  pred.flags.push_back(Mask::Constant(1, 4, false));
  truth.flags.push_back(Mask::Constant(1, 4, false));
  pred.flags[0](0, 0) = true;  // fp, outside the evaluable range
  truth.flags[0](0, 3) = true;
  pred.flags[0](0, 3) = true;
  const auto s = prf1(pred, truth, {false, true, true, true});
  CHECK(s.fp == 0);
  CHECK(s.tp == 1);
  CHECK_THROWS_AS(prf1(pred, truth, {true, true}), MetricsError);
}

TEST_CASE("label shape mismatches throw") {
  LabelSet a, b;
  a.flags.push_back(Mask::Constant(2, 4, false));
  b.flags.push_back(Mask::Constant(2, 5, false));
  CHECK_THROWS_AS(prf1(a, b), MetricsError);
  b.flags.push_back(Mask::Constant(2, 4, false));
  CHECK_THROWS_AS(prf1(a, b), MetricsError);
  CHECK_THROWS_AS(prf1(std::vector<bool>(3), std::vector<bool>(4)), MetricsError);
}

TEST_CASE("MSE of a constant offset is its square") {
  const auto a = panel_of(2, 3, 10, 1.0);
  const auto b = panel_of(2, 3, 10, 4.0);
  CHECK(mse_metric(a, b) == 9.0);
  CHECK(mse_metric(a, a) == 0.0);
  std::vector<bool> ev(10, false);
  ev[4] = true;
  CHECK(mse_metric(a, b, ev) == 9.0);
  CHECK_THROWS_AS(mse_metric(a, b, std::vector<bool>(10, false)), MetricsError);
  CHECK_THROWS_AS(mse_metric(a, panel_of(1, 3, 10, 0.0)), MetricsError);
}

TEST_CASE("MSE agrees with the training loss") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  auto a = panel_of(1, 5, 40, 0.0);
  auto b = panel_of(1, 5, 40, 0.0);
  for (Eigen::Index i = 0; i < a.values[0].size(); ++i) {
    a.values[0](i) = n01(rng);
    b.values[0](i) = n01(rng);
  }
  const double expect = nn::loss(a.values[0], b.values[0], nn::LossMode::mse());
  CHECK(mse_metric(a, b) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("FL-versus-CL report") {
  std::mt19937_64 rng(5);
  ClReference ref;
  ref.panel_hash = 42;
  ref.dataset = "1";
  ref.labels = random_labels(3, 2, 20, 0.2, rng);
  ref.loss = 0.5;

  FlOutcome same;
  same.strategy = "FedAvg-20x5";
  same.panel_hash = 42;
  same.central_loss = 0.6;
  same.central_labels = ref.labels;
  same.footprint = 0.02;

  FlOutcome personal = same;
  personal.strategy = "FedGraph-20x5";
  personal.personalized_loss = 0.4;
  personal.personalized_labels = random_labels(3, 2, 20, 0.2, rng);

  const auto report = fl_vs_cl_report({same, personal}, ref);
  REQUIRE(report.rows.size() == 3);
  CHECK(report.panel_hash == 42);
  CHECK(report.rows[0].model == "central");
  CHECK(report.rows[0].scores->f1 == 1.0);
  CHECK(report.rows[0].loss_ratio == doctest::Approx(1.2));
  CHECK(report.rows[0].footprint == 0.02);
  CHECK(report.rows[0].dataset == "1");
  CHECK(report.rows[1].name == "FedGraph-20x5");
  CHECK(report.rows[1].model == "personalized");
  CHECK(report.rows[1].loss_ratio == doctest::Approx(0.8));
  CHECK(report.rows[1].scores->tp == prf1(*personal.personalized_labels, ref.labels).tp);
  CHECK(report.rows[2].model == "central");

  FlOutcome other = same;
  other.panel_hash = 43;
  CHECK_THROWS_AS(fl_vs_cl_report({other}, ref), MetricsError);
}

TEST_CASE("report JSON and CSV") {
  Report r;
  r.panel_hash = 0xdeadbeefcafef00dULL;
  r.rows.push_back({"GNN-based", "0", "central", 0.125, ClassificationScores::from_counts(3, 1, 1), std::nullopt,
                    std::nullopt});
  r.rows.push_back({"FedAvg-5x20", "0", "central", 0.25, std::nullopt, 0.01, 2.0});

  const auto back = Report::from_json(nlohmann::json::parse(r.to_json().dump()));
  CHECK(back.panel_hash == r.panel_hash);
  CHECK(back.to_json() == r.to_json());
  CHECK(back.to_csv() == r.to_csv());

  std::istringstream csv(r.to_csv());
  std::string line;
  std::getline(csv, line);
  CHECK(line == "name,dataset,model,loss,precision,recall,f1,footprint,loss_ratio");
  std::getline(csv, line);
  CHECK(line == "GNN-based,0,central,0.125,0.75,0.75,0.75,-,-");
  std::getline(csv, line);
  CHECK(line == "FedAvg-5x20,0,central,0.25,-,-,-,0.01,2");

  const auto dir = std::filesystem::temp_directory_path() / "ranwatch_test_metrics";
  std::filesystem::create_directories(dir);
  r.save(dir / "report.json", dir / "report.csv");
  std::ifstream js(dir / "report.json");
  CHECK(Report::from_json(nlohmann::json::parse(js)).to_json() == r.to_json());
  std::filesystem::remove_all(dir);
}
