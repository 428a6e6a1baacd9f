#include "ranwatch/fedsim.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <type_traits>

using namespace ranwatch;
using namespace ranwatch::fed;

namespace {

WeightVec random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  WeightVec v(n);
  for (auto& x : v) x = n01(rng);
  return v;
}

LocalSetup small_setup(std::size_t k = 3) {
  LocalSetup s;
  s.model.embed_dim = 4;
  s.model.depth = 1;
  s.model.history = 6;
  s.train.batch_size = 16;
  s.train.learning_rate = 1e-2;
  s.windows = {6, 1, 1, 16};
  s.sw = chain_sw_graph(k);
  return s;
}

// Robust-scaled synthetic panel and its default NW graph.
std::pair<TimeSeriesPanel, NwGraph> small_panel(std::size_t cells, std::size_t length, std::uint64_t seed) {
  const auto meta = default_cells(cells);
  std::vector<std::string> ids;
  for (const auto& m : meta) ids.push_back(m.id);
  auto raw = generate_synthetic_panel(ids, chain_sw_graph(3), length, seed);
  return {robust_scale(raw).panel, build_nw_graph(meta)};
}

std::vector<Client> small_clients(std::size_t cells, const LocalSetup& setup, std::uint64_t seed = 2) {
  auto [panel, nw] = small_panel(cells, 48, seed);
  return make_clients(partition_clients(panel, nw), setup);
}

}  // namespace

// ---------------------------------------------------------------------------
// Aggregation algebra

TEST_CASE("fedavg of [[1,2],[3,4]] is [2,3]") {
  CHECK(fedavg_aggregate({{1.0, 2.0}, {3.0, 4.0}}) == WeightVec{2.0, 3.0});
}

TEST_CASE("fedavg of identical vectors is that vector") {
  std::mt19937_64 rng(1);
  for (std::size_t n : {1u, 2u, 3u, 7u, 67u}) {
    const auto v = random_vec(50, rng);
    CHECK(fedavg_aggregate(std::vector<WeightVec>(n, v)) == v);
  }
}

TEST_CASE("fedavg of three random vectors matches the elementwise mean") {
  std::mt19937_64 rng(2);
  const std::vector<WeightVec> w = {random_vec(100, rng), random_vec(100, rng), random_vec(100, rng)};
  const auto got = fedavg_aggregate(w);
  for (std::size_t i = 0; i < 100; ++i) {
    const long double exact = (static_cast<long double>(w[0][i]) + w[1][i] + w[2][i]) / 3.0L;
    const double tol = 4.0 * std::numeric_limits<double>::epsilon() *
                       std::max({std::abs(w[0][i]), std::abs(w[1][i]), std::abs(w[2][i])});
    CHECK(std::abs(got[i] - static_cast<double>(exact)) <= tol);
  }
}

TEST_CASE("fedavg is order independent up to rounding and deterministic in order") {
  std::mt19937_64 rng(3);
  std::vector<WeightVec> w;
  for (int i = 0; i < 6; ++i) w.push_back(random_vec(40, rng));
  const auto base = fedavg_aggregate(w);
  CHECK(fedavg_aggregate(w) == base);
  std::reverse(w.begin(), w.end());
  const auto rev = fedavg_aggregate(w);
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(rev[i] == doctest::Approx(base[i]).epsilon(1e-12));
}

TEST_CASE("aggregation input errors") {
  CHECK_THROWS_AS(fedavg_aggregate({}), FlError);
  CHECK_THROWS_AS(fedavg_aggregate({{1.0}, {1.0, 2.0}}), FlError);
  CHECK_THROWS_AS(fedgraph_aggregate({{1.0}, {1.0, 2.0}}), FlError);
}

TEST_CASE("cosine similarity examples") {
  const WeightVec v{0.3, -1.2, 4.0};
  CHECK(cosine_sim(v, v) == 1.0);
  CHECK(cosine_sim(WeightVec{1, 0}, WeightVec{0, 1}) == 0.0);
  CHECK(cosine_sim(WeightVec{1, 1}, WeightVec{1, 0}) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(cosine_sim(WeightVec{0, 0}, WeightVec{1, 0}) == 0.0);
  CHECK(cosine_sim(WeightVec{1, 2}, WeightVec{-1, -2}) == -1.0);
}

TEST_CASE("fedgraph: identical clients are a fixed point") {
  std::mt19937_64 rng(4);
  const auto v = random_vec(200, rng);
  for (std::size_t n : {1u, 3u, 5u}) {
    for (std::size_t steps : {1u, 3u}) {
      const auto r = fedgraph_aggregate(std::vector<WeightVec>(n, v), true, steps);
      for (const auto& p : r.personalized) CHECK(p == v);
      CHECK(r.global == v);
    }
  }
}

TEST_CASE("fedgraph: orthogonal clients keep their own weights") {
  const auto r = fedgraph_aggregate({{1.0, 0.0}, {0.0, 1.0}});
  CHECK(r.personalized[0] == WeightVec{1.0, 0.0});
  CHECK(r.personalized[1] == WeightVec{0.0, 1.0});
  CHECK(r.global == WeightVec{0.5, 0.5});
}

TEST_CASE("fedgraph: two-client hand example") {
  const auto r = fedgraph_aggregate({{1.0, 0.0}, {0.6, 0.8}});
  CHECK(r.similarity(0, 1) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(std::abs(r.personalized[0][0] - 0.85) <= 1e-12);
  CHECK(std::abs(r.personalized[0][1] - 0.30) <= 1e-12);
  // ([0.6, 0.8] + 0.6 [1, 0]) / 1.6
  CHECK(std::abs(r.personalized[1][0] - 0.75) <= 1e-12);
  CHECK(std::abs(r.personalized[1][1] - 0.50) <= 1e-12);
}

TEST_CASE("fedgraph with all similarities 1 equals fedavg") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> scale(0.5, 3.0);
  const auto v = random_vec(64, rng);
  std::vector<WeightVec> w;
  for (int i = 0; i < 4; ++i) {
    WeightVec s = v;
    const double a = scale(rng);
    for (auto& x : s) x *= a;
    w.push_back(s);
  }
  const auto r = fedgraph_aggregate(w);
  CHECK(r.relation.isOnes(1e-15));
  const auto avg = fedavg_aggregate(w);
  for (const auto& p : r.personalized) {
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - avg[i]) <= 1e-12);
  }
  for (std::size_t i = 0; i < avg.size(); ++i) CHECK(std::abs(r.global[i] - avg[i]) <= 1e-12);
}

TEST_CASE("fedgraph outputs lie in the convex hull of the inputs") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<WeightVec> w;
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 5);
    // A shared component keeps some similarities positive.
    const auto common = random_vec(30, rng);
    for (std::size_t j = 0; j < n; ++j) {
      auto v = random_vec(30, rng);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += (trial % 2 ? 1.5 : 0.0) * common[i];
      w.push_back(v);
    }
    for (std::size_t steps : {1u, 2u, 4u}) {
      const auto r = fedgraph_aggregate(w, true, steps);
      CHECK(r.mixing.minCoeff() >= 0.0);
      for (Eigen::Index j = 0; j < r.mixing.rows(); ++j) CHECK(r.mixing.row(j).sum() == doctest::Approx(1.0).epsilon(1e-14));
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < 30; ++i) {
          double lo = w[0][i], hi = w[0][i], mixed = 0.0;
          for (std::size_t k = 0; k < n; ++k) {
            lo = std::min(lo, w[k][i]);
            hi = std::max(hi, w[k][i]);
            mixed += r.mixing(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) * w[k][i];
          }
          CHECK(r.personalized[j][i] >= lo - 1e-12);
          CHECK(r.personalized[j][i] <= hi + 1e-12);
          CHECK(std::abs(r.personalized[j][i] - mixed) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("similarity matrix is symmetric with unit diagonal") {
  std::mt19937_64 rng(7);
  std::vector<WeightVec> w;
  for (int i = 0; i < 6; ++i) w.push_back(random_vec(25, rng));
  const auto s = similarity_matrix(w);
  CHECK(s == s.transpose());
  CHECK(s.diagonal() == Eigen::VectorXd::Ones(6));
  CHECK(s.minCoeff() >= -1.0);
  CHECK(s.maxCoeff() <= 1.0);
  CHECK(s.minCoeff() < 0.0);  // unclamped
  const auto r = fedgraph_aggregate(w);
  CHECK(r.relation.minCoeff() >= 0.0);
}

TEST_CASE("communication footprint") {
  CHECK(comm_footprint(5, 10, 1000) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(comm_footprint(0, 10, 1000) == 0.0);
  CHECK_THROWS_AS(comm_footprint(5, 10, 0), FlError);
  const double f5 = comm_footprint(5, 38123, 4939776);
  CHECK(comm_footprint(10, 38123, 4939776) / f5 == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(comm_footprint(20, 38123, 4939776) / f5 == doctest::Approx(4.0).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// Configuration

TEST_CASE("strategy presets and names") {
  for (const auto& layout : preset_layouts()) {
    for (auto s : {Strategy::fedavg, Strategy::fedavg_reg, Strategy::fedgraph, Strategy::fedgraph_reg}) {
      CHECK(FlConfig::preset(s, layout).total_epochs() == 100);
    }
  }
  CHECK(FlConfig::preset(Strategy::fedgraph, "20x5").name() == "FedGraph-20x5");
  CHECK(FlConfig::preset(Strategy::fedavg_reg, "5x20").name() == "FedAvgReg-5x20");
  CHECK_THROWS_AS(FlConfig::preset(Strategy::fedavg, "twenty"), FlError);
  CHECK_THROWS_AS(FlConfig::preset(Strategy::fedavg, "0x10"), FlError);
  CHECK_THROWS_AS(strategy_from_string("fedprox"), FlError);
}

TEST_CASE("FlConfig JSON round trip") {
  auto c = FlConfig::preset(Strategy::fedgraph_reg, "10x10", 0.25);
  c.mp_steps = 2;
  c.sim_clamp = false;
  c.seed = 99;
  const nlohmann::json j = c;
  const auto back = j.get<FlConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.lambda == 0.25);
  CHECK(back.name() == "FedGraphReg-10x10");
}

// ---------------------------------------------------------------------------
// Clients

TEST_CASE("partition gives one disjoint slice per cell") {
  auto [panel, nw] = small_panel(3, 30, 1);
  const auto parts = partition_clients(panel, nw);
  REQUIRE(parts.size() == 3);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(parts[c].slice.num_cells() == 1);
    CHECK(parts[c].slice.cell_ids[0] == panel.cell_ids[c]);
    CHECK(parts[c].slice.values[0] == panel.values[c]);
    CHECK(parts[c].slice.timestamps == panel.timestamps);
    CHECK(parts[c].meta == nw.cells[c]);
  }
}

TEST_CASE("partition of 67 cells gives 67 clients") {
  const auto meta = default_cells(67);
  std::vector<std::string> ids;
  for (const auto& m : meta) ids.push_back(m.id);
  const auto panel = generate_synthetic_panel(ids, chain_sw_graph(2), 10, 1);
  CHECK(partition_clients(panel, build_nw_graph(meta)).size() == 67);
}

TEST_CASE("partition rejects misaligned cells") {
  auto [panel, nw] = small_panel(3, 30, 1);
  std::swap(nw.cells[0], nw.cells[1]);
  CHECK_THROWS_AS(partition_clients(panel, nw), FlError);
  nw.cells.pop_back();
  CHECK_THROWS_AS(partition_clients(panel, nw), FlError);
}

TEST_CASE("client updates expose only id, weights, metrics and a failure flag") {
  // Exactly four members: anything else would break this binding.
  ClientUpdate u;
  auto& [id, weights, metrics, failed] = u;
  static_assert(std::is_same_v<decltype(weights), WeightVec>);
  static_assert(std::is_same_v<decltype(failed), bool>);
  static_assert(std::is_same_v<decltype(metrics), LocalMetrics>);
  static_assert(std::is_same_v<decltype(id), std::string>);
  // Aggregators take weight vectors, not clients.
  static_assert(std::is_invocable_v<decltype(&fedavg_aggregate), const std::vector<WeightVec>&>);
  static_assert(!std::is_invocable_v<decltype(&fedavg_aggregate), const std::vector<Client>&>);
  static_assert(!std::is_invocable_v<decltype(&fedavg_aggregate), const std::vector<ClientData>&>);
  CHECK_FALSE(failed);
}

TEST_CASE("zero local epochs return the incoming weights") {
  const auto setup = small_setup();
  const auto clients = small_clients(1, setup);
  const auto w = nn::init_weights(setup.model, 3).values;
  const auto u = clients[0].local_train(w, 0, nn::LossMode::mse(), 1);
  CHECK(u.weights == w);
  CHECK_FALSE(u.failed);
  CHECK(u.metrics.loss > 0.0);
}

TEST_CASE("a stronger proximal term keeps local weights closer to the anchor") {
  auto setup = small_setup();
  const auto clients = small_clients(1, setup);
  const auto w = nn::init_weights(setup.model, 3).values;
  std::vector<double> dist;
  for (double lambda : {0.0, 0.1, 1.0, 10.0}) {
    const auto u = clients[0].local_train(w, 3, nn::LossMode::regularized(lambda), 5);
    double d = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) d += (u.weights[i] - w[i]) * (u.weights[i] - w[i]);
    dist.push_back(std::sqrt(d));
  }
  for (std::size_t i = 1; i < dist.size(); ++i) CHECK(dist[i] < dist[i - 1]);
}

TEST_CASE("a client that diverges reports failure") {
  const auto setup = small_setup();
  auto [panel, nw] = small_panel(2, 48, 1);
  panel.values[1].setConstant(1e200);
  const auto clients = make_clients(partition_clients(panel, nw), setup);
  const auto w = nn::init_weights(setup.model, 3).values;
  const auto u = clients[1].local_train(w, 1, nn::LossMode::mse(), 1);
  CHECK(u.failed);
  CHECK(u.weights.empty());

  // The round proceeds with the healthy client.
  FlConfig cfg;
  cfg.rounds = 2;
  cfg.local_epochs = 1;
  const auto result = run_rounds(clients, cfg, setup);
  CHECK(result.rounds[0].failed == std::vector<bool>{false, true});
  CHECK(std::isnan(result.rounds[0].similarity(0, 1)));
  CHECK(result.rounds[0].similarity(0, 0) == 1.0);

  // With every client failing the experiment aborts.
  panel.values[0].setConstant(1e200);
  const auto doomed = make_clients(partition_clients(panel, nw), setup);
  CHECK_THROWS_AS(run_rounds(doomed, cfg, setup), AllClientsFailed);
}

// ---------------------------------------------------------------------------
// Rounds

TEST_CASE("one round with one client equals centralized training") {
  const auto setup = small_setup();
  auto [panel, nw] = small_panel(1, 60, 8);
  const auto clients = make_clients(partition_clients(panel, nw), setup);
  FlConfig cfg;
  cfg.rounds = 1;
  cfg.local_epochs = 3;
  cfg.seed = 41;
  const auto fl = run_rounds(clients, cfg, setup);

  auto model = nn::Model::initialized(setup.model, 41);
  auto tc = setup.train;
  tc.epochs = 3;
  tc.seed = 41;
  nn::train(model, WindowSampler(panel, setup.sw, setup.windows), tc);
  CHECK(fl.global == model.weights().values);
}

TEST_CASE("runs are reproducible, and parallel clients change nothing") {
  auto setup = small_setup();
  const auto clients = small_clients(3, setup);
  for (auto s : {Strategy::fedavg, Strategy::fedgraph_reg}) {
    FlConfig cfg;
    cfg.strategy = s;
    cfg.rounds = 3;
    cfg.local_epochs = 1;
    cfg.seed = 7;
    cfg.record_weights = true;
    const auto a = run_rounds(clients, cfg, setup);
    const auto b = run_rounds(clients, cfg, setup);
    cfg.parallel = true;
    const auto c = run_rounds(clients, cfg, setup);
    CHECK(round_log_ndjson(a, cfg) == round_log_ndjson(b, cfg));
    CHECK(round_log_ndjson(a, cfg) == round_log_ndjson(c, cfg));
    for (std::size_t r = 0; r < 3; ++r) {
      CHECK(a.rounds[r].local == b.rounds[r].local);
      CHECK(a.rounds[r].local == c.rounds[r].local);
      CHECK(a.rounds[r].personalized == c.rounds[r].personalized);
    }
    CHECK(a.global == c.global);
  }
}

TEST_CASE("regularized strategy with lambda 0 reproduces the plain one") {
  const auto setup = small_setup();
  const auto clients = small_clients(2, setup);
  for (auto [plain, reg] : {std::pair{Strategy::fedavg, Strategy::fedavg_reg},
                            std::pair{Strategy::fedgraph, Strategy::fedgraph_reg}}) {
    FlConfig a;
    a.strategy = plain;
    a.rounds = 2;
    a.local_epochs = 1;
    a.record_weights = true;
    FlConfig b = a;
    b.strategy = reg;
    b.lambda = 0.0;
    const auto ra = run_rounds(clients, a, setup);
    const auto rb = run_rounds(clients, b, setup);
    for (std::size_t r = 0; r < 2; ++r) CHECK(ra.rounds[r].local == rb.rounds[r].local);
    CHECK(ra.global == rb.global);
  }
}

TEST_CASE("fedavg sends every client the same model; fedgraph personalizes") {
  const auto setup = small_setup();
  const auto clients = small_clients(3, setup);
  FlConfig cfg;
  cfg.rounds = 1;
  cfg.local_epochs = 1;
  const auto avg = run_rounds(clients, cfg, setup);
  for (const auto& p : avg.personalized) CHECK(p == avg.global);
  cfg.strategy = Strategy::fedgraph;
  const auto graph = run_rounds(clients, cfg, setup);
  CHECK(graph.personalized[0] != graph.personalized[1]);
}

TEST_CASE("round records, log and similarity CSV") {
  auto setup = small_setup();
  auto [panel, nw] = small_panel(3, 48, 2);
  auto truth = LabelSet::empty_like(panel);
  truth.flags[1](0, 30) = true;
  setup.detector = detect::DetectorConfig{};
  setup.detector->method_map.assign(3, detect::Method::zscore);
  const auto clients = make_clients(partition_clients(panel, nw, &truth), setup);

  FlConfig cfg = FlConfig::preset(Strategy::fedgraph, "4x1");
  const auto result = run_rounds(clients, cfg, setup);
  REQUIRE(result.rounds.size() == 4);
  std::size_t points = 3 * 3 * 48;
  const std::size_t n_params = nn::manifest_size(nn::model_manifest(setup.model));
  for (std::size_t r = 0; r < 4; ++r) {
    const auto& rec = result.rounds[r];
    CHECK(rec.round == r + 1);
    CHECK(rec.footprint == comm_footprint(r + 1, n_params, points));
    CHECK(rec.similarity == rec.similarity.transpose());
    CHECK(rec.similarity.diagonal() == Eigen::VectorXd::Ones(3));
    for (const auto& m : rec.metrics) {
      REQUIRE(m.scores.has_value());
      CHECK(m.scores->f1 >= 0.0);
      CHECK(m.scores->f1 <= 1.0);
    }
    CHECK(rec.local.empty());
  }
  CHECK(result.footprint == comm_footprint(4, n_params, points));

  const auto log = round_log_ndjson(result, cfg);
  std::istringstream lines(log);
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("round") == ++count);
    CHECK(j.at("strategy") == "FedGraph-4x1");
    CHECK(j.at("clients").size() == 3);
    CHECK(j.at("clients")[0].contains("f1"));
    CHECK(j.at("similarity").size() == 3);
    CHECK(j.contains("footprint"));
  }
  CHECK(count == 4);

  const auto csv = similarity_csv(result);
  std::istringstream rows(csv);
  std::getline(rows, line);
  CHECK(line == "round,cell_000|cell_001,cell_000|cell_002,cell_001|cell_002");
  std::size_t data_rows = 0;
  while (std::getline(rows, line)) {
    ++data_rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 3);
  }
  CHECK(data_rows == 4);
}
