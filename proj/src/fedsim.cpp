#include "ranwatch/fedsim.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

namespace ranwatch::fed {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::fedavg: return "fedavg";
    case Strategy::fedavg_reg: return "fedavg_reg";
    case Strategy::fedgraph: return "fedgraph";
    case Strategy::fedgraph_reg: return "fedgraph_reg";
  }
  return "fedavg";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "fedavg") return Strategy::fedavg;
  if (s == "fedavg_reg") return Strategy::fedavg_reg;
  if (s == "fedgraph") return Strategy::fedgraph;
  if (s == "fedgraph_reg") return Strategy::fedgraph_reg;
  throw FlError("unknown FL strategy '" + s + "'");
}

std::string FlConfig::name() const {
  std::string base = personalized() ? "FedGraph" : "FedAvg";
  if (regularized()) base += "Reg";
  return base + "-" + std::to_string(rounds) + "x" + std::to_string(local_epochs);
}

void FlConfig::validate() const {
  if (rounds < 1) throw FlError("rounds must be at least 1");
  if (local_epochs < 1) throw FlError("local_epochs must be at least 1");
  if (mp_steps < 1) throw FlError("mp_steps must be at least 1");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw FlError("lambda must be finite and nonnegative");
}

FlConfig FlConfig::preset(Strategy s, const std::string& layout, double lambda) {
  const auto x = layout.find('x');
  if (x == std::string::npos) throw FlError("preset layout must look like IxE, got '" + layout + "'");
  FlConfig c;
  c.strategy = s;
  c.lambda = lambda;
  try {
    c.rounds = std::stoul(layout.substr(0, x));
    c.local_epochs = std::stoul(layout.substr(x + 1));
  } catch (const std::exception&) {
    throw FlError("preset layout must look like IxE, got '" + layout + "'");
  }
  c.validate();
  return c;
}

const std::vector<std::string>& preset_layouts() {
  static const std::vector<std::string> layouts = {"5x20", "10x10", "20x5"};
  return layouts;
}

void to_json(nlohmann::json& j, const FlConfig& c) {
  j = {{"strategy", to_string(c.strategy)}, {"lambda", c.lambda},       {"rounds", c.rounds},
       {"local_epochs", c.local_epochs},    {"seed", c.seed},           {"sim_clamp", c.sim_clamp},
       {"mp_steps", c.mp_steps},            {"parallel", c.parallel},   {"record_weights", c.record_weights}};
}

void from_json(const nlohmann::json& j, FlConfig& c) {
  c = FlConfig{};
  if (j.contains("strategy")) c.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  c.lambda = j.value("lambda", c.lambda);
  c.rounds = j.value("rounds", c.rounds);
  c.local_epochs = j.value("local_epochs", c.local_epochs);
  c.seed = j.value("seed", c.seed);
  c.sim_clamp = j.value("sim_clamp", c.sim_clamp);
  c.mp_steps = j.value("mp_steps", c.mp_steps);
  c.parallel = j.value("parallel", c.parallel);
  c.record_weights = j.value("record_weights", c.record_weights);
  c.validate();
}

// ---------------------------------------------------------------------------
// Aggregation

namespace {

void check_lengths(const std::vector<WeightVec>& w) {
  if (w.empty()) throw FlError("nothing to aggregate");
  for (const auto& v : w) {
    if (v.size() != w[0].size()) throw FlError("weight vectors have different lengths");
  }
}

// sum_k c[k] * w[k], written as w[anchor] + sum_k c[k] * (w[k] - w[anchor])
// for coefficients summing to one. Exact when every w[k] equals w[anchor].
WeightVec convex_combination(const std::vector<WeightVec>& w, const Eigen::VectorXd& c, std::size_t anchor) {
  WeightVec out = w[anchor];
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    double delta = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) delta += c(static_cast<Eigen::Index>(k)) * (w[k][i] - w[anchor][i]);
    out[i] += delta;
  }
  return out;
}

}  // namespace

WeightVec fedavg_aggregate(const std::vector<WeightVec>& weights) {
  check_lengths(weights);
  const auto n = static_cast<double>(weights.size());
  WeightVec out = weights[0];
  for (std::size_t i = 0; i < out.size(); ++i) {
    double delta = 0.0;
    for (const auto& w : weights) delta += w[i] - weights[0][i];
    out[i] += delta / n;
  }
  return out;
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw FlError("cosine of vectors with different lengths");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  // sqrt(na * na) == na exactly, so cos(v, v) == 1.
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

Eigen::MatrixXd similarity_matrix(const std::vector<WeightVec>& weights) {
  check_lengths(weights);
  const auto n = static_cast<Eigen::Index>(weights.size());
  Eigen::MatrixXd s = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index k = j + 1; k < n; ++k) {
      s(j, k) = s(k, j) = cosine_sim(weights[static_cast<std::size_t>(j)], weights[static_cast<std::size_t>(k)]);
    }
  }
  return s;
}

FedGraphResult fedgraph_aggregate(const std::vector<WeightVec>& weights, bool clamp, std::size_t mp_steps) {
  check_lengths(weights);
  if (mp_steps < 1) throw FlError("mp_steps must be at least 1");
  FedGraphResult r;
  r.similarity = similarity_matrix(weights);
  r.relation = clamp ? r.similarity.cwiseMax(0.0).cwiseMin(1.0).eval() : r.similarity;
  r.relation.diagonal().setOnes();

  Eigen::MatrixXd step = r.relation;
  for (Eigen::Index j = 0; j < step.rows(); ++j) {
    const double total = step.row(j).sum();
    if (!(total > 0.0)) throw FlError("relation row has no positive mass; use sim_clamp");
    step.row(j) /= total;
  }

  std::vector<WeightVec> current = weights;
  r.mixing = Eigen::MatrixXd::Identity(step.rows(), step.cols());
  for (std::size_t hop = 0; hop < mp_steps; ++hop) {
    std::vector<WeightVec> next(current.size());
    for (std::size_t j = 0; j < current.size(); ++j) {
      next[j] = convex_combination(current, step.row(static_cast<Eigen::Index>(j)).transpose(), j);
    }
    current = std::move(next);
    r.mixing = (step * r.mixing).eval();
  }
  r.personalized = std::move(current);
  r.global = fedavg_aggregate(r.personalized);
  return r;
}

double comm_footprint(std::size_t rounds, std::size_t n_params, std::size_t n_points) {
  if (n_points == 0) throw FlError("footprint needs a positive number of data points");
  return static_cast<double>(rounds) * static_cast<double>(n_params) / static_cast<double>(n_points);
}

// ---------------------------------------------------------------------------
// Clients

std::vector<ClientData> partition_clients(const TimeSeriesPanel& panel, const NwGraph& nw, const LabelSet* reference) {
  if (panel.num_cells() != nw.num_cells()) throw FlError("panel and NW graph have different cell counts");
  if (reference && reference->num_cells() != panel.num_cells()) throw FlError("reference labels do not match panel");
  std::vector<ClientData> out;
  out.reserve(panel.num_cells());
  for (std::size_t c = 0; c < panel.num_cells(); ++c) {
    if (panel.cell_ids[c] != nw.cells[c].id) {
      throw FlError("cell order mismatch: panel has '" + panel.cell_ids[c] + "', NW graph has '" + nw.cells[c].id + "'");
    }
    ClientData d{nw.cells[c], panel.slice_cell(c), std::nullopt};
    if (reference) d.reference = LabelSet{{reference->flags[c]}};
    out.push_back(std::move(d));
  }
  return out;
}

Client::Client(ClientData data, const LocalSetup& setup) : data_(std::move(data)), setup_(setup) {
  if (data_.slice.num_cells() != 1) throw FlError("a client holds exactly one cell");
  if (setup_.sw.num_nodes() != data_.slice.num_signals()) throw FlError("SW graph does not match client signals");
}

std::size_t Client::num_points() const { return data_.slice.num_signals() * data_.slice.length(); }

ClientUpdate Client::local_train(std::span<const double> incoming, std::size_t epochs, const nn::LossMode& loss,
                                 std::uint64_t seed) const {
  ClientUpdate u{cell_id(), WeightVec(incoming.begin(), incoming.end()), {}, false};
  if (epochs > 0) {
    nn::Model model(setup_.model, nn::ModelWeights{nn::model_manifest(setup_.model), u.weights});
    nn::TrainConfig tc = setup_.train;
    tc.epochs = epochs;
    tc.seed = seed;
    tc.loss = loss;
    const WindowSampler sampler(data_.slice, setup_.sw, setup_.windows);
    try {
      nn::train(model, sampler, tc, loss.regularized() ? incoming : std::span<const double>{});
    } catch (const nn::DivergenceError& e) {
      spdlog::warn("client {} diverged: {}", cell_id(), e.what());
      u.failed = true;
      u.weights.clear();
      return u;
    }
    u.weights = model.weights().values;
  }
  u.metrics = evaluate(u.weights);
  return u;
}

LocalMetrics Client::evaluate(std::span<const double> weights) const {
  const nn::Model model(setup_.model,
                        nn::ModelWeights{nn::model_manifest(setup_.model), WeightVec(weights.begin(), weights.end())});
  LocalMetrics m;
  if (setup_.detector && data_.reference) {
    const auto res = detect::residuals(model, data_.slice, setup_.sw, setup_.windows);
    m.loss = res.mse();
    const auto det = detect::detect_panel(res, *setup_.detector);
    m.scores = metrics::prf1(det.labels, *data_.reference, res.evaluable);
  } else {
    m.loss = nn::evaluate_mse(model, WindowSampler(data_.slice, setup_.sw, setup_.windows));
  }
  return m;
}

std::vector<Client> make_clients(std::vector<ClientData> data, const LocalSetup& setup) {
  std::vector<Client> out;
  out.reserve(data.size());
  for (auto& d : data) out.emplace_back(std::move(d), setup);
  return out;
}

std::uint64_t client_seed(std::uint64_t seed, std::size_t round, std::size_t index) {
  return seed + 1000003ULL * round + index;
}

// ---------------------------------------------------------------------------
// Rounds

namespace {

std::vector<ClientUpdate> train_round(const std::vector<Client>& clients, const std::vector<WeightVec>& incoming,
                                      const FlConfig& cfg, std::size_t round) {
  const nn::LossMode loss = cfg.regularized() ? nn::LossMode::regularized(cfg.lambda) : nn::LossMode::mse();
  std::vector<ClientUpdate> updates(clients.size());
  auto work = [&](std::size_t j) {
    updates[j] = clients[j].local_train(incoming[j], cfg.local_epochs, loss, client_seed(cfg.seed, round, j));
  };
  const std::size_t workers = cfg.parallel ? std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()),
                                                                   clients.size())
                                           : 1;
  if (workers <= 1) {
    for (std::size_t j = 0; j < clients.size(); ++j) work(j);
    return updates;
  }
  // Static interleaved assignment; every client's result lands in its own slot.
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t j = w; j < clients.size(); j += workers) work(j);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return updates;
}

}  // namespace

FlResult run_rounds(const std::vector<Client>& clients, const FlConfig& cfg, const LocalSetup& setup) {
  cfg.validate();
  if (clients.empty()) throw FlError("no clients");
  const auto w0 = nn::init_weights(setup.model, cfg.seed).values;
  std::size_t points = 0;
  for (const auto& c : clients) points += c.num_points();

  FlResult result;
  std::vector<WeightVec> incoming(clients.size(), w0);
  const auto n = static_cast<Eigen::Index>(clients.size());
  for (std::size_t i = 0; i < cfg.rounds; ++i) {
    const auto updates = train_round(clients, incoming, cfg, i);

    // Server side: only the updates are visible from here on.
    std::vector<std::size_t> active;
    for (std::size_t j = 0; j < updates.size(); ++j) {
      if (!updates[j].failed) active.push_back(j);
    }
    if (active.empty()) throw AllClientsFailed("every client failed in round " + std::to_string(i + 1));
    std::vector<WeightVec> local;
    for (auto j : active) local.push_back(updates[j].weights);

    RoundRecord rec;
    rec.round = i + 1;
    rec.similarity = Eigen::MatrixXd::Constant(n, n, std::numeric_limits<double>::quiet_NaN());
    std::vector<WeightVec> personalized;
    WeightVec global;
    Eigen::MatrixXd sim;
    if (cfg.personalized()) {
      auto agg = fedgraph_aggregate(local, cfg.sim_clamp, cfg.mp_steps);
      personalized = std::move(agg.personalized);
      global = std::move(agg.global);
      sim = std::move(agg.similarity);
    } else {
      global = fedavg_aggregate(local);
      personalized.assign(local.size(), global);
      sim = similarity_matrix(local);
    }
    for (std::size_t a = 0; a < active.size(); ++a) {
      for (std::size_t b = 0; b < active.size(); ++b) {
        rec.similarity(static_cast<Eigen::Index>(active[a]), static_cast<Eigen::Index>(active[b])) =
            sim(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      }
    }

    // Failed clients restart from the global model.
    std::vector<WeightVec> next(clients.size(), global);
    for (std::size_t a = 0; a < active.size(); ++a) next[active[a]] = personalized[a];

    for (const auto& u : updates) {
      rec.cell_ids.push_back(u.cell_id);
      rec.metrics.push_back(u.metrics);
      rec.failed.push_back(u.failed);
    }
    rec.footprint = comm_footprint(i + 1, w0.size(), points);
    if (cfg.record_weights) {
      for (const auto& u : updates) rec.local.push_back(u.weights);
      rec.personalized = next;
      rec.global = global;
    }
    spdlog::info("{} round {}/{}: {} of {} clients aggregated", cfg.name(), i + 1, cfg.rounds, active.size(),
                 clients.size());
    result.rounds.push_back(std::move(rec));
    result.global = std::move(global);
    incoming = std::move(next);
  }
  result.personalized = std::move(incoming);
  result.footprint = comm_footprint(cfg.rounds, w0.size(), points);
  return result;
}

nlohmann::json round_to_json(const RoundRecord& r, const FlConfig& cfg) {
  auto clients = nlohmann::json::array();
  for (std::size_t j = 0; j < r.cell_ids.size(); ++j) {
    nlohmann::json c = {{"cell_id", r.cell_ids[j]}, {"failed", static_cast<bool>(r.failed[j])}};
    if (!r.failed[j]) {
      c["loss"] = r.metrics[j].loss;
      if (const auto& s = r.metrics[j].scores) {
        c["precision"] = s->precision;
        c["recall"] = s->recall;
        c["f1"] = s->f1;
      }
    }
    clients.push_back(std::move(c));
  }
  auto sim = nlohmann::json::array();
  for (Eigen::Index a = 0; a < r.similarity.rows(); ++a) {
    auto row = nlohmann::json::array();
    for (Eigen::Index b = 0; b < r.similarity.cols(); ++b) {
      const double v = r.similarity(a, b);
      row.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    }
    sim.push_back(std::move(row));
  }
  return {{"round", r.round},   {"strategy", cfg.name()}, {"clients", clients},
          {"similarity", sim}, {"footprint", r.footprint}};
}

std::string round_log_ndjson(const FlResult& result, const FlConfig& cfg) {
  std::string out;
  for (const auto& r : result.rounds) out += round_to_json(r, cfg).dump() + "\n";
  return out;
}

std::string similarity_csv(const FlResult& result) {
  std::ostringstream out;
  out.precision(17);
  if (result.rounds.empty()) return "round\n";
  const auto& ids = result.rounds.front().cell_ids;
  out << "round";
  for (std::size_t a = 0; a < ids.size(); ++a) {
    for (std::size_t b = a + 1; b < ids.size(); ++b) out << ',' << ids[a] << '|' << ids[b];
  }
  out << '\n';
  for (const auto& r : result.rounds) {
    out << r.round;
    for (Eigen::Index a = 0; a < r.similarity.rows(); ++a) {
      for (Eigen::Index b = a + 1; b < r.similarity.cols(); ++b) {
        const double v = r.similarity(a, b);
        out << ',';
        if (std::isnan(v)) out << "nan"; else out << v;
      }
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace ranwatch::fed
