#include "ranwatch/graphcore.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <unordered_map>
#include <unordered_set>

namespace ranwatch {

SwGraph build_sw_graph(const std::vector<std::string>& names,
                       const std::vector<std::pair<std::string, std::string>>& edges,
                       const std::optional<std::vector<double>>& attrs, bool allow_self_loops) {
  if (names.empty()) {
    throw GraphError("SW graph needs at least one node");
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!index.emplace(names[i], i).second) {
      throw GraphError("duplicate node name '" + names[i] + "'");
    }
  }
  if (attrs && attrs->size() != edges.size()) {
    throw GraphError("edge attribute count " + std::to_string(attrs->size()) +
                     " does not match edge count " + std::to_string(edges.size()));
  }

  SwGraph g;
  g.names_ = names;
  g.edges_.reserve(edges.size());
  for (const auto& [src, dst] : edges) {
    auto s = index.find(src);
    auto d = index.find(dst);
    if (s == index.end() || d == index.end()) {
      throw GraphError("dangling edge endpoint in (" + src + ", " + dst + ")");
    }
    if (s->second == d->second && !allow_self_loops) {
      throw GraphError("self-loop on '" + src + "'");
    }
    g.edges_.push_back({s->second, d->second});
  }
  g.attrs_ = attrs ? *attrs : std::vector<double>(edges.size(), 1.0);
  return g;
}

std::vector<std::size_t> SwGraph::successors(std::size_t node) const {
  std::vector<std::size_t> out;
  for (const auto& e : edges_) {
    if (e.src == node) out.push_back(e.dst);
  }
  return out;
}

SwGraph SwGraph::without_edges() const {
  SwGraph g;
  g.names_ = names_;
  return g;
}

nlohmann::json SwGraph::to_json() const {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : edges_) edges.push_back({names_[e.src], names_[e.dst]});
  return {{"nodes", names_}, {"edges", edges}, {"attrs", attrs_}};
}

SwGraph SwGraph::from_json(const nlohmann::json& j) {
  try {
    auto names = j.at("nodes").get<std::vector<std::string>>();
    std::vector<std::pair<std::string, std::string>> edges;
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 2) throw GraphError("edge must be a [src, dst] pair");
      // Endpoints may be given by name or by node index.
      auto endpoint = [&](const nlohmann::json& v) -> std::string {
        if (v.is_string()) return v.get<std::string>();
        auto idx = v.get<std::size_t>();
        if (idx >= names.size()) throw GraphError("dangling edge endpoint index " + std::to_string(idx));
        return names[idx];
      };
      edges.emplace_back(endpoint(e[0]), endpoint(e[1]));
    }
    std::optional<std::vector<double>> attrs;
    if (j.contains("attrs")) attrs = j.at("attrs").get<std::vector<double>>();
    bool self_loops = std::any_of(edges.begin(), edges.end(),
                                  [](const auto& e) { return e.first == e.second; });
    return build_sw_graph(names, edges, attrs, self_loops);
  } catch (const nlohmann::json::exception& ex) {
    throw GraphError(std::string("malformed SW graph JSON: ") + ex.what());
  }
}

namespace {

std::vector<std::string> numbered(std::size_t k, const std::string& prefix) {
  std::vector<std::string> names;
  names.reserve(k);
  for (std::size_t i = 0; i < k; ++i) names.push_back(prefix + std::to_string(i + 1));
  return names;
}

}  // namespace

SwGraph chain_sw_graph(std::size_t k, const std::string& prefix) {
  auto names = numbered(k, prefix);
  std::vector<std::pair<std::string, std::string>> edges;
  for (std::size_t i = 0; i + 1 < k; ++i) edges.emplace_back(names[i], names[i + 1]);
  return build_sw_graph(names, edges);
}

SwGraph ring_sw_graph(std::size_t k, std::size_t out_degree, const std::string& prefix) {
  if (out_degree >= k) throw GraphError("ring out-degree must be below node count");
  auto names = numbered(k, prefix);
  std::vector<std::pair<std::string, std::string>> edges;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t s = 1; s <= out_degree; ++s) edges.emplace_back(names[i], names[(i + s) % k]);
  }
  return build_sw_graph(names, edges);
}

std::string to_string(Area a) {
  switch (a) {
    case Area::airport: return "airport";
    case Area::downtown: return "downtown";
    case Area::rural: return "rural";
  }
  return "unknown";
}

Area area_from_string(const std::string& s) {
  if (s == "airport") return Area::airport;
  if (s == "downtown") return Area::downtown;
  if (s == "rural") return Area::rural;
  throw GraphError("unknown area '" + s + "'");
}

NwGraph build_nw_graph(const std::vector<CellMeta>& cells, NwRule rule) {
  if (cells.empty()) throw GraphError("NW graph needs at least one cell");
  std::unordered_set<std::string> ids;
  for (const auto& c : cells) {
    if (!ids.insert(c.id).second) throw GraphError("duplicate cell id '" + c.id + "'");
    if (rule.kind == NwRule::Kind::radius && !c.position) {
      throw GraphError("radius rule requires a position for cell '" + c.id + "'");
    }
  }

  const auto n = static_cast<Eigen::Index>(cells.size());
  NwGraph g{cells, Eigen::MatrixXd::Identity(n, n)};
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index k = j + 1; k < n; ++k) {
      const auto& a = cells[j];
      const auto& b = cells[k];
      bool linked = false;
      if (rule.kind == NwRule::Kind::area_complete) {
        linked = a.area == b.area;
      } else {
        double dx = a.position->first - b.position->first;
        double dy = a.position->second - b.position->second;
        linked = std::hypot(dx, dy) <= rule.radius;
      }
      g.relation(j, k) = g.relation(k, j) = linked ? 1.0 : 0.0;
    }
  }
  return g;
}

std::vector<CellMeta> default_cells(std::size_t n) {
  // Largest-remainder apportionment of 12:29:26.
  constexpr std::array<double, 3> share{12.0, 29.0, 26.0};
  constexpr std::array<Area, 3> areas{Area::airport, Area::downtown, Area::rural};
  std::array<std::size_t, 3> count{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t a = 0; a < 3; ++a) {
    double exact = share[a] / 67.0 * static_cast<double>(n);
    count[a] = static_cast<std::size_t>(std::floor(exact));
    rem[a] = exact - static_cast<double>(count[a]);
    assigned += count[a];
  }
  while (assigned < n) {
    auto best = static_cast<std::size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++count[best];
    rem[best] = -1.0;
    ++assigned;
  }

  std::vector<CellMeta> cells;
  cells.reserve(n);
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t i = 0; i < count[a]; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "cell_%03zu", cells.size());
      cells.push_back({id, areas[a], std::nullopt});
    }
  }
  return cells;
}

BatchedGraph disjoint_union_batch(const SwGraph& g, std::size_t batch_size) {
  if (batch_size < 1) throw GraphError("batch size must be at least 1");
  const std::size_t k = g.num_nodes();
  const std::size_t e = g.num_edges();

  BatchedGraph out;
  out.nodes_per_sample = k;
  out.num_samples = batch_size;
  out.edge_index.resize(2, static_cast<Eigen::Index>(batch_size * e));
  out.edge_attr.resize(static_cast<Eigen::Index>(batch_size * e));
  out.batch.resize(batch_size * k);
  for (std::size_t s = 0; s < batch_size; ++s) {
    for (std::size_t i = 0; i < e; ++i) {
      auto col = static_cast<Eigen::Index>(s * e + i);
      out.edge_index(0, col) = static_cast<long>(g.edges()[i].src + s * k);
      out.edge_index(1, col) = static_cast<long>(g.edges()[i].dst + s * k);
      out.edge_attr(col) = g.edge_attrs()[i];
    }
    std::fill_n(out.batch.begin() + static_cast<std::ptrdiff_t>(s * k), k, s);
  }
  return out;
}

}  // namespace ranwatch
