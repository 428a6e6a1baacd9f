// Bi-level graph model: the static software-execution graph over counters
// (SW graph) and the cell topology graph (NW graph), plus disjoint-union
// batching used by the recurrent graph model.
#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ranwatch {

class GraphError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Static execution graph over the K monitored counters of one cell.
/// Edges are directed (execution flow); the model symmetrizes them.
class SwGraph {
public:
  SwGraph() = default;

  std::size_t num_nodes() const { return names_.size(); }
  std::size_t num_edges() const { return edges_.size(); }
  const std::vector<std::string>& node_names() const { return names_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<double>& edge_attrs() const { return attrs_; }

  /// One-hop successors of `node` along directed edges, in edge order.
  std::vector<std::size_t> successors(std::size_t node) const;

  /// Same nodes, no edges. Used by the disconnected baseline.
  SwGraph without_edges() const;

  nlohmann::json to_json() const;
  static SwGraph from_json(const nlohmann::json& j);

  friend bool operator==(const SwGraph&, const SwGraph&) = default;

private:
  friend SwGraph build_sw_graph(const std::vector<std::string>&,
                                const std::vector<std::pair<std::string, std::string>>&,
                                const std::optional<std::vector<double>>&, bool);
  std::vector<std::string> names_;
  std::vector<Edge> edges_;
  std::vector<double> attrs_;
};

/// Builds a validated SW graph. Edge endpoints are given by node name.
/// Self-loops are rejected unless `allow_self_loops` is set.
SwGraph build_sw_graph(const std::vector<std::string>& names,
                       const std::vector<std::pair<std::string, std::string>>& edges,
                       const std::optional<std::vector<double>>& attrs = std::nullopt,
                       bool allow_self_loops = false);

/// Chain of K counters (k -> k+1), the default synthetic execution graph.
SwGraph chain_sw_graph(std::size_t k, const std::string& prefix = "signal_");

/// Every node k feeds the next `out_degree` nodes modulo K.
SwGraph ring_sw_graph(std::size_t k, std::size_t out_degree,
                      const std::string& prefix = "signal_");

enum class Area { airport, downtown, rural };

std::string to_string(Area a);
Area area_from_string(const std::string& s);

struct CellMeta {
  std::string id;
  Area area = Area::downtown;
  std::optional<std::pair<double, double>> position;

  friend bool operator==(const CellMeta&, const CellMeta&) = default;
};

struct NwRule {
  enum class Kind { area_complete, radius } kind = Kind::area_complete;
  double radius = 0.0;

  static NwRule area_complete() { return {}; }
  static NwRule within(double r) { return {Kind::radius, r}; }
};

/// Topology over cells. `relation` is N x N with unit diagonal.
struct NwGraph {
  std::vector<CellMeta> cells;
  Eigen::MatrixXd relation;

  std::size_t num_cells() const { return cells.size(); }
};

NwGraph build_nw_graph(const std::vector<CellMeta>& cells, NwRule rule = NwRule::area_complete());

/// Cells split across areas in the airport/downtown/rural proportions
/// 12:29:26, with ids "cell_000", ... and no positions.
std::vector<CellMeta> default_cells(std::size_t n);

/// B disjoint copies of an E-edge graph on K nodes.
struct BatchedGraph {
  std::size_t nodes_per_sample = 0;
  std::size_t num_samples = 0;
  Eigen::Matrix<long, 2, Eigen::Dynamic> edge_index;
  Eigen::VectorXd edge_attr;
  std::vector<std::size_t> batch;

  std::size_t num_nodes() const { return nodes_per_sample * num_samples; }
  std::size_t num_edges() const { return static_cast<std::size_t>(edge_index.cols()); }
};

BatchedGraph disjoint_union_batch(const SwGraph& g, std::size_t batch_size);

}  // namespace ranwatch
