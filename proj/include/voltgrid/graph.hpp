#pragma once

// Message-passing structure over a circuit: one node per bus, one
// undirected edge per line, self-loops everywhere, and symmetric-degree
// normalization norm_adj[u][v] = 1 / sqrt(deg(u) deg(v)) on present edges.

#include <set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "voltgrid/circuit.hpp"

namespace voltgrid {

struct GraphRep {
  int n = 0;
  std::set<std::pair<int, int>> edges;  // undirected, stored with u <= v; includes self-loops
  Eigen::MatrixXd norm_adj;
  bool augmented = false;

  bool has_edge(int u, int v) const {
    if (u > v) std::swap(u, v);
    return edges.count({u, v}) > 0;
  }
};

namespace detail {

inline Eigen::MatrixXd normalized_adjacency(int n, const std::set<std::pair<int, int>>& edges) {
  std::vector<double> deg(n, 0.0);
  for (const auto& [u, v] : edges) {
    deg[u] += 1.0;
    if (v != u) deg[v] += 1.0;
  }
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (const auto& [u, v] : edges) {
    double w = 1.0 / std::sqrt(deg[u] * deg[v]);
    a(u, v) = w;
    a(v, u) = w;
  }
  return a;
}

}  // namespace detail

inline GraphRep build_graph(const Circuit& c) {
  GraphRep rep;
  rep.n = c.num_buses();
  for (int i = 0; i < rep.n; ++i) rep.edges.insert({i, i});
  for (const Line& l : c.lines) {
    int u = l.from_bus, v = l.to_bus;
    if (u > v) std::swap(u, v);
    rep.edges.insert({u, v});
  }
  rep.norm_adj = detail::normalized_adjacency(rep.n, rep.edges);
  return rep;
}

/// Connects each regulator line's child bus directly to every bus in its
/// subtree, so one message-passing hop reaches everything the tap affects.
/// Idempotent; never removes an edge.
inline GraphRep augment_regulator_edges(const Circuit& c, const GraphRep& base) {
  GraphRep rep = base;
  for (const Regulator& reg : c.regulators) {
    int child = c.lines[reg.line_index].to_bus;
    for (int d : descendants(c, child)) {
      int u = child, v = d;
      if (u > v) std::swap(u, v);
      rep.edges.insert({u, v});
    }
  }
  rep.norm_adj = detail::normalized_adjacency(rep.n, rep.edges);
  rep.augmented = true;
  return rep;
}

}  // namespace voltgrid
