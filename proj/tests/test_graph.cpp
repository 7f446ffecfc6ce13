#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "support.hpp"
#include "voltgrid/circuit.hpp"
#include "voltgrid/feeder_gen.hpp"
#include "voltgrid/graph.hpp"

using namespace voltgrid;

namespace {

Circuit chain(int n, int regulator_line = -1) {
  Circuit c;
  for (int i = 0; i < n; ++i) c.buses.push_back({i, "", i > 0 ? 0.01 : 0.0, 0.0});
  for (int i = 1; i < n; ++i) {
    bool reg = (i - 1) == regulator_line;
    c.lines.push_back({i - 1, i, reg ? 0.0 : 0.01, reg ? 0.0 : 0.01, reg});
  }
  if (regulator_line >= 0) c.regulators.push_back({regulator_line, 33, 0.9, 1.1});
  return c;
}

}  // namespace

TEST_CASE("single bus graph is a pure self-loop") {
  Circuit c;
  c.buses.push_back({0, "", 0.0, 0.0});
  GraphRep rep = build_graph(c);
  REQUIRE(rep.n == 1);
  CHECK(rep.norm_adj(0, 0) == Catch::Approx(1.0));
}

TEST_CASE("two-bus chain normalization") {
  GraphRep rep = build_graph(chain(2));
  // Both nodes have degree 2 (neighbor + self-loop): every entry 1/2.
  CHECK(rep.norm_adj(0, 0) == Catch::Approx(0.5));
  CHECK(rep.norm_adj(0, 1) == Catch::Approx(0.5));
  CHECK(rep.norm_adj(1, 1) == Catch::Approx(0.5));
}

TEST_CASE("feeder graph structure") {
  Circuit c = load_circuit(std::string(VOLTGRID_DATA_DIR) + "/feeder13.json");
  GraphRep rep = build_graph(c);
  REQUIRE(rep.n == 13);
  CHECK(rep.norm_adj.rows() == 13);
  CHECK((rep.norm_adj - rep.norm_adj.transpose()).cwiseAbs().maxCoeff() == 0.0);
  // Nonzero pattern is exactly lines plus the diagonal.
  for (int u = 0; u < 13; ++u)
    for (int v = 0; v < 13; ++v) {
      bool is_line = false;
      for (const Line& l : c.lines)
        is_line |= (l.from_bus == u && l.to_bus == v) || (l.from_bus == v && l.to_bus == u);
      bool expect = is_line || u == v;
      CHECK((rep.norm_adj(u, v) != 0.0) == expect);
    }
  // All nonzero entries in (0, 1].
  for (int u = 0; u < 13; ++u)
    for (int v = 0; v < 13; ++v)
      if (rep.norm_adj(u, v) != 0.0) {
        CHECK(rep.norm_adj(u, v) > 0.0);
        CHECK(rep.norm_adj(u, v) <= 1.0);
      }
}

TEST_CASE("augmentation adds regulator-to-descendant edges") {
  SECTION("no regulators leaves the matrix untouched") {
    Circuit c = chain(4);
    GraphRep base = build_graph(c);
    GraphRep aug = augment_regulator_edges(c, base);
    CHECK(aug.norm_adj == base.norm_adj);
    CHECK(aug.augmented);
  }
  SECTION("chain with head regulator") {
    Circuit c = chain(5, 0);  // regulator on line (0,1)
    GraphRep base = build_graph(c);
    GraphRep aug = augment_regulator_edges(c, base);
    CHECK(aug.has_edge(1, 2));
    CHECK(aug.has_edge(1, 3));
    CHECK(aug.has_edge(1, 4));
    CHECK_FALSE(base.has_edge(1, 3));
    CHECK_FALSE(base.has_edge(1, 4));
    // Every descendant of the regulator child is now one hop away.
    for (int d : descendants(c, 1)) CHECK(aug.has_edge(1, d));
  }
  SECTION("idempotent") {
    Circuit c = chain(6, 1);
    GraphRep once = augment_regulator_edges(c, build_graph(c));
    GraphRep twice = augment_regulator_edges(c, once);
    CHECK(once.edges == twice.edges);
    CHECK(once.norm_adj == twice.norm_adj);
  }
  SECTION("never removes an edge") {
    Circuit c = generate_feeder(23, 2, 2, 1, 4);
    GraphRep base = build_graph(c);
    GraphRep aug = augment_regulator_edges(c, base);
    for (const auto& e : base.edges) CHECK(aug.edges.count(e) == 1);
  }
}
