#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "support.hpp"
#include "voltgrid/circuit.hpp"
#include "voltgrid/powerflow.hpp"

using namespace voltgrid;

namespace {

Circuit two_bus(double r = 0.01, double x = 0.02, bool regulator = false) {
  Circuit c;
  c.name = "two_bus";
  c.buses = {{0, "src", 0.0, 0.0}, {1, "load", 0.0, 0.0}};
  c.lines = {{0, 1, regulator ? 0.0 : r, regulator ? 0.0 : x, regulator}};
  if (regulator) c.regulators.push_back({0, 33, 0.9, 1.1});
  return c;
}

Injections load_at_bus1(int n, double p, double q) {
  Injections inj = Injections::zeros(n);
  inj.p_load[1] = p;
  inj.q_load[1] = q;
  return inj;
}

}  // namespace

TEST_CASE("no load means flat voltage and zero flow") {
  Circuit c = two_bus();
  FlowState fs = solve_distflow(c, Injections::zeros(2), {});
  REQUIRE(fs.converged);
  CHECK(fs.iterations <= 2);
  CHECK(fs.v_sq[0] == 1.0);
  CHECK(fs.v_sq[1] == 1.0);
  CHECK(fs.p_line[0] == 0.0);
  CHECK(fs.l_line[0] == 0.0);
}

TEST_CASE("regulator branch scales the downstream squared voltage") {
  Circuit c = two_bus(0, 0, true);
  FlowState fs = solve_distflow(c, Injections::zeros(2), {1.21});
  REQUIRE(fs.converged);
  CHECK(fs.v_sq[0] == Catch::Approx(1.0));
  CHECK(fs.v_sq[1] == Catch::Approx(1.21));
}

TEST_CASE("loaded two-bus line matches the bisection oracle") {
  Circuit c = two_bus(0.01, 0.02);
  FlowState fs = solve_distflow(c, load_at_bus1(2, 0.1, 0.05), {});
  REQUIRE(fs.converged);
  FlowState oracle = vgtest::two_bus_bisection_oracle(0.01, 0.02, 0.1, 0.05, 1.0);
  CHECK(fs.v_sq[1] == Catch::Approx(oracle.v_sq[1]).margin(1e-6));
  CHECK(fs.l_line[0] == Catch::Approx(oracle.l_line[0]).margin(1e-6));
  CHECK(vgtest::eq1_max_residual(c, load_at_bus1(2, 0.1, 0.05), {}, fs) < 1e-7);
}

TEST_CASE("solver options are validated") {
  Circuit c = two_bus();
  REQUIRE_THROWS_AS(solve_distflow(c, load_at_bus1(2, 0.1, 0.0), {}, {0.0, 50}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(solve_distflow(c, load_at_bus1(2, 0.1, 0.0), {}, {1e-8, 0}),
                    std::invalid_argument);
  Injections bad = Injections::zeros(2);
  bad.p_load[0] = 0.5;  // root load must be zero
  REQUIRE_THROWS_AS(solve_distflow(c, bad, {}), std::invalid_argument);
  Circuit creg = two_bus(0, 0, true);
  REQUIRE_THROWS_AS(solve_distflow(creg, Injections::zeros(2), {2.0}), std::invalid_argument);
}

TEST_CASE("voltage collapse is reported with the failing bus") {
  Circuit c;
  c.buses = {{0, "", 0.0, 0.0}, {1, "", 0.0, 0.0}, {2, "", 0.0, 0.0}};
  c.lines = {{0, 1, 0.3, 0.3, false}, {1, 2, 0.3, 0.3, false}};
  Injections inj = Injections::zeros(3);
  inj.p_load[2] = 1.0;
  inj.q_load[2] = 0.5;
  REQUIRE_THROWS_WITH(solve_distflow(c, inj, {}),
                      Catch::Matchers::ContainsSubstring("voltage collapse at bus 2"));
}

TEST_CASE("power loss definitions") {
  SECTION("zero-load flow has zero loss") {
    Circuit c = two_bus();
    FlowState fs = solve_distflow(c, Injections::zeros(2), {});
    CHECK(power_loss(c, fs) == 0.0);
  }
  SECTION("single loaded line equals R*l") {
    Circuit c = two_bus(0.01, 0.02);
    Injections inj = load_at_bus1(2, 0.1, 0.05);
    FlowState fs = solve_distflow(c, inj, {});
    CHECK(power_loss(c, fs) == Catch::Approx(0.01 * fs.l_line[0]));
  }
  SECTION("all-regulator circuit has zero loss under load") {
    Circuit c;
    c.buses = {{0, "", 0.0, 0.0}, {1, "", 0.0, 0.0}, {2, "", 0.0, 0.0}};
    c.lines = {{0, 1, 0.0, 0.0, true}, {1, 2, 0.0, 0.0, true}};
    c.regulators = {{0, 33, 0.9, 1.1}, {1, 33, 0.9, 1.1}};
    Injections inj = Injections::zeros(3);
    inj.p_load[2] = 0.3;
    FlowState fs = solve_distflow(c, inj, {1.05, 0.95});
    REQUIRE(fs.converged);
    CHECK(power_loss(c, fs) == 0.0);
  }
}

TEST_CASE("voltage violation arithmetic") {
  FlowState fs;
  fs.v_sq = {1.0, 1.0, 1.0};
  fs.converged = true;
  CHECK(voltage_violation(fs, 0.95, 1.05) == 0.0);
  fs.v_sq = {1.0, 0.90 * 0.90, 1.0};
  CHECK(voltage_violation(fs, 0.95, 1.05) == Catch::Approx(0.05));
  fs.v_sq = {1.0, 1.10 * 1.10, 0.93 * 0.93};
  CHECK(voltage_violation(fs, 0.95, 1.05) == Catch::Approx(0.07));
}

TEST_CASE("property: converged states satisfy the constraint equations") {
  int checked = 0;
  for (uint64_t seed = 0; seed < 110; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> size(2, 9);
    int n = size(rng);
    Circuit c = vgtest::random_test_circuit(n, rng, seed % 3 == 0 ? 1 : 0);
    Injections inj = Injections::zeros(n);
    for (int j = 1; j < n; ++j) {
      inj.p_load[j] = c.buses[j].base_load_p;
      inj.q_load[j] = c.buses[j].base_load_q;
    }
    std::vector<double> ratios;
    for (const Regulator& r : c.regulators) {
      std::uniform_int_distribution<int> tap(0, r.num_taps - 1);
      ratios.push_back(r.ratio_sq(tap(rng)));
    }
    SolveOptions opt;
    FlowState fs = solve_distflow(c, inj, ratios, opt);
    REQUIRE(fs.converged);
    CHECK(vgtest::eq1_max_residual(c, inj, ratios, fs) <= 10.0 * opt.tol);
    ++checked;
  }
  CHECK(checked >= 100);
}

TEST_CASE("property: heavier load strictly lowers the downstream voltage") {
  Circuit c = two_bus(0.02, 0.03);
  double prev = 2.0;
  for (int k = 1; k <= 10; ++k) {
    double p = 0.05 * k;
    FlowState fs = solve_distflow(c, load_at_bus1(2, p, 0.4 * p), {});
    REQUIRE(fs.converged);
    CHECK(fs.v_sq[1] < prev);
    prev = fs.v_sq[1];
  }
}

TEST_CASE("property: root injection balances load, battery, and loss") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 2 + static_cast<int>(rng() % 7);
    Circuit c = vgtest::random_test_circuit(n, rng);
    Injections inj = Injections::zeros(n);
    double total_load = 0.0, total_bat = 0.0;
    for (int j = 1; j < n; ++j) {
      inj.p_load[j] = c.buses[j].base_load_p;
      inj.q_load[j] = c.buses[j].base_load_q;
      total_load += inj.p_load[j];
      if (j == 1) {
        inj.p_bat[j] = 0.02;
        total_bat += 0.02;
      }
    }
    SolveOptions opt;
    FlowState fs = solve_distflow(c, inj, {}, opt);
    REQUIRE(fs.converged);
    double root_injection = 0.0;
    for (int e = 0; e < c.num_lines(); ++e)
      if (c.lines[e].from_bus == 0) root_injection += fs.p_line[e];
    CHECK(root_injection ==
          Catch::Approx(total_load - total_bat + power_loss(c, fs)).margin(10.0 * opt.tol));
  }
}

TEST_CASE("determinism: identical inputs give bit-identical states") {
  std::mt19937_64 rng(5);
  Circuit c = vgtest::random_test_circuit(6, rng);
  Injections inj = Injections::zeros(6);
  for (int j = 1; j < 6; ++j) {
    inj.p_load[j] = c.buses[j].base_load_p;
    inj.q_load[j] = c.buses[j].base_load_q;
  }
  FlowState a = solve_distflow(c, inj, {});
  FlowState b = solve_distflow(c, inj, {});
  CHECK(a.v_sq == b.v_sq);
  CHECK(a.p_line == b.p_line);
  CHECK(a.q_line == b.q_line);
  CHECK(a.l_line == b.l_line);
  CHECK(a.iterations == b.iterations);
}

TEST_CASE("sweep solution matches the Newton reference on mixed circuits") {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 10; ++trial) {
    int n = 2 + static_cast<int>(rng() % 5);
    Circuit c = vgtest::random_test_circuit(n, rng, trial % 2);
    Injections inj = Injections::zeros(n);
    for (int j = 1; j < n; ++j) {
      inj.p_load[j] = c.buses[j].base_load_p;
      inj.q_load[j] = c.buses[j].base_load_q;
    }
    std::vector<double> ratios;
    for (const Regulator& r : c.regulators) ratios.push_back(r.ratio_sq(20));
    FlowState sweep = solve_distflow(c, inj, ratios);
    REQUIRE(sweep.converged);
    FlowState newton = vgtest::newton_reference_solve(c, inj, ratios);
    for (int j = 0; j < n; ++j) CHECK(sweep.v_sq[j] == Catch::Approx(newton.v_sq[j]).margin(1e-6));
  }
}
