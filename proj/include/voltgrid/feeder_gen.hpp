#pragma once

// Synthetic radial feeder generation. Trees are grown by random-parent
// attachment; loads are rejection-sampled until the unactuated flow
// solution at nominal load keeps every bus inside [0.88, 1.0] p.u.

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "voltgrid/circuit.hpp"
#include "voltgrid/powerflow.hpp"

namespace voltgrid {

/// Deterministic in all arguments. Regulators go on the first n_regulators
/// lines of the attachment order (closest to the source, where a tap
/// change reaches the most buses); capacitors and batteries land on
/// distinct randomly chosen non-root buses.
inline Circuit generate_feeder(int n_buses, int n_regulators, int n_capacitors, int n_batteries,
                               uint64_t seed) {
  if (n_buses < 2) throw std::invalid_argument("generate_feeder: need at least 2 buses");
  if (n_regulators < 0 || n_regulators > n_buses - 1)
    throw std::invalid_argument("generate_feeder: regulator count exceeds line count");
  if (n_capacitors < 0 || n_batteries < 0 || n_capacitors + n_batteries > 2 * (n_buses - 1))
    throw std::invalid_argument("generate_feeder: actuator count exceeds feasible placements");

  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 0x5851f42d4c957f2dULL);
  std::uniform_real_distribution<double> r_range(0.005, 0.03);
  std::uniform_real_distribution<double> x_range(0.005, 0.04);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (int attempt = 0; attempt < 100; ++attempt) {
    Circuit c;
    c.name = "feeder" + std::to_string(n_buses) + "_seed" + std::to_string(seed);
    c.v_source = 1.0;
    for (int i = 0; i < n_buses; ++i) {
      Bus b;
      b.id = i;
      b.name = "bus" + std::to_string(i);
      c.buses.push_back(b);
    }
    for (int j = 1; j < n_buses; ++j) {
      Line l;
      std::uniform_int_distribution<int> pick_parent(0, j - 1);
      l.from_bus = pick_parent(rng);
      l.to_bus = j;
      if (j - 1 < n_regulators) {
        // Keep regulator lines near the root: attach to the previous bus
        // so taps 0..n_regulators-1 form the feeder head.
        l.from_bus = j - 1;
        l.is_regulator = true;
        l.resistance = 0.0;
        l.reactance = 0.0;
      } else {
        l.resistance = r_range(rng);
        l.reactance = x_range(rng);
      }
      c.lines.push_back(l);
    }
    for (int r = 0; r < n_regulators; ++r) {
      Regulator reg;
      reg.line_index = r;
      c.regulators.push_back(reg);
    }

    // Loads scale inversely with feeder size so the total stays solvable
    // through p.u. impedances of this magnitude.
    double load_scale = 2.0 / n_buses;
    double total_p = 0.0, total_q = 0.0;
    for (int j = 1; j < n_buses; ++j) {
      double p = load_scale * (0.3 + 0.7 * unit(rng));
      double q = p * (0.1 + 0.4 * unit(rng));
      c.buses[j].base_load_p = p;
      c.buses[j].base_load_q = q;
      total_p += p;
      total_q += q;
    }

    std::vector<int> placement(n_buses - 1);
    for (int j = 1; j < n_buses; ++j) placement[j - 1] = j;
    std::shuffle(placement.begin(), placement.end(), rng);
    if (n_capacitors + n_batteries <= n_buses - 1) {
      int idx = 0;
      for (int k = 0; k < n_capacitors; ++k) {
        Capacitor cap;
        cap.bus = placement[idx++];
        cap.q_rated = (0.3 + 0.7 * unit(rng)) * total_q / std::max(1, n_capacitors);
        c.capacitors.push_back(cap);
      }
      for (int k = 0; k < n_batteries; ++k) {
        Battery bat;
        bat.bus = placement[idx++];
        bat.p_rated = (0.1 + 0.2 * unit(rng)) * total_p / std::max(1, n_batteries);
        bat.capacity = bat.p_rated * (2.0 + 2.0 * unit(rng));
        bat.num_levels = 5;
        bat.soc_init = 0.5;
        c.batteries.push_back(bat);
      }
    } else {
      // More actuators than buses: wrap around, sharing buses.
      int idx = 0;
      auto next_bus = [&]() {
        int b = placement[idx % placement.size()];
        ++idx;
        return b;
      };
      for (int k = 0; k < n_capacitors; ++k) {
        Capacitor cap;
        cap.bus = next_bus();
        cap.q_rated = (0.3 + 0.7 * unit(rng)) * total_q / std::max(1, n_capacitors);
        c.capacitors.push_back(cap);
      }
      for (int k = 0; k < n_batteries; ++k) {
        Battery bat;
        bat.bus = next_bus();
        bat.p_rated = (0.1 + 0.2 * unit(rng)) * total_p / std::max(1, n_batteries);
        bat.capacity = bat.p_rated * (2.0 + 2.0 * unit(rng));
        bat.num_levels = 5;
        bat.soc_init = 0.5;
        c.batteries.push_back(bat);
      }
    }

    std::vector<std::string> violations = validate_circuit(c);
    if (!violations.empty())
      throw std::logic_error("generate_feeder produced an invalid circuit: " + violations.front());

    // Unactuated nominal solve: middle taps (ratio 1 is not guaranteed for
    // even tap counts, so use the exact middle ratio), capacitors open,
    // batteries idle.
    Injections inj = Injections::zeros(n_buses);
    for (int j = 1; j < n_buses; ++j) {
      inj.p_load[j] = c.buses[j].base_load_p;
      inj.q_load[j] = c.buses[j].base_load_q;
    }
    std::vector<double> ratios;
    for (const Regulator& reg : c.regulators) ratios.push_back(reg.ratio_sq(reg.middle_tap()));
    try {
      FlowState fs = solve_distflow(c, inj, ratios);
      if (!fs.converged) continue;
      bool in_band = true;
      for (double vsq : fs.v_sq) {
        double v = std::sqrt(vsq);
        if (v < 0.88 || v > 1.0 + 1e-12) {
          in_band = false;
          break;
        }
      }
      if (in_band) return c;
    } catch (const SolverError&) {
      continue;
    }
  }
  throw std::runtime_error("generate_feeder: no feasible feeder after 100 attempts (n_buses=" +
                           std::to_string(n_buses) + ", seed=" + std::to_string(seed) + ")");
}

}  // namespace voltgrid
