#pragma once

// Branch-flow (DistFlow) solver for radial circuits via backward/forward
// sweeps. The model, per line (i,j) with sending-end flows p_ij, q_ij and
// squared current l_ij = (p_ij^2 + q_ij^2) / v_i^2:
//
//   nodal balance   p_j = p_ij - R_ij l_ij - sum_k p_jk + p_bat_j   (q analogous, with q_cap)
//   voltage drop    v_j^2 = v_i^2 - 2(R p_ij + X q_ij) + (R^2 + X^2) l_ij
//   regulator line  v_j^2 = r v_i^2          (R = X = 0)
//
// Note the squared-current definition uses the sending-end voltage v_i.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "voltgrid/circuit.hpp"

namespace voltgrid {

struct Injections {
  std::vector<double> p_load;  // per bus, after profile scaling
  std::vector<double> q_load;
  std::vector<double> p_bat;  // positive = discharge into the grid
  std::vector<double> q_cap;

  static Injections zeros(int n) {
    Injections inj;
    inj.p_load.assign(n, 0.0);
    inj.q_load.assign(n, 0.0);
    inj.p_bat.assign(n, 0.0);
    inj.q_cap.assign(n, 0.0);
    return inj;
  }
};

struct FlowState {
  std::vector<double> p_line;  // sending-end active flow per line
  std::vector<double> q_line;
  std::vector<double> l_line;  // squared current magnitude per line
  std::vector<double> v_sq;    // squared voltage per bus
  bool converged = false;
  int iterations = 0;
};

class SolverError : public std::runtime_error {
 public:
  explicit SolverError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SolveOptions {
  double tol = 1e-8;  // max |change| in v_sq between iterations
  int max_iter = 50;
};

/// Fixed-point sweep solve. `reg_ratios_sq` holds the squared turns ratio
/// per regulator, ordered as circuit.regulators. Non-convergence is
/// reported through FlowState::converged, not thrown; a collapsing voltage
/// (v_sq <= 0 at any point of the iteration) is a SolverError.
inline FlowState solve_distflow(const Circuit& c, const Injections& inj,
                                const std::vector<double>& reg_ratios_sq,
                                const SolveOptions& opt = {}) {
  const int n = c.num_buses();
  const int m = c.num_lines();
  if (static_cast<int>(inj.p_load.size()) != n || static_cast<int>(inj.q_load.size()) != n ||
      static_cast<int>(inj.p_bat.size()) != n || static_cast<int>(inj.q_cap.size()) != n)
    throw std::invalid_argument("solve_distflow: injection arrays must have one entry per bus");
  if (inj.p_load[0] != 0.0 || inj.q_load[0] != 0.0)
    throw std::invalid_argument("solve_distflow: root bus load entries must be zero");
  if (reg_ratios_sq.size() != c.regulators.size())
    throw std::invalid_argument("solve_distflow: need one squared ratio per regulator");
  if (opt.tol <= 0.0 || opt.max_iter < 1)
    throw std::invalid_argument("solve_distflow: tol must be > 0 and max_iter >= 1");
  for (size_t r = 0; r < c.regulators.size(); ++r) {
    const Regulator& reg = c.regulators[r];
    double lo = reg.ratio_min * reg.ratio_min, hi = reg.ratio_max * reg.ratio_max;
    if (reg_ratios_sq[r] < lo - 1e-12 || reg_ratios_sq[r] > hi + 1e-12)
      throw std::invalid_argument("solve_distflow: regulator " + std::to_string(r) +
                                  " ratio^2 outside [ratio_min^2, ratio_max^2]");
  }

  // Squared ratio per line, 1 for ordinary lines.
  std::vector<double> line_ratio_sq(m, 1.0);
  for (size_t r = 0; r < c.regulators.size(); ++r)
    line_ratio_sq[c.regulators[r].line_index] = reg_ratios_sq[r];

  const std::vector<int> order = c.bfs_order();  // parents precede children
  const std::vector<std::vector<int>> children = c.child_lines();
  const std::vector<int> parent = c.parent_lines();

  FlowState fs;
  fs.p_line.assign(m, 0.0);
  fs.q_line.assign(m, 0.0);
  fs.l_line.assign(m, 0.0);
  fs.v_sq.assign(n, c.v_source);

  for (int it = 1; it <= opt.max_iter; ++it) {
    // Backward sweep, leaves to root: the flow sent into line (i,j) covers
    // the subtree demand below j plus the line's own loss (from the
    // previous l iterate).
    for (int k = n - 1; k >= 1; --k) {
      int j = order[k];
      int e = parent[j];
      const Line& l = c.lines[e];
      double p = inj.p_load[j] - inj.p_bat[j];
      double q = inj.q_load[j] - inj.q_cap[j];
      for (int f : children[j]) {
        p += fs.p_line[f];
        q += fs.q_line[f];
      }
      fs.p_line[e] = p + l.resistance * fs.l_line[e];
      fs.q_line[e] = q + l.reactance * fs.l_line[e];
    }

    // Current update from the sending-end voltage.
    for (int e = 0; e < m; ++e) {
      double vi = fs.v_sq[c.lines[e].from_bus];
      fs.l_line[e] = (fs.p_line[e] * fs.p_line[e] + fs.q_line[e] * fs.q_line[e]) / vi;
    }

    // Forward sweep, root to leaves.
    double max_dv = 0.0;
    for (int k = 1; k < n; ++k) {
      int j = order[k];
      int e = parent[j];
      const Line& l = c.lines[e];
      double vi = fs.v_sq[l.from_bus];
      double vj;
      if (l.is_regulator) {
        vj = line_ratio_sq[e] * vi;
      } else {
        vj = vi - 2.0 * (l.resistance * fs.p_line[e] + l.reactance * fs.q_line[e]) +
             (l.resistance * l.resistance + l.reactance * l.reactance) * fs.l_line[e];
      }
      if (vj <= 0.0)
        throw SolverError("voltage collapse at bus " + std::to_string(j) +
                          " (v_sq = " + std::to_string(vj) + ")");
      max_dv = std::max(max_dv, std::abs(vj - fs.v_sq[j]));
      fs.v_sq[j] = vj;
    }

    fs.iterations = it;
    if (max_dv < opt.tol) {
      fs.converged = true;
      break;
    }
  }
  return fs;
}

/// Total resistive loss, sum of R_ij * l_ij.
inline double power_loss(const Circuit& c, const FlowState& fs) {
  double loss = 0.0;
  for (int e = 0; e < c.num_lines(); ++e) loss += c.lines[e].resistance * fs.l_line[e];
  return loss;
}

/// Sum over buses of the distance outside [v_min, v_max], in voltage
/// magnitude (not squared) units.
inline double voltage_violation(const FlowState& fs, double v_min, double v_max) {
  double total = 0.0;
  for (double vsq : fs.v_sq) {
    double v = std::sqrt(vsq);
    if (v < v_min) total += v_min - v;
    if (v > v_max) total += v - v_max;
  }
  return total;
}

}  // namespace voltgrid
