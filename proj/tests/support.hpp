#pragma once

// Shared test oracles. Everything here re-derives expected values from
// first principles (residual algebra, generic Newton root finding, finite
// differences) without touching the implementation paths under test.

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "voltgrid/circuit.hpp"
#include "voltgrid/powerflow.hpp"
#include "voltgrid/tensor.hpp"

namespace vgtest {

using voltgrid::Circuit;
using voltgrid::FlowState;
using voltgrid::Injections;

/// Max absolute residual of the four branch-flow constraint families,
/// evaluated directly on a candidate state:
///   nodal p balance, nodal q balance, voltage equation (with the
///   regulator branch), and the squared-current definition.
inline double eq1_max_residual(const Circuit& c, const Injections& inj,
                               const std::vector<double>& reg_ratios_sq, const FlowState& fs) {
  const int n = c.num_buses();
  std::vector<double> line_ratio_sq(c.num_lines(), 1.0);
  for (size_t r = 0; r < c.regulators.size(); ++r)
    line_ratio_sq[c.regulators[r].line_index] = reg_ratios_sq[r];
  std::vector<int> parent = c.parent_lines();
  std::vector<std::vector<int>> children = c.child_lines();

  double worst = 0.0;
  auto track = [&worst](double r) { worst = std::max(worst, std::abs(r)); };
  for (int j = 1; j < n; ++j) {
    int e = parent[j];
    const voltgrid::Line& l = c.lines[e];
    double child_p = 0.0, child_q = 0.0;
    for (int f : children[j]) {
      child_p += fs.p_line[f];
      child_q += fs.q_line[f];
    }
    track(inj.p_load[j] -
          (fs.p_line[e] - l.resistance * fs.l_line[e] - child_p + inj.p_bat[j]));
    track(inj.q_load[j] -
          (fs.q_line[e] - l.reactance * fs.l_line[e] - child_q + inj.q_cap[j]));
    double vi = fs.v_sq[l.from_bus];
    if (l.is_regulator) {
      track(fs.v_sq[j] - line_ratio_sq[e] * vi);
    } else {
      track(fs.v_sq[j] -
            (vi - 2.0 * (l.resistance * fs.p_line[e] + l.reactance * fs.q_line[e]) +
             (l.resistance * l.resistance + l.reactance * l.reactance) * fs.l_line[e]));
    }
    track(fs.l_line[e] -
          (fs.p_line[e] * fs.p_line[e] + fs.q_line[e] * fs.q_line[e]) / vi);
  }
  track(fs.v_sq[0] - c.v_source);
  return worst;
}

/// Brute-force reference solve: Newton iteration with a finite-difference
/// Jacobian on the stacked residual vector over variables
/// (p_e, q_e, l_e per line, v_sq_j per non-root bus). Knows nothing about
/// sweep ordering; converges to ||F||_inf <= 1e-12 or throws.
inline FlowState newton_reference_solve(const Circuit& c, const Injections& inj,
                                        const std::vector<double>& reg_ratios_sq) {
  const int n = c.num_buses();
  const int m = c.num_lines();
  const int dim = 3 * m + (n - 1);
  std::vector<int> parent = c.parent_lines();
  std::vector<std::vector<int>> children = c.child_lines();
  std::vector<double> line_ratio_sq(m, 1.0);
  for (size_t r = 0; r < c.regulators.size(); ++r)
    line_ratio_sq[c.regulators[r].line_index] = reg_ratios_sq[r];

  auto unpack = [&](const Eigen::VectorXd& x, FlowState& fs) {
    fs.p_line.resize(m);
    fs.q_line.resize(m);
    fs.l_line.resize(m);
    fs.v_sq.resize(n);
    for (int e = 0; e < m; ++e) {
      fs.p_line[e] = x[e];
      fs.q_line[e] = x[m + e];
      fs.l_line[e] = x[2 * m + e];
    }
    fs.v_sq[0] = c.v_source;
    for (int j = 1; j < n; ++j) fs.v_sq[j] = x[3 * m + (j - 1)];
  };

  auto residual = [&](const Eigen::VectorXd& x) {
    FlowState fs;
    unpack(x, fs);
    Eigen::VectorXd F(dim);
    int row = 0;
    for (int j = 1; j < n; ++j) {
      int e = parent[j];
      const voltgrid::Line& l = c.lines[e];
      double child_p = 0.0, child_q = 0.0;
      for (int f : children[j]) {
        child_p += fs.p_line[f];
        child_q += fs.q_line[f];
      }
      F[row++] = inj.p_load[j] -
                 (fs.p_line[e] - l.resistance * fs.l_line[e] - child_p + inj.p_bat[j]);
      F[row++] = inj.q_load[j] -
                 (fs.q_line[e] - l.reactance * fs.l_line[e] - child_q + inj.q_cap[j]);
      double vi = fs.v_sq[l.from_bus];
      if (l.is_regulator)
        F[row++] = fs.v_sq[j] - line_ratio_sq[e] * vi;
      else
        F[row++] = fs.v_sq[j] -
                   (vi - 2.0 * (l.resistance * fs.p_line[e] + l.reactance * fs.q_line[e]) +
                    (l.resistance * l.resistance + l.reactance * l.reactance) * fs.l_line[e]);
      // Multiplied through by v_i to keep the residual polynomial.
      F[row++] = fs.l_line[e] * vi - (fs.p_line[e] * fs.p_line[e] + fs.q_line[e] * fs.q_line[e]);
    }
    return F;
  };

  // Start from lossless subtree sums and a flat voltage profile.
  Eigen::VectorXd x = Eigen::VectorXd::Zero(dim);
  {
    std::vector<double> sub_p(n), sub_q(n);
    std::vector<int> order = c.bfs_order();
    for (int k = n - 1; k >= 1; --k) {
      int j = order[k];
      sub_p[j] = inj.p_load[j] - inj.p_bat[j];
      sub_q[j] = inj.q_load[j] - inj.q_cap[j];
      for (int f : children[j]) {
        sub_p[j] += sub_p[c.lines[f].to_bus];
        sub_q[j] += sub_q[c.lines[f].to_bus];
      }
    }
    for (int j = 1; j < n; ++j) {
      int e = parent[j];
      x[e] = sub_p[j];
      x[m + e] = sub_q[j];
      x[2 * m + e] = 0.0;
      x[3 * m + (j - 1)] = c.v_source;
    }
  }

  Eigen::VectorXd F = residual(x);
  for (int iter = 0; iter < 80; ++iter) {
    if (F.cwiseAbs().maxCoeff() < 1e-12) break;
    Eigen::MatrixXd J(dim, dim);
    for (int k = 0; k < dim; ++k) {
      double h = 1e-7 * std::max(1.0, std::abs(x[k]));
      Eigen::VectorXd xp = x, xm = x;
      xp[k] += h;
      xm[k] -= h;
      J.col(k) = (residual(xp) - residual(xm)) / (2.0 * h);
    }
    Eigen::VectorXd step = J.fullPivLu().solve(-F);
    // Backtracking so the residual norm never increases.
    double t = 1.0;
    for (int bt = 0; bt < 30; ++bt) {
      Eigen::VectorXd xn = x + t * step;
      Eigen::VectorXd Fn = residual(xn);
      if (Fn.norm() < F.norm() || Fn.cwiseAbs().maxCoeff() < 1e-12) {
        x = xn;
        F = Fn;
        break;
      }
      t *= 0.5;
      if (bt == 29) throw std::runtime_error("newton_reference_solve: line search stalled");
    }
  }
  if (F.cwiseAbs().maxCoeff() >= 1e-12)
    throw std::runtime_error("newton_reference_solve: did not reach 1e-12 residual");
  FlowState fs;
  unpack(x, fs);
  fs.converged = true;
  return fs;
}

/// Scalar bisection oracle for a 2-bus circuit. With the sending-end
/// current convention the consistency equation closes in l alone:
///   g(l) = l * v0 - ((p + R l)^2 + (q + X l)^2)
/// which is positive between the physical root and the high-current root.
inline FlowState two_bus_bisection_oracle(double r, double x_reac, double p_load, double q_load,
                                          double v_source_sq) {
  auto g = [&](double l) {
    double p = p_load + r * l;
    double q = q_load + x_reac * l;
    return l * v_source_sq - (p * p + q * q);
  };
  double lo = (p_load * p_load + q_load * q_load) / v_source_sq;  // g(lo) <= 0
  double hi = lo;
  while (g(hi) < 0.0) {
    hi = hi * 2.0 + 1e-9;
    if (hi > 1e6) throw std::runtime_error("two_bus_bisection_oracle: no bracket");
  }
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (g(mid) < 0.0)
      lo = mid;
    else
      hi = mid;
  }
  double l = 0.5 * (lo + hi);
  FlowState fs;
  double p = p_load + r * l, q = q_load + x_reac * l;
  fs.p_line = {p};
  fs.q_line = {q};
  fs.l_line = {l};
  fs.v_sq = {v_source_sq,
             v_source_sq - 2.0 * (r * p + x_reac * q) + (r * r + x_reac * x_reac) * l};
  fs.converged = true;
  return fs;
}

/// Central-difference gradient of a scalar-valued forward function with
/// respect to every entry of every parameter (h = 1e-5 per entry).
inline double max_relative_grad_error(std::vector<voltgrid::Parameter>& params,
                                      const std::function<voltgrid::Tensor()>& forward) {
  voltgrid::zero_grads(params);
  voltgrid::Tensor loss = forward();
  voltgrid::backward(loss);
  double worst = 0.0;
  const double h = 1e-5;
  for (voltgrid::Parameter& p : params) {
    p.tensor->ensure_grad();
    for (Eigen::Index r = 0; r < p.tensor->value.rows(); ++r)
      for (Eigen::Index col = 0; col < p.tensor->value.cols(); ++col) {
        double keep = p.tensor->value(r, col);
        p.tensor->value(r, col) = keep + h;
        double up = forward()->scalar();
        p.tensor->value(r, col) = keep - h;
        double down = forward()->scalar();
        p.tensor->value(r, col) = keep;
        double fd = (up - down) / (2.0 * h);
        double ad = p.tensor->grad(r, col);
        double denom = std::max({std::abs(fd), std::abs(ad), 1e-6});
        worst = std::max(worst, std::abs(fd - ad) / denom);
      }
  }
  return worst;
}

/// Small random radial circuit for property tests (no actuators unless
/// asked). Loads stay light enough for healthy voltages.
inline Circuit random_test_circuit(int n_buses, std::mt19937_64& rng, int n_regulators = 0,
                                   int n_capacitors = 0, int n_batteries = 0) {
  Circuit c;
  c.name = "t";
  c.v_source = 1.0;
  std::uniform_real_distribution<double> r_range(0.005, 0.03);
  std::uniform_real_distribution<double> x_range(0.005, 0.04);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < n_buses; ++i) {
    voltgrid::Bus b;
    b.id = i;
    b.name = "b" + std::to_string(i);
    if (i > 0) {
      b.base_load_p = 0.02 + 0.08 * unit(rng);
      b.base_load_q = b.base_load_p * (0.2 + 0.3 * unit(rng));
    }
    c.buses.push_back(b);
  }
  for (int j = 1; j < n_buses; ++j) {
    voltgrid::Line l;
    std::uniform_int_distribution<int> pick(0, j - 1);
    l.from_bus = pick(rng);
    l.to_bus = j;
    l.resistance = r_range(rng);
    l.reactance = x_range(rng);
    c.lines.push_back(l);
  }
  for (int r = 0; r < n_regulators; ++r) {
    int e = r % c.num_lines();
    c.lines[e].is_regulator = true;
    c.lines[e].resistance = 0.0;
    c.lines[e].reactance = 0.0;
    voltgrid::Regulator reg;
    reg.line_index = e;
    c.regulators.push_back(reg);
  }
  for (int k = 0; k < n_capacitors; ++k) {
    voltgrid::Capacitor cap;
    cap.bus = 1 + (k % (n_buses - 1));
    cap.q_rated = 0.02 + 0.03 * unit(rng);
    c.capacitors.push_back(cap);
  }
  for (int k = 0; k < n_batteries; ++k) {
    voltgrid::Battery bat;
    bat.bus = 1 + ((k + 1) % (n_buses - 1));
    bat.p_rated = 0.05;
    bat.capacity = 0.2;
    bat.num_levels = 5;
    bat.soc_init = 0.5;
    c.batteries.push_back(bat);
  }
  return c;
}

}  // namespace vgtest
