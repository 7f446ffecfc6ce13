#pragma once

// The sequential decision environment over a circuit: 24-step episodes,
// multi-discrete actuator commands, penalty rewards for voltage
// violations, control changes, and resistive losses.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "voltgrid/circuit.hpp"
#include "voltgrid/graph.hpp"
#include "voltgrid/powerflow.hpp"

namespace voltgrid {

struct EnvConfig {
  int horizon = 24;
  double alpha_v = 1.0;
  double alpha_c = 0.1;
  double alpha_p = 0.02;
  double v_min = 0.95;
  double v_max = 1.05;
  double reg_change_cost = 0.1;  // per tap step
  double cap_change_cost = 0.2;  // per open/close toggle
  double bat_change_cost = 0.1;  // per unit of normalized level change
  double load_scale_min = 0.8;   // episode-level multiplicative randomization
  double load_scale_max = 1.2;
  bool constant_load = false;  // flat unit profile (sensitivity protocol)
  uint64_t seed = 0;
};

struct ActuatorState {
  std::vector<int> reg_taps;
  std::vector<int> cap_status;  // 0 open, 1 closed
  std::vector<int> bat_level;
  std::vector<double> bat_soc;
};

struct Observation {
  std::vector<double> v;  // per-bus voltage magnitude
  ActuatorState actuators;
  int step_index = 0;
};

struct Action {
  std::vector<int> reg_taps;
  std::vector<int> cap_status;
  std::vector<int> bat_level;

  // Canonical flat order: regulators, then capacitors, then batteries.
  std::vector<int> flat() const {
    std::vector<int> out;
    out.reserve(reg_taps.size() + cap_status.size() + bat_level.size());
    out.insert(out.end(), reg_taps.begin(), reg_taps.end());
    out.insert(out.end(), cap_status.begin(), cap_status.end());
    out.insert(out.end(), bat_level.begin(), bat_level.end());
    return out;
  }

  static Action from_flat(const Circuit& c, const std::vector<int>& flat) {
    size_t expect = c.regulators.size() + c.capacitors.size() + c.batteries.size();
    if (flat.size() != expect)
      throw std::invalid_argument("Action::from_flat: expected " + std::to_string(expect) +
                                  " components, got " + std::to_string(flat.size()));
    Action a;
    size_t i = 0;
    for (size_t k = 0; k < c.regulators.size(); ++k) a.reg_taps.push_back(flat[i++]);
    for (size_t k = 0; k < c.capacitors.size(); ++k) a.cap_status.push_back(flat[i++]);
    for (size_t k = 0; k < c.batteries.size(); ++k) a.bat_level.push_back(flat[i++]);
    return a;
  }
};

struct StepInfo {
  bool converged = true;
  double power_loss = 0.0;
  double violation = 0.0;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  double r_v = 0.0;
  double r_c = 0.0;
  double r_p = 0.0;
  bool done = false;
  StepInfo info;
};

/// Per-actuator category counts in the canonical action order.
inline std::vector<int> action_dims(const Circuit& c) {
  std::vector<int> dims;
  for (const Regulator& r : c.regulators) dims.push_back(r.num_taps);
  for (size_t k = 0; k < c.capacitors.size(); ++k) dims.push_back(2);
  for (const Battery& b : c.batteries) dims.push_back(b.num_levels);
  return dims;
}

namespace detail {

// Diurnal demand multipliers, one per hour, peaking at step 18.
inline const std::array<double, 24>& diurnal_shape() {
  static const std::array<double, 24> shape = {
      0.62, 0.58, 0.55, 0.53, 0.52, 0.53, 0.57, 0.64, 0.72, 0.78, 0.83, 0.87,
      0.90, 0.92, 0.95, 0.99, 1.05, 1.12, 1.18, 1.15, 1.06, 0.95, 0.82, 0.70};
  return shape;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

class Env {
 public:
  Env(Circuit circuit, EnvConfig cfg)
      : circuit_(std::move(circuit)), cfg_(cfg), rep_(build_graph(circuit_)) {
    if (cfg_.horizon < 1) throw std::invalid_argument("EnvConfig: horizon must be >= 1");
    if (!(cfg_.v_min < cfg_.v_max)) throw std::invalid_argument("EnvConfig: need v_min < v_max");
    if (cfg_.alpha_v < 0 || cfg_.alpha_c < 0 || cfg_.alpha_p < 0)
      throw std::invalid_argument("EnvConfig: reward weights must be >= 0");
  }

  const Circuit& circuit() const { return circuit_; }
  const EnvConfig& config() const { return cfg_; }
  const std::vector<double>& profile() const { return profile_; }
  bool done() const { return active_ && step_index_ >= cfg_.horizon; }

  void set_trace(std::ostream* out) { trace_ = out; }

  ActuatorState default_actuators() const {
    ActuatorState s;
    for (const Regulator& r : circuit_.regulators) s.reg_taps.push_back(r.middle_tap());
    s.cap_status.assign(circuit_.capacitors.size(), 0);
    for (const Battery& b : circuit_.batteries) {
      s.bat_level.push_back(b.zero_level());
      s.bat_soc.push_back(b.soc_init);
    }
    return s;
  }

  /// Starts an episode: samples the load profile (base diurnal shape times
  /// an episode-level scale drawn from load_scale_range, deterministic in
  /// episode_seed), resets actuators to defaults, and solves the step-0 flow.
  Observation reset(uint64_t episode_seed) {
    std::mt19937_64 rng(detail::mix_seed(cfg_.seed, episode_seed));
    double scale = 1.0;
    if (!cfg_.constant_load) {
      std::uniform_real_distribution<double> dist(cfg_.load_scale_min, cfg_.load_scale_max);
      scale = dist(rng);
    }
    profile_.assign(cfg_.horizon, 1.0);
    if (!cfg_.constant_load) {
      const auto& shape = detail::diurnal_shape();
      for (int t = 0; t < cfg_.horizon; ++t) {
        // Resample the 24-entry table over normalized time for other horizons.
        double pos = (cfg_.horizon == 1) ? 0.0
                                         : static_cast<double>(t) * (shape.size() - 1) / (cfg_.horizon - 1);
        int lo = static_cast<int>(pos);
        int hi = std::min<int>(lo + 1, shape.size() - 1);
        double frac = pos - lo;
        profile_[t] = scale * ((1.0 - frac) * shape[lo] + frac * shape[hi]);
      }
    }
    state_ = default_actuators();
    step_index_ = 0;
    active_ = true;
    FlowState fs = solve_flow(profile_[0]);
    last_obs_ = make_observation(fs);
    if (trace_) (*trace_) << "step,converged,power_loss,violation,reward\n";
    return last_obs_;
  }

  StepResult step(const Action& action) {
    if (!active_) throw std::logic_error("step: call reset before stepping");
    if (step_index_ >= cfg_.horizon) throw std::logic_error("step: episode is done; call reset");
    check_action(action);

    // Control penalty against the pre-step settings.
    double ctrl = 0.0;
    for (size_t r = 0; r < circuit_.regulators.size(); ++r)
      ctrl += cfg_.reg_change_cost * std::abs(action.reg_taps[r] - state_.reg_taps[r]);
    for (size_t k = 0; k < circuit_.capacitors.size(); ++k)
      ctrl += cfg_.cap_change_cost * std::abs(action.cap_status[k] - state_.cap_status[k]);
    for (size_t b = 0; b < circuit_.batteries.size(); ++b) {
      double norm = 2.0 / (circuit_.batteries[b].num_levels - 1);
      ctrl += cfg_.bat_change_cost * std::abs(action.bat_level[b] - state_.bat_level[b]) * norm;
    }

    state_.reg_taps = action.reg_taps;
    state_.cap_status = action.cap_status;
    state_.bat_level = action.bat_level;
    // SOC update with one-step feasibility clamp; the effective battery
    // power is whatever the clamp allowed.
    bat_p_eff_.assign(circuit_.batteries.size(), 0.0);
    for (size_t b = 0; b < circuit_.batteries.size(); ++b) {
      const Battery& bat = circuit_.batteries[b];
      double p_cmd = bat.level_power(state_.bat_level[b]);
      double soc = state_.bat_soc[b];
      double soc_next = std::clamp(soc - p_cmd / bat.capacity, 0.0, 1.0);
      bat_p_eff_[b] = (soc - soc_next) * bat.capacity;
      state_.bat_soc[b] = soc_next;
    }

    double mult = profile_[step_index_];
    FlowState fs = solve_flow(mult);

    StepResult res;
    res.info.converged = fs.converged;
    res.info.power_loss = power_loss(circuit_, fs);
    res.info.violation = voltage_violation(fs, cfg_.v_min, cfg_.v_max);
    res.r_v = fs.converged ? -res.info.violation
                           : -static_cast<double>(circuit_.num_buses()) * (cfg_.v_max - cfg_.v_min);
    res.r_c = -ctrl;
    res.r_p = -res.info.power_loss;
    res.reward = cfg_.alpha_v * res.r_v + cfg_.alpha_c * res.r_c + cfg_.alpha_p * res.r_p;

    ++step_index_;
    res.done = step_index_ >= cfg_.horizon;
    res.observation = make_observation(fs);
    last_obs_ = res.observation;
    if (trace_)
      (*trace_) << step_index_ << "," << (res.info.converged ? 1 : 0) << "," << res.info.power_loss
                << "," << res.info.violation << "," << res.reward << "\n";
    return res;
  }

  /// Effective battery power applied at the last step (after SOC clamping).
  const std::vector<double>& last_battery_power() const { return bat_p_eff_; }

 private:
  void check_action(const Action& a) const {
    if (a.reg_taps.size() != circuit_.regulators.size() ||
        a.cap_status.size() != circuit_.capacitors.size() ||
        a.bat_level.size() != circuit_.batteries.size())
      throw std::out_of_range("action has wrong component counts for this circuit");
    for (size_t r = 0; r < a.reg_taps.size(); ++r)
      if (a.reg_taps[r] < 0 || a.reg_taps[r] >= circuit_.regulators[r].num_taps)
        throw std::out_of_range("regulator " + std::to_string(r) + " tap " +
                                std::to_string(a.reg_taps[r]) + " outside [0," +
                                std::to_string(circuit_.regulators[r].num_taps - 1) + "]");
    for (size_t k = 0; k < a.cap_status.size(); ++k)
      if (a.cap_status[k] != 0 && a.cap_status[k] != 1)
        throw std::out_of_range("capacitor " + std::to_string(k) + " status must be 0 or 1");
    for (size_t b = 0; b < a.bat_level.size(); ++b)
      if (a.bat_level[b] < 0 || a.bat_level[b] >= circuit_.batteries[b].num_levels)
        throw std::out_of_range("battery " + std::to_string(b) + " level " +
                                std::to_string(a.bat_level[b]) + " outside [0," +
                                std::to_string(circuit_.batteries[b].num_levels - 1) + "]");
  }

  FlowState solve_flow(double mult) const {
    Injections inj = Injections::zeros(circuit_.num_buses());
    for (int j = 1; j < circuit_.num_buses(); ++j) {
      inj.p_load[j] = circuit_.buses[j].base_load_p * mult;
      inj.q_load[j] = circuit_.buses[j].base_load_q * mult;
    }
    for (size_t b = 0; b < circuit_.batteries.size(); ++b)
      inj.p_bat[circuit_.batteries[b].bus] += bat_p_eff_[b];
    for (size_t k = 0; k < circuit_.capacitors.size(); ++k)
      inj.q_cap[circuit_.capacitors[k].bus] += state_.cap_status[k] * circuit_.capacitors[k].q_rated;
    std::vector<double> ratios;
    ratios.reserve(circuit_.regulators.size());
    for (size_t r = 0; r < circuit_.regulators.size(); ++r)
      ratios.push_back(circuit_.regulators[r].ratio_sq(state_.reg_taps[r]));
    return solve_distflow(circuit_, inj, ratios);
  }

  Observation make_observation(const FlowState& fs) const {
    Observation obs;
    obs.v.resize(circuit_.num_buses());
    for (int j = 0; j < circuit_.num_buses(); ++j) obs.v[j] = std::sqrt(fs.v_sq[j]);
    obs.actuators = state_;
    obs.step_index = step_index_;
    return obs;
  }

  Circuit circuit_;
  EnvConfig cfg_;
  GraphRep rep_;
  std::vector<double> profile_;
  ActuatorState state_;
  std::vector<double> bat_p_eff_;
  Observation last_obs_;
  int step_index_ = 0;
  bool active_ = false;
  std::ostream* trace_ = nullptr;
};

/// Flat observation layout, stable across runs:
///   [v_0..v_{N-1},
///    regulator taps normalized to [0,1],
///    capacitor statuses,
///    battery SOCs,
///    battery levels normalized to [-1,1]]
inline std::vector<double> observation_vector(const Circuit& c, const Observation& obs) {
  std::vector<double> out;
  out.reserve(obs.v.size() + c.regulators.size() + c.capacitors.size() + 2 * c.batteries.size());
  out.insert(out.end(), obs.v.begin(), obs.v.end());
  for (size_t r = 0; r < c.regulators.size(); ++r)
    out.push_back(static_cast<double>(obs.actuators.reg_taps[r]) / (c.regulators[r].num_taps - 1));
  for (size_t k = 0; k < c.capacitors.size(); ++k)
    out.push_back(static_cast<double>(obs.actuators.cap_status[k]));
  for (size_t b = 0; b < c.batteries.size(); ++b) out.push_back(obs.actuators.bat_soc[b]);
  for (size_t b = 0; b < c.batteries.size(); ++b)
    out.push_back(2.0 * obs.actuators.bat_level[b] / (c.batteries[b].num_levels - 1) - 1.0);
  return out;
}

inline int observation_vector_size(const Circuit& c) {
  return c.num_buses() + static_cast<int>(c.regulators.size() + c.capacitors.size() +
                                          2 * c.batteries.size());
}

/// Node feature matrix, N x 5, columns
/// [v, cap_status, reg_tap_norm, bat_soc, bat_level_norm]; buses without a
/// given actuator hold zero in that column. Regulator features live on the
/// regulator line's child bus.
inline Eigen::MatrixXd observation_graph(const Circuit& c, const Observation& obs,
                                         const GraphRep& rep) {
  Eigen::MatrixXd feat = Eigen::MatrixXd::Zero(rep.n, 5);
  for (int j = 0; j < rep.n; ++j) feat(j, 0) = obs.v[j];
  for (size_t k = 0; k < c.capacitors.size(); ++k)
    feat(c.capacitors[k].bus, 1) += obs.actuators.cap_status[k];
  for (size_t r = 0; r < c.regulators.size(); ++r) {
    int child = c.lines[c.regulators[r].line_index].to_bus;
    feat(child, 2) += static_cast<double>(obs.actuators.reg_taps[r]) / (c.regulators[r].num_taps - 1);
  }
  for (size_t b = 0; b < c.batteries.size(); ++b) {
    int bus = c.batteries[b].bus;
    feat(bus, 3) += obs.actuators.bat_soc[b];
    feat(bus, 4) += 2.0 * obs.actuators.bat_level[b] / (c.batteries[b].num_levels - 1) - 1.0;
  }
  return feat;
}

constexpr int kNodeFeatureDim = 5;

}  // namespace voltgrid
