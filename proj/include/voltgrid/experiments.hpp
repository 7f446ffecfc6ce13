#pragma once

// Evaluation protocols: observation corruption (masking / uniform noise)
// with percent-difference robustness reports, single-actuator voltage
// covariance analysis, and the augmentation x readout case-study driver.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "voltgrid/env.hpp"
#include "voltgrid/policy.hpp"
#include "voltgrid/ppo.hpp"

namespace voltgrid {

enum class PerturbMode { kMask, kNoise };

inline std::string to_string(PerturbMode m) { return m == PerturbMode::kMask ? "mask" : "noise"; }

inline PerturbMode perturb_mode_from_string(const std::string& s) {
  if (s == "mask") return PerturbMode::kMask;
  if (s == "noise") return PerturbMode::kNoise;
  throw std::invalid_argument("unknown perturbation mode: " + s);
}

struct PerturbationSpec {
  PerturbMode mode = PerturbMode::kMask;
  double fraction = 0.5;         // share of buses whose voltage reading is corrupted
  double noise_amplitude = 0.05; // p.u., uniform in [-amp, +amp] (noise mode)
  int n_subsets = 5;
  uint64_t seed = 0;
};

/// Corrupts the voltage readings of the given buses; actuator features are
/// untouched, so both the vector and graph views see the same corruption.
inline Observation perturb_observation(const Observation& obs, const std::vector<int>& subset,
                                       const PerturbationSpec& spec, std::mt19937_64& rng) {
  Observation out = obs;
  for (int j : subset) {
    if (j < 0 || j >= static_cast<int>(out.v.size()))
      throw std::out_of_range("perturb_observation: bus " + std::to_string(j) + " outside circuit");
    if (spec.mode == PerturbMode::kMask) {
      out.v[j] = 0.0;
    } else {
      std::uniform_real_distribution<double> noise(-spec.noise_amplitude, spec.noise_amplitude);
      out.v[j] += noise(rng);
    }
  }
  return out;
}

namespace detail {

inline uint64_t hash_fraction(double f) {
  uint64_t bits;
  std::memcpy(&bits, &f, sizeof(bits));
  return bits;
}

/// Subset of `count` distinct buses, deterministic in the rng state.
inline std::vector<int> sample_subset(int n_buses, int count, std::mt19937_64& rng) {
  std::vector<int> all(n_buses);
  for (int i = 0; i < n_buses; ++i) all[i] = i;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace detail

/// Mean episodic reward under deterministic (argmax) action selection.
/// When `subset` is nonempty the policy sees corrupted observations while
/// the environment itself evolves uncorrupted.
inline double evaluate_policy(Env& env, const Policy& policy, int n_episodes, uint64_t episode_base,
                              const std::vector<int>& subset = {},
                              const PerturbationSpec& spec = {}, uint64_t noise_seed = 0) {
  const Circuit& c = env.circuit();
  std::mt19937_64 unused_rng(0);
  double total = 0.0;
  for (int e = 0; e < n_episodes; ++e) {
    std::mt19937_64 noise_rng(detail::mix_seed(noise_seed, static_cast<uint64_t>(e)));
    Observation obs = env.reset(episode_base + static_cast<uint64_t>(e));
    bool done = false;
    while (!done) {
      Observation seen = subset.empty() ? obs : perturb_observation(obs, subset, spec, noise_rng);
      PolicyOutput out = policy.act(c, seen, unused_rng, /*deterministic=*/true);
      StepResult res = env.step(Action::from_flat(c, out.action));
      total += res.reward;
      obs = res.observation;
      done = res.done;
    }
  }
  return total / static_cast<double>(n_episodes);
}

struct EvalTarget {
  const Policy* policy = nullptr;
  std::string label;
  uint64_t seed = 0;  // the agent's training seed, carried into the report
};

struct RobustnessRow {
  std::string policy;
  std::string mode;
  double fraction = 0.0;
  int subset = 0;
  uint64_t seed = 0;
  double nominal = 0.0;
  double perturbed = 0.0;
  double pct_diff = 0.0;
};

struct RobustnessCell {
  std::string policy;
  std::string mode;
  double fraction = 0.0;
  double mean_pct = 0.0;
  double stdev_pct = 0.0;  // sample stdev across subsets x seeds
  int samples = 0;
};

struct RobustnessReport {
  std::vector<RobustnessRow> rows;
  std::vector<RobustnessCell> cells;
  std::vector<std::pair<std::string, double>> nominal;  // per policy label
};

inline double percent_difference(double perturbed, double nominal) {
  double denom = std::abs(nominal);
  if (denom == 0.0) return 0.0;
  return 100.0 * (perturbed - nominal) / denom;
}

/// Table-1 protocol: nominal deterministic evaluation per policy, then for
/// every fraction a fixed set of node subsets (shared across policies, so
/// comparisons are paired) evaluated under the perturbation.
inline RobustnessReport run_robustness(const std::vector<EvalTarget>& targets, const Circuit& circuit,
                                       const EnvConfig& env_cfg, const std::vector<double>& fractions,
                                       const PerturbationSpec& spec, int n_eval_episodes) {
  constexpr uint64_t kEvalEpisodeBase = 1u << 30;
  RobustnessReport report;
  Env env(circuit, env_cfg);
  std::vector<double> nominal(targets.size());
  for (size_t t = 0; t < targets.size(); ++t) {
    nominal[t] = evaluate_policy(env, *targets[t].policy, n_eval_episodes, kEvalEpisodeBase);
    report.nominal.emplace_back(targets[t].label, nominal[t]);
  }
  for (double fraction : fractions) {
    int count = std::max(1, static_cast<int>(std::lround(fraction * circuit.num_buses())));
    count = std::min(count, circuit.num_buses());
    for (int s = 0; s < spec.n_subsets; ++s) {
      std::mt19937_64 subset_rng(detail::mix_seed(spec.seed ^ detail::hash_fraction(fraction),
                                                  static_cast<uint64_t>(s)));
      std::vector<int> subset = detail::sample_subset(circuit.num_buses(), count, subset_rng);
      for (size_t t = 0; t < targets.size(); ++t) {
        PerturbationSpec sp = spec;
        sp.fraction = fraction;
        uint64_t noise_seed = detail::mix_seed(spec.seed ^ detail::hash_fraction(fraction),
                                               0x100000 + static_cast<uint64_t>(s));
        double perturbed =
            evaluate_policy(env, *targets[t].policy, n_eval_episodes, kEvalEpisodeBase, subset, sp,
                            noise_seed);
        RobustnessRow row;
        row.policy = targets[t].label;
        row.mode = to_string(spec.mode);
        row.fraction = fraction;
        row.subset = s;
        row.seed = targets[t].seed;
        row.nominal = nominal[t];
        row.perturbed = perturbed;
        row.pct_diff = percent_difference(perturbed, nominal[t]);
        report.rows.push_back(row);
      }
    }
  }
  // Aggregate cells per (policy, fraction).
  for (const EvalTarget& target : targets) {
    for (double fraction : fractions) {
      std::vector<double> pcts;
      for (const RobustnessRow& row : report.rows)
        if (row.policy == target.label && row.fraction == fraction) pcts.push_back(row.pct_diff);
      if (pcts.empty()) continue;
      RobustnessCell cell;
      cell.policy = target.label;
      cell.mode = to_string(spec.mode);
      cell.fraction = fraction;
      cell.samples = static_cast<int>(pcts.size());
      double mean = 0.0;
      for (double p : pcts) mean += p;
      mean /= static_cast<double>(pcts.size());
      double var = 0.0;
      for (double p : pcts) var += (p - mean) * (p - mean);
      cell.mean_pct = mean;
      cell.stdev_pct = pcts.size() > 1 ? std::sqrt(var / static_cast<double>(pcts.size() - 1)) : 0.0;
      report.cells.push_back(cell);
    }
  }
  return report;
}

inline void write_robustness_csv(const RobustnessReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write robustness report: " + path);
  out << "policy,mode,fraction,subset,seed,nominal,perturbed,pct_diff\n";
  for (const RobustnessRow& r : report.rows)
    out << r.policy << "," << r.mode << "," << detail::fmt_g17(r.fraction) << "," << r.subset << ","
        << r.seed << "," << detail::fmt_g17(r.nominal) << "," << detail::fmt_g17(r.perturbed) << ","
        << detail::fmt_g17(r.pct_diff) << "\n";
}

// ---------------------------------------------------------------------------
// Actuator sensitivity (single active actuator, covariance of voltages)

struct ActuatorSelector {
  enum Type { kRegulator, kCapacitor, kBattery } type = kRegulator;
  int index = 0;

  static ActuatorSelector parse(const std::string& s) {
    auto colon = s.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("actuator selector must look like reg:0, cap:1 or bat:0");
    std::string kind = s.substr(0, colon);
    ActuatorSelector sel;
    sel.index = std::stoi(s.substr(colon + 1));
    if (kind == "reg")
      sel.type = kRegulator;
    else if (kind == "cap")
      sel.type = kCapacitor;
    else if (kind == "bat")
      sel.type = kBattery;
    else
      throw std::invalid_argument("unknown actuator type: " + kind);
    return sel;
  }
};

/// Population covariance (divide by n) between two equal-length series.
inline double covariance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("covariance: series must be nonempty and equal length");
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(a.size());
  double cov = 0.0;
  for (size_t i = 0; i < a.size(); ++i) cov += (a[i] - ma) * (b[i] - mb);
  return cov / static_cast<double>(a.size());
}

struct SensitivityResult {
  int actuator_bus = 0;
  std::vector<double> covariance_per_bus;
};

/// Runs one constant-load episode where only the selected actuator moves
/// (uniform random commands) and reports cov(v at the actuator bus, v at
/// every bus) over the episode's voltage trajectories.
inline SensitivityResult run_sensitivity(const Circuit& circuit, const EnvConfig& env_cfg,
                                         const ActuatorSelector& sel, uint64_t episode_seed) {
  EnvConfig cfg = env_cfg;
  cfg.constant_load = true;
  Env env(circuit, cfg);

  int actuator_bus;
  switch (sel.type) {
    case ActuatorSelector::kRegulator:
      if (sel.index < 0 || sel.index >= static_cast<int>(circuit.regulators.size()))
        throw std::out_of_range("unknown regulator " + std::to_string(sel.index));
      actuator_bus = circuit.lines[circuit.regulators[sel.index].line_index].to_bus;
      break;
    case ActuatorSelector::kCapacitor:
      if (sel.index < 0 || sel.index >= static_cast<int>(circuit.capacitors.size()))
        throw std::out_of_range("unknown capacitor " + std::to_string(sel.index));
      actuator_bus = circuit.capacitors[sel.index].bus;
      break;
    default:
      if (sel.index < 0 || sel.index >= static_cast<int>(circuit.batteries.size()))
        throw std::out_of_range("unknown battery " + std::to_string(sel.index));
      actuator_bus = circuit.batteries[sel.index].bus;
      break;
  }

  std::mt19937_64 rng(detail::mix_seed(episode_seed ^ 0x3c6ef372fe94f82bULL, 17));
  env.reset(episode_seed);
  ActuatorState defaults = env.default_actuators();
  std::vector<std::vector<double>> v_series(circuit.num_buses());
  for (int t = 0; t < cfg.horizon; ++t) {
    Action a;
    a.reg_taps = defaults.reg_taps;
    a.cap_status = defaults.cap_status;
    a.bat_level = defaults.bat_level;
    switch (sel.type) {
      case ActuatorSelector::kRegulator: {
        std::uniform_int_distribution<int> tap(0, circuit.regulators[sel.index].num_taps - 1);
        a.reg_taps[sel.index] = tap(rng);
        break;
      }
      case ActuatorSelector::kCapacitor: {
        std::uniform_int_distribution<int> st(0, 1);
        a.cap_status[sel.index] = st(rng);
        break;
      }
      default: {
        std::uniform_int_distribution<int> lv(0, circuit.batteries[sel.index].num_levels - 1);
        a.bat_level[sel.index] = lv(rng);
        break;
      }
    }
    StepResult res = env.step(a);
    for (int j = 0; j < circuit.num_buses(); ++j) v_series[j].push_back(res.observation.v[j]);
  }

  SensitivityResult result;
  result.actuator_bus = actuator_bus;
  result.covariance_per_bus.resize(circuit.num_buses());
  for (int j = 0; j < circuit.num_buses(); ++j)
    result.covariance_per_bus[j] = covariance(v_series[actuator_bus], v_series[j]);
  return result;
}

inline void write_sensitivity_csv(const SensitivityResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write sensitivity report: " + path);
  out << "bus,covariance\n";  // population covariance, divide-by-n
  for (size_t j = 0; j < result.covariance_per_bus.size(); ++j)
    out << j << "," << detail::fmt_g17(result.covariance_per_bus[j]) << "\n";
}

// ---------------------------------------------------------------------------
// Case study: {base, augmented} x {mean_pool, local}

struct CaseStudyVariant {
  std::string name;
  bool augmented = false;
  Readout readout = Readout::kMeanPool;
  TrainResult training;
  std::vector<RobustnessCell> robustness;
};

struct CaseStudyResult {
  std::vector<CaseStudyVariant> variants;
  std::string summary_path;
};

/// Trains all four Graph-PPO variants with identical seeds and configs,
/// then evaluates each with the mask-robustness protocol. One output
/// directory per variant under out_root.
inline CaseStudyResult run_case_study(const Circuit& circuit, const EnvConfig& env_cfg,
                                      const PPOConfig& ppo_cfg, int hidden_dim, int num_layers,
                                      const std::vector<double>& fractions,
                                      const PerturbationSpec& perturb, int n_eval_episodes,
                                      const std::string& out_root, std::ostream* progress = nullptr) {
  if (circuit.regulators.empty())
    throw std::invalid_argument("case study requires a circuit with at least one regulator");
  std::filesystem::create_directories(out_root);
  CaseStudyResult result;
  const std::pair<bool, Readout> grid[4] = {{false, Readout::kMeanPool},
                                            {false, Readout::kLocal},
                                            {true, Readout::kMeanPool},
                                            {true, Readout::kLocal}};
  for (const auto& [augmented, readout] : grid) {
    CaseStudyVariant variant;
    variant.augmented = augmented;
    variant.readout = readout;
    variant.name = std::string(augmented ? "augmented" : "base") + "_" + to_string(readout);
    std::string dir = out_root + "/" + variant.name;
    if (progress) (*progress) << "case study variant " << variant.name << "\n";
    PolicySpec spec =
        spec_for_circuit(circuit, PolicyKind::kGraph, hidden_dim, num_layers, readout, augmented);
    variant.training = train(circuit, env_cfg, spec, ppo_cfg, dir, progress);

    Policy policy = load_policy(variant.training.final_checkpoint, circuit);
    EvalTarget target{&policy, variant.name, ppo_cfg.seed};
    RobustnessReport report =
        run_robustness({target}, circuit, env_cfg, fractions, perturb, n_eval_episodes);
    write_robustness_csv(report, dir + "/robustness.csv");
    variant.robustness = report.cells;
    result.variants.push_back(std::move(variant));
  }

  result.summary_path = out_root + "/summary.csv";
  std::ofstream out(result.summary_path);
  out << "variant,final_mean_reward,checkpoint\n";
  for (const CaseStudyVariant& v : result.variants)
    out << v.name << "," << detail::fmt_g17(v.training.final_mean_reward) << ","
        << v.training.final_checkpoint << "\n";
  return result;
}

}  // namespace voltgrid
