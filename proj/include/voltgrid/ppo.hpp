#pragma once

// Clipped-objective PPO with GAE over the volt-var environment, for either
// policy kind. Everything is deterministic given the config seed: episode
// profiles, action sampling, and minibatch shuffles all derive their RNG
// streams from (seed, episode/update index).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "voltgrid/env.hpp"
#include "voltgrid/policy.hpp"
#include "voltgrid/tensor.hpp"

namespace voltgrid {

struct PPOConfig {
  long episodes_total = 2000;
  int episodes_per_update = 16;
  int minibatch_size = 64;
  int epochs_per_update = 4;
  double clip_epsilon = 0.2;
  double discount = 0.99;
  double gae_lambda = 0.95;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double lr = 3e-4;
  double max_grad_norm = 0.5;
  int checkpoint_interval_updates = 50;
  uint64_t seed = 0;

  void validate() const {
    if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0))
      throw std::invalid_argument("PPOConfig: clip_epsilon must be in (0,1)");
    if (!(discount > 0.0 && discount <= 1.0))
      throw std::invalid_argument("PPOConfig: discount must be in (0,1]");
    if (gae_lambda < 0.0 || gae_lambda > 1.0)
      throw std::invalid_argument("PPOConfig: gae_lambda must be in [0,1]");
    if (episodes_total < 1 || episodes_per_update < 1 || minibatch_size < 1 || epochs_per_update < 1)
      throw std::invalid_argument("PPOConfig: counts must be positive");
  }
};

struct RolloutBuffer {
  std::vector<Observation> observations;
  std::vector<std::vector<int>> actions;
  std::vector<double> log_prob_old;
  std::vector<double> value_old;
  std::vector<double> rewards;
  std::vector<int> dones;
  std::vector<double> advantages;
  std::vector<double> returns;

  // Per-episode bookkeeping for the training log.
  std::vector<double> episode_rewards;
  std::vector<double> episode_r_v, episode_r_c, episode_r_p;

  size_t size() const { return rewards.size(); }

  void clear() {
    observations.clear();
    actions.clear();
    log_prob_old.clear();
    value_old.clear();
    rewards.clear();
    dones.clear();
    advantages.clear();
    returns.clear();
    episode_rewards.clear();
    episode_r_v.clear();
    episode_r_c.clear();
    episode_r_p.clear();
  }
};

/// Runs n_episodes full-horizon episodes under the sampling policy.
/// Episode e uses env seed (episode_offset + e) and an action RNG derived
/// from (seed, episode_offset + e), so collection order cannot change results.
inline void collect_rollouts(Env& env, const Policy& policy, int n_episodes, uint64_t seed,
                             long episode_offset, RolloutBuffer& buffer) {
  const Circuit& c = env.circuit();
  for (int e = 0; e < n_episodes; ++e) {
    uint64_t episode_id = static_cast<uint64_t>(episode_offset + e);
    std::mt19937_64 action_rng(detail::mix_seed(seed ^ 0x6a09e667f3bcc909ULL, episode_id));
    Observation obs = env.reset(episode_id);
    double ep_reward = 0.0, ep_rv = 0.0, ep_rc = 0.0, ep_rp = 0.0;
    bool done = false;
    while (!done) {
      PolicyOutput out = policy.act(c, obs, action_rng);
      StepResult res = env.step(Action::from_flat(c, out.action));
      buffer.observations.push_back(obs);
      buffer.actions.push_back(out.action);
      buffer.log_prob_old.push_back(out.log_prob);
      buffer.value_old.push_back(out.value);
      buffer.rewards.push_back(res.reward);
      buffer.dones.push_back(res.done ? 1 : 0);
      ep_reward += res.reward;
      ep_rv += res.r_v;
      ep_rc += res.r_c;
      ep_rp += res.r_p;
      obs = res.observation;
      done = res.done;
    }
    buffer.episode_rewards.push_back(ep_reward);
    buffer.episode_r_v.push_back(ep_rv);
    buffer.episode_r_c.push_back(ep_rc);
    buffer.episode_r_p.push_back(ep_rp);
  }
}

/// GAE with terminal bootstrap value zero, then batch-wide advantage
/// normalization (exact unit variance when the batch has spread).
inline void compute_gae(RolloutBuffer& buffer, double discount, double gae_lambda) {
  const size_t n = buffer.size();
  buffer.advantages.assign(n, 0.0);
  buffer.returns.assign(n, 0.0);
  double next_advantage = 0.0;
  for (size_t i = n; i-- > 0;) {
    double not_done = buffer.dones[i] ? 0.0 : 1.0;
    double next_value = (i + 1 < n) ? buffer.value_old[i + 1] : 0.0;
    double delta = buffer.rewards[i] + discount * next_value * not_done - buffer.value_old[i];
    next_advantage = delta + discount * gae_lambda * not_done * next_advantage;
    buffer.advantages[i] = next_advantage;
  }
  for (size_t i = 0; i < n; ++i) buffer.returns[i] = buffer.advantages[i] + buffer.value_old[i];
  if (n > 1) {
    double mean = 0.0;
    for (double a : buffer.advantages) mean += a;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double a : buffer.advantages) var += (a - mean) * (a - mean);
    double stdev = std::sqrt(var / static_cast<double>(n));
    for (double& a : buffer.advantages) {
      a -= mean;
      if (stdev > 0.0) a /= stdev;
    }
  }
}

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm, averaged over minibatches
};

/// One PPO update over the buffer: epochs of shuffled minibatches with the
/// clipped surrogate, value regression, and entropy bonus. Throws on
/// non-finite losses with a dump of the offending minibatch.
inline UpdateStats ppo_update(Policy& policy, const Circuit& circuit, RolloutBuffer& buffer,
                              const PPOConfig& cfg, long update_index) {
  const size_t n = buffer.size();
  if (buffer.advantages.size() != n)
    throw std::logic_error("ppo_update: compute_gae must run before updating");
  UpdateStats stats;
  int n_minibatches = 0;
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  AdamOptions adam{cfg.lr, 0.9, 0.999, 1e-8};
  for (int epoch = 0; epoch < cfg.epochs_per_update; ++epoch) {
    std::mt19937_64 shuffle_rng(
        detail::mix_seed(cfg.seed ^ 0xbb67ae8584caa73bULL,
                         static_cast<uint64_t>(update_index) * 131 + static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.minibatch_size)) {
      size_t stop = std::min(n, start + static_cast<size_t>(cfg.minibatch_size));
      std::vector<Tensor> objectives, value_errs, entropies;
      int clipped = 0;
      for (size_t k = start; k < stop; ++k) {
        size_t i = order[k];
        Policy::LossNodes nodes = policy.loss_nodes(circuit, buffer.observations[i], buffer.actions[i]);
        Tensor ratio = exp(scalar_add(nodes.log_prob, -buffer.log_prob_old[i]));
        Tensor adv = scalar_constant(buffer.advantages[i]);
        Tensor unclipped = mul(ratio, adv);
        Tensor clipped_obj = mul(clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon), adv);
        objectives.push_back(minimum(unclipped, clipped_obj));
        Tensor verr = scalar_add(nodes.value, -buffer.returns[i]);
        value_errs.push_back(mul(verr, verr));
        entropies.push_back(nodes.entropy);
        if (std::abs(ratio->scalar() - 1.0) > cfg.clip_epsilon) ++clipped;
      }
      Tensor policy_loss = scalar_mul(mean(concat_rows(objectives)), -1.0);
      Tensor value_loss = mean(concat_rows(value_errs));
      Tensor entropy_mean = mean(concat_rows(entropies));
      Tensor total = add(policy_loss, scalar_mul(value_loss, cfg.value_coef));
      total = sub(total, scalar_mul(entropy_mean, cfg.entropy_coef));
      if (!std::isfinite(total->scalar())) {
        std::string dump = "non-finite PPO loss at update " + std::to_string(update_index) +
                           ", epoch " + std::to_string(epoch) + ", minibatch rows";
        for (size_t k = start; k < stop; ++k) dump += " " + std::to_string(order[k]);
        dump += "; policy_loss=" + std::to_string(policy_loss->scalar()) +
                " value_loss=" + std::to_string(value_loss->scalar()) +
                " entropy=" + std::to_string(entropy_mean->scalar());
        throw std::runtime_error(dump);
      }
      backward(total);
      stats.grad_norm += clip_grad_norm(policy.params(), cfg.max_grad_norm);
      adam_step(policy.params(), adam);

      stats.policy_loss += policy_loss->scalar();
      stats.value_loss += value_loss->scalar();
      stats.entropy += entropy_mean->scalar();
      stats.clip_fraction += static_cast<double>(clipped) / static_cast<double>(stop - start);
      ++n_minibatches;
    }
  }
  if (n_minibatches > 0) {
    stats.policy_loss /= n_minibatches;
    stats.value_loss /= n_minibatches;
    stats.entropy /= n_minibatches;
    stats.clip_fraction /= n_minibatches;
    stats.grad_norm /= n_minibatches;
  }
  return stats;
}

namespace detail {

// Round-trip exact formatting keeps training logs byte-comparable.
inline std::string fmt_g17(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace detail

struct TrainResult {
  std::string log_path;
  std::string final_checkpoint;
  long episodes = 0;
  double final_mean_reward = 0.0;
};

/// Full training loop: collect -> GAE -> update, with a CSV log row per
/// update and periodic checkpoints named ckpt_<episodes>.bin.
inline TrainResult train(const Circuit& circuit, const EnvConfig& env_cfg, const PolicySpec& spec,
                         const PPOConfig& ppo_cfg, const std::string& out_dir,
                         std::ostream* progress = nullptr) {
  ppo_cfg.validate();
  std::filesystem::create_directories(out_dir);
  EnvConfig ecfg = env_cfg;
  ecfg.seed = ppo_cfg.seed;
  Env env(circuit, ecfg);
  Policy policy(spec, circuit);
  policy.init_params(ppo_cfg.seed);

  TrainResult result;
  result.log_path = out_dir + "/log.csv";
  std::ofstream log(result.log_path);
  if (!log) throw std::runtime_error("cannot write training log: " + result.log_path);
  log << "update,episodes,mean_reward,r_v,r_c,r_p,policy_loss,value_loss,entropy,clip_frac\n";

  RolloutBuffer buffer;
  long episodes_done = 0;
  long update = 0;
  while (episodes_done < ppo_cfg.episodes_total) {
    int batch = static_cast<int>(
        std::min<long>(ppo_cfg.episodes_per_update, ppo_cfg.episodes_total - episodes_done));
    buffer.clear();
    collect_rollouts(env, policy, batch, ppo_cfg.seed, episodes_done, buffer);
    compute_gae(buffer, ppo_cfg.discount, ppo_cfg.gae_lambda);
    UpdateStats stats = ppo_update(policy, circuit, buffer, ppo_cfg, update);
    episodes_done += batch;
    ++update;

    result.final_mean_reward = detail::mean_of(buffer.episode_rewards);
    log << update << "," << episodes_done << "," << detail::fmt_g17(result.final_mean_reward) << ","
        << detail::fmt_g17(detail::mean_of(buffer.episode_r_v)) << ","
        << detail::fmt_g17(detail::mean_of(buffer.episode_r_c)) << ","
        << detail::fmt_g17(detail::mean_of(buffer.episode_r_p)) << ","
        << detail::fmt_g17(stats.policy_loss) << "," << detail::fmt_g17(stats.value_loss) << ","
        << detail::fmt_g17(stats.entropy) << "," << detail::fmt_g17(stats.clip_fraction) << "\n";
    log.flush();
    if (progress && update % 10 == 0)
      (*progress) << "  update " << update << " episodes " << episodes_done << " mean_reward "
                  << result.final_mean_reward << "\n";

    if (ppo_cfg.checkpoint_interval_updates > 0 && update % ppo_cfg.checkpoint_interval_updates == 0 &&
        episodes_done < ppo_cfg.episodes_total)
      policy.save(out_dir + "/ckpt_" + std::to_string(episodes_done) + ".bin", ppo_cfg.seed,
                  episodes_done);
  }
  result.episodes = episodes_done;
  result.final_checkpoint = out_dir + "/ckpt_" + std::to_string(episodes_done) + ".bin";
  policy.save(result.final_checkpoint, ppo_cfg.seed, episodes_done);
  return result;
}

}  // namespace voltgrid
