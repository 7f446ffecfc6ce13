#pragma once

// Actor-critic networks over the environment's two observation views:
// a dense MLP on the flat vector, or a GCN on the node feature matrix
// with either mean-pool or local (actuator-stacking) readout. The critic
// is a separate network with the same body architecture and a scalar head.

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "voltgrid/circuit.hpp"
#include "voltgrid/env.hpp"
#include "voltgrid/graph.hpp"
#include "voltgrid/tensor.hpp"

namespace voltgrid {

enum class PolicyKind { kDense, kGraph };
enum class Readout { kMeanPool, kLocal };

inline std::string to_string(PolicyKind k) { return k == PolicyKind::kDense ? "dense" : "graph"; }
inline std::string to_string(Readout r) { return r == Readout::kMeanPool ? "mean_pool" : "local"; }

inline PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "dense") return PolicyKind::kDense;
  if (s == "graph") return PolicyKind::kGraph;
  throw std::invalid_argument("unknown policy kind: " + s);
}

inline Readout readout_from_string(const std::string& s) {
  if (s == "mean_pool") return Readout::kMeanPool;
  if (s == "local") return Readout::kLocal;
  throw std::invalid_argument("unknown readout: " + s);
}

struct PolicySpec {
  PolicyKind kind = PolicyKind::kDense;
  int hidden_dim = 64;
  int num_layers = 3;
  Readout readout = Readout::kMeanPool;
  std::vector<int> action_dims;
  int obs_dim = 0;        // dense input width
  int node_feat_dim = 0;  // graph feature columns
  bool augmented = false; // graph message passing uses regulator-augmented edges

  int total_action_dim() const {
    int t = 0;
    for (int d : action_dims) t += d;
    return t;
  }

  void validate() const {
    if (num_layers < 1) throw std::invalid_argument("PolicySpec: num_layers must be >= 1");
    if (hidden_dim < 1) throw std::invalid_argument("PolicySpec: hidden_dim must be >= 1");
    if (action_dims.empty()) throw std::invalid_argument("PolicySpec: action_dims must be nonempty");
    if (readout == Readout::kLocal && kind != PolicyKind::kGraph)
      throw std::invalid_argument("PolicySpec: local readout requires the graph kind");
    if (kind == PolicyKind::kDense && obs_dim < 1)
      throw std::invalid_argument("PolicySpec: dense kind needs obs_dim");
    if (kind == PolicyKind::kGraph && node_feat_dim < 1)
      throw std::invalid_argument("PolicySpec: graph kind needs node_feat_dim");
  }
};

inline nlohmann::json policy_spec_to_json(const PolicySpec& s) {
  return {{"kind", to_string(s.kind)},       {"hidden_dim", s.hidden_dim},
          {"num_layers", s.num_layers},      {"readout", to_string(s.readout)},
          {"action_dims", s.action_dims},    {"obs_dim", s.obs_dim},
          {"node_feat_dim", s.node_feat_dim},{"augmented", s.augmented}};
}

inline PolicySpec policy_spec_from_json(const nlohmann::json& j) {
  PolicySpec s;
  s.kind = policy_kind_from_string(j.at("kind").get<std::string>());
  s.hidden_dim = j.at("hidden_dim").get<int>();
  s.num_layers = j.at("num_layers").get<int>();
  s.readout = readout_from_string(j.at("readout").get<std::string>());
  s.action_dims = j.at("action_dims").get<std::vector<int>>();
  s.obs_dim = j.at("obs_dim").get<int>();
  s.node_feat_dim = j.at("node_feat_dim").get<int>();
  s.augmented = j.at("augmented").get<bool>();
  return s;
}

/// Fills in the circuit-derived fields (action dims and input widths).
inline PolicySpec spec_for_circuit(const Circuit& c, PolicyKind kind, int hidden_dim, int num_layers,
                                   Readout readout = Readout::kMeanPool, bool augmented = false) {
  PolicySpec s;
  s.kind = kind;
  s.hidden_dim = hidden_dim;
  s.num_layers = num_layers;
  s.readout = readout;
  s.augmented = augmented;
  s.action_dims = action_dims(c);
  s.obs_dim = observation_vector_size(c);
  s.node_feat_dim = kNodeFeatureDim;
  s.validate();
  return s;
}

struct PolicyOutput {
  std::vector<int> action;  // flat canonical order
  double log_prob = 0.0;    // sum over heads
  double value = 0.0;
  double entropy = 0.0;  // sum over heads
};

class CheckpointMismatch : public std::runtime_error {
 public:
  explicit CheckpointMismatch(const std::string& msg) : std::runtime_error(msg) {}
};

// Standalone readouts (also used directly by tests).
inline Tensor readout_mean_pool(const Tensor& embeddings) { return mean_over_rows(embeddings); }
inline Tensor readout_local(const Tensor& embeddings, const std::vector<int>& actuator_nodes) {
  if (actuator_nodes.empty()) throw std::invalid_argument("readout_local: no actuator nodes");
  return select_rows_as_row(embeddings, actuator_nodes);
}

/// One multi-layer GCN pass: H <- relu(norm_adj * H * W + b) per layer.
inline Tensor gcn_forward(const std::vector<Parameter>& layer_weights,
                          const std::vector<Parameter>& layer_biases, const Tensor& norm_adj,
                          const Tensor& features) {
  if (layer_weights.size() != layer_biases.size())
    throw std::invalid_argument("gcn_forward: weight/bias count mismatch");
  Tensor h = features;
  for (size_t i = 0; i < layer_weights.size(); ++i)
    h = relu(add_row_broadcast(matmul(matmul(norm_adj, h), layer_weights[i].tensor),
                               layer_biases[i].tensor));
  return h;
}

class Policy {
 public:
  Policy(PolicySpec spec, const Circuit& circuit) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.kind == PolicyKind::kGraph) {
      GraphRep base = build_graph(circuit);
      rep_ = spec_.augmented ? augment_regulator_edges(circuit, base) : base;
      adj_ = constant(rep_.norm_adj);
      for (const Regulator& r : circuit.regulators)
        actuator_nodes_.push_back(circuit.lines[r.line_index].to_bus);
      for (const Capacitor& cap : circuit.capacitors) actuator_nodes_.push_back(cap.bus);
      for (const Battery& b : circuit.batteries) actuator_nodes_.push_back(b.bus);
    }
    if (spec_.action_dims != action_dims(circuit))
      throw CheckpointMismatch("policy action dims do not match the circuit");
    if (spec_.kind == PolicyKind::kDense && spec_.obs_dim != observation_vector_size(circuit))
      throw CheckpointMismatch("policy obs_dim does not match the circuit");
    allocate_params();
  }

  const PolicySpec& spec() const { return spec_; }
  const GraphRep& rep() const { return rep_; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  /// Glorot-uniform init, with the actor's logits layer scaled down so the
  /// initial policy is near-uniform.
  void init_params(uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x517cc1b727220a95ULL);
    for (Parameter& p : params_) {
      bool is_bias = p.name.size() > 2 && p.name.compare(p.name.size() - 2, 2, ".b") == 0;
      if (is_bias) {
        p.tensor->value.setZero();
        continue;
      }
      double fan_in = static_cast<double>(p.tensor->value.rows());
      double fan_out = static_cast<double>(p.tensor->value.cols());
      double a = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-a, a);
      for (Eigen::Index r = 0; r < p.tensor->value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.tensor->value.cols(); ++c) p.tensor->value(r, c) = dist(rng);
      if (p.name == "pi.head.W") p.tensor->value *= 0.01;
      p.m.setZero();
      p.v.setZero();
      p.step = 0;
    }
  }

  /// Actor forward to concatenated logits (1 x total_action_dim).
  Tensor policy_logits(const Circuit& c, const Observation& obs) const {
    return net_forward("pi", input_tensor(c, obs), spec_.total_action_dim());
  }

  /// Critic forward to a 1x1 state value.
  Tensor value_node(const Circuit& c, const Observation& obs) const {
    return net_forward("vf", input_tensor(c, obs), 1);
  }

  /// Samples (or argmaxes) an action. The RNG is only touched in sampling
  /// mode, one draw per head.
  PolicyOutput act(const Circuit& c, const Observation& obs, std::mt19937_64& rng,
                   bool deterministic = false) const {
    Tensor logits = policy_logits(c, obs);
    PolicyOutput out;
    bool first = true;
    int offset = 0;
    for (int dim : spec_.action_dims) {
      Tensor ls = log_softmax_rows(slice_cols(logits, offset, dim));
      int choice;
      if (deterministic) {
        Eigen::Index arg = 0;
        ls->value.row(0).maxCoeff(&arg);
        choice = static_cast<int>(arg);
      } else {
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        double u = unit(rng);
        double cum = 0.0;
        choice = dim - 1;
        for (int a = 0; a < dim; ++a) {
          cum += std::exp(ls->value(0, a));
          if (u < cum) {
            choice = a;
            break;
          }
        }
      }
      out.action.push_back(choice);
      double lp = ls->value(0, choice);
      out.log_prob = first ? lp : out.log_prob + lp;
      double ent = 0.0;
      for (int a = 0; a < dim; ++a) ent -= std::exp(ls->value(0, a)) * ls->value(0, a);
      out.entropy = first ? ent : out.entropy + ent;
      first = false;
      offset += dim;
      if (!std::isfinite(lp)) throw std::runtime_error("policy produced non-finite log-prob");
    }
    out.value = value_node(c, obs)->scalar();
    return out;
  }

  struct LossNodes {
    Tensor log_prob;  // 1x1
    Tensor value;     // 1x1
    Tensor entropy;   // 1x1
  };

  /// Differentiable log-prob / value / entropy of a given action. Follows
  /// the same arithmetic path as act(), so recomputed log-probs are
  /// bitwise identical to stored ones under identical parameters.
  LossNodes loss_nodes(const Circuit& c, const Observation& obs, const std::vector<int>& action) const {
    if (action.size() != spec_.action_dims.size())
      throw std::invalid_argument("loss_nodes: action component count mismatch");
    Tensor logits = policy_logits(c, obs);
    LossNodes out;
    int offset = 0;
    for (size_t h = 0; h < spec_.action_dims.size(); ++h) {
      int dim = spec_.action_dims[h];
      Tensor ls = log_softmax_rows(slice_cols(logits, offset, dim));
      Tensor pick = rows_gather_col(ls, {action[h]});
      Tensor ent = scalar_mul(row_sum(mul(exp(ls), ls)), -1.0);
      out.log_prob = h == 0 ? pick : add(out.log_prob, pick);
      out.entropy = h == 0 ? ent : add(out.entropy, ent);
      offset += dim;
    }
    out.value = value_node(c, obs);
    return out;
  }

  nlohmann::json checkpoint_header(uint64_t train_seed, long episodes) const {
    return {{"format", "voltgrid-policy"},
            {"version", 1},
            {"spec", policy_spec_to_json(spec_)},
            {"train_seed", train_seed},
            {"episodes", episodes}};
  }

  void save(const std::string& path, uint64_t train_seed = 0, long episodes = 0) const {
    write_checkpoint(path, checkpoint_header(train_seed, episodes), params_);
  }

  void load_tensors(const CheckpointData& data) {
    if (data.tensors.size() != params_.size())
      throw CheckpointMismatch("checkpoint has " + std::to_string(data.tensors.size()) +
                               " tensors, policy expects " + std::to_string(params_.size()));
    for (size_t i = 0; i < params_.size(); ++i) {
      const auto& [name, mat] = data.tensors[i];
      if (name != params_[i].name)
        throw CheckpointMismatch("checkpoint tensor \"" + name + "\" where \"" + params_[i].name +
                                 "\" was expected");
      if (mat.rows() != params_[i].tensor->value.rows() || mat.cols() != params_[i].tensor->value.cols())
        throw CheckpointMismatch("checkpoint tensor \"" + name + "\" has wrong shape");
      params_[i].tensor->value = mat;
    }
  }

 private:
  void allocate_params() {
    params_.clear();
    auto push = [this](const std::string& name, int rows, int cols) {
      params_.emplace_back(name, Mat::Zero(rows, cols));
    };
    for (const char* net : {"pi", "vf"}) {
      int in = spec_.kind == PolicyKind::kDense ? spec_.obs_dim : spec_.node_feat_dim;
      std::string prefix = std::string(net) + ".";
      for (int i = 0; i < spec_.num_layers; ++i) {
        std::string base = prefix + (spec_.kind == PolicyKind::kDense ? "l" : "gcn") + std::to_string(i);
        push(base + ".W", in, spec_.hidden_dim);
        push(base + ".b", 1, spec_.hidden_dim);
        in = spec_.hidden_dim;
      }
      int readout_width = spec_.hidden_dim;
      if (spec_.kind == PolicyKind::kGraph && spec_.readout == Readout::kLocal)
        readout_width = spec_.hidden_dim * static_cast<int>(actuator_nodes_.size());
      int head_out = std::string(net) == "pi" ? spec_.total_action_dim() : 1;
      push(prefix + "head.W", readout_width, head_out);
      push(prefix + "head.b", 1, head_out);
    }
  }

  Tensor input_tensor(const Circuit& c, const Observation& obs) const {
    if (spec_.kind == PolicyKind::kDense) {
      std::vector<double> v = observation_vector(c, obs);
      Mat row(1, static_cast<Eigen::Index>(v.size()));
      for (size_t i = 0; i < v.size(); ++i) row(0, static_cast<Eigen::Index>(i)) = v[i];
      return constant(std::move(row));
    }
    return constant(observation_graph(c, obs, rep_));
  }

  const Parameter& find_param(const std::string& name) const {
    for (const Parameter& p : params_)
      if (p.name == name) return p;
    throw std::logic_error("missing parameter: " + name);
  }

  Tensor net_forward(const std::string& net, Tensor x, int) const {
    std::string prefix = net + ".";
    if (spec_.kind == PolicyKind::kDense) {
      for (int i = 0; i < spec_.num_layers; ++i) {
        std::string base = prefix + "l" + std::to_string(i);
        x = relu(add_row_broadcast(matmul(x, find_param(base + ".W").tensor),
                                   find_param(base + ".b").tensor));
      }
    } else {
      for (int i = 0; i < spec_.num_layers; ++i) {
        std::string base = prefix + "gcn" + std::to_string(i);
        x = relu(add_row_broadcast(matmul(matmul(adj_, x), find_param(base + ".W").tensor),
                                   find_param(base + ".b").tensor));
      }
      x = spec_.readout == Readout::kMeanPool ? readout_mean_pool(x)
                                              : readout_local(x, actuator_nodes_);
    }
    return add_row_broadcast(matmul(x, find_param(prefix + "head.W").tensor),
                             find_param(prefix + "head.b").tensor);
  }

  PolicySpec spec_;
  GraphRep rep_;
  Tensor adj_;
  std::vector<int> actuator_nodes_;
  std::vector<Parameter> params_;
};

/// Reconstructs a policy from a checkpoint; the circuit supplies the
/// adjacency and dimension checks (exit path for mismatches).
inline Policy load_policy(const std::string& path, const Circuit& circuit) {
  CheckpointData data = read_checkpoint(path);
  if (!data.header.contains("spec")) throw CheckpointMismatch("checkpoint lacks a policy spec header");
  PolicySpec spec = policy_spec_from_json(data.header.at("spec"));
  Policy p(spec, circuit);
  p.load_tensors(data);
  return p;
}

}  // namespace voltgrid
