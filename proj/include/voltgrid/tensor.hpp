#pragma once

// Reverse-mode autodiff over dense 64-bit matrices. Graphs are recorded
// dynamically per forward pass; backward() walks the tape in reverse
// topological order. Leaf gradients accumulate across backward calls
// until zeroed; non-leaf gradients are scratch and reset on every call.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include <json.hpp>

namespace voltgrid {

using Mat = Eigen::MatrixXd;

struct TensorNode;
using Tensor = std::shared_ptr<TensorNode>;

struct TensorNode {
  Mat value;
  Mat grad;  // lazily allocated; same shape as value once present
  bool requires_grad = false;
  std::vector<Tensor> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
  }
  bool is_leaf() const { return parents.empty(); }
  double scalar() const { return value(0, 0); }
};

inline Tensor constant(Mat v) {
  auto t = std::make_shared<TensorNode>();
  t->value = std::move(v);
  return t;
}

inline Tensor scalar_constant(double v) { return constant(Mat::Constant(1, 1, v)); }

inline Tensor leaf(Mat v, bool requires_grad = true) {
  auto t = std::make_shared<TensorNode>();
  t->value = std::move(v);
  t->requires_grad = requires_grad;
  return t;
}

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a->value.rows()) + "x" + std::to_string(a->value.cols()) +
                                " vs " + std::to_string(b->value.rows()) + "x" +
                                std::to_string(b->value.cols()));
}

inline Tensor make_op(Mat value, std::vector<Tensor> parents, std::function<void(TensorNode&)> backprop) {
  auto t = std::make_shared<TensorNode>();
  t->value = std::move(value);
  t->parents = std::move(parents);
  for (const Tensor& p : t->parents)
    if (p->requires_grad) t->requires_grad = true;
  if (t->requires_grad) t->backprop = std::move(backprop);
  return t;
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a->value.cols() != b->value.rows())
    throw std::invalid_argument("matmul: inner dimensions differ, " + std::to_string(a->value.rows()) +
                                "x" + std::to_string(a->value.cols()) + " * " +
                                std::to_string(b->value.rows()) + "x" + std::to_string(b->value.cols()));
  return detail::make_op(a->value * b->value, {a, b}, [](TensorNode& n) {
    const Tensor& a = n.parents[0];
    const Tensor& b = n.parents[1];
    if (a->requires_grad) {
      a->ensure_grad();
      a->grad.noalias() += n.grad * b->value.transpose();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->grad.noalias() += a->value.transpose() * n.grad;
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  return detail::make_op(a->value + b->value, {a, b}, [](TensorNode& n) {
    for (int i = 0; i < 2; ++i)
      if (n.parents[i]->requires_grad) {
        n.parents[i]->ensure_grad();
        n.parents[i]->grad += n.grad;
      }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  return detail::make_op(a->value - b->value, {a, b}, [](TensorNode& n) {
    if (n.parents[0]->requires_grad) {
      n.parents[0]->ensure_grad();
      n.parents[0]->grad += n.grad;
    }
    if (n.parents[1]->requires_grad) {
      n.parents[1]->ensure_grad();
      n.parents[1]->grad -= n.grad;
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  return detail::make_op(a->value.cwiseProduct(b->value), {a, b}, [](TensorNode& n) {
    const Tensor& a = n.parents[0];
    const Tensor& b = n.parents[1];
    if (a->requires_grad) {
      a->ensure_grad();
      a->grad += n.grad.cwiseProduct(b->value);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->grad += n.grad.cwiseProduct(a->value);
    }
  });
}

/// Elementwise min; gradient follows the smaller argument (ties go to a).
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "minimum");
  return detail::make_op(a->value.cwiseMin(b->value), {a, b}, [](TensorNode& n) {
    const Tensor& a = n.parents[0];
    const Tensor& b = n.parents[1];
    Mat take_a = (a->value.array() <= b->value.array()).cast<double>().matrix();
    if (a->requires_grad) {
      a->ensure_grad();
      a->grad += n.grad.cwiseProduct(take_a);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->grad += n.grad.cwiseProduct(Mat(Mat::Ones(take_a.rows(), take_a.cols()) - take_a));
    }
  });
}

/// Adds a 1 x K bias row to every row of an N x K matrix.
inline Tensor add_row_broadcast(const Tensor& a, const Tensor& bias) {
  if (bias->value.rows() != 1 || bias->value.cols() != a->value.cols())
    throw std::invalid_argument("add_row_broadcast: bias must be 1x" + std::to_string(a->value.cols()) +
                                ", got " + std::to_string(bias->value.rows()) + "x" +
                                std::to_string(bias->value.cols()));
  Mat out = a->value;
  out.rowwise() += bias->value.row(0);
  return detail::make_op(std::move(out), {a, bias}, [](TensorNode& n) {
    if (n.parents[0]->requires_grad) {
      n.parents[0]->ensure_grad();
      n.parents[0]->grad += n.grad;
    }
    if (n.parents[1]->requires_grad) {
      n.parents[1]->ensure_grad();
      n.parents[1]->grad.row(0) += n.grad.colwise().sum();
    }
  });
}

inline Tensor scalar_mul(const Tensor& a, double s) {
  return detail::make_op(a->value * s, {a}, [s](TensorNode& n) {
    n.parents[0]->ensure_grad();
    n.parents[0]->grad += n.grad * s;
  });
}

inline Tensor scalar_add(const Tensor& a, double s) {
  return detail::make_op((a->value.array() + s).matrix(), {a}, [](TensorNode& n) {
    n.parents[0]->ensure_grad();
    n.parents[0]->grad += n.grad;
  });
}

inline Tensor relu(const Tensor& a) {
  return detail::make_op(a->value.cwiseMax(0.0), {a}, [](TensorNode& n) {
    Mat mask = (n.parents[0]->value.array() > 0.0).cast<double>().matrix();
    n.parents[0]->ensure_grad();
    n.parents[0]->grad += n.grad.cwiseProduct(mask);
  });
}

inline Tensor tanh(const Tensor& a) {
  return detail::make_op(a->value.array().tanh().matrix(), {a}, [](TensorNode& n) {
    Mat t = n.parents[0]->value.array().tanh().matrix();
    n.parents[0]->ensure_grad();
    n.parents[0]->grad.array() += n.grad.array() * (1.0 - t.array().square());
  });
}

inline Tensor exp(const Tensor& a) {
  return detail::make_op(a->value.array().exp().matrix(), {a}, [](TensorNode& n) {
    n.parents[0]->ensure_grad();
    n.parents[0]->grad.array() += n.grad.array() * n.value.array();
  });
}

inline Tensor log(const Tensor& a) {
  return detail::make_op(a->value.array().log().matrix(), {a}, [](TensorNode& n) {
    n.parents[0]->ensure_grad();
    n.parents[0]->grad.array() += n.grad.array() / n.parents[0]->value.array();
  });
}

/// Clamp with zero gradient outside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::make_op(a->value.cwiseMax(lo).cwiseMin(hi), {a}, [lo, hi](TensorNode& n) {
    Mat mask = ((n.parents[0]->value.array() >= lo) && (n.parents[0]->value.array() <= hi)).cast<double>().matrix();
    n.parents[0]->ensure_grad();
    n.parents[0]->grad += n.grad.cwiseProduct(mask);
  });
}

inline Tensor sum(const Tensor& a) {
  return detail::make_op(Mat::Constant(1, 1, a->value.sum()), {a}, [](TensorNode& n) {
    n.parents[0]->ensure_grad();
    n.parents[0]->grad.array() += n.grad(0, 0);
  });
}

inline Tensor mean(const Tensor& a) {
  double inv = 1.0 / static_cast<double>(a->value.size());
  return detail::make_op(Mat::Constant(1, 1, a->value.mean()), {a}, [inv](TensorNode& n) {
    n.parents[0]->ensure_grad();
    n.parents[0]->grad.array() += n.grad(0, 0) * inv;
  });
}

/// Per-row sum: N x K -> N x 1.
inline Tensor row_sum(const Tensor& a) {
  return detail::make_op(a->value.rowwise().sum(), {a}, [](TensorNode& n) {
    n.parents[0]->ensure_grad();
    n.parents[0]->grad.colwise() += n.grad.col(0);
  });
}

/// Column-wise mean over rows: N x K -> 1 x K.
inline Tensor mean_over_rows(const Tensor& a) {
  double inv = 1.0 / static_cast<double>(a->value.rows());
  return detail::make_op(a->value.colwise().mean(), {a}, [inv](TensorNode& n) {
    n.parents[0]->ensure_grad();
    Mat scaled = n.grad * inv;
    n.parents[0]->grad.rowwise() += scaled.row(0);
  });
}

inline Tensor slice_rows(const Tensor& a, int first, int count) {
  if (first < 0 || count < 1 || first + count > a->value.rows())
    throw std::invalid_argument("slice_rows: range outside matrix");
  return detail::make_op(a->value.middleRows(first, count), {a}, [first, count](TensorNode& n) {
    n.parents[0]->ensure_grad();
    n.parents[0]->grad.middleRows(first, count) += n.grad;
  });
}

inline Tensor slice_cols(const Tensor& a, int first, int count) {
  if (first < 0 || count < 1 || first + count > a->value.cols())
    throw std::invalid_argument("slice_cols: range outside matrix");
  return detail::make_op(a->value.middleCols(first, count), {a}, [first, count](TensorNode& n) {
    n.parents[0]->ensure_grad();
    n.parents[0]->grad.middleCols(first, count) += n.grad;
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  Eigen::Index cols = parts[0]->value.cols(), rows = 0;
  for (const Tensor& p : parts) {
    if (p->value.cols() != cols) throw std::invalid_argument("concat_rows: column counts differ");
    rows += p->value.rows();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const Tensor& p : parts) {
    out.middleRows(at, p->value.rows()) = p->value;
    at += p->value.rows();
  }
  return detail::make_op(std::move(out), parts, [](TensorNode& n) {
    Eigen::Index at = 0;
    for (const Tensor& p : n.parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        p->grad += n.grad.middleRows(at, p->value.rows());
      }
      at += p->value.rows();
    }
  });
}

/// Selects rows by index and lays them out left-to-right in a single row:
/// result is 1 x (k * K). Used by the local readout.
inline Tensor select_rows_as_row(const Tensor& a, std::vector<int> rows) {
  const Eigen::Index k = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index cols = a->value.cols();
  for (int r : rows)
    if (r < 0 || r >= a->value.rows())
      throw std::invalid_argument("select_rows_as_row: row " + std::to_string(r) + " outside matrix");
  Mat out(1, k * cols);
  for (Eigen::Index i = 0; i < k; ++i) out.middleCols(i * cols, cols) = a->value.row(rows[i]);
  return detail::make_op(std::move(out), {a}, [rows, cols](TensorNode& n) {
    n.parents[0]->ensure_grad();
    for (size_t i = 0; i < rows.size(); ++i)
      n.parents[0]->grad.row(rows[i]) += n.grad.middleCols(static_cast<Eigen::Index>(i) * cols, cols);
  });
}

/// Numerically stable fused log-softmax over each row.
inline Tensor log_softmax_rows(const Tensor& a) {
  Mat out = a->value;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    double mx = out.row(r).maxCoeff();
    double lse = std::log((out.row(r).array() - mx).exp().sum());
    out.row(r).array() -= mx + lse;
  }
  return detail::make_op(std::move(out), {a}, [](TensorNode& n) {
    n.parents[0]->ensure_grad();
    for (Eigen::Index r = 0; r < n.value.rows(); ++r) {
      double gsum = n.grad.row(r).sum();
      n.parents[0]->grad.row(r).array() +=
          n.grad.row(r).array() - n.value.row(r).array().exp() * gsum;
    }
  });
}

inline Tensor row_softmax(const Tensor& a) { return exp(log_softmax_rows(a)); }

/// Per-row gather: picks entry idx[r] from row r, giving N x 1.
inline Tensor rows_gather_col(const Tensor& a, std::vector<int> idx) {
  if (static_cast<Eigen::Index>(idx.size()) != a->value.rows())
    throw std::invalid_argument("rows_gather_col: need one index per row");
  Mat out(a->value.rows(), 1);
  for (Eigen::Index r = 0; r < a->value.rows(); ++r) {
    if (idx[r] < 0 || idx[r] >= a->value.cols())
      throw std::invalid_argument("rows_gather_col: index outside row");
    out(r, 0) = a->value(r, idx[r]);
  }
  return detail::make_op(std::move(out), {a}, [idx](TensorNode& n) {
    n.parents[0]->ensure_grad();
    for (Eigen::Index r = 0; r < n.value.rows(); ++r) n.parents[0]->grad(r, idx[r]) += n.grad(r, 0);
  });
}

/// Populates gradients of everything reachable from a scalar loss.
/// Repeated calls accumulate into leaf gradients.
inline void backward(const Tensor& loss) {
  if (loss->value.rows() != 1 || loss->value.cols() != 1)
    throw std::invalid_argument("backward: loss must be 1x1, got " + std::to_string(loss->value.rows()) +
                                "x" + std::to_string(loss->value.cols()));
  // Iterative post-order DFS; nodes end up parents-first.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.push_back({loss.get(), 0});
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  // Non-leaf gradients are per-call scratch.
  for (TensorNode* n : topo) {
    if (!n->is_leaf())
      n->grad = Mat::Zero(n->value.rows(), n->value.cols());
    else if (n->requires_grad)
      n->ensure_grad();
  }
  loss->ensure_grad();
  loss->grad(0, 0) += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* n = *it;
    if (n->requires_grad && n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Parameters and Adam

struct Parameter {
  std::string name;
  Tensor tensor;
  Mat m;  // first moment
  Mat v;  // second moment
  long step = 0;

  Parameter() = default;
  Parameter(std::string name_, Mat init) : name(std::move(name_)), tensor(leaf(std::move(init))) {
    m = Mat::Zero(tensor->value.rows(), tensor->value.cols());
    v = Mat::Zero(tensor->value.rows(), tensor->value.cols());
  }
};

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void zero_grads(std::vector<Parameter>& params) {
  for (Parameter& p : params)
    if (p.tensor->grad.size() > 0) p.tensor->grad.setZero();
}

inline double global_grad_norm(const std::vector<Parameter>& params) {
  double sq = 0.0;
  for (const Parameter& p : params)
    if (p.tensor->grad.size() > 0) sq += p.tensor->grad.squaredNorm();
  return std::sqrt(sq);
}

/// Scales all gradients so the global norm is at most max_norm.
/// Returns the pre-clip norm.
inline double clip_grad_norm(std::vector<Parameter>& params, double max_norm) {
  double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    double scale = max_norm / norm;
    for (Parameter& p : params)
      if (p.tensor->grad.size() > 0) p.tensor->grad *= scale;
  }
  return norm;
}

/// Bias-corrected Adam step over all parameters, then zeroes gradients.
inline void adam_step(std::vector<Parameter>& params, const AdamOptions& opt = {}) {
  for (Parameter& p : params) {
    p.tensor->ensure_grad();
    const Mat& g = p.tensor->grad;
    p.step += 1;
    p.m = opt.beta1 * p.m + (1.0 - opt.beta1) * g;
    p.v = (opt.beta2 * p.v.array() + (1.0 - opt.beta2) * g.array().square()).matrix();
    double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p.step));
    double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p.step));
    Mat mhat = p.m / bc1;
    Mat vhat = p.v / bc2;
    p.tensor->value.array() -= opt.lr * mhat.array() / (vhat.array().sqrt() + opt.eps);
  }
  zero_grads(params);
}

// ---------------------------------------------------------------------------
// Checkpoint file: versioned binary container of named row-major f64 blobs
// with a free-form JSON header. Round-trips values exactly.

namespace detail {

constexpr char kCkptMagic[8] = {'V', 'G', 'C', 'K', 'P', 'T', '0', '1'};

inline void write_u64(std::ostream& out, uint64_t x) {
  out.write(reinterpret_cast<const char*>(&x), sizeof(x));
}

inline uint64_t read_u64(std::istream& in) {
  uint64_t x = 0;
  in.read(reinterpret_cast<char*>(&x), sizeof(x));
  return x;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const nlohmann::json& header,
                             const std::vector<Parameter>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  std::string hdr = header.dump();
  detail::write_u64(out, hdr.size());
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  detail::write_u64(out, params.size());
  for (const Parameter& p : params) {
    detail::write_u64(out, p.name.size());
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_u64(out, static_cast<uint64_t>(p.tensor->value.rows()));
    detail::write_u64(out, static_cast<uint64_t>(p.tensor->value.cols()));
    for (Eigen::Index r = 0; r < p.tensor->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.tensor->value.cols(); ++c) {
        double x = p.tensor->value(r, c);
        out.write(reinterpret_cast<const char*>(&x), sizeof(x));
      }
  }
  if (!out) throw std::runtime_error("write failure on checkpoint: " + path);
}

struct CheckpointData {
  nlohmann::json header;
  std::vector<std::pair<std::string, Mat>> tensors;
};

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  uint64_t hdr_len = detail::read_u64(in);
  std::string hdr(hdr_len, '\0');
  in.read(hdr.data(), static_cast<std::streamsize>(hdr_len));
  CheckpointData data;
  data.header = nlohmann::json::parse(hdr);
  uint64_t n = detail::read_u64(in);
  for (uint64_t i = 0; i < n; ++i) {
    uint64_t name_len = detail::read_u64(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    uint64_t rows = detail::read_u64(in), cols = detail::read_u64(in);
    Mat mat(rows, cols);
    for (uint64_t r = 0; r < rows; ++r)
      for (uint64_t c = 0; c < cols; ++c) {
        double x;
        in.read(reinterpret_cast<char*>(&x), sizeof(x));
        mat(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = x;
      }
    data.tensors.emplace_back(std::move(name), std::move(mat));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  }
  return data;
}

}  // namespace voltgrid
