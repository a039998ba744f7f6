// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiable array engine.
//
// A Tensor is a cheap handle to a graph node holding a dense row-major
// float64 buffer. Every op that has at least one requires_grad input records
// its inputs and a backward rule; ops over frozen inputs produce plain
// constants and never enter the graph. backward() walks the graph reachable
// from a scalar loss in reverse topological order and accumulates gradients
// into every requires_grad tensor it reaches.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace moa::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::vector<double>& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Leading extent of a 2-D tensor (1 for scalars and vectors).
  std::size_t rows() const;
  // Trailing extent (1 for scalars).
  std::size_t cols() const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Direct write access; only meaningful for leaves (parameter init and
  // optimizer updates). Writing into an interior node invalidates the graph.
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Value copy with no graph history.
  Tensor detach() const;
  // Deep copy of value and requires_grad flag.
  Tensor clone() const;

  const char* op_name() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// While alive on a thread, ops on that thread record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Accumulates d(loss)/d(t) into every reachable requires_grad tensor.
// Throws ContractError unless loss holds exactly one element.
void backward(const Tensor& loss);

// Nodes reachable from root that record a backward rule, in topological
// order (inputs before outputs).
std::vector<Node*> topo_order(const Tensor& root);

// ---------------------------------------------------------------------------
// Primitive ops. Unless stated otherwise operands are 2-D [rows, cols].

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// a[m,n] + bias[n] broadcast over rows (bias may be [n] or [1,n]).
Tensor add_row(const Tensor& a, const Tensor& bias);
// a[m,n] * w[m,1] (each row scaled by its own weight).
Tensor scale_rows(const Tensor& a, const Tensor& w);
// a[m, groups*width] with column group h multiplied by g[h].
Tensor scale_col_groups(const Tensor& a, const Tensor& g);

Tensor sigmoid(const Tensor& a);
// s * sigmoid(a), kept strictly inside (0, s) after scaling.
Tensor scaled_sigmoid(const Tensor& a, double s);
// Numerically stable softmax along axis 0 or 1 of a 2-D tensor.
Tensor softmax(const Tensor& a, int axis = 1);

enum class Activation { identity, relu, silu };
Activation activation_from_name(const std::string& name);
std::string activation_name(Activation f);
Tensor activate(const Tensor& a, Activation f);

// Mean along axis 0 ([1,n]) or axis 1 ([m,1]).
Tensor mean(const Tensor& a, int axis);
Tensor sum(const Tensor& a);
Tensor concat_rows(std::span<const Tensor> parts);

Tensor slice_col(const Tensor& a, std::size_t col);
// Rows of a selected by idx (repeats allowed; gradients scatter-add).
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx);
// Inverse placement: result[idx[i]] = a[i]; other rows zero. idx distinct.
Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> idx,
                    std::size_t out_rows);

Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps = 1e-6);

struct AttentionSpec {
  std::size_t batch = 1;
  std::size_t q_len = 1;   // rows of q per batch element
  std::size_t kv_len = 1;  // rows of k/v per batch element
  std::size_t heads = 1;
  bool causal = false;     // key s visible to query t iff s <= t
  bool shared_kv = false;  // k/v hold kv_len rows used by every batch element
};
// Multi-head scaled dot-product attention. q: [batch*q_len, d];
// k, v: [batch*kv_len, d] (or [kv_len, d] when shared_kv). Returns
// concatenated head outputs [batch*q_len, d]. kv_len == 0 yields zeros.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionSpec& spec);

// Mean next-token cross-entropy over rows with nonzero weight.
// logits [n, vocab], targets and weights length n. Zero total weight gives 0.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const double> weights);

// x [batch*seq, d] -> [batch, d], averaging the first lengths[b] rows of
// each block of seq rows.
Tensor segment_mean(const Tensor& x, std::size_t batch, std::size_t seq,
                    std::span<const std::size_t> lengths);
// a [batch, n] -> [batch*times, n], each row repeated `times` times.
Tensor repeat_rows(const Tensor& a, std::size_t times);

enum class StraightThrough { none, identity };
// Hard-gated router weight r[k,1] for rows that passed r > gamma. Forward
// returns r unchanged. Backward treats the step indicator's derivative with
// respect to (r - gamma) as 1 when mode == identity, so r receives
// g*(1 + r) and gamma receives -g*r; with mode == none, r receives g and
// gamma nothing.
Tensor gated_weight(const Tensor& r, const Tensor& gamma, StraightThrough mode);

}  // namespace moa::ad
