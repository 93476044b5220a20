// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "maskgru/tensor.hpp"

namespace maskgru {

enum class OpKind {
  kConstant,
  kParameter,
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kAddScalar,
  kConcat,
  kSigmoid,
  kTanh,
  kRelu,
  kPrelu,
  kAbs,
  kMaxPool2d,
  kFlatten,
  kLinear,
  kInstanceNorm,
  kConv2d,
  kSum,
  kGather,
  kMinimum,
  kMaximum,
  kCustom,
};

const char* op_name(OpKind kind);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// What a node's backward function sees: its output gradient and its inputs.
class BackwardContext {
 public:
  std::span<const double> out_grad() const { return out_grad_; }
  const Tensor& out_value() const;
  const Tensor& input(std::size_t i) const;
  bool needs_grad(std::size_t i) const;
  /// Zero-initialised on first access. Only call when needs_grad(i).
  std::span<double> input_grad(std::size_t i);

 private:
  friend class Graph;
  BackwardContext(Graph& graph, std::size_t node, std::span<const double> out_grad)
      : graph_(graph), node_(node), out_grad_(out_grad) {}

  Graph& graph_;
  std::size_t node_;
  std::span<const double> out_grad_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/**
 * Tape of primitive operations for reverse-mode differentiation.
 *
 * Nodes are appended in execution order, so the tape is topologically sorted
 * by construction. backward() walks it once, from the loss towards the
 * leaves, and accumulates leaf gradients into the bound parameter tensors.
 * A graph supports a single backward pass.
 */
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf that tracks `param`; its gradient is added to param's grad slot
  /// on backward. The tensor must outlive the backward call.
  Var parameter(Tensor& param);

  /// Appends a node. `backward` is dropped when no input requires grad.
  Var record(OpKind kind, std::initializer_list<Var> inputs, Tensor value, BackwardFn backward);

  void backward(Var loss);

  const Tensor& value(Var v) const;
  /// Gradient of the last backward pass w.r.t. v; empty when none reached it.
  std::span<const double> grad(Var v) const;
  bool requires_grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  bool grad_enabled() const { return grad_enabled_; }
  /// Debug mode: every recorded value is checked for NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  friend class BackwardContext;

  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    Tensor* param = nullptr;
    BackwardFn backward;
  };

  void check_owned(Var v, const char* what) const;

  std::deque<Node> nodes_;
  bool grad_enabled_;
  bool check_finite_ = false;
  bool backward_done_ = false;
};

// Primitives. Elementwise binary ops require identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scalar_mul(Var a, double s);
Var add_scalar(Var a, double s);
/// Concatenation along axis 0 (channels); remaining dims must agree.
Var concat_channels(Var a, Var b);
Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);
/// Parametric ReLU with one learnable slope shared across elements.
Var prelu(Var x, Var slope);
Var abs(Var x);
/// x: [C,H,W]. Output [C, (H-k)/s+1, (W-k)/s+1]; gradient goes to the first
/// maximal element of each window.
Var maxpool2d(Var x, std::size_t kernel, std::size_t stride);
Var flatten(Var x);
/// weight [out,in], x [in], bias [out].
Var linear(Var weight, Var x, Var bias);
/// Per-channel normalisation over the spatial dims of x [C,H,W], then
/// scale/shift of shape [C].
Var instance_norm(Var x, Var scale, Var shift, double eps = 1e-5);
/// x [Ci,H,W], weight [Co,Ci,kh,kw], bias [Co], stride 1.
Var conv2d(Var x, Var weight, Var bias, std::size_t padding);
Var sum(Var x);
Var gather(Var x, std::vector<std::size_t> indices);
/// Elementwise min/max; ties select `a`.
Var minimum(Var a, Var b);
Var maximum(Var a, Var b);

namespace debug {

/// Deliberately corrupts one backward rule, for mutation testing of the
/// gradient checker.
enum class Fault { kNone, kSigmoidBackward, kConvWeightBackward };
void set_fault(Fault fault);
Fault fault();

}  // namespace debug

}  // namespace maskgru
