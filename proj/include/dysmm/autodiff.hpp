#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation applied to Vars created from it. Nodes are
// appended in execution order, so the node sequence is already topologically
// sorted; backward() walks it once in reverse.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dysmm/rng.hpp"
#include "dysmm/tensor.hpp"

namespace dysmm {

enum class Mode { train, eval };

class Tape;

/// Handle to one node of a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct Parameter {
  std::string name;
  Tensor value;
};

/// Named learnable tensors of one model. Names are unique.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor init);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index(std::string_view name) const;

  /// Number of scalar values across all parameters.
  std::size_t scalar_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

class Tape {
 public:
  /// Called with the node's incoming gradient and its own forward value.
  using BackwardFn = std::function<void(const Tensor& grad_out, const Tensor& out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that receives a gradient.
  Var variable(Tensor value);
  /// Leaf bound to store[index]. Repeated calls return the same node so that
  /// gradients from every use accumulate in one slot.
  Var parameter(const ParameterStore& store, std::size_t index);
  Var parameter(const ParameterStore& store, std::string_view name);

  /// Appends a node. The backward function is dropped when no input requires
  /// a gradient. Throws NonFiniteError when value contains NaN or Inf.
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::string_view op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator for node id, zero-initialised on first access.
  Tensor& grad_slot(std::size_t id);

  /// Reverse sweep from a one-element loss. Clears previous gradients.
  void backward(Var loss);

  /// Gradient of node v (zeros if v was not reached).
  Tensor grad(Var v) const;

  /// Gradients aligned with store order; unreachable parameters get zeros.
  std::vector<Tensor> parameter_grads(const ParameterStore& store) const;
  std::map<std::string, Tensor> gradient_map(const ParameterStore& store) const;

  /// Whether store[index] was bound to this tape.
  bool uses_parameter(const ParameterStore& store, std::size_t index) const;

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> has_grad_;
  std::map<std::pair<const ParameterStore*, std::size_t>, std::size_t> param_nodes_;
};

// ---------------------------------------------------------------------------
// Primitive operations. All inputs must live on the same tape.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// x [..., n] + bias [n].
Var add_bias(Var x, Var bias);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
/// Elementwise product with a constant that broadcasts against a (same rank,
/// each dimension equal or 1).
Var mul_const(Var a, const Tensor& c);
/// mask * a + (1 - mask) * b, mask constant and broadcastable like mul_const.
Var blend(const Tensor& mask, Var a, Var b);

/// a [..., k] times b [k, n] -> [..., n].
Var matmul(Var a, Var b);
/// a [B, m, k] times b [B, k, n] (or b [B, n, k] transposed) -> [B, m, n].
Var batched_matmul(Var a, Var b, bool transpose_b = false);

Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var log(Var a);
Var exp(Var a);

Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var reshape(Var a, Shape shape);
Var permute(Var a, const std::vector<std::size_t>& perm);

Var sum(Var a);
Var mean(Var a);
/// Mean over one axis; the axis is removed from the result.
Var mean_axis(Var a, std::size_t axis);

/// Rows of table [V, E] selected by ids; result shape index_shape + [E].
Var embedding(Var table, std::span<const int> ids, const Shape& index_shape);

struct Conv2dOptions {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);

/// x [B, Cin, H, W], kernel [Cout, Cin, kh, kw], bias [Cout] (optional).
Var conv2d(Var x, Var kernel, std::optional<Var> bias, const Conv2dOptions& opt);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalisation over axis 1 of x [B, C, ...]. In train mode the
/// batch statistics are weighted by `weights` (broadcastable to x, channel dim
/// 1; zero excludes a position) and the running statistics in `state` are
/// updated with an exponential moving average. Eval mode uses running stats.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode,
              const BatchNormOptions& opt = {}, const Tensor* weights = nullptr);

/// Inverted dropout: train mode zeroes with probability rate and scales the
/// survivors by 1/(1-rate); eval mode returns x itself.
Var dropout(Var x, double rate, Mode mode, Rng& rng);

/// Softmax along `axis`; positions where mask == 0 get exactly zero weight.
/// The mask has the same rank as logits with each dimension equal or 1.
Var masked_softmax(Var logits, const Tensor* mask, std::size_t axis);
inline Var softmax(Var logits, std::size_t axis) { return masked_softmax(logits, nullptr, axis); }

// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  /// Per input, per element |analytic - numeric| / max(1, |numeric|).
  std::vector<std::vector<double>> rel_errors;
  double tolerance = 0.0;
  bool passed = false;
};

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Central finite-difference check of d f / d inputs. Throws Error if f is
/// not deterministic at the base point.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double step,
                           double tolerance);

/// Same check with respect to every element of every parameter in store.
GradCheckReport grad_check_parameters(const std::function<Var(Tape&)>& f, ParameterStore& store,
                                      double step, double tolerance);

}  // namespace dysmm
