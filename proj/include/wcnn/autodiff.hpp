#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "wcnn/tensor.hpp"

namespace wcnn {

using TensorId = std::uint32_t;

class Tape;

/// Passed to a node's backward function; collects input gradients.
class GradSink {
 public:
  GradSink(const Tape& tape, std::span<const TensorId> inputs, std::vector<Tensor>& grads)
      : tape_(tape), inputs_(inputs), grads_(grads) {}

  /// Whether input `i` of the node needs a gradient.
  bool wants(std::size_t i) const;
  /// Accumulates `grad` into input `i`.
  void add(std::size_t i, Tensor grad);

 private:
  const Tape& tape_;
  std::span<const TensorId> inputs_;
  std::vector<Tensor>& grads_;
};

/// grad_outputs[k] is undefined when no gradient reached output k.
using BackwardFn = std::function<void(std::span<const Tensor> grad_outputs, GradSink& sink)>;

/// Records operations in execution order for reverse-mode differentiation.
///
/// Every value produced while the tape is alive is stored here and referred
/// to by a TensorId. Leaves are either constants or trainable parameters;
/// an op result is recorded as a node only when recording is enabled and at
/// least one input depends on a parameter.
class Tape {
 public:
  struct Node {
    std::vector<TensorId> inputs;
    std::vector<TensorId> outputs;
    BackwardFn backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  TensorId constant(Tensor value);
  TensorId parameter(Tensor value);

  std::vector<TensorId> record(std::vector<Tensor> outputs, std::vector<TensorId> inputs,
                               BackwardFn backward);
  TensorId record(Tensor output, std::vector<TensorId> inputs, BackwardFn backward);

  const Tensor& value(TensorId id) const;
  bool is_parameter(TensorId id) const { return entry(id).parameter; }
  bool requires_grad(TensorId id) const { return entry(id).requires_grad; }
  bool recording() const { return recording_; }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::vector<TensorId> parameters() const;

 private:
  struct Entry {
    Tensor value;
    bool parameter = false;
    bool requires_grad = false;
  };
  const Entry& entry(TensorId id) const;

  bool recording_;
  std::deque<Entry> entries_;  // deque keeps value references stable
  std::vector<Node> nodes_;
};

using GradientMap = std::map<TensorId, Tensor>;

/// Reverse pass from a scalar loss. Every parameter on the tape receives a
/// gradient of its own shape (zeros when disconnected from the loss).
GradientMap backward(const Tape& tape, TensorId loss);

/// Handle to a value living on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape& tape, TensorId id) : tape_(&tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  TensorId id() const { return id_; }
  const Tensor& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  DType dtype() const { return value().dtype(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  TensorId id_ = 0;
};

/// Differentiable operations recorded on the inputs' tape.
namespace ad {

Var constant(Tape& tape, Tensor value);
Var parameter(Tape& tape, Tensor value);

Var conv2d(Var x, Var weight, std::optional<Var> bias, int stride, int padding);
/// Adjoint of conv2d; weight is (x.c, out_c, kh, kw).
Var conv_transpose2d(Var x, Var weight, std::optional<Var> bias, int stride, int padding);

Var relu(Var x);
Var add(Var a, Var b);
Var scale(Var x, double alpha);
Var concat_channels(std::span<const Var> parts);

Var resize_bilinear(Var x, std::int64_t out_h, std::int64_t out_w);
Var upsample_bilinear(Var x, int factor);
Var max_pool2x2(Var x);

struct BatchNormState {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
};
/// In training mode normalizes with batch statistics and updates the
/// running statistics; otherwise uses the running statistics.
Var batch_norm(Var x, Var gamma, Var beta, const BatchNormState& state, bool training);

Var softmax_channels(Var x);

/// Sum of all elements as a 1x1x1x1 tensor.
Var sum(Var x);
/// sum(weights * x) as a 1x1x1x1 tensor.
Var weighted_sum(Var x, const Tensor& weights);

}  // namespace ad
}  // namespace wcnn
