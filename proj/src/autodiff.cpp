#include "wcnn/autodiff.hpp"

#include <cmath>
#include <memory>

#include "wcnn/kernels.hpp"

namespace wcnn {

bool GradSink::wants(std::size_t i) const { return tape_.requires_grad(inputs_[i]); }

void GradSink::add(std::size_t i, Tensor grad) {
  const TensorId id = inputs_[i];
  if (!tape_.requires_grad(id)) return;
  Tensor& slot = grads_[id];
  if (!slot.defined()) {
    check_same_shape(grad, tape_.value(id), "backward");
    slot = std::move(grad);
  } else {
    slot.add_(grad);
  }
}

const Tape::Entry& Tape::entry(TensorId id) const {
  if (id >= entries_.size()) throw ContractError("unknown tensor id " + std::to_string(id));
  return entries_[id];
}

const Tensor& Tape::value(TensorId id) const { return entry(id).value; }

TensorId Tape::constant(Tensor value) {
  if (!value.defined()) throw ContractError("tape: undefined tensor");
  entries_.push_back({std::move(value), false, false});
  return static_cast<TensorId>(entries_.size() - 1);
}

TensorId Tape::parameter(Tensor value) {
  if (!value.defined()) throw ContractError("tape: undefined tensor");
  entries_.push_back({std::move(value), true, true});
  return static_cast<TensorId>(entries_.size() - 1);
}

std::vector<TensorId> Tape::record(std::vector<Tensor> outputs, std::vector<TensorId> inputs,
                                   BackwardFn backward) {
  bool needs_grad = false;
  for (TensorId id : inputs) needs_grad = needs_grad || requires_grad(id);
  needs_grad = needs_grad && recording_;
  std::vector<TensorId> ids;
  ids.reserve(outputs.size());
  for (auto& t : outputs) {
    entries_.push_back({std::move(t), false, needs_grad});
    ids.push_back(static_cast<TensorId>(entries_.size() - 1));
  }
  if (needs_grad) nodes_.push_back({std::move(inputs), ids, std::move(backward)});
  return ids;
}

TensorId Tape::record(Tensor output, std::vector<TensorId> inputs, BackwardFn backward) {
  std::vector<Tensor> outs;
  outs.push_back(std::move(output));
  return record(std::move(outs), std::move(inputs), std::move(backward)).front();
}

std::vector<TensorId> Tape::parameters() const {
  std::vector<TensorId> ids;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].parameter) ids.push_back(static_cast<TensorId>(i));
  return ids;
}

GradientMap backward(const Tape& tape, TensorId loss) {
  const Tensor& lv = tape.value(loss);
  if (!(lv.shape() == Shape{1, 1, 1, 1}))
    throw ContractError("backward: loss must be scalar (1x1x1x1), got " + lv.shape().str());
  std::vector<Tensor> grads(tape.size());
  if (tape.requires_grad(loss)) grads[loss] = Tensor::filled(lv.shape(), 1.0, lv.dtype());

  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    bool any = false;
    std::vector<Tensor> gouts;
    gouts.reserve(it->outputs.size());
    for (TensorId out : it->outputs) {
      any = any || grads[out].defined();
      gouts.push_back(std::move(grads[out]));
      grads[out] = Tensor();
    }
    if (!any) continue;
    GradSink sink(tape, it->inputs, grads);
    it->backward(gouts, sink);
  }

  GradientMap result;
  for (TensorId id : tape.parameters()) {
    Tensor g = std::move(grads[id]);
    if (!g.defined()) g = tape.value(id).zeros_like();
    result.emplace(id, std::move(g));
  }
  return result;
}

namespace ad {
namespace {

Tape& same_tape(std::initializer_list<Var> vars, const char* op) {
  Tape* tape = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw ContractError(std::string(op) + ": invalid variable");
    if (tape == nullptr) tape = &v.tape();
    if (&v.tape() != tape) throw ContractError(std::string(op) + ": inputs on different tapes");
  }
  return *tape;
}

}  // namespace

Var constant(Tape& tape, Tensor value) { return {tape, tape.constant(std::move(value))}; }
Var parameter(Tape& tape, Tensor value) { return {tape, tape.parameter(std::move(value))}; }

Var conv2d(Var x, Var weight, std::optional<Var> bias, int stride, int padding) {
  Tape& tape = bias ? same_tape({x, weight, *bias}, "conv2d") : same_tape({x, weight}, "conv2d");
  Tensor out = kernels::conv2d(x.value(), weight.value(), bias ? &bias->value() : nullptr, stride,
                               padding);
  std::vector<TensorId> inputs{x.id(), weight.id()};
  if (bias) inputs.push_back(bias->id());
  const TensorId xi = x.id(), wi = weight.id();
  const bool has_bias = bias.has_value();
  Tape* tp = &tape;
  auto id = tape.record(std::move(out), inputs,
                        [tp, xi, wi, has_bias, stride, padding](std::span<const Tensor> g,
                                                                GradSink& sink) {
                          auto grads = kernels::conv2d_backward(
                              tp->value(xi), tp->value(wi), g[0], stride, padding, sink.wants(0),
                              sink.wants(1), has_bias && sink.wants(2));
                          if (grads.x.defined()) sink.add(0, std::move(grads.x));
                          if (grads.weight.defined()) sink.add(1, std::move(grads.weight));
                          if (grads.bias.defined()) sink.add(2, std::move(grads.bias));
                        });
  return {tape, id};
}

Var conv_transpose2d(Var x, Var weight, std::optional<Var> bias, int stride, int padding) {
  Tape& tape = bias ? same_tape({x, weight, *bias}, "conv_transpose2d")
                    : same_tape({x, weight}, "conv_transpose2d");
  Tensor out = kernels::conv_transpose2d(x.value(), weight.value(),
                                         bias ? &bias->value() : nullptr, stride, padding);
  std::vector<TensorId> inputs{x.id(), weight.id()};
  if (bias) inputs.push_back(bias->id());
  const TensorId xi = x.id(), wi = weight.id();
  const bool has_bias = bias.has_value();
  Tape* tp = &tape;
  auto id = tape.record(std::move(out), inputs,
                        [tp, xi, wi, has_bias, stride, padding](std::span<const Tensor> g,
                                                                GradSink& sink) {
                          auto grads = kernels::conv_transpose2d_backward(
                              tp->value(xi), tp->value(wi), g[0], stride, padding, sink.wants(0),
                              sink.wants(1), has_bias && sink.wants(2));
                          if (grads.x.defined()) sink.add(0, std::move(grads.x));
                          if (grads.weight.defined()) sink.add(1, std::move(grads.weight));
                          if (grads.bias.defined()) sink.add(2, std::move(grads.bias));
                        });
  return {tape, id};
}

Var relu(Var x) {
  Tape& tape = same_tape({x}, "relu");
  const TensorId xi = x.id();
  Tape* tp = &tape;
  auto id = tape.record(kernels::relu(x.value()), {xi},
                        [tp, xi](std::span<const Tensor> g, GradSink& sink) {
                          sink.add(0, kernels::relu_backward(g[0], tp->value(xi)));
                        });
  return {tape, id};
}

Var add(Var a, Var b) {
  Tape& tape = same_tape({a, b}, "add");
  auto id = tape.record(kernels::add(a.value(), b.value()), {a.id(), b.id()},
                        [](std::span<const Tensor> g, GradSink& sink) {
                          if (sink.wants(0)) sink.add(0, g[0]);
                          if (sink.wants(1)) sink.add(1, g[0]);
                        });
  return {tape, id};
}

Var scale(Var x, double alpha) {
  Tape& tape = same_tape({x}, "scale");
  Tensor out = x.value();
  out.scale_(alpha);
  auto id = tape.record(std::move(out), {x.id()},
                        [alpha](std::span<const Tensor> g, GradSink& sink) {
                          Tensor gx = g[0];
                          gx.scale_(alpha);
                          sink.add(0, std::move(gx));
                        });
  return {tape, id};
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  Tape& tape = parts[0].tape();
  std::vector<Tensor> values;
  std::vector<TensorId> inputs;
  std::vector<std::int64_t> widths;
  for (const Var& p : parts) {
    same_tape({parts[0], p}, "concat_channels");
    values.push_back(p.value());
    inputs.push_back(p.id());
    widths.push_back(p.shape().c);
  }
  auto id = tape.record(kernels::concat_channels(values), inputs,
                        [widths](std::span<const Tensor> g, GradSink& sink) {
                          std::int64_t begin = 0;
                          for (std::size_t i = 0; i < widths.size(); ++i) {
                            if (sink.wants(i))
                              sink.add(i, kernels::slice_channels(g[0], begin, widths[i]));
                            begin += widths[i];
                          }
                        });
  return {tape, id};
}

Var resize_bilinear(Var x, std::int64_t out_h, std::int64_t out_w) {
  Tape& tape = same_tape({x}, "resize_bilinear");
  const Shape in = x.shape();
  auto id = tape.record(kernels::resize_bilinear(x.value(), out_h, out_w), {x.id()},
                        [in](std::span<const Tensor> g, GradSink& sink) {
                          sink.add(0, kernels::resize_bilinear_backward(g[0], in));
                        });
  return {tape, id};
}

Var upsample_bilinear(Var x, int factor) {
  if (factor < 1)
    throw ConfigError("upsample_bilinear: factor must be >= 1, got " + std::to_string(factor));
  return resize_bilinear(x, x.shape().h * factor, x.shape().w * factor);
}

Var max_pool2x2(Var x) {
  Tape& tape = same_tape({x}, "max_pool2x2");
  auto result = kernels::max_pool2x2(x.value());
  auto argmax = std::make_shared<std::vector<std::int64_t>>(std::move(result.argmax));
  const Shape in = x.shape();
  auto id = tape.record(std::move(result.out), {x.id()},
                        [argmax, in](std::span<const Tensor> g, GradSink& sink) {
                          sink.add(0, kernels::max_pool2x2_backward(g[0], *argmax, in));
                        });
  return {tape, id};
}

Var batch_norm(Var x, Var gamma, Var beta, const BatchNormState& state, bool training) {
  Tape& tape = same_tape({x, gamma, beta}, "batch_norm");
  if (!training) {
    if (!state.running_mean || !state.running_var)
      throw ContractError("batch_norm: eval mode needs running statistics");
    Tensor out = kernels::batch_norm_eval(x.value(), gamma.value(), beta.value(),
                                          *state.running_mean, *state.running_var, state.eps);
    // Eval-mode normalization is an affine map per channel.
    const TensorId xi = x.id(), gi = gamma.id();
    Tape* tp = &tape;
    const Tensor mean = *state.running_mean;
    const Tensor var = *state.running_var;
    const double eps = state.eps;
    auto id = tape.record(
        std::move(out), {x.id(), gamma.id(), beta.id()},
        [tp, xi, gi, mean, var, eps](std::span<const Tensor> g, GradSink& sink) {
          const Tensor& xv = tp->value(xi);
          const Tensor& gm = tp->value(gi);
          const Shape s = xv.shape();
          Tensor gx(s, xv.dtype());
          Tensor gg = gm.zeros_like();
          Tensor gb = gm.zeros_like();
          for (std::int64_t c = 0; c < s.c; ++c) {
            const double inv_std = 1.0 / std::sqrt(var.flat(c) + eps);
            double sg = 0.0, sgx = 0.0;
            for (std::int64_t n = 0; n < s.n; ++n)
              for (std::int64_t i = 0; i < s.plane(); ++i) {
                const std::int64_t k = (n * s.c + c) * s.plane() + i;
                const double gv = g[0].flat(k);
                sg += gv;
                sgx += gv * (xv.flat(k) - mean.flat(c)) * inv_std;
                gx.set_flat(k, gv * gm.flat(c) * inv_std);
              }
            gg.set_flat(c, sgx);
            gb.set_flat(c, sg);
          }
          if (sink.wants(0)) sink.add(0, std::move(gx));
          if (sink.wants(1)) sink.add(1, std::move(gg));
          if (sink.wants(2)) sink.add(2, std::move(gb));
        });
    return {tape, id};
  }

  auto cache = std::make_shared<kernels::BatchNormCache>();
  std::vector<double> mean, var;
  Tensor out = kernels::batch_norm_train(x.value(), gamma.value(), beta.value(), state.eps,
                                         *cache, mean, var);
  if (state.running_mean && state.running_var) {
    for (std::int64_t c = 0; c < x.shape().c; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      state.running_mean->set_flat(
          c, (1.0 - state.momentum) * state.running_mean->flat(c) + state.momentum * mean[ci]);
      state.running_var->set_flat(
          c, (1.0 - state.momentum) * state.running_var->flat(c) + state.momentum * var[ci]);
    }
  }
  const TensorId gi = gamma.id();
  Tape* tp = &tape;
  auto id = tape.record(std::move(out), {x.id(), gamma.id(), beta.id()},
                        [tp, gi, cache](std::span<const Tensor> g, GradSink& sink) {
                          auto grads = kernels::batch_norm_backward(g[0], *cache, tp->value(gi));
                          if (sink.wants(0)) sink.add(0, std::move(grads.x));
                          if (sink.wants(1)) sink.add(1, std::move(grads.gamma));
                          if (sink.wants(2)) sink.add(2, std::move(grads.beta));
                        });
  return {tape, id};
}

Var softmax_channels(Var x) {
  Tape& tape = same_tape({x}, "softmax_channels");
  Tensor y = kernels::softmax_channels(x.value());
  auto id = tape.record(y, {x.id()}, [y](std::span<const Tensor> g, GradSink& sink) {
    sink.add(0, kernels::softmax_channels_backward(g[0], y));
  });
  return {tape, id};
}

Var sum(Var x) {
  Tape& tape = same_tape({x}, "sum");
  double acc = 0.0;
  const Tensor& v = x.value();
  for (std::int64_t i = 0; i < v.numel(); ++i) acc += v.flat(i);
  const Shape s = v.shape();
  auto id = tape.record(Tensor::scalar(acc, v.dtype()), {x.id()},
                        [s](std::span<const Tensor> g, GradSink& sink) {
                          sink.add(0, Tensor::filled(s, g[0].item(), g[0].dtype()));
                        });
  return {tape, id};
}

Var weighted_sum(Var x, const Tensor& weights) {
  Tape& tape = same_tape({x}, "weighted_sum");
  check_same_shape(x.value(), weights, "weighted_sum");
  check_same_dtype(x.value(), weights, "weighted_sum");
  auto id = tape.record(Tensor::scalar(dot(x.value(), weights), weights.dtype()), {x.id()},
                        [weights](std::span<const Tensor> g, GradSink& sink) {
                          Tensor gx = weights;
                          gx.scale_(g[0].item());
                          sink.add(0, std::move(gx));
                        });
  return {tape, id};
}

}  // namespace ad
}  // namespace wcnn
