#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "wcnn/autodiff.hpp"
#include "wcnn/params.hpp"
#include "wcnn/tensor.hpp"

/// Central finite-difference gradient checking.
namespace wcnn::gradcheck {

/// Builds a scalar loss on a fresh tape from parameter leaves.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval_loss(const LossBuilder& f, const std::vector<Tensor>& inputs);

/// Central differences of the loss with respect to inputs[k].
Tensor numeric_gradient(const LossBuilder& f, const std::vector<Tensor>& inputs, std::size_t k, double step);

/// ||a - n|| / max(||a|| + ||n||, 1e-12).
double relative_error(const Tensor& a, const Tensor& n);

struct GradCheck {
  double error = 0.0;
  /// False when central differences at step and step/10 disagree, i.e. a
  /// ReLU or max-pool kink lies within one step of the sample point.
  bool smooth = true;
};

/// Relative error between the tape gradient and central differences,
/// maximised over inputs.
GradCheck check_gradient(const LossBuilder& f, const std::vector<Tensor>& inputs, double step = 1e-5,
                         bool probe_smoothness = false);

/// Gradient check of a parameterized layer with respect to its input and
/// every trainable parameter in `store`. The loss is a fixed random linear
/// functional of the layer output.
///
/// Constant-initialized parameters (biases, batch-norm affine terms) are
/// first randomized: a zero bias on an all-zero ReLU output would otherwise
/// sit exactly on the kink.
GradCheck layer_gradient_check(ParamStore& store, const Tensor& input,
                               const std::function<Var(Context&, Var)>& layer, bool training, std::uint64_t seed);

/// Draws instances from `make_instance(draw)` until `wanted` smooth ones
/// have been checked; returns the worst error among them. Non-smooth draws
/// are skipped, at most `wanted` of them; if too few smooth draws are found
/// the result is 1.
double smooth_instances_error(int wanted, const std::function<GradCheck(std::uint64_t)>& make_instance,
                              int* accepted = nullptr);

}  // namespace wcnn::gradcheck
