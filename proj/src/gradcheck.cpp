#include "wcnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "wcnn/random.hpp"

namespace wcnn::gradcheck {

double eval_loss(const LossBuilder& f, const std::vector<Tensor>& inputs) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(ad::parameter(tape, t));
  return f(tape, vars).value().item();
}

Tensor numeric_gradient(const LossBuilder& f, const std::vector<Tensor>& inputs, std::size_t k, double step) {
  Tensor out(inputs[k].shape(), DType::f64);
  auto plus = inputs, minus = inputs;
  for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
    const double v = inputs[k].flat(i);
    plus[k].set_flat(i, v + step);
    minus[k].set_flat(i, v - step);
    out.set_flat(i, (eval_loss(f, plus) - eval_loss(f, minus)) / (2 * step));
    plus[k].set_flat(i, v);
    minus[k].set_flat(i, v);
  }
  return out;
}

double relative_error(const Tensor& a, const Tensor& n) {
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = a.flat(i) - n.flat(i);
    diff2 += d * d;
    a2 += a.flat(i) * a.flat(i);
    n2 += n.flat(i) * n.flat(i);
  }
  return std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-12);
}

GradCheck check_gradient(const LossBuilder& f, const std::vector<Tensor>& inputs, double step,
                         bool probe_smoothness) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(ad::parameter(tape, t));
  Var loss = f(tape, vars);
  auto grads = backward(tape, loss.id());
  GradCheck result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor numeric = numeric_gradient(f, inputs, k, step);
    result.error = std::max(result.error, relative_error(grads.at(vars[k].id()), numeric));
    if (probe_smoothness && relative_error(numeric, numeric_gradient(f, inputs, k, step / 10)) > 1e-7)
      result.smooth = false;
  }
  return result;
}

GradCheck layer_gradient_check(ParamStore& store, const Tensor& input,
                               const std::function<Var(Context&, Var)>& layer, bool training, std::uint64_t seed) {
  Rng jitter(seed ^ 0x9e3779b97f4a7c15ULL);
  for (const auto& spec : store.specs()) {
    if (!spec.trainable || spec.init == Init::He) continue;
    Tensor& t = store.get(spec.name);
    const double base = spec.init == Init::Ones ? 1.0 : 0.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, base + jitter.uniform(-0.5, 0.5));
  }
  std::vector<std::string> names;
  std::vector<Tensor> inputs{input};
  for (const auto& spec : store.specs())
    if (spec.trainable) {
      names.push_back(spec.name);
      inputs.push_back(store.get(spec.name));
    }
  Tensor weights;
  LossBuilder f = [&](Tape& tape, const std::vector<Var>& v) {
    Context ctx(tape, store, training);
    for (std::size_t i = 0; i < names.size(); ++i) ctx.bind(names[i], v[i + 1]);
    Var y = layer(ctx, v[0]);
    if (!weights.defined()) {
      Rng rng(seed);
      weights = rng.uniform_tensor(y.shape(), -1.0, 1.0);
    }
    return ad::weighted_sum(y, weights);
  };
  return check_gradient(f, inputs, 1e-5, true);
}

double smooth_instances_error(int wanted, const std::function<GradCheck(std::uint64_t)>& make_instance,
                              int* accepted) {
  double worst = 0.0;
  int ok = 0;
  for (std::uint64_t draw = 0; ok < wanted && draw < static_cast<std::uint64_t>(2 * wanted); ++draw) {
    const GradCheck c = make_instance(draw);
    if (!c.smooth) continue;
    worst = std::max(worst, c.error);
    ++ok;
  }
  if (accepted) *accepted = ok;
  return ok == wanted ? worst : 1.0;
}

}  // namespace wcnn::gradcheck
