#include "wcnn/params.hpp"

#include <cmath>

#include "wcnn/random.hpp"

namespace wcnn {

void ParamStore::declare(ParamSpec spec) {
  if (allocated_) throw ContractError("ParamStore: declare after initialize");
  if (index_.count(spec.name))
    throw ConfigError("ParamStore: duplicate parameter '" + spec.name + "'");
  if (spec.shape.n < 1 || spec.shape.c < 1 || spec.shape.h < 1 || spec.shape.w < 1)
    throw ConfigError("ParamStore: parameter '" + spec.name + "' has empty shape " +
                      spec.shape.str());
  index_.emplace(spec.name, specs_.size());
  specs_.push_back(std::move(spec));
}

void ParamStore::initialize(std::uint64_t seed, DType dtype) {
  Rng rng(seed);
  values_.clear();
  values_.reserve(specs_.size());
  for (const auto& s : specs_) {
    Tensor t(s.shape, dtype);
    switch (s.init) {
      case Init::He: {
        const double stddev = std::sqrt(2.0 / static_cast<double>(std::max<std::int64_t>(1, s.fan_in)));
        for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, stddev * rng.normal());
        break;
      }
      case Init::Zeros:
        break;
      case Init::Ones:
        t.fill(1.0);
        break;
    }
    values_.push_back(std::move(t));
  }
  allocated_ = true;
  dtype_ = dtype;
}

const ParamSpec& ParamStore::spec(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
  return specs_[it->second];
}

Tensor& ParamStore::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
  if (!allocated_) throw ContractError("ParamStore: '" + name + "' accessed before initialize");
  return values_[it->second];
}

std::int64_t ParamStore::trainable_count() const { return trainable_count(""); }

std::int64_t ParamStore::trainable_count(const std::string& prefix) const {
  std::int64_t total = 0;
  for (const auto& s : specs_)
    if (s.trainable && s.name.compare(0, prefix.size(), prefix) == 0) total += s.shape.numel();
  return total;
}

Var Context::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return {tape_, it->second};
  if (!store_.spec(name).trainable)
    throw ContractError("Context: '" + name + "' is a buffer, not a parameter");
  Var v = ad::parameter(tape_, store_.get(name));
  bound_.emplace(name, v.id());
  return v;
}

void Context::bind(const std::string& name, Var v) {
  const Shape expect = store_.spec(name).shape;
  if (v.shape() != expect)
    throw ShapeError("Context: '" + name + "' bound to " + v.shape().str() + ", declared " + expect.str());
  bound_[name] = v.id();
}

ad::BatchNormState Context::batch_norm_state(const std::string& prefix) {
  return {&store_.get(prefix + ".running_mean"), &store_.get(prefix + ".running_var"), 0.1, 1e-5};
}

}  // namespace wcnn
