#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wcnn/autodiff.hpp"
#include "wcnn/tensor.hpp"

namespace wcnn {

enum class Init : std::uint8_t { He, Zeros, Ones };

/// Declared tensor of a network: trainable parameter or a buffer such as a
/// batch-norm running statistic.
struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::He;
  std::int64_t fan_in = 1;
  bool trainable = true;
};

/// Named tensors of a network. Specs are declared first; storage is only
/// allocated by initialize(), so shapes and counts are available without
/// touching any weights.
class ParamStore {
 public:
  void declare(ParamSpec spec);

  /// He-normal (std = sqrt(2 / fan_in)) for weights, constants elsewhere.
  void initialize(std::uint64_t seed, DType dtype = DType::f32);
  bool allocated() const { return allocated_; }
  DType dtype() const { return dtype_; }

  const std::vector<ParamSpec>& specs() const { return specs_; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const ParamSpec& spec(const std::string& name) const;

  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  /// Trainable scalar count, computed from the specs alone.
  std::int64_t trainable_count() const;
  std::int64_t trainable_count(const std::string& prefix) const;

 private:
  std::vector<ParamSpec> specs_;
  std::map<std::string, std::size_t> index_;
  std::vector<Tensor> values_;
  bool allocated_ = false;
  DType dtype_ = DType::f32;
};

/// State of one forward pass: the tape, the parameter store, and the mode.
class Context {
 public:
  Context(Tape& tape, ParamStore& store, bool training)
      : tape_(tape), store_(store), training_(training) {}

  Tape& tape() { return tape_; }
  bool training() const { return training_; }
  ParamStore& store() { return store_; }

  /// Places the named trainable parameter on the tape (once per pass).
  Var param(const std::string& name);
  /// Uses an existing tape value for the named parameter in this pass.
  void bind(const std::string& name, Var v);
  /// Running statistics of the batch norm with the given prefix.
  ad::BatchNormState batch_norm_state(const std::string& prefix);

  /// Tape ids of the parameters used so far, by name.
  const std::map<std::string, TensorId>& bound() const { return bound_; }

 private:
  Tape& tape_;
  ParamStore& store_;
  bool training_;
  std::map<std::string, TensorId> bound_;
};

}  // namespace wcnn
