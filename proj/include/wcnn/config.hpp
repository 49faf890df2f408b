#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "wcnn/data.hpp"
#include "wcnn/model.hpp"
#include "wcnn/training.hpp"

namespace wcnn::config {

/// Environment variable consulted when data.root is empty.
inline constexpr const char* kDataRootEnv = "WCNN_DATA_ROOT";

struct DataConfig {
  std::string root;
  std::string train_split = "train";
  std::string val_split = "val";
  /// Generate data in memory instead of reading root.
  bool synth = false;
  int synth_train = 256;
  int synth_val = 64;
  std::uint64_t synth_seed = 1;
};

struct TrainConfig {
  int epochs = 1;
  std::int64_t max_iterations = 0;
  int checkpoint_every = 1;
  DType dtype = DType::f32;
};

struct EvalConfig {
  std::vector<double> scales{0.75, 1.0, 1.25};
  /// When positive, this many scales are drawn at random (seeded) instead.
  int random_scales = 0;
  bool ms = false;
  int batch_size = 1;
};

struct RunConfig {
  ModelConfig model;
  training::OptimConfig optim;
  training::LossConfig loss;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
  std::uint64_t seed = 0;
  /// Parent of the per-run output directories.
  std::string out_root = "runs";
};

/// Every accepted key, in dump order.
const std::vector<std::string>& keys();
/// One-line description of a key.
const std::string& help(const std::string& key);

/// Sets one field from its text form. Unknown keys and malformed values
/// raise ConfigError.
void set(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get(const RunConfig& cfg, const std::string& key);

/// Applies "key = value" lines; '#' starts a comment. `origin` labels errors.
void apply(RunConfig& cfg, const std::string& text, const std::string& origin = "config");
RunConfig parse(const std::string& text, const std::string& origin = "config");
RunConfig load(const std::filesystem::path& path);

/// Every key with its resolved value; parse(dump(c)) reproduces c.
std::string dump(const RunConfig& cfg);

/// Full validation; also checks that a data source is available.
void validate(const RunConfig& cfg);

/// data.root, or the environment default when empty.
std::string data_root(const RunConfig& cfg);

/// The scales to use for multi-scale evaluation.
std::vector<double> eval_scales(const RunConfig& cfg);

struct Datasets {
  data::Dataset train;
  data::Dataset val;
};

/// Seed of the synthetic validation set, derived so that it never equals a
/// training seed of a nearby run.
std::uint64_t synth_val_seed(std::uint64_t synth_seed);

/// The configured training and validation data: generated in memory when
/// data.synth is set, otherwise read from the data root.
Datasets load_datasets(const RunConfig& cfg, std::ostream* warn = nullptr);

/// Training options derived from the config.
training::TrainOptions train_options(const RunConfig& cfg);

}  // namespace wcnn::config
