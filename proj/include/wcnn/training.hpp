#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>

#include "wcnn/autodiff.hpp"
#include "wcnn/data.hpp"
#include "wcnn/model.hpp"
#include "wcnn/params.hpp"

namespace wcnn::training {

enum class LossKind { CrossEntropy, Bootstrap };

struct LossConfig {
  LossKind kind = LossKind::Bootstrap;
  /// Hardest pixels kept per image by the bootstrapped loss.
  std::int64_t k_pixels = 8192;
  /// Scale k_pixels by image area relative to 512x1024.
  bool scale_k_to_area = true;
  /// Pixels with this label contribute nothing; nullopt disables ignoring.
  std::optional<int> ignore_label = data::kIgnoreLabel;

  /// K for an image of h x w pixels.
  std::int64_t effective_k(std::int64_t h, std::int64_t w) const;
  void validate() const;
};

/// Mean per-pixel negative log-likelihood over non-ignored pixels.
/// Logits are (n, C, h, w); a label outside [0, C) that is not the ignore
/// label raises DataError naming the pixel.
Var cross_entropy(Var logits, const LabelMap& labels, std::optional<int> ignore_label = data::kIgnoreLabel);

/// Cross-entropy over the k highest-loss pixels of each image (all pixels
/// tied with the k-th are kept), averaged over every selected pixel.
Var bootstrap_cross_entropy(Var logits, const LabelMap& labels, std::int64_t k,
                            std::optional<int> ignore_label = data::kIgnoreLabel);

/// Dispatches on cfg.kind.
Var segmentation_loss(Var logits, const LabelMap& labels, const LossConfig& cfg);

struct OptimConfig {
  double lr0 = 0.001;
  double momentum = 0.9;
  double decay_factor = 0.9;
  int decay_every_epochs = 10;
  int batch_size = 4;
  bool nesterov = false;

  void validate() const;
};

/// lr0 * decay_factor ^ floor(epoch / decay_every_epochs).
double lr_at(int epoch, const OptimConfig& cfg);

/// v <- momentum * v + grad; param <- param - lr * v (or, with Nesterov,
/// param <- param - lr * (grad + momentum * v)). `velocity` starts undefined
/// and is allocated as zeros on first use.
void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum,
                       bool nesterov = false);

/// Momentum SGD over the trainable parameters of a store.
class Sgd {
 public:
  explicit Sgd(OptimConfig cfg) : cfg_(cfg) {}
  void step(ParamStore& store, const std::map<std::string, Tensor>& grads, double lr);
  const std::map<std::string, Tensor>& velocity() const { return velocity_; }

 private:
  OptimConfig cfg_;
  std::map<std::string, Tensor> velocity_;
};

struct TrainOptions {
  int epochs = 1;
  /// Stop after this many steps (0 means no limit).
  std::int64_t max_iterations = 0;
  /// Write a checkpoint every N epochs (0 disables periodic checkpoints).
  int checkpoint_every = 0;
  std::uint64_t seed = 0;
  /// Output directory for metrics.jsonl and checkpoints; empty keeps everything in memory.
  std::filesystem::path run_dir;
  /// Stored in checkpoint manifests.
  std::string config_text;
  /// Validate after every epoch when a validation set is given.
  bool validate = true;
  /// Skip parameter initialization (fine-tuning or resuming).
  bool keep_weights = false;
  DType dtype = DType::f32;
};

struct StepRecord {
  std::int64_t iteration = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::int64_t iterations = 0;
  int epochs_completed = 0;
  double last_loss = 0.0;
  std::optional<double> last_val_miou;
  bool diverged = false;
  /// Final checkpoint, or the last-good one after divergence (empty without a run dir).
  std::filesystem::path checkpoint;
};

/// Runs mini-batch training. Sample order is a deterministic function of
/// the seed. A non-finite loss or gradient stops training, writes the
/// parameters from before that step to last_good.wcnn and sets `diverged`.
TrainResult train(NetworkGraph& model, const data::Dataset& train_set, const data::Dataset* val_set,
                  const OptimConfig& optim, const LossConfig& loss, const TrainOptions& opts,
                  std::ostream* log = nullptr, const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace wcnn::training
