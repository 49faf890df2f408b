#include "wcnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "wcnn/checkpoint.hpp"
#include "wcnn/errors.hpp"
#include "wcnn/eval.hpp"
#include "wcnn/random.hpp"

namespace wcnn::training {

std::int64_t LossConfig::effective_k(std::int64_t h, std::int64_t w) const {
  if (!scale_k_to_area) return k_pixels;
  const double k = static_cast<double>(k_pixels) * static_cast<double>(h * w) / (512.0 * 1024.0);
  return std::max<std::int64_t>(1, std::llround(k));
}

void LossConfig::validate() const {
  if (k_pixels < 1) throw ConfigError("loss.k_pixels must be at least 1");
}

namespace {

struct PixelLosses {
  // Per-pixel softmax probabilities (n, C, h, w) and NLL (n, h, w).
  std::vector<double> prob;
  std::vector<double> nll;
  std::vector<char> valid;
};

PixelLosses pixel_losses(const Tensor& logits, const LabelMap& labels, std::optional<int> ignore) {
  const Shape s = logits.shape();
  if (labels.n != s.n || labels.h != s.h || labels.w != s.w)
    throw ShapeError("loss: logits " + s.str() + " do not match labels (" + std::to_string(labels.n) + ", " +
                     std::to_string(labels.h) + ", " + std::to_string(labels.w) + ")");
  const auto P = s.plane();
  PixelLosses out;
  out.prob.resize(static_cast<std::size_t>(s.numel()));
  out.nll.assign(static_cast<std::size_t>(s.n * P), 0.0);
  out.valid.assign(out.nll.size(), 0);
  std::vector<double> z(static_cast<std::size_t>(s.c));
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t i = 0; i < P; ++i) {
      const std::int64_t base = n * s.c * P + i;
      double mx = -INFINITY;
      for (std::int64_t c = 0; c < s.c; ++c) mx = std::max(mx, z[c] = logits.flat(base + c * P));
      double sum = 0.0;
      for (std::int64_t c = 0; c < s.c; ++c) sum += std::exp(z[c] - mx);
      const double lse = mx + std::log(sum);
      for (std::int64_t c = 0; c < s.c; ++c) out.prob[base + c * P] = std::exp(z[c] - lse);

      const int t = labels.data[n * P + i];
      if (ignore && t == *ignore) continue;
      if (t < 0 || t >= s.c)
        throw DataError("label " + std::to_string(t) + " at pixel (n=" + std::to_string(n) +
                        ", y=" + std::to_string(i / s.w) + ", x=" + std::to_string(i % s.w) + ") is outside [0, " +
                        std::to_string(s.c) + ")");
      out.nll[n * P + i] = lse - z[t];
      out.valid[n * P + i] = 1;
    }
  return out;
}

// Mean NLL over the pixels flagged in `selected`, with its gradient.
Var selected_mean_nll(Var logits, const LabelMap& labels, PixelLosses pl, std::vector<char> selected) {
  const Shape s = logits.shape();
  double total = 0.0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < selected.size(); ++i)
    if (selected[i]) {
      total += pl.nll[i];
      ++count;
    }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  Tape& tape = logits.tape();
  auto id = tape.record(
      Tensor::scalar(loss, logits.dtype()), {logits.id()},
      [s, labels, pl = std::move(pl), selected = std::move(selected), count](std::span<const Tensor> g,
                                                                            GradSink& sink) {
        Tensor gx(s, g[0].dtype());
        if (count > 0) {
          const double scale = g[0].item() / static_cast<double>(count);
          const auto P = s.plane();
          for (std::int64_t n = 0; n < s.n; ++n)
            for (std::int64_t i = 0; i < P; ++i) {
              if (!selected[n * P + i]) continue;
              const int t = labels.data[n * P + i];
              for (std::int64_t c = 0; c < s.c; ++c) {
                const std::int64_t k = n * s.c * P + c * P + i;
                gx.set_flat(k, scale * (pl.prob[k] - (c == t ? 1.0 : 0.0)));
              }
            }
        }
        sink.add(0, std::move(gx));
      });
  return {tape, id};
}

}  // namespace

Var cross_entropy(Var logits, const LabelMap& labels, std::optional<int> ignore_label) {
  PixelLosses pl = pixel_losses(logits.value(), labels, ignore_label);
  std::vector<char> selected = pl.valid;
  return selected_mean_nll(logits, labels, std::move(pl), std::move(selected));
}

Var bootstrap_cross_entropy(Var logits, const LabelMap& labels, std::int64_t k, std::optional<int> ignore_label) {
  if (k < 1) throw ConfigError("bootstrapped loss needs k >= 1");
  PixelLosses pl = pixel_losses(logits.value(), labels, ignore_label);
  const auto P = logits.shape().plane();
  std::vector<char> selected(pl.valid.size(), 0);
  std::vector<double> vals;
  for (std::int64_t n = 0; n < logits.shape().n; ++n) {
    vals.clear();
    for (std::int64_t i = 0; i < P; ++i)
      if (pl.valid[n * P + i]) vals.push_back(pl.nll[n * P + i]);
    double threshold = -INFINITY;
    if (static_cast<std::int64_t>(vals.size()) > k) {
      std::nth_element(vals.begin(), vals.begin() + (k - 1), vals.end(), std::greater<>());
      threshold = vals[k - 1];
    }
    for (std::int64_t i = 0; i < P; ++i)
      if (pl.valid[n * P + i] && pl.nll[n * P + i] >= threshold) selected[n * P + i] = 1;
  }
  return selected_mean_nll(logits, labels, std::move(pl), std::move(selected));
}

Var segmentation_loss(Var logits, const LabelMap& labels, const LossConfig& cfg) {
  if (cfg.kind == LossKind::CrossEntropy) return cross_entropy(logits, labels, cfg.ignore_label);
  return bootstrap_cross_entropy(logits, labels, cfg.effective_k(labels.h, labels.w), cfg.ignore_label);
}

void OptimConfig::validate() const {
  if (!(lr0 > 0)) throw ConfigError("optim.lr0 must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("optim.momentum must be in [0, 1)");
  if (!(decay_factor > 0) || decay_factor > 1) throw ConfigError("optim.decay_factor must be in (0, 1]");
  if (decay_every_epochs < 1) throw ConfigError("optim.decay_every_epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("optim.batch_size must be at least 1");
}

double lr_at(int epoch, const OptimConfig& cfg) {
  if (epoch < 0) throw ContractError("lr_at: negative epoch");
  return cfg.lr0 * std::pow(cfg.decay_factor, epoch / cfg.decay_every_epochs);
}

void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum,
                       bool nesterov) {
  if (param.shape() != grad.shape())
    throw ShapeError("sgd: gradient " + grad.shape().str() + " does not match parameter " + param.shape().str());
  if (!velocity.defined()) velocity = param.zeros_like();
  const Tensor& g = grad.dtype() == param.dtype() ? grad : grad.cast(param.dtype());
  velocity.scale_(momentum);
  velocity.add_(g);
  if (nesterov) {
    param.add_(g, -lr);
    param.add_(velocity, -lr * momentum);
  } else {
    param.add_(velocity, -lr);
  }
}

void Sgd::step(ParamStore& store, const std::map<std::string, Tensor>& grads, double lr) {
  for (const auto& spec : store.specs()) {
    if (!spec.trainable) continue;
    auto it = grads.find(spec.name);
    if (it == grads.end()) continue;
    sgd_momentum_step(store.get(spec.name), it->second, velocity_[spec.name], lr, cfg_.momentum, cfg_.nesterov);
  }
}

TrainResult train(NetworkGraph& model, const data::Dataset& train_set, const data::Dataset* val_set,
                  const OptimConfig& optim, const LossConfig& loss, const TrainOptions& opts, std::ostream* log,
                  const std::function<void(const StepRecord&)>& on_step) {
  optim.validate();
  loss.validate();
  if (opts.epochs < 0) throw ConfigError("train.epochs must be non-negative");
  if (train_set.empty()) throw DataError("training set is empty");
  if (train_set.num_classes != model.config().num_classes)
    throw ConfigError("dataset has " + std::to_string(train_set.num_classes) + " classes, model predicts " +
                      std::to_string(model.config().num_classes));
  if (!opts.keep_weights || !model.params().allocated()) model.initialize(opts.seed, opts.dtype);
  ParamStore& store = model.params();

  std::ofstream metrics;
  if (!opts.run_dir.empty()) {
    std::filesystem::create_directories(opts.run_dir);
    metrics.open(opts.run_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw Error("cannot write " + (opts.run_dir / "metrics.jsonl").string());
  }
  auto emit = [&](const nlohmann::json& j) {
    if (metrics.is_open()) metrics << j.dump() << "\n" << std::flush;
  };
  auto save = [&](const std::string& file) {
    const auto path = opts.run_dir / file;
    checkpoint::save(path, store, opts.config_text);
    return path;
  };

  Rng order(opts.seed ^ 0x5eed'0f'5a'4d'1e'00ULL);
  std::vector<std::size_t> indices(train_set.size());
  std::iota(indices.begin(), indices.end(), 0);
  Sgd sgd(optim);
  TrainResult result;
  bool stopped = false;
  bool validated_last = false;

  auto validate = [&](int epoch) {
    if (!opts.validate || !val_set || val_set->empty()) return;
    const auto r = eval::evaluate(eval::logits_predictor(model), *val_set, optim.batch_size);
    result.last_val_miou = r.scores.mean;
    emit({{"epoch", epoch}, {"iteration", result.iterations}, {"val_miou", r.scores.mean},
          {"val_pixel_accuracy", r.scores.pixel_accuracy}});
    if (log) *log << "  val mIoU " << r.scores.mean << "\n";
  };

  for (int epoch = 0; epoch < opts.epochs && !stopped; ++epoch) {
    const double lr = lr_at(epoch, optim);
    order.shuffle(indices.begin(), indices.end());
    double epoch_loss = 0.0;
    int steps = 0;
    validated_last = false;
    for (std::size_t start = 0; start < indices.size(); start += optim.batch_size) {
      if (opts.max_iterations > 0 && result.iterations >= opts.max_iterations) {
        stopped = true;
        break;
      }
      const auto end = std::min(indices.size(), start + optim.batch_size);
      const auto batch = data::make_batch(train_set, std::span(indices).subspan(start, end - start), store.dtype());

      // Buffers change during the forward pass; keep them for a clean rollback.
      std::map<std::string, Tensor> buffers;
      for (const auto& spec : store.specs())
        if (!spec.trainable) buffers.emplace(spec.name, store.get(spec.name));

      Tape tape;
      Context ctx(tape, store, true);
      Var logits = model.forward(ctx, ad::constant(tape, batch.images));
      Var L = segmentation_loss(logits, batch.labels, loss);
      const double value = L.value().item();

      std::map<std::string, Tensor> grads;
      bool finite = std::isfinite(value);
      if (finite) {
        auto by_id = backward(tape, L.id());
        for (const auto& [name, id] : ctx.bound()) {
          Tensor& g = by_id.at(id);
          if (!all_finite(g)) {
            finite = false;
            break;
          }
          grads.emplace(name, std::move(g));
        }
      }
      if (!finite) {
        for (auto& [name, t] : buffers) store.get(name) = std::move(t);
        result.diverged = true;
        emit({{"iteration", result.iterations}, {"epoch", epoch}, {"event", "diverged"}});
        if (log) *log << "non-finite loss or gradient at iteration " << result.iterations << "; stopping\n";
        if (!opts.run_dir.empty()) result.checkpoint = save("last_good.wcnn");
        return result;
      }

      sgd.step(store, grads, lr);
      ++result.iterations;
      result.last_loss = value;
      epoch_loss += value;
      ++steps;
      const StepRecord rec{result.iterations, epoch, lr, value};
      emit({{"iteration", rec.iteration}, {"epoch", rec.epoch}, {"lr", rec.lr}, {"loss", rec.loss}});
      if (on_step) on_step(rec);
    }
    if (steps == 0) break;
    if (!stopped) ++result.epochs_completed;
    if (log)
      *log << "epoch " << epoch + 1 << "/" << opts.epochs << "  lr " << lr << "  loss " << epoch_loss / steps
           << "\n";
    validate(epoch);
    validated_last = true;
    if (!opts.run_dir.empty() && opts.checkpoint_every > 0 && !stopped &&
        (epoch + 1) % opts.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof name, "checkpoint_epoch%04d.wcnn", epoch + 1);
      save(name);
    }
  }
  if (!validated_last) validate(result.epochs_completed);
  if (!opts.run_dir.empty()) result.checkpoint = save("final.wcnn");
  return result;
}

}  // namespace wcnn::training
