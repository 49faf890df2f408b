#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "support.hpp"
#include "wcnn/checkpoint.hpp"
#include "wcnn/errors.hpp"
#include "wcnn/eval.hpp"
#include "wcnn/training.hpp"

using namespace wcnn;
using namespace wcnn::training;
using wcnn::testing::TempDir;

namespace {

// Two-class logits whose per-pixel loss for label 0 is exactly `losses[i]`:
// -log softmax_0 = log(1 + e^(z1 - z0)) with z0 = 0 and z1 = log(e^l - 1).
Tensor logits_with_losses(const std::vector<double>& losses) {
  const auto n = static_cast<std::int64_t>(losses.size());
  Tensor t({1, 2, 1, n}, DType::f64);
  for (std::int64_t i = 0; i < n; ++i) t.set(0, 1, 0, i, std::log(std::expm1(losses[i])));
  return t;
}

// Straight per-pixel cross-entropy, shares nothing with the library loss.
double scalar_ce(const Tensor& logits, const LabelMap& labels, int ignore) {
  const Shape s = logits.shape();
  double total = 0.0;
  int count = 0;
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x) {
        const int t = labels.at(n, y, x);
        if (t == ignore) continue;
        double z = 0.0;
        for (std::int64_t c = 0; c < s.c; ++c) z += std::exp(logits.at(n, c, y, x));
        total += std::log(z) - logits.at(n, t, y, x);
        ++count;
      }
  return total / count;
}

ModelConfig small(int classes) {
  ModelConfig cfg;
  cfg.variant = Variant::Baseline;
  cfg.width_mult = 0.125;
  cfg.blocks_per_stage = {1, 1, 1, 1};
  cfg.decoder_blocks = {1, 1, 1, 1, 1};
  cfg.num_classes = classes;
  cfg.input_h = 64;
  cfg.input_w = 64;
  return cfg;
}

}  // namespace

TEST_CASE("cross-entropy of uniform logits is log C") {
  Tape tape;
  LabelMap labels(2, 3, 5, 1);
  const Var z = ad::constant(tape, Tensor::filled({2, 4, 3, 5}, 0.7, DType::f64));
  CHECK(cross_entropy(z, labels).value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("cross-entropy agrees with a scalar loop and skips ignored pixels") {
  Rng rng(21);
  const Tensor z = rng.uniform_tensor({2, 5, 4, 3}, -3, 3);
  LabelMap labels(2, 4, 3);
  for (auto& v : labels.data) v = rng.uniform() < 0.2 ? 255 : static_cast<int>(rng.below(5));
  Tape tape;
  const double got = cross_entropy(ad::constant(tape, z), labels).value().item();
  CHECK(std::abs(got - scalar_ce(z, labels, 255)) < 1e-12);

  LabelMap bad = labels;
  bad.at(1, 2, 0) = 7;
  try {
    cross_entropy(ad::constant(tape, z), bad);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("label 7") != std::string::npos);
  }
  // With ignoring disabled, 255 is just another out-of-range label.
  CHECK_THROWS_AS(cross_entropy(ad::constant(tape, z), labels, std::nullopt), DataError);
}

TEST_CASE("bootstrapped loss averages the hardest pixels") {
  Tape tape;
  const Var z = ad::constant(tape, logits_with_losses({0.1, 0.2, 0.9, 1.0}));
  const LabelMap labels(1, 1, 4, 0);
  CHECK(std::abs(bootstrap_cross_entropy(z, labels, 2).value().item() - 0.95) < 1e-12);
  CHECK(std::abs(bootstrap_cross_entropy(z, labels, 1).value().item() - 1.0) < 1e-12);

  // Ties with the k-th loss are all kept.
  const Var tied = ad::constant(tape, logits_with_losses({0.5, 0.9, 0.9, 0.9}));
  CHECK(std::abs(bootstrap_cross_entropy(tied, labels, 2).value().item() - 0.9) < 1e-12);
}

TEST_CASE("bootstrapped loss with k covering the image equals cross-entropy") {
  Rng rng(22);
  const Tensor z = rng.uniform_tensor({3, 4, 5, 6}, -2, 2);
  LabelMap labels(3, 5, 6);
  for (auto& v : labels.data) v = rng.uniform() < 0.1 ? 255 : static_cast<int>(rng.below(4));
  Tape tape;
  const Var zv = ad::constant(tape, z);
  const double ce = cross_entropy(zv, labels).value().item();
  CHECK(std::abs(bootstrap_cross_entropy(zv, labels, 30).value().item() - ce) < 1e-12);
  CHECK(std::abs(bootstrap_cross_entropy(zv, labels, 1 << 20).value().item() - ce) < 1e-12);
  CHECK_THROWS_AS(bootstrap_cross_entropy(zv, labels, 0), ConfigError);
}

TEST_CASE("bootstrapped loss sends no gradient to unselected pixels") {
  Tape tape;
  const Var z = ad::parameter(tape, logits_with_losses({0.1, 0.2, 0.9, 1.0}));
  const Var L = bootstrap_cross_entropy(z, LabelMap(1, 1, 4, 0), 2);
  const auto grads = backward(tape, L.id());
  const Tensor& g = grads.at(z.id());
  for (std::int64_t c = 0; c < 2; ++c) {
    CHECK(g.at(0, c, 0, 0) == 0.0);
    CHECK(g.at(0, c, 0, 1) == 0.0);
    CHECK(g.at(0, c, 0, 2) != 0.0);
    CHECK(g.at(0, c, 0, 3) != 0.0);
  }
}

TEST_CASE("effective k scales with image area") {
  LossConfig cfg;
  CHECK(cfg.effective_k(512, 1024) == 8192);
  CHECK(cfg.effective_k(64, 64) == 64);
  CHECK(cfg.effective_k(4, 4) == 1);
  cfg.scale_k_to_area = false;
  CHECK(cfg.effective_k(64, 64) == 8192);
}

TEST_CASE("momentum SGD unrolls to -2.9 g after two steps") {
  Tensor p = Tensor::filled({1, 1, 1, 3}, 1.0, DType::f64);
  const Tensor g = Tensor::from_values({1, 1, 1, 3}, {0.5, -1.0, 2.0}, DType::f64);
  Tensor v;
  sgd_momentum_step(p, g, v, 1.0, 0.9);
  sgd_momentum_step(p, g, v, 1.0, 0.9);
  for (std::int64_t i = 0; i < 3; ++i) CHECK(p.flat(i) == doctest::Approx(1.0 - 2.9 * g.flat(i)).epsilon(1e-14));

  // Nesterov looks ahead: step1 -(1 + .9) g, step2 -(1 + .9 * 1.9) g.
  Tensor q = Tensor::filled({1, 1, 1, 3}, 1.0, DType::f64);
  Tensor w;
  sgd_momentum_step(q, g, w, 1.0, 0.9, true);
  sgd_momentum_step(q, g, w, 1.0, 0.9, true);
  for (std::int64_t i = 0; i < 3; ++i)
    CHECK(q.flat(i) == doctest::Approx(1.0 - (1.9 + 2.71) * g.flat(i)).epsilon(1e-14));
}

TEST_CASE("step learning-rate schedule") {
  OptimConfig cfg;
  CHECK(lr_at(0, cfg) == doctest::Approx(0.001));
  CHECK(lr_at(9, cfg) == doctest::Approx(0.001));
  CHECK(lr_at(10, cfg) == doctest::Approx(0.0009));
  CHECK(lr_at(25, cfg) == doctest::Approx(0.00081));
  cfg.momentum = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("training visits every sample, including partial batches") {
  NetworkGraph g = build_model(small(4));
  const auto ds = data::synth_generate(1, 3, 64, 64);
  OptimConfig optim;
  optim.batch_size = 2;
  TrainOptions opts;
  opts.epochs = 2;
  std::vector<StepRecord> steps;
  const auto r = train(g, ds, nullptr, optim, LossConfig{}, opts, nullptr,
                       [&](const StepRecord& s) { steps.push_back(s); });
  CHECK(r.iterations == 4);
  CHECK(r.epochs_completed == 2);
  REQUIRE(steps.size() == 4);
  CHECK(steps[2].epoch == 1);
  CHECK(std::isfinite(r.last_loss));

  optim.batch_size = 1;
  opts.epochs = 1;
  CHECK(train(g, data::synth_generate(2, 2, 64, 64), nullptr, optim, LossConfig{}, opts).iterations == 2);

  opts.epochs = 5;
  opts.max_iterations = 3;
  CHECK(train(g, ds, nullptr, optim, LossConfig{}, opts).iterations == 3);
}

TEST_CASE("training is deterministic for a fixed seed") {
  TempDir dir("train");
  const auto ds = data::synth_generate(3, 4, 64, 64);
  const auto val = data::synth_generate(4, 2, 64, 64);
  OptimConfig optim;
  optim.batch_size = 2;
  auto run = [&](const std::string& sub, std::uint64_t seed) {
    NetworkGraph g = build_model(small(4));
    TrainOptions opts;
    opts.epochs = 2;
    opts.checkpoint_every = 1;
    opts.seed = seed;
    opts.run_dir = dir / sub;
    return train(g, ds, &val, optim, LossConfig{}, opts);
  };
  const auto a = run("a", 5), b = run("b", 5), c = run("c", 6);
  REQUIRE(a.last_val_miou.has_value());
  CHECK(a.last_loss == b.last_loss);

  const auto ta = checkpoint::read_tensors(a.checkpoint), tb = checkpoint::read_tensors(b.checkpoint),
             tc = checkpoint::read_tensors(c.checkpoint);
  bool all_same = true, any_diff = false;
  for (const auto& [name, t] : ta) {
    all_same &= bitwise_equal(t, tb.at(name));
    any_diff |= !bitwise_equal(t, tc.at(name));
  }
  CHECK(all_same);
  CHECK(any_diff);
  CHECK(std::filesystem::exists(dir / "a" / "checkpoint_epoch0001.wcnn"));
  CHECK(std::filesystem::exists(dir / "a" / "checkpoint_epoch0002.wcnn"));

  std::ifstream metrics(dir / "a" / "metrics.jsonl");
  int lines = 0, val_lines = 0;
  for (std::string line; std::getline(metrics, line); ++lines)
    if (line.find("val_miou") != std::string::npos) ++val_lines;
  CHECK(lines == 4 + 2);
  CHECK(val_lines == 2);
}

TEST_CASE("a non-finite loss stops training and keeps the last good weights") {
  TempDir dir("nan");
  auto ds = data::synth_generate(5, 4, 64, 64);
  ds.samples[3].image.set(0, 0, 10, 10, std::numeric_limits<double>::infinity());
  NetworkGraph g = build_model(small(4));
  OptimConfig optim;
  optim.batch_size = 1;
  TrainOptions opts;
  opts.epochs = 3;
  opts.seed = 2;
  opts.run_dir = dir.path();
  const auto r = train(g, ds, nullptr, optim, LossConfig{}, opts);
  CHECK(r.diverged);
  CHECK(r.iterations < 4);
  REQUIRE(r.checkpoint.filename() == "last_good.wcnn");

  const auto saved = checkpoint::read_tensors(r.checkpoint);
  for (const auto& [name, t] : saved) {
    CAPTURE(name);
    CHECK(all_finite(t));
    CHECK(bitwise_equal(t, g.params().get(name)));
  }
}

TEST_CASE("training rejects mismatched inputs") {
  NetworkGraph g = build_model(small(3));
  const auto ds = data::synth_generate(1, 2, 64, 64);
  CHECK_THROWS_AS(train(g, ds, nullptr, OptimConfig{}, LossConfig{}, TrainOptions{}), ConfigError);
  CHECK_THROWS_AS(train(g, data::Dataset{{}, 3}, nullptr, OptimConfig{}, LossConfig{}, TrainOptions{}), DataError);
}

// Sanity check that the whole pipeline can learn: a tiny two-class set is
// memorized with plain cross-entropy and a raised learning rate.
TEST_CASE("a small model overfits a tiny dataset") {
  NetworkGraph g = build_model(small(2));
  const auto ds = data::synth_generate(8, 8, 64, 64, 2);
  OptimConfig optim;
  optim.lr0 = 0.05;
  optim.batch_size = 4;
  LossConfig loss;
  loss.kind = LossKind::CrossEntropy;
  TrainOptions opts;
  opts.epochs = 200;
  opts.seed = 1;
  train(g, ds, nullptr, optim, loss, opts);
  const auto r = eval::evaluate(eval::logits_predictor(g), ds, 4);
  CHECK(r.scores.pixel_accuracy > 0.98);
}
