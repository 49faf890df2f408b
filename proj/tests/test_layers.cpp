#include <doctest.h>

#include "support.hpp"
#include "wcnn/kernels.hpp"
#include "wcnn/layers.hpp"

using namespace wcnn;
using namespace wcnn::layers;
using wcnn::testing::layer_gradient_check;
using wcnn::testing::smooth_instances_error;

namespace {

void zero_all(ParamStore& store) {
  for (const auto& s : store.specs())
    if (s.trainable && s.init == Init::He) store.get(s.name).fill(0.0);
}

void set_identity_1x1(Tensor& w) {
  w.fill(0.0);
  for (std::int64_t c = 0; c < std::min(w.shape().n, w.shape().c); ++c) w.set(c, c, 0, 0, 1.0);
}

Var run(ParamStore& store, bool training, const Tensor& x, const std::function<Var(Context&, Var)>& f,
        Tape& tape) {
  Context ctx(tape, store, training);
  return f(ctx, ad::constant(tape, x));
}

}  // namespace

TEST_CASE("wavelet unpool: constant low band with no highs or skip stays constant") {
  Tape tape(false);
  const Shape s{1, 2, 3, 4};
  Var ll = ad::constant(tape, Tensor::filled(s, 1.75, DType::f64));
  Var zero = ad::constant(tape, Tensor(s, DType::f64));
  Var skip = ad::constant(tape, Tensor({1, 2, 6, 8}, DType::f64));
  const Tensor out = wavelet_unpool(ll, zero, zero, zero, skip).value();
  CHECK(out.shape() == Shape{1, 2, 6, 8});
  for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.flat(i) == doctest::Approx(1.75).epsilon(1e-15));
}

TEST_CASE("wavelet unpool reproduces its own decomposition") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = rng.uniform_tensor({2, 3, 8, 12}, -4.0, 4.0);
    Tape tape(false);
    auto bands = wavelet::dwt2(ad::constant(tape, x));
    Var skip = ad::constant(tape, Tensor(x.shape(), DType::f64));
    const Tensor y = wavelet_unpool(bands.ll, bands.lh, bands.hl, bands.hh, skip).value();
    CHECK(max_abs_diff(y, x) <= 1e-12);
  }
}

TEST_CASE("wavelet unpool is linear in each of its inputs") {
  Rng rng(12);
  const Shape s{1, 2, 4, 4}, big{1, 2, 8, 8};
  std::vector<Tensor> a{rng.uniform_tensor(s, -1, 1), rng.uniform_tensor(s, -1, 1), rng.uniform_tensor(s, -1, 1),
                        rng.uniform_tensor(s, -1, 1), rng.uniform_tensor(big, -1, 1)};
  std::vector<Tensor> b{rng.uniform_tensor(s, -1, 1), rng.uniform_tensor(s, -1, 1), rng.uniform_tensor(s, -1, 1),
                        rng.uniform_tensor(s, -1, 1), rng.uniform_tensor(big, -1, 1)};
  auto apply = [](const std::vector<Tensor>& in) {
    Tape tape(false);
    std::vector<Var> v;
    for (const auto& t : in) v.push_back(ad::constant(tape, t));
    return wavelet_unpool(v[0], v[1], v[2], v[3], v[4]).value();
  };
  const double alpha = 0.7, beta = -1.3;
  std::vector<Tensor> mix;
  for (std::size_t i = 0; i < a.size(); ++i) {
    Tensor m = a[i];
    m.scale_(alpha);
    m.add_(b[i], beta);
    mix.push_back(m);
  }
  Tensor expect = apply(a);
  expect.scale_(alpha);
  expect.add_(apply(b), beta);
  CHECK(max_abs_diff(apply(mix), expect) <= 1e-12);
}

TEST_CASE("wavelet unpool names the disagreeing input") {
  const Shape s{1, 2, 4, 4};
  CHECK_THROWS_WITH_AS(wavelet_unpool_shape(s, s, {1, 2, 4, 3}, s, {1, 2, 8, 8}),
                       doctest::Contains("y_hl"), ShapeError);
  CHECK_THROWS_WITH_AS(wavelet_unpool_shape(s, {1, 3, 4, 4}, s, s, {1, 2, 8, 8}),
                       doctest::Contains("y_lh"), ShapeError);
  CHECK_THROWS_WITH_AS(wavelet_unpool_shape(s, s, s, {2, 2, 4, 4}, {1, 2, 8, 8}),
                       doctest::Contains("y_hh"), ShapeError);
  CHECK_THROWS_WITH_AS(wavelet_unpool_shape(s, s, s, s, {1, 2, 8, 6}), doctest::Contains("skip"), ShapeError);
  CHECK_THROWS_WITH_AS(wavelet_unpool_shape(s, s, s, s, {1, 4, 8, 8}), doctest::Contains("skip"), ShapeError);
}

TEST_CASE("wavelet unpool gradient matches finite differences") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s{1, 2, 2, 3};
    std::vector<Tensor> in{rng.uniform_tensor(s, -1, 1), rng.uniform_tensor(s, -1, 1),
                           rng.uniform_tensor(s, -1, 1), rng.uniform_tensor(s, -1, 1),
                           rng.uniform_tensor({1, 2, 4, 6}, -1, 1)};
    const Tensor w = rng.uniform_tensor({1, 2, 4, 6}, -1, 1);
    auto f = [&](Tape&, const std::vector<Var>& v) {
      return ad::weighted_sum(wavelet_unpool(v[0], v[1], v[2], v[3], v[4]), w);
    };
    CHECK(wcnn::testing::gradient_error(f, in) <= 1e-4);
  }
}

TEST_CASE("transposed unpool: shape, zero case and parameters") {
  const TransposedUnpool t{3};
  CHECK(t.out_shape({2, 3, 4, 5}, {2, 3, 8, 10}) == Shape{2, 3, 8, 10});
  CHECK_THROWS_AS(t.out_shape({2, 3, 4, 5}, {2, 3, 8, 8}), ShapeError);
  CHECK_THROWS_AS(t.out_shape({2, 4, 4, 5}, {2, 4, 8, 10}), ShapeError);

  ParamStore store;
  t.declare(store, "up");
  CHECK(store.trainable_count() == 3 * 3 * 2 * 2 + 3);
  store.initialize(1, DType::f64);
  zero_all(store);
  Tape tape(false);
  Context ctx(tape, store, false);
  Var y = t.forward(ctx, "up", ad::constant(tape, Rng(2).uniform_tensor({1, 3, 2, 2}, -1, 1)),
                    ad::constant(tape, Tensor({1, 3, 4, 4}, DType::f64)));
  CHECK(max_abs(y.value()) == 0.0);
}

TEST_CASE("transposed unpool gradient matches finite differences") {
  CHECK(smooth_instances_error(20, [](std::uint64_t trial) {
          ParamStore store;
          const TransposedUnpool t{2};
          t.declare(store, "up");
          store.initialize(100 + trial, DType::f64);
          Rng rng(200 + trial);
          const Tensor skip = rng.uniform_tensor({1, 2, 4, 4}, -1, 1);
          auto f = [&](Context& ctx, Var x) { return t.forward(ctx, "up", x, ad::constant(ctx.tape(), skip)); };
          return layer_gradient_check(store, rng.uniform_tensor({1, 2, 2, 2}, -1, 1), f, true, trial);
        }) <= 1e-4);
}

TEST_CASE("residual block: zero branch with identity shortcut is relu") {
  for (bool bn : {true, false}) {
    const ResidualBlock block{4, 2, 4, 1, bn};
    CHECK_FALSE(block.has_projection());
    ParamStore store;
    block.declare(store, "r");
    store.initialize(3, DType::f64);
    zero_all(store);
    const Tensor x = Rng(4).uniform_tensor({2, 4, 3, 5}, -1, 1);
    Tape tape(false);
    const Tensor y = run(store, true, x, [&](Context& c, Var v) { return block.forward(c, "r", v); }, tape).value();
    CHECK(max_abs_diff(y, kernels::relu(x)) == 0.0);
  }
}

TEST_CASE("residual block: stride two halves the spatial dims") {
  const ResidualBlock block{8, 4, 16, 2, true};
  CHECK(block.has_projection());
  CHECK(block.out_shape({1, 8, 16, 32}) == Shape{1, 16, 8, 16});
  ParamStore store;
  block.declare(store, "r");
  store.initialize(5);
  Tape tape(false);
  const Tensor x = Rng(6).uniform_tensor({2, 8, 16, 32}, -1, 1, DType::f32);
  CHECK(run(store, true, x, [&](Context& c, Var v) { return block.forward(c, "r", v); }, tape).shape() ==
        Shape{2, 16, 8, 16});
  CHECK_THROWS_AS(block.out_shape({1, 4, 16, 32}), ShapeError);
}

TEST_CASE("residual block gradient matches finite differences") {
  // Alternates batch norm on/off, projection and identity shortcuts, and
  // strides one and two.
  CHECK(smooth_instances_error(20, [](std::uint64_t trial) {
          const bool bn = trial % 2 == 0;
          const int stride = trial % 4 < 2 ? 1 : 2;
          const std::int64_t in = trial % 3 == 0 ? 4 : 3;
          const ResidualBlock block{in, 2, 4, stride, bn};
          ParamStore store;
          block.declare(store, "r");
          store.initialize(300 + trial, DType::f64);
          Rng rng(400 + trial);
          auto f = [&](Context& c, Var v) { return block.forward(c, "r", v); };
          return layer_gradient_check(store, rng.uniform_tensor({2, in, 4, 4}, -1, 1), f, true, trial);
        }) <= 1e-4);
}

TEST_CASE("upconv block doubles the resolution") {
  const UpconvBlock up{64, 64, 3, true};
  CHECK(up.out_shape({1, 64, 8, 8}) == Shape{1, 64, 16, 16});
  ParamStore store;
  up.declare(store, "u");
  store.initialize(7);
  Tape tape(false);
  const Tensor x = Rng(8).uniform_tensor({1, 64, 8, 8}, -1, 1, DType::f32);
  CHECK(run(store, false, x, [&](Context& c, Var v) { return up.forward(c, "u", v); }, tape).shape() ==
        Shape{1, 64, 16, 16});
}

TEST_CASE("upconv block with zero weights outputs zero") {
  for (bool bn : {true, false}) {
    const UpconvBlock up{4, 3, 2, bn};
    ParamStore store;
    up.declare(store, "u");
    store.initialize(9, DType::f64);
    zero_all(store);
    Tape tape(false);
    const Tensor x = Rng(10).uniform_tensor({2, 4, 3, 3}, -1, 1);
    CHECK(max_abs(run(store, true, x, [&](Context& c, Var v) { return up.forward(c, "u", v); }, tape).value()) ==
          0.0);
  }
}

TEST_CASE("upconv block gradient matches finite differences") {
  CHECK(smooth_instances_error(20, [](std::uint64_t trial) {
          const UpconvBlock up{3, 2, 1, trial % 2 == 0};
          ParamStore store;
          up.declare(store, "u");
          store.initialize(500 + trial, DType::f64);
          Rng rng(600 + trial);
          auto f = [&](Context& c, Var v) { return up.forward(c, "u", v); };
          return layer_gradient_check(store, rng.uniform_tensor({2, 3, 2, 2}, -1, 1), f, true, trial);
        }) <= 1e-4);
}

// ---------------------------------------------------------------------------
// Pyramids

TEST_CASE("pyramid config rejects broken channel arithmetic") {
  PyramidConfig lfp{PyramidKind::LFP, 4, 2048, 500, 1024};
  CHECK_THROWS_WITH_AS(lfp.validate(), doctest::Contains("2000"), ConfigError);
  PyramidConfig ffc{PyramidKind::FFC, 4, 2048, 512, 1024};
  CHECK_THROWS_AS(ffc.validate(), ConfigError);
  CHECK_THROWS_AS(PyramidConfig::make(PyramidKind::LFP, 256, 128, 3), ConfigError);
  CHECK(PyramidConfig::make(PyramidKind::LFP, 2048, 1024, 4).level_width == 512);
  CHECK(PyramidConfig::make(PyramidKind::FFC, 2048, 1024, 4).level_width == 2048);
}

TEST_CASE("pyramid rejects inputs not divisible by 2^levels") {
  const Pyramid p{PyramidConfig::make(PyramidKind::FFC, 8, 4, 3)};
  CHECK_THROWS_AS(p.out_shape({1, 8, 12, 16}), ShapeError);
  CHECK(p.out_shape({1, 8, 16, 8}) == Shape{1, 4, 16, 8});
}

TEST_CASE("LFP pyramid trace at full scale") {
  const Pyramid p{PyramidConfig::make(PyramidKind::LFP, 2048, 1024, 4)};
  const auto rows = p.trace({1, 2048, 16, 32});
  REQUIRE(rows.size() == 10);
  CHECK(rows[0].layer == "dwt_p1");
  CHECK(rows[0].shape == Shape{1, 2048, 8, 16});
  CHECK(rows[1].layer == "conv_p1");
  CHECK(rows[1].shape == Shape{1, 512, 8, 16});
  CHECK(rows[2].input == "Y^ll_p1");
  CHECK(rows[2].shape == Shape{1, 2048, 4, 8});
  CHECK(rows[3].shape == Shape{1, 512, 4, 8});
  CHECK(rows[6].shape == Shape{1, 2048, 1, 2});
  CHECK(rows[8].layer == "concat");
  CHECK(rows[8].shape == Shape{1, 2048, 16, 32});
  CHECK(rows[9].layer == "conv_pyr");
  CHECK(rows[9].shape == Shape{1, 1024, 16, 32});
}

TEST_CASE("FFC pyramid trace at full scale") {
  const Pyramid p{PyramidConfig::make(PyramidKind::FFC, 2048, 1024, 4)};
  const auto rows = p.trace({1, 2048, 16, 32});
  REQUIRE(rows.size() == 13);
  CHECK(rows[1].shape == Shape{1, 2048, 8, 16});
  CHECK(rows[2].input == "conv_p1");
  CHECK(rows[2].shape == Shape{1, 2048, 4, 8});
  CHECK(rows[3].shape == Shape{1, 2048, 4, 8});
  CHECK(rows[8].layer == "idwt_p4");
  CHECK(rows[8].input == "conv_p4");
  CHECK(rows[10].layer == "idwt_p2");
  CHECK(rows[10].shape == Shape{1, 2048, 8, 16});
  CHECK(rows[11].layer == "idwt_p1");
  CHECK(rows[11].shape == Shape{1, 2048, 16, 32});
  CHECK(rows[12].shape == Shape{1, 1024, 16, 32});
}

TEST_CASE("LFP two-level toy shapes") {
  // 4x4 input, 6 channels, two levels of width 3: bands 2x2 then 1x1, each
  // conv gives 3 channels, concat gives 6 at 4x4.
  const Pyramid p{PyramidConfig::make(PyramidKind::LFP, 6, 5, 2)};
  const auto rows = p.trace({2, 6, 4, 4});
  CHECK(rows[0].shape == Shape{2, 6, 2, 2});
  CHECK(rows[1].shape == Shape{2, 3, 2, 2});
  CHECK(rows[2].shape == Shape{2, 6, 1, 1});
  CHECK(rows[3].shape == Shape{2, 3, 1, 1});
  CHECK(rows[4].shape == Shape{2, 6, 4, 4});
  CHECK(rows[5].shape == Shape{2, 5, 4, 4});

  ParamStore store;
  p.declare(store, "pyr");
  store.initialize(14, DType::f64);
  Tape tape(false);
  Context ctx(tape, store, false);
  Var y = p.forward(ctx, "pyr", ad::constant(tape, Rng(15).uniform_tensor({2, 6, 4, 4}, -1, 1)));
  CHECK(y.shape() == Shape{2, 5, 4, 4});
}

TEST_CASE("LFP level-one band is average pooling of conv5") {
  const Pyramid p{PyramidConfig::make(PyramidKind::LFP, 3, 3, 1)};
  ParamStore store;
  p.declare(store, "pyr");
  store.initialize(16, DType::f64);
  set_identity_1x1(store.get("pyr.conv_p1.weight"));
  store.get("pyr.conv_p1.bias").fill(0.0);
  const Tensor x = Rng(17).uniform_tensor({2, 3, 8, 6}, -1, 1);
  Tape tape(false);
  Context ctx(tape, store, false);
  const Tensor f = p.features(ctx, "pyr", ad::constant(tape, x), false).value();
  const Tensor expect = kernels::resize_bilinear(kernels::avg_pool2x2(x), 8, 6);
  CHECK(max_abs_diff(f, expect) <= 1e-14);
}

TEST_CASE("pyramids with zero weights output zero for constant conv5") {
  for (PyramidKind kind : {PyramidKind::LFP, PyramidKind::FFC}) {
    const Pyramid p{PyramidConfig::make(kind, 4, 6, 2)};
    ParamStore store;
    p.declare(store, "pyr");
    store.initialize(18, DType::f64);
    zero_all(store);
    Tape tape(false);
    Context ctx(tape, store, false);
    Var y = p.forward(ctx, "pyr", ad::constant(tape, Tensor::filled({1, 4, 8, 8}, 2.5, DType::f64)));
    CHECK(y.shape() == Shape{1, 6, 8, 8});
    CHECK(max_abs(y.value()) == 0.0);
  }
}

TEST_CASE("FFC with identity level convs and no skip adds is the identity") {
  for (int levels = 1; levels <= 4; ++levels) {
    const Pyramid p{PyramidConfig::make(PyramidKind::FFC, 5, 3, levels)};
    ParamStore store;
    p.declare(store, "pyr");
    store.initialize(19, DType::f64);
    for (int k = 1; k <= levels; ++k) {
      set_identity_1x1(store.get("pyr.conv_p" + std::to_string(k) + ".weight"));
      store.get("pyr.conv_p" + std::to_string(k) + ".bias").fill(0.0);
    }
    const Tensor x = Rng(20 + levels).uniform_tensor({2, 5, 16, 32}, -3, 3);
    Tape tape(false);
    Context ctx(tape, store, false);
    const Tensor f = p.features(ctx, "pyr", ad::constant(tape, x), false).value();
    CHECK(max_abs_diff(f, x) <= 1e-10);
  }
}

TEST_CASE("pyramid outputs keep conv5's spatial dims") {
  for (PyramidKind kind : {PyramidKind::LFP, PyramidKind::FFC})
    for (int levels = 1; levels <= 3; ++levels) {
      const Pyramid p{PyramidConfig::make(kind, 6, 4, levels)};
      const Shape in{1, 6, 8 << (levels - 1), 8};
      const Shape out = p.out_shape(in);
      CHECK(out.h == in.h);
      CHECK(out.w == in.w);
    }
}

TEST_CASE("pyramid gradients match finite differences") {
  for (PyramidKind kind : {PyramidKind::LFP, PyramidKind::FFC}) {
    CAPTURE(static_cast<int>(kind));
    CHECK(smooth_instances_error(20, [kind](std::uint64_t trial) {
            const Pyramid p{PyramidConfig::make(kind, 4, 3, 2)};
            ParamStore store;
            p.declare(store, "pyr");
            store.initialize(700 + trial, DType::f64);
            Rng rng(800 + trial);
            auto f = [&](Context& c, Var v) { return p.forward(c, "pyr", v); };
            return layer_gradient_check(store, rng.uniform_tensor({1, 4, 4, 4}, -1, 1), f, true, trial);
          }) <= 1e-4);
  }
}
