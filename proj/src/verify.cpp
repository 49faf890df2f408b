#include "wcnn/verify.hpp"

#include <cmath>
#include <cstdio>

#include "wcnn/gradcheck.hpp"
#include "wcnn/kernels.hpp"
#include "wcnn/layers.hpp"
#include "wcnn/model.hpp"
#include "wcnn/random.hpp"
#include "wcnn/training.hpp"

namespace wcnn::verify {

namespace {

Check make(std::string suite, std::string property, double value, double bound, std::string detail = "") {
  return {std::move(suite), std::move(property), value <= bound, value, bound, std::move(detail)};
}

Shape random_shape(Rng& rng, std::int64_t multiple) {
  return {1 + static_cast<std::int64_t>(rng.below(2)), 1 + static_cast<std::int64_t>(rng.below(3)),
          multiple * (1 + static_cast<std::int64_t>(rng.below(3))),
          multiple * (1 + static_cast<std::int64_t>(rng.below(3)))};
}

}  // namespace

wavelet::FilterPair filters(bool corrupt) {
  const auto& h = wavelet::haar_filters();
  if (!corrupt) return h;
  return wavelet::FilterPair::unchecked({h.phi()[0], h.phi()[1]}, {h.psi()[0], h.psi()[1]},
                                        {h.phi_syn()[0], h.phi_syn()[1]}, {h.psi_syn()[0], 0.9 * h.psi_syn()[1]});
}

std::vector<Check> reconstruction(const wavelet::FilterPair& f, int tensors, std::uint64_t seed) {
  std::vector<Check> out;
  Rng rng(seed);
  for (int levels = 1; levels <= 4; ++levels) {
    double err64 = 0.0, err32 = 0.0;
    for (int i = 0; i < tensors; ++i) {
      const Shape s = random_shape(rng, 16);
      const Tensor x = rng.uniform_tensor(s, -1, 1);
      err64 = std::max(err64, max_abs_diff(wavelet::idwt2_multi(wavelet::dwt2_multi(x, levels, f), f), x));
      const Tensor x32 = x.cast(DType::f32);
      const Tensor back = wavelet::idwt2_multi(wavelet::dwt2_multi(x32, levels, f), f);
      err32 = std::max(err32, max_abs_diff(back, x32) / std::max(max_abs(x32), 1e-30));
    }
    const std::string l = "L=" + std::to_string(levels);
    out.push_back(make("reconstruction", "idwt(dwt(x)) == x, f64, " + l, err64, 1e-12));
    out.push_back(make("reconstruction", "idwt(dwt(x)) == x, f32 relative, " + l, err32, 1e-5));
  }
  return out;
}

std::vector<Check> adjoint(const wavelet::FilterPair& f, int trials, std::uint64_t seed) {
  // With synthesis filters twice the analysis ones, synthesis is four times
  // the adjoint of analysis: <A x, y> = <x, S y> / 4.
  Rng rng(seed);
  double dwt_err = 0.0, conv_err = 0.0;
  for (int i = 0; i < trials; ++i) {
    const Shape s = random_shape(rng, 2);
    const Tensor x = rng.uniform_tensor(s, -1, 1);
    const auto ax = wavelet::dwt2_single(x, f);
    const Shape hs{s.n, s.c, s.h / 2, s.w / 2};
    wavelet::SubbandSet y{rng.uniform_tensor(hs, -1, 1), rng.uniform_tensor(hs, -1, 1), rng.uniform_tensor(hs, -1, 1),
                          rng.uniform_tensor(hs, -1, 1)};
    const double lhs = dot(ax.ll, y.ll) + dot(ax.lh, y.lh) + dot(ax.hl, y.hl) + dot(ax.hh, y.hh);
    const double rhs = dot(x, wavelet::idwt2_single(y, f)) / 4.0;
    dwt_err = std::max(dwt_err, std::abs(lhs - rhs) / std::max(std::abs(lhs) + std::abs(rhs), 1e-12));

    // Odd sizes, so a stride-2 transposed conv restores the input dims.
    const int stride = 1 + static_cast<int>(rng.below(2));
    const Tensor xo = rng.uniform_tensor({s.n, s.c, s.h + 1, s.w + 1}, -1, 1);
    const Tensor w = rng.uniform_tensor({3, s.c, 3, 3}, -1, 1);
    const Tensor cx = kernels::conv2d(xo, w, nullptr, stride, 1);
    const Tensor cy = rng.uniform_tensor(cx.shape(), -1, 1);
    const double lhs_c = dot(cx, cy);
    const double rhs_c = dot(xo, kernels::conv_transpose2d(cy, w, nullptr, stride, 1));
    conv_err = std::max(conv_err, std::abs(lhs_c - rhs_c) / std::max(std::abs(lhs_c) + std::abs(rhs_c), 1e-12));
  }
  return {make("adjoint", "<dwt x, y> == <x, idwt y> / 4", dwt_err, 1e-12),
          make("adjoint", "<conv x, y> == <x, conv_transpose y>", conv_err, 1e-12)};
}

std::vector<Check> average_pooling(const wavelet::FilterPair& f, int tensors, std::uint64_t seed) {
  Rng rng(seed);
  double err = 0.0;
  for (int i = 0; i < tensors; ++i) {
    const Shape s = random_shape(rng, 2);
    const Tensor x = rng.uniform_tensor(s, -1, 1);
    const Tensor ll = wavelet::dwt2_single(x, f).ll;
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c)
        for (std::int64_t y = 0; y < s.h / 2; ++y)
          for (std::int64_t z = 0; z < s.w / 2; ++z) {
            const double avg = (x.at(n, c, 2 * y, 2 * z) + x.at(n, c, 2 * y, 2 * z + 1) +
                                x.at(n, c, 2 * y + 1, 2 * z) + x.at(n, c, 2 * y + 1, 2 * z + 1)) /
                               4.0;
            err = std::max(err, std::abs(ll.at(n, c, y, z) - avg));
          }
  }
  return {make("average pooling", "Haar low-low band == 2x2 average pooling", err, 1e-14)};
}

std::vector<Check> gradients(int instances, std::uint64_t seed, const Reporter& progress) {
  using gradcheck::GradCheck;
  using gradcheck::LossBuilder;
  constexpr double kBound = 1e-4;
  std::vector<Check> out;
  auto record = [&](const std::string& op, double err, int accepted) {
    Check c = make("gradient", op, err, kBound,
                   std::to_string(accepted) + " instances");
    if (accepted < instances) c.passed = false;
    if (progress) progress(c);
    out.push_back(std::move(c));
  };
  // Plain (kink-free) operators: every draw counts.
  auto plain = [&](const std::string& op, const std::function<GradCheck(Rng&)>& instance) {
    Rng rng(seed ^ std::hash<std::string>{}(op));
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) worst = std::max(worst, instance(rng).error);
    record(op, worst, instances);
  };
  // Operators with kinks or selections: non-smooth draws are skipped.
  auto smooth = [&](const std::string& op, const std::function<GradCheck(std::uint64_t)>& instance) {
    int accepted = 0;
    const double worst = gradcheck::smooth_instances_error(instances, instance, &accepted);
    record(op, worst, accepted);
  };
  auto projection = [](Rng& rng, Shape s) { return rng.uniform_tensor(s, -1, 1); };

  plain("conv2d", [&](Rng& rng) {
    const int stride = 1 + static_cast<int>(rng.below(2));
    const Tensor x = rng.uniform_tensor({2, 2, 5, 4}, -1, 1), w = rng.uniform_tensor({3, 2, 3, 3}, -1, 1),
                 b = rng.uniform_tensor({1, 3, 1, 1}, -1, 1);
    const Tensor p = projection(rng, kernels::conv2d_output_shape(x.shape(), w.shape(), stride, 1));
    return gradcheck::check_gradient(
        [&](Tape&, const std::vector<Var>& v) { return ad::weighted_sum(ad::conv2d(v[0], v[1], v[2], stride, 1), p); },
        {x, w, b});
  });
  plain("transposed_conv2d", [&](Rng& rng) {
    const Tensor x = rng.uniform_tensor({2, 3, 3, 2}, -1, 1), w = rng.uniform_tensor({3, 2, 2, 2}, -1, 1),
                 b = rng.uniform_tensor({1, 2, 1, 1}, -1, 1);
    const Tensor p = projection(rng, {2, 2, 6, 4});
    return gradcheck::check_gradient(
        [&](Tape&, const std::vector<Var>& v) {
          return ad::weighted_sum(ad::conv_transpose2d(v[0], v[1], v[2], 2, 0), p);
        },
        {x, w, b});
  });
  plain("dwt2", [&](Rng& rng) {
    const Tensor x = rng.uniform_tensor({2, 2, 4, 6}, -1, 1);
    std::array<Tensor, 4> p;
    for (auto& t : p) t = projection(rng, {2, 2, 2, 3});
    return gradcheck::check_gradient(
        [&](Tape&, const std::vector<Var>& v) {
          const auto b = wavelet::dwt2(v[0]);
          Var s = ad::add(ad::weighted_sum(b.ll, p[0]), ad::weighted_sum(b.lh, p[1]));
          s = ad::add(s, ad::weighted_sum(b.hl, p[2]));
          return ad::add(s, ad::weighted_sum(b.hh, p[3]));
        },
        {x});
  });
  plain("idwt2", [&](Rng& rng) {
    std::vector<Tensor> in;
    for (int k = 0; k < 4; ++k) in.push_back(rng.uniform_tensor({2, 2, 2, 3}, -1, 1));
    const Tensor p = projection(rng, {2, 2, 4, 6});
    return gradcheck::check_gradient(
        [&](Tape&, const std::vector<Var>& v) { return ad::weighted_sum(wavelet::idwt2(v[0], v[1], v[2], v[3]), p); },
        in);
  });
  plain("wavelet_unpool", [&](Rng& rng) {
    std::vector<Tensor> in;
    for (int k = 0; k < 4; ++k) in.push_back(rng.uniform_tensor({1, 2, 2, 3}, -1, 1));
    in.push_back(rng.uniform_tensor({1, 2, 4, 6}, -1, 1));
    const Tensor p = projection(rng, {1, 2, 4, 6});
    return gradcheck::check_gradient(
        [&](Tape&, const std::vector<Var>& v) {
          return ad::weighted_sum(layers::wavelet_unpool(v[0], v[1], v[2], v[3], v[4]), p);
        },
        in);
  });
  for (auto kind : {layers::PyramidKind::LFP, layers::PyramidKind::FFC}) {
    const std::string name = kind == layers::PyramidKind::LFP ? "lfp_pyramid" : "ffc_pyramid";
    smooth(name, [&, kind](std::uint64_t trial) {
      const layers::Pyramid p{layers::PyramidConfig::make(kind, 4, 3, 2)};
      ParamStore store;
      p.declare(store, "pyr");
      store.initialize(seed + 700 + trial, DType::f64);
      Rng rng(seed + 800 + trial);
      return gradcheck::layer_gradient_check(
          store, rng.uniform_tensor({1, 4, 4, 4}, -1, 1), [&](Context& c, Var v) { return p.forward(c, "pyr", v); },
          true, trial);
    });
  }
  smooth("residual_block", [&](std::uint64_t trial) {
    const bool bn = trial % 2 == 0;
    const int stride = trial % 4 < 2 ? 1 : 2;
    const std::int64_t in = trial % 3 == 0 ? 4 : 3;
    const layers::ResidualBlock block{in, 2, 4, stride, bn};
    ParamStore store;
    block.declare(store, "r");
    store.initialize(seed + 300 + trial, DType::f64);
    Rng rng(seed + 400 + trial);
    return gradcheck::layer_gradient_check(
        store, rng.uniform_tensor({2, in, 4, 4}, -1, 1), [&](Context& c, Var v) { return block.forward(c, "r", v); },
        true, trial);
  });
  smooth("upconv_block", [&](std::uint64_t trial) {
    const layers::UpconvBlock up{3, 2, 1, trial % 2 == 0};
    ParamStore store;
    up.declare(store, "u");
    store.initialize(seed + 500 + trial, DType::f64);
    Rng rng(seed + 600 + trial);
    return gradcheck::layer_gradient_check(
        store, rng.uniform_tensor({2, 3, 2, 2}, -1, 1), [&](Context& c, Var v) { return up.forward(c, "u", v); },
        true, trial);
  });

  auto random_labels = [](Rng& rng, std::int64_t n, std::int64_t h, std::int64_t w, int classes) {
    LabelMap labels(n, h, w);
    for (auto& v : labels.data) v = rng.uniform() < 0.1 ? 255 : static_cast<int>(rng.below(classes));
    return labels;
  };
  plain("cross_entropy", [&](Rng& rng) {
    const Tensor logits = rng.uniform_tensor({2, 3, 3, 4}, -2, 2);
    const LabelMap labels = random_labels(rng, 2, 3, 4, 3);
    return gradcheck::check_gradient(
        [&](Tape&, const std::vector<Var>& v) { return training::cross_entropy(v[0], labels); }, {logits});
  });
  smooth("bootstrap_cross_entropy", [&](std::uint64_t trial) {
    Rng rng(seed + 900 + trial);
    const Tensor logits = rng.uniform_tensor({2, 3, 3, 4}, -2, 2);
    const LabelMap labels = random_labels(rng, 2, 3, 4, 3);
    const std::int64_t k = 1 + static_cast<std::int64_t>(trial % 6);
    return gradcheck::check_gradient(
        [&](Tape&, const std::vector<Var>& v) { return training::bootstrap_cross_entropy(v[0], labels, k); },
        {logits}, 1e-5, true);
  });
  return out;
}

const std::vector<TableRow>& published_table() {
  static const std::vector<TableRow> rows = {
      {"conv1", 2, 64},      {"maxpool", 4, 64},    {"conv2_x", 4, 256},   {"dwt2", 8, 256},
      {"conv3_1", 8, 512},   {"conv3_x", 8, 512},   {"dwt3", 16, 512},     {"conv4_1", 16, 1024},
      {"conv4_x", 16, 1024}, {"dwt4", 32, 1024},    {"conv5_1", 32, 2048}, {"conv5_x", 32, 2048},
      {"pyramid", 32, 1024}, {"idwt4", 16, 1024},   {"dconv4_x", 16, 512}, {"idwt3", 8, 512},
      {"dconv3_x", 8, 256},  {"idwt2", 4, 256},     {"dconv2_x", 4, 128},  {"upconv2_x", 2, 64},
      {"upconv1_x", 1, 64},
  };
  return rows;
}

std::vector<Check> table_shapes() {
  ModelConfig cfg;
  cfg.variant = Variant::WcnnFFC;
  const NetworkGraph g = build_model(cfg);
  const auto trace = g.shape_trace(512, 1024);
  const auto& table = published_table();
  int matched = 0;
  std::string first_mismatch;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const Shape want{1, table[i].depth, 512 / table[i].divisor, 1024 / table[i].divisor};
    if (i < trace.size() && trace[i].layer == table[i].layer && trace[i].shape == want)
      ++matched;
    else if (first_mismatch.empty())
      first_mismatch = std::string(table[i].layer) + " expected " + want.str() +
                       (i < trace.size() ? ", got " + trace[i].layer + " " + trace[i].shape.str() : "");
  }
  Check c{"table shapes", "full-scale WCNN-FFC layer dims at 512x1024",
          matched == static_cast<int>(table.size()) && !g.params().allocated(),
          static_cast<double>(matched), static_cast<double>(table.size()),
          std::to_string(matched) + "/" + std::to_string(table.size()) + " rows match" +
              (first_mismatch.empty() ? "" : "; first mismatch: " + first_mismatch)};
  return {c};
}

std::vector<Check> parameter_free() {
  std::vector<Check> out;
  for (auto [wcnn_variant, base_variant] :
       {std::pair{Variant::WcnnLFP, Variant::BaselineLFP}, std::pair{Variant::WcnnFFC, Variant::BaselineFFC}}) {
    ModelConfig cw, cb;
    cw.variant = wcnn_variant;
    cb.variant = base_variant;
    const NetworkGraph gw = build_model(cw), gb = build_model(cb);
    std::int64_t wavelet_params = 0;
    for (const auto& l : gw.layers())
      if (l.name.rfind("dwt", 0) == 0 || l.name.rfind("idwt", 0) == 0) wavelet_params += gw.layer_param_count(l.name);
    out.push_back(make("parameter-free", to_string(wcnn_variant) + ": DWT/iDWT parameters",
                       static_cast<double>(wavelet_params), 0.0));
    std::int64_t kernels = 0;
    for (const char* t : {"tconv4", "tconv3", "tconv2"}) kernels += gb.layer_param_count(t);
    const std::int64_t delta = gb.param_count() - gw.param_count();
    Check c{"parameter-free",
            to_string(base_variant) + " - " + to_string(wcnn_variant) + " == transposed unpool params",
            delta == kernels, static_cast<double>(delta), static_cast<double>(kernels),
            std::to_string(delta) + " vs " + std::to_string(kernels)};
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<Check> run_all(const Options& opts, const Reporter& report) {
  std::vector<Check> all;
  auto add = [&](std::vector<Check> checks) {
    for (auto& c : checks) {
      if (report) report(c);
      all.push_back(std::move(c));
    }
  };
  const auto f = filters(opts.corrupt_haar);
  add(reconstruction(f));
  add(adjoint(f));
  add(average_pooling(f));
  add(table_shapes());
  add(parameter_free());
  for (auto& c : gradients(opts.gradient_instances, 4, report)) all.push_back(std::move(c));
  return all;
}

}  // namespace wcnn::verify
