#include "wcnn/layers.hpp"

#include "wcnn/kernels.hpp"

namespace wcnn::layers {

void declare_conv(ParamStore& store, const std::string& name, const ConvSpec& spec) {
  const std::int64_t fan_in = spec.in_c * spec.kernel * spec.kernel;
  store.declare({name + ".weight", {spec.out_c, spec.in_c, spec.kernel, spec.kernel}, Init::He, fan_in});
  if (spec.bias) store.declare({name + ".bias", {1, spec.out_c, 1, 1}, Init::Zeros, 1});
}

Shape conv_shape(Shape in, const ConvSpec& spec) {
  return kernels::conv2d_output_shape(in, {spec.out_c, spec.in_c, spec.kernel, spec.kernel},
                                      spec.stride, spec.pad);
}

Var conv(Context& ctx, const std::string& name, const ConvSpec& spec, Var x) {
  std::optional<Var> bias;
  if (spec.bias) bias = ctx.param(name + ".bias");
  return ad::conv2d(x, ctx.param(name + ".weight"), bias, spec.stride, spec.pad);
}

void declare_batch_norm(ParamStore& store, const std::string& name, std::int64_t channels) {
  const Shape s{1, channels, 1, 1};
  store.declare({name + ".gamma", s, Init::Ones, 1});
  store.declare({name + ".beta", s, Init::Zeros, 1});
  store.declare({name + ".running_mean", s, Init::Zeros, 1, false});
  store.declare({name + ".running_var", s, Init::Ones, 1, false});
}

Var batch_norm(Context& ctx, const std::string& name, Var x) {
  return ad::batch_norm(x, ctx.param(name + ".gamma"), ctx.param(name + ".beta"),
                        ctx.batch_norm_state(name), ctx.training());
}

void declare_conv_bn(ParamStore& store, const std::string& name, const ConvBn& spec) {
  ConvSpec c = spec.conv;
  c.bias = !spec.batch_norm;
  declare_conv(store, name, c);
  if (spec.batch_norm) declare_batch_norm(store, name + ".bn", c.out_c);
}

Var conv_bn(Context& ctx, const std::string& name, const ConvBn& spec, Var x) {
  ConvSpec c = spec.conv;
  c.bias = !spec.batch_norm;
  Var y = conv(ctx, name, c, x);
  if (spec.batch_norm) y = batch_norm(ctx, name + ".bn", y);
  return spec.relu ? ad::relu(y) : y;
}

// ---------------------------------------------------------------------------
// Residual and upconvolution blocks

namespace {

struct BlockParts {
  ConvBn a, b, c, proj;
};

BlockParts parts(const ResidualBlock& r) {
  BlockParts p;
  p.a = {{r.in_c, r.mid_c, 1, 1, 0}, r.batch_norm, true};
  p.b = {{r.mid_c, r.mid_c, 3, r.stride, 1}, r.batch_norm, true};
  p.c = {{r.mid_c, r.out_c, 1, 1, 0}, r.batch_norm, false};
  p.proj = {{r.in_c, r.out_c, 1, r.stride, 0}, r.batch_norm, false};
  return p;
}

}  // namespace

void ResidualBlock::declare(ParamStore& store, const std::string& prefix) const {
  if (in_c < 1 || mid_c < 1 || out_c < 1 || stride < 1)
    throw ConfigError("residual block '" + prefix + "': non-positive channels or stride");
  const BlockParts p = parts(*this);
  declare_conv_bn(store, prefix + ".a", p.a);
  declare_conv_bn(store, prefix + ".b", p.b);
  declare_conv_bn(store, prefix + ".c", p.c);
  if (has_projection()) declare_conv_bn(store, prefix + ".proj", p.proj);
}

Shape ResidualBlock::out_shape(Shape in) const {
  if (in.c != in_c)
    throw ShapeError("residual block expects " + std::to_string(in_c) + " channels, got " + in.str());
  const BlockParts p = parts(*this);
  Shape s = conv_shape(conv_shape(conv_shape(in, p.a.conv), p.b.conv), p.c.conv);
  if (has_projection() && conv_shape(in, p.proj.conv) != s)
    throw ContractError("residual block: shortcut " + conv_shape(in, p.proj.conv).str() +
                        " disagrees with branch " + s.str());
  return s;
}

Var ResidualBlock::forward(Context& ctx, const std::string& prefix, Var x) const {
  const BlockParts p = parts(*this);
  Var branch = conv_bn(ctx, prefix + ".a", p.a, x);
  branch = conv_bn(ctx, prefix + ".b", p.b, branch);
  branch = conv_bn(ctx, prefix + ".c", p.c, branch);
  Var shortcut = has_projection() ? conv_bn(ctx, prefix + ".proj", p.proj, x) : x;
  if (shortcut.shape() != branch.shape())
    throw ContractError("residual block '" + prefix + "': shortcut " + shortcut.shape().str() +
                        " disagrees with branch " + branch.shape().str());
  return ad::relu(ad::add(shortcut, branch));
}

void UpconvBlock::declare(ParamStore& store, const std::string& prefix) const {
  if (in_c < 1 || out_c < 1 || blocks < 0)
    throw ConfigError("upconv block '" + prefix + "': invalid channels or block count");
  // Transposed weight layout is (in, out, kh, kw); every output pixel sees
  // exactly one tap per input channel, hence fan_in = in_c.
  store.declare({prefix + ".up.weight", {in_c, out_c, 2, 2}, Init::He, in_c});
  if (batch_norm)
    declare_batch_norm(store, prefix + ".up.bn", out_c);
  else
    store.declare({prefix + ".up.bias", {1, out_c, 1, 1}, Init::Zeros, 1});
  for (int i = 0; i < blocks; ++i)
    ResidualBlock{out_c, out_c, out_c, 1, batch_norm}.declare(store, prefix + ".block" + std::to_string(i));
}

Shape UpconvBlock::out_shape(Shape in) const {
  if (in.c != in_c)
    throw ShapeError("upconv block expects " + std::to_string(in_c) + " channels, got " + in.str());
  return {in.n, out_c, in.h * 2, in.w * 2};
}

Var UpconvBlock::forward(Context& ctx, const std::string& prefix, Var x) const {
  std::optional<Var> bias;
  if (!batch_norm) bias = ctx.param(prefix + ".up.bias");
  Var y = ad::conv_transpose2d(x, ctx.param(prefix + ".up.weight"), bias, 2, 0);
  if (batch_norm) y = layers::batch_norm(ctx, prefix + ".up.bn", y);
  y = ad::relu(y);
  const ResidualBlock block{out_c, out_c, out_c, 1, batch_norm};
  for (int i = 0; i < blocks; ++i) y = block.forward(ctx, prefix + ".block" + std::to_string(i), y);
  return y;
}

// ---------------------------------------------------------------------------
// Unpooling

Shape wavelet_unpool_shape(Shape y_ll_tilde, Shape lh, Shape hl, Shape hh, Shape skip) {
  const std::pair<const char*, Shape> highs[] = {{"y_lh", lh}, {"y_hl", hl}, {"y_hh", hh}};
  for (const auto& [name, s] : highs)
    if (s != y_ll_tilde)
      throw ShapeError(std::string("wavelet_unpool: ") + name + " " + s.str() +
                       " does not match y_ll_tilde " + y_ll_tilde.str());
  const Shape expect{y_ll_tilde.n, y_ll_tilde.c, y_ll_tilde.h * 2, y_ll_tilde.w * 2};
  if (skip != expect)
    throw ShapeError("wavelet_unpool: skip " + skip.str() + " does not match expected " +
                     expect.str() + " (twice the spatial size of y_ll_tilde)");
  return expect;
}

Var wavelet_unpool(Var y_ll_tilde, Var lh, Var hl, Var hh, Var skip, const wavelet::FilterPair& f) {
  wavelet_unpool_shape(y_ll_tilde.shape(), lh.shape(), hl.shape(), hh.shape(), skip.shape());
  return ad::add(wavelet::idwt2(y_ll_tilde, lh, hl, hh, f), skip);
}

void TransposedUnpool::declare(ParamStore& store, const std::string& prefix) const {
  store.declare({prefix + ".weight", {channels, channels, 2, 2}, Init::He, channels});
  store.declare({prefix + ".bias", {1, channels, 1, 1}, Init::Zeros, 1});
}

Shape TransposedUnpool::out_shape(Shape x, Shape skip) const {
  const Shape expect{x.n, channels, x.h * 2, x.w * 2};
  if (x.c != channels)
    throw ShapeError("transposed_unpool expects " + std::to_string(channels) + " channels, got " + x.str());
  if (skip != expect)
    throw ShapeError("transposed_unpool: skip " + skip.str() + " does not match upsampled " + expect.str());
  return expect;
}

Var TransposedUnpool::forward(Context& ctx, const std::string& prefix, Var x, Var skip) const {
  out_shape(x.shape(), skip.shape());
  Var up = ad::conv_transpose2d(x, ctx.param(prefix + ".weight"), ctx.param(prefix + ".bias"), 2, 0);
  return ad::add(up, skip);
}

// ---------------------------------------------------------------------------
// Pyramids

void PyramidConfig::validate() const {
  if (levels < 1) throw ConfigError("pyramid: levels must be >= 1, got " + std::to_string(levels));
  if (in_c < 1 || out_c < 1 || level_width < 1) throw ConfigError("pyramid: channel counts must be >= 1");
  if (kind == PyramidKind::LFP && level_width * levels != in_c)
    throw ConfigError("LFP pyramid: " + std::to_string(levels) + " levels x " +
                      std::to_string(level_width) + " channels = " + std::to_string(levels * level_width) +
                      " cannot be added to the " + std::to_string(in_c) + "-channel input");
  if (kind == PyramidKind::FFC && level_width != in_c)
    throw ConfigError("FFC pyramid: per-level width " + std::to_string(level_width) +
                      " must equal the input depth " + std::to_string(in_c));
}

PyramidConfig PyramidConfig::make(PyramidKind kind, std::int64_t in_c, std::int64_t out_c, int levels) {
  PyramidConfig cfg;
  cfg.kind = kind;
  cfg.levels = levels;
  cfg.in_c = in_c;
  cfg.out_c = out_c;
  cfg.level_width = kind == PyramidKind::LFP ? in_c / std::max(levels, 1) : in_c;
  cfg.validate();
  return cfg;
}

void Pyramid::check_input(Shape in) const {
  cfg.validate();
  if (in.c != cfg.in_c)
    throw ShapeError("pyramid expects " + std::to_string(cfg.in_c) + " channels, got " + in.str());
  const std::int64_t f = std::int64_t{1} << cfg.levels;
  if (in.h % f != 0 || in.w % f != 0)
    throw ShapeError("pyramid: input " + in.str() + " not divisible by 2^" + std::to_string(cfg.levels));
}

void Pyramid::declare(ParamStore& store, const std::string& prefix) const {
  cfg.validate();
  const std::int64_t conv_in = cfg.in_c;
  for (int k = 1; k <= cfg.levels; ++k) {
    // LFP convs always read an unconvolved low band of conv5's depth; FFC
    // convs read the previous conv output, which has the same depth.
    declare_conv(store, prefix + ".conv_p" + std::to_string(k), {conv_in, cfg.level_width, 1, 1, 0, true});
  }
  declare_conv(store, prefix + ".conv_pyr", {cfg.in_c, cfg.out_c, 1, 1, 0, true});
}

Shape Pyramid::out_shape(Shape in) const {
  check_input(in);
  return {in.n, cfg.out_c, in.h, in.w};
}

std::vector<TraceRow> Pyramid::trace(Shape in) const {
  check_input(in);
  std::vector<TraceRow> rows;
  const bool lfp = cfg.kind == PyramidKind::LFP;
  Shape s = in;
  std::string src = "conv5";
  for (int k = 1; k <= cfg.levels; ++k) {
    const std::string tag = std::to_string(k);
    s = {s.n, s.c, s.h / 2, s.w / 2};
    rows.push_back({"dwt_p" + tag, "G_h", src, s});
    rows.push_back({"conv_p" + tag, "(1x1, " + std::to_string(cfg.level_width) + ")", "Y^ll_p" + tag,
                    {s.n, cfg.level_width, s.h, s.w}});
    src = lfp ? "Y^ll_p" + tag : "conv_p" + tag;
  }
  if (lfp) {
    rows.push_back({"concat", "concatenation", "conv_p1..conv_p" + std::to_string(cfg.levels),
                    {in.n, cfg.level_width * cfg.levels, in.h, in.w}});
    rows.push_back({"conv_pyr", "(1x1, " + std::to_string(cfg.out_c) + ")", "concat + conv5",
                    {in.n, cfg.out_c, in.h, in.w}});
  } else {
    for (int k = cfg.levels; k >= 1; --k) {
      const std::string tag = std::to_string(k);
      const std::int64_t div = std::int64_t{1} << (k - 1);
      const std::string input = k == cfg.levels ? "conv_p" + tag
                                                : "conv_p" + tag + " + idwt_p" + std::to_string(k + 1);
      rows.push_back({"idwt_p" + tag, "G_h^-1", input, {in.n, cfg.in_c, in.h / div, in.w / div}});
    }
    rows.push_back({"conv_pyr", "(1x1, " + std::to_string(cfg.out_c) + ")", "idwt_p1 + conv5",
                    {in.n, cfg.out_c, in.h, in.w}});
  }
  return rows;
}

Var Pyramid::features(Context& ctx, const std::string& prefix, Var x, bool skip_adds) const {
  check_input(x.shape());
  auto level_conv = [&](int k, Var v) {
    return conv(ctx, prefix + ".conv_p" + std::to_string(k), {cfg.in_c, cfg.level_width, 1, 1, 0, true}, v);
  };
  const Shape in = x.shape();

  if (cfg.kind == PyramidKind::LFP) {
    std::vector<Var> parts;
    Var low = x;
    for (int k = 1; k <= cfg.levels; ++k) {
      low = wavelet::dwt2(low).ll;
      parts.push_back(ad::resize_bilinear(level_conv(k, low), in.h, in.w));
    }
    Var cat = ad::concat_channels(parts);
    return skip_adds ? ad::add(cat, x) : cat;
  }

  std::vector<Var> convs;
  std::vector<wavelet::SubbandVars> bands;
  Var run = x;
  for (int k = 1; k <= cfg.levels; ++k) {
    bands.push_back(wavelet::dwt2(run));
    run = level_conv(k, bands.back().ll);
    convs.push_back(run);
  }
  Var up = convs.back();
  for (int k = cfg.levels - 1; k >= 0; --k) {
    Var ll = (k == cfg.levels - 1 || !skip_adds) ? up : ad::add(convs[k], up);
    up = wavelet::idwt2(ll, bands[k].lh, bands[k].hl, bands[k].hh);
  }
  return skip_adds ? ad::add(up, x) : up;
}

Var Pyramid::forward(Context& ctx, const std::string& prefix, Var x) const {
  Var f = features(ctx, prefix, x, true);
  return ad::relu(conv(ctx, prefix + ".conv_pyr", {cfg.in_c, cfg.out_c, 1, 1, 0, true}, f));
}

void ConvPyramid::declare(ParamStore& store, const std::string& prefix) const {
  declare_conv(store, prefix, {in_c, out_c, 1, 1, 0, true});
}

Shape ConvPyramid::out_shape(Shape in) const {
  if (in.c != in_c)
    throw ShapeError("pyramid conv expects " + std::to_string(in_c) + " channels, got " + in.str());
  return {in.n, out_c, in.h, in.w};
}

Var ConvPyramid::forward(Context& ctx, const std::string& prefix, Var x) const {
  return ad::relu(conv(ctx, prefix, {in_c, out_c, 1, 1, 0, true}, x));
}

}  // namespace wcnn::layers
