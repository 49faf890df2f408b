#include "wcnn/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "wcnn/wavelet.hpp"

namespace wcnn {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

const char* const kVariantNames[] = {"baseline", "baseline-lfp", "baseline-ffc", "wcnn-lfp", "wcnn-ffc"};

std::string squash(const std::string& s) {
  std::string out;
  for (char ch : s)
    if (ch != '-' && ch != '_' && ch != ' ') out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

std::string res_label(std::int64_t mid, std::int64_t out, std::size_t count, int stride) {
  std::string s = "resblock (" + std::to_string(mid) + ", " + std::to_string(out) + ")";
  if (count != 1) s += "x" + std::to_string(count);
  if (stride == 2) s += ", s2";
  return s;
}

}  // namespace

std::string to_string(Variant v) { return kVariantNames[static_cast<int>(v)]; }

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> all{Variant::Baseline, Variant::BaselineLFP, Variant::BaselineFFC,
                                        Variant::WcnnLFP, Variant::WcnnFFC};
  return all;
}

Variant parse_variant(const std::string& name) {
  for (Variant v : all_variants())
    if (squash(name) == squash(to_string(v))) return v;
  std::string valid;
  for (Variant v : all_variants()) valid += (valid.empty() ? "" : ", ") + to_string(v);
  throw ConfigError("unknown model variant '" + name + "'; expected one of: " + valid);
}

bool uses_wavelet_unpool(Variant v) { return v == Variant::WcnnLFP || v == Variant::WcnnFFC; }

std::optional<layers::PyramidKind> pyramid_kind(Variant v) {
  switch (v) {
    case Variant::BaselineLFP:
    case Variant::WcnnLFP:
      return layers::PyramidKind::LFP;
    case Variant::BaselineFFC:
    case Variant::WcnnFFC:
      return layers::PyramidKind::FFC;
    case Variant::Baseline:
      break;
  }
  return std::nullopt;
}

Variant matched_variant(Variant v) {
  switch (v) {
    case Variant::BaselineLFP: return Variant::WcnnLFP;
    case Variant::BaselineFFC: return Variant::WcnnFFC;
    case Variant::WcnnLFP: return Variant::BaselineLFP;
    case Variant::WcnnFFC: return Variant::BaselineFFC;
    case Variant::Baseline: break;
  }
  throw ConfigError("the plain baseline has no matched WCNN variant");
}

// ---------------------------------------------------------------------------
// ModelConfig

std::int64_t ModelConfig::channels(std::int64_t full) const {
  const auto scaled = static_cast<std::int64_t>(std::lround(static_cast<double>(full) * width_mult / 4.0)) * 4;
  return std::max<std::int64_t>(4, scaled);
}

int ModelConfig::resolved_pyramid_levels() const {
  if (pyramid_levels > 0) return pyramid_levels;
  const std::int64_t h5 = input_h / 32, w5 = input_w / 32;
  int levels = 0;
  while (levels < 4 && h5 % (std::int64_t{2} << levels) == 0 && w5 % (std::int64_t{2} << levels) == 0) ++levels;
  // LFP splits conv5 channels evenly across levels.
  if (pyramid_kind(variant) == layers::PyramidKind::LFP)
    while (levels > 1 && channels(2048) % levels != 0) --levels;
  return levels;
}

void ModelConfig::validate() const {
  if (!(width_mult > 0.0) || !std::isfinite(width_mult))
    throw ConfigError("model.width_mult must be a positive number");
  if (blocks_per_stage.size() != 4)
    throw ConfigError("model.blocks_per_stage needs 4 entries (conv2..conv5), got " +
                      std::to_string(blocks_per_stage.size()));
  for (std::size_t i = 0; i < 4; ++i)
    if (blocks_per_stage[i] < 1)
      throw ConfigError("model.blocks_per_stage entry " + std::to_string(i) + " must be >= 1");
  if (decoder_blocks.size() != 5)
    throw ConfigError("model.decoder_blocks needs 5 entries (dconv4..dconv2, upconv2, upconv1), got " +
                      std::to_string(decoder_blocks.size()));
  for (std::size_t i = 0; i < 5; ++i)
    if (decoder_blocks[i] < (i < 3 ? 1 : 0))
      throw ConfigError("model.decoder_blocks entry " + std::to_string(i) + " must be >= " + (i < 3 ? "1" : "0"));
  if (num_classes < 1) throw ConfigError("model.num_classes must be >= 1");
  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0)
    throw ConfigError("model input dims " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                      " must be positive multiples of 32");
  if (pyramid_levels < 0) throw ConfigError("model.pyramid_levels must be >= 0 (0 = auto)");
  if (auto kind = pyramid_kind(variant)) {
    const int levels = resolved_pyramid_levels();
    if (levels < 1)
      throw ConfigError("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                        " leaves conv5 too small for a wavelet pyramid");
    const std::int64_t f = std::int64_t{32} << levels;
    if (input_h % f != 0 || input_w % f != 0)
      throw ConfigError(std::to_string(levels) + " pyramid levels need input dims divisible by " +
                        std::to_string(f) + ", got " + std::to_string(input_h) + "x" + std::to_string(input_w));
    const std::int64_t c5 = channels(2048);
    if (*kind == layers::PyramidKind::LFP && c5 % levels != 0)
      throw ConfigError("LFP pyramid: conv5 depth " + std::to_string(c5) + " is not divisible by " +
                        std::to_string(levels) + " levels");
  }
}

// ---------------------------------------------------------------------------
// Graph construction

NetworkGraph build_model(const ModelConfig& cfg) { return NetworkGraph(cfg); }

NetworkGraph::NetworkGraph(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const bool bn = cfg_.batch_norm;
  const bool wcnn = uses_wavelet_unpool(cfg_.variant);
  auto c = [&](std::int64_t full) { return cfg_.channels(full); };
  auto add = [&](std::string name, std::string operation, std::vector<std::string> inputs, graph::Op op) {
    layers_.push_back({std::move(name), std::move(operation), std::move(inputs), std::move(op)});
  };
  auto stage = [&](const std::string& name, const std::string& input, std::int64_t in, std::int64_t mid,
                   std::int64_t out, int count, int stride) {
    graph::ResStage s;
    for (int i = 0; i < count; ++i)
      s.blocks.push_back({i == 0 ? in : out, mid, out, i == 0 ? stride : 1, bn});
    std::string label = res_label(mid, out, s.blocks.size(), stride);
    add(name, std::move(label), {input}, std::move(s));
  };
  const auto& enc = cfg_.blocks_per_stage;
  const auto& dec = cfg_.decoder_blocks;

  add("conv1", "(7x7, " + std::to_string(c(64)) + "), s2", {"input"},
      graph::Stem{{{3, c(64), 7, 2, 3}, bn, true}});
  add("maxpool", "(2x2), s2", {"conv1"}, graph::MaxPool{});
  stage("conv2_x", "maxpool", c(64), c(64), c(256), enc[0], 1);
  if (wcnn) add("dwt2", "G_h", {"conv2_x"}, graph::Dwt{});
  stage("conv3_1", "conv2_x", c(256), c(128), c(512), 1, 2);
  stage("conv3_x", "conv3_1", c(512), c(128), c(512), enc[1] - 1, 1);
  if (wcnn) add("dwt3", "G_h", {"conv3_x"}, graph::Dwt{});
  stage("conv4_1", "conv3_x", c(512), c(256), c(1024), 1, 2);
  stage("conv4_x", "conv4_1", c(1024), c(256), c(1024), enc[2] - 1, 1);
  if (wcnn) add("dwt4", "G_h", {"conv4_x"}, graph::Dwt{});
  stage("conv5_1", "conv4_x", c(1024), c(512), c(2048), 1, 2);
  stage("conv5_x", "conv5_1", c(2048), c(512), c(2048), enc[3] - 1, 1);

  if (auto kind = pyramid_kind(cfg_.variant)) {
    layers::Pyramid p{layers::PyramidConfig::make(*kind, c(2048), c(1024), cfg_.resolved_pyramid_levels())};
    add("pyramid", *kind == layers::PyramidKind::LFP ? "LFP pyramid" : "FFC pyramid", {"conv5_x"},
        graph::WaveletPyramid{p});
  } else {
    add("pyramid", "(1x1, " + std::to_string(c(1024)) + ")", {"conv5_x"},
        graph::ConvPyramid{{c(2048), c(1024)}});
  }

  auto unpool = [&](int k, const std::string& decoder, const std::string& skip, std::int64_t channels) {
    const std::string tag = std::to_string(k);
    if (wcnn) {
      add("idwt" + tag, "G_h^-1", {decoder, "dwt" + tag, skip}, graph::WaveletUnpool{});
      routes_.push_back({"dwt" + tag, "idwt" + tag});
      return "idwt" + tag;
    }
    add("tconv" + tag, "(2x2, " + std::to_string(channels) + "), transposed s2", {decoder, skip},
        graph::TransposedUnpool{{channels}});
    return "tconv" + tag;
  };
  stage("dconv4_x", unpool(4, "pyramid", "conv4_x", c(1024)), c(1024), c(256), c(512), dec[0], 1);
  stage("dconv3_x", unpool(3, "dconv4_x", "conv3_x", c(512)), c(512), c(128), c(256), dec[1], 1);
  stage("dconv2_x", unpool(2, "dconv3_x", "conv2_x", c(256)), c(256), c(64), c(128), dec[2], 1);
  add("upconv2_x", "upconv (" + std::to_string(c(64)) + ", " + std::to_string(c(64)) + ")x" + std::to_string(dec[3]),
      {"dconv2_x"}, graph::Upconv{{c(128), c(64), dec[3], bn}});
  add("upconv1_x", "upconv (" + std::to_string(c(64)) + ", " + std::to_string(c(64)) + ")x" + std::to_string(dec[4]),
      {"upconv2_x"}, graph::Upconv{{c(64), c(64), dec[4], bn}});
  add("classifier", "(1x1, " + std::to_string(cfg_.num_classes) + ")", {"upconv1_x"},
      graph::Classifier{{c(64), cfg_.num_classes, 1, 1, 0, true}});

  for (const auto& node : layers_) {
    std::visit(Overloaded{
                   [&](const graph::Stem& s) { layers::declare_conv_bn(store_, node.name, s.conv); },
                   [&](const graph::ResStage& s) {
                     for (std::size_t i = 0; i < s.blocks.size(); ++i)
                       s.blocks[i].declare(store_, node.name + ".b" + std::to_string(i));
                   },
                   [&](const graph::WaveletPyramid& p) { p.pyramid.declare(store_, node.name); },
                   [&](const graph::ConvPyramid& p) { p.conv.declare(store_, node.name); },
                   [&](const graph::TransposedUnpool& t) { t.unpool.declare(store_, node.name); },
                   [&](const graph::Upconv& u) { u.block.declare(store_, node.name); },
                   [&](const graph::Classifier& k) { layers::declare_conv(store_, node.name, k.conv); },
                   [](const auto&) {},
               },
               node.op);
  }
}

const LayerNode& NetworkGraph::layer(const std::string& name) const {
  for (const auto& node : layers_)
    if (node.name == name) return node;
  throw ContractError("model has no layer named '" + name + "'");
}

void NetworkGraph::initialize(std::uint64_t seed, DType dtype) { store_.initialize(seed, dtype); }

std::int64_t NetworkGraph::layer_param_count(const std::string& name) const {
  layer(name);
  return store_.trainable_count(name + ".");
}

std::int64_t NetworkGraph::granularity() const {
  if (!pyramid_kind(cfg_.variant)) return 32;
  return std::int64_t{32} << cfg_.resolved_pyramid_levels();
}

void NetworkGraph::check_input(Shape s) const {
  if (s.c != 3) throw ShapeError("model input must have 3 channels, got " + s.str());
  const std::int64_t g = granularity();
  if (s.h % g != 0 || s.w % g != 0)
    throw ShapeError("model input " + s.str() + ": spatial dims must be multiples of " + std::to_string(g));
}

// ---------------------------------------------------------------------------
// Shape inference

std::vector<layers::TraceRow> NetworkGraph::shape_trace(std::int64_t h, std::int64_t w, std::int64_t n) const {
  check_input({n, 3, h, w});
  std::map<std::string, Shape> shapes{{"input", {n, 3, h, w}}};
  std::vector<layers::TraceRow> rows;
  for (const auto& node : layers_) {
    std::vector<Shape> in;
    for (const auto& name : node.inputs) in.push_back(shapes.at(name));
    const Shape out = std::visit(
        Overloaded{
            [&](const graph::Stem& s) { return layers::conv_shape(in[0], s.conv.conv); },
            [&](const graph::MaxPool&) { return Shape{in[0].n, in[0].c, in[0].h / 2, in[0].w / 2}; },
            [&](const graph::ResStage& s) {
              Shape cur = in[0];
              for (const auto& b : s.blocks) cur = b.out_shape(cur);
              return cur;
            },
            [&](const graph::Dwt&) { return Shape{in[0].n, in[0].c, in[0].h / 2, in[0].w / 2}; },
            [&](const graph::WaveletPyramid& p) { return p.pyramid.out_shape(in[0]); },
            [&](const graph::ConvPyramid& p) { return p.conv.out_shape(in[0]); },
            [&](const graph::WaveletUnpool&) {
              return layers::wavelet_unpool_shape(in[0], in[1], in[1], in[1], in[2]);
            },
            [&](const graph::TransposedUnpool& t) { return t.unpool.out_shape(in[0], in[1]); },
            [&](const graph::Upconv& u) { return u.block.out_shape(in[0]); },
            [&](const graph::Classifier& k) { return layers::conv_shape(in[0], k.conv); },
        },
        node.op);
    shapes[node.name] = out;
    std::string input;
    for (const auto& name : node.inputs) input += (input.empty() ? "" : " + ") + name;
    rows.push_back({node.name, node.operation, input, out});
  }
  return rows;
}

std::vector<layers::TraceRow> NetworkGraph::pyramid_trace(std::int64_t h, std::int64_t w) const {
  const auto* p = std::get_if<graph::WaveletPyramid>(&layer("pyramid").op);
  if (!p) return {};
  for (const auto& row : shape_trace(h, w))
    if (row.layer == "conv5_x") return p->pyramid.trace(row.shape);
  return {};
}

// ---------------------------------------------------------------------------
// Forward

std::vector<Activation> NetworkGraph::forward_all(Context& ctx, Var input) const {
  check_input(input.shape());
  std::map<std::string, std::size_t> index;
  std::vector<Activation> acts;
  acts.reserve(layers_.size());
  auto get = [&](const std::string& name) -> const Activation& { return acts.at(index.at(name)); };
  const Activation image{input, std::nullopt};

  for (const auto& node : layers_) {
    const Activation& x = node.inputs[0] == "input" ? image : get(node.inputs[0]);
    Activation out = std::visit(
        Overloaded{
            [&](const graph::Stem& s) { return Activation{layers::conv_bn(ctx, node.name, s.conv, x.main), {}}; },
            [&](const graph::MaxPool&) { return Activation{ad::max_pool2x2(x.main), {}}; },
            [&](const graph::ResStage& s) {
              Var v = x.main;
              for (std::size_t i = 0; i < s.blocks.size(); ++i)
                v = s.blocks[i].forward(ctx, node.name + ".b" + std::to_string(i), v);
              return Activation{v, {}};
            },
            [&](const graph::Dwt&) {
              auto b = wavelet::dwt2(x.main);
              return Activation{b.ll, std::array<Var, 3>{b.lh, b.hl, b.hh}};
            },
            [&](const graph::WaveletPyramid& p) {
              return Activation{p.pyramid.forward(ctx, node.name, x.main), {}};
            },
            [&](const graph::ConvPyramid& p) { return Activation{p.conv.forward(ctx, node.name, x.main), {}}; },
            [&](const graph::WaveletUnpool&) {
              const auto& highs = *get(node.inputs[1]).highs;
              return Activation{
                  layers::wavelet_unpool(x.main, highs[0], highs[1], highs[2], get(node.inputs[2]).main), {}};
            },
            [&](const graph::TransposedUnpool& t) {
              return Activation{t.unpool.forward(ctx, node.name, x.main, get(node.inputs[1]).main), {}};
            },
            [&](const graph::Upconv& u) { return Activation{u.block.forward(ctx, node.name, x.main), {}}; },
            [&](const graph::Classifier& k) { return Activation{layers::conv(ctx, node.name, k.conv, x.main), {}}; },
        },
        node.op);
    index[node.name] = acts.size();
    acts.push_back(std::move(out));
  }
  return acts;
}

Var NetworkGraph::forward(Context& ctx, Var input) const { return forward_all(ctx, input).back().main; }

Tensor forward(NetworkGraph& g, const Tensor& batch) {
  Tape tape(false);
  Context ctx(tape, g.params(), false);
  Tensor x = batch.dtype() == g.params().dtype() ? batch : batch.cast(g.params().dtype());
  return g.forward(ctx, ad::constant(tape, std::move(x))).value();
}

std::int64_t param_count(const NetworkGraph& g) { return g.param_count(); }

}  // namespace wcnn
