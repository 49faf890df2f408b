#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "wcnn/layers.hpp"
#include "wcnn/params.hpp"

namespace wcnn {

enum class Variant { Baseline, BaselineLFP, BaselineFFC, WcnnLFP, WcnnFFC };

std::string to_string(Variant v);
/// Accepts the canonical names case-insensitively, with or without dashes
/// and underscores; the error lists every valid name.
Variant parse_variant(const std::string& name);
const std::vector<Variant>& all_variants();
bool uses_wavelet_unpool(Variant v);
std::optional<layers::PyramidKind> pyramid_kind(Variant v);
/// The variant with the same pyramid but the other unpooling scheme.
Variant matched_variant(Variant v);

struct ModelConfig {
  Variant variant = Variant::WcnnFFC;
  double width_mult = 1.0;
  /// Residual blocks of conv2_x, conv3, conv4 and conv5, counting the
  /// strided first block of conv3..conv5.
  std::vector<int> blocks_per_stage{3, 4, 23, 3};
  /// Residual blocks of dconv4_x, dconv3_x, dconv2_x, upconv2_x, upconv1_x.
  std::vector<int> decoder_blocks{3, 3, 3, 3, 2};
  int num_classes = 19;
  std::int64_t input_h = 512;
  std::int64_t input_w = 1024;
  /// 0 picks the deepest pyramid (at most 4) that conv5 of input_dims allows;
  /// for LFP the level count must also divide the conv5 depth.
  int pyramid_levels = 0;
  bool batch_norm = true;

  /// Throws ConfigError describing the first problem.
  void validate() const;
  /// Channel count after width scaling: nearest multiple of 4, at least 4.
  std::int64_t channels(std::int64_t full) const;
  int resolved_pyramid_levels() const;
};

/// A layer's output: the main tensor and, for DWT layers, the cached high
/// bands (lh, hl, hh).
struct Activation {
  Var main;
  std::optional<std::array<Var, 3>> highs;
};

namespace graph {

struct Stem {
  layers::ConvBn conv;
};
struct MaxPool {};
struct ResStage {
  std::vector<layers::ResidualBlock> blocks;
};
struct Dwt {};
struct WaveletPyramid {
  layers::Pyramid pyramid;
};
struct ConvPyramid {
  layers::ConvPyramid conv;
};
/// inputs: decoder feature, DWT layer, skip.
struct WaveletUnpool {};
/// inputs: decoder feature, skip.
struct TransposedUnpool {
  layers::TransposedUnpool unpool;
};
struct Upconv {
  layers::UpconvBlock block;
};
struct Classifier {
  layers::ConvSpec conv;
};

using Op = std::variant<Stem, MaxPool, ResStage, Dwt, WaveletPyramid, ConvPyramid, WaveletUnpool,
                        TransposedUnpool, Upconv, Classifier>;

}  // namespace graph

struct LayerNode {
  std::string name;
  std::string operation;
  /// Names of producer layers; "input" denotes the image batch.
  std::vector<std::string> inputs;
  graph::Op op;
};

/// High-band route from an encoder DWT layer to the decoder iDWT using it.
struct Route {
  std::string producer;
  std::string consumer;
};

class NetworkGraph {
 public:
  explicit NetworkGraph(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<LayerNode>& layers() const { return layers_; }
  const std::vector<Route>& routes() const { return routes_; }
  const LayerNode& layer(const std::string& name) const;

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  /// He initialization of all weights; allocation happens here.
  void initialize(std::uint64_t seed, DType dtype = DType::f32);

  std::int64_t param_count() const { return store_.trainable_count(); }
  std::int64_t layer_param_count(const std::string& name) const;

  /// Input spatial dims must be multiples of this.
  std::int64_t granularity() const;
  /// Throws ShapeError unless `s` is a valid image batch for this graph.
  void check_input(Shape s) const;

  /// Symbolic output shapes of every layer; allocates nothing.
  std::vector<layers::TraceRow> shape_trace(std::int64_t h, std::int64_t w, std::int64_t n = 1) const;
  /// Per-layer trace of the pyramid, if the variant has one.
  std::vector<layers::TraceRow> pyramid_trace(std::int64_t h, std::int64_t w) const;

  /// Runs every layer; result[i] is the output of layers()[i].
  std::vector<Activation> forward_all(Context& ctx, Var input) const;
  /// Per-pixel class logits.
  Var forward(Context& ctx, Var input) const;

 private:
  ModelConfig cfg_;
  std::vector<LayerNode> layers_;
  std::vector<Route> routes_;
  ParamStore store_;
};

NetworkGraph build_model(const ModelConfig& cfg);

/// Eval-mode logits without recording gradients.
Tensor forward(NetworkGraph& g, const Tensor& batch);
std::int64_t param_count(const NetworkGraph& g);

}  // namespace wcnn
