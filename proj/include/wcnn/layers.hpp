#pragma once

#include <string>
#include <vector>

#include "wcnn/autodiff.hpp"
#include "wcnn/params.hpp"
#include "wcnn/wavelet.hpp"

namespace wcnn::layers {

/// One row of a symbolic shape trace.
struct TraceRow {
  std::string layer;
  std::string operation;
  std::string input;
  Shape shape;
};

struct ConvSpec {
  std::int64_t in_c = 1;
  std::int64_t out_c = 1;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  bool bias = false;
};

void declare_conv(ParamStore& store, const std::string& name, const ConvSpec& spec);
Shape conv_shape(Shape in, const ConvSpec& spec);
Var conv(Context& ctx, const std::string& name, const ConvSpec& spec, Var x);

/// Convolution followed by optional batch norm and optional ReLU. Without
/// batch norm the convolution carries a bias instead.
struct ConvBn {
  ConvSpec conv;
  bool batch_norm = true;
  bool relu = true;
};

void declare_conv_bn(ParamStore& store, const std::string& name, const ConvBn& spec);
Var conv_bn(Context& ctx, const std::string& name, const ConvBn& spec, Var x);

void declare_batch_norm(ParamStore& store, const std::string& name, std::int64_t channels);
Var batch_norm(Context& ctx, const std::string& name, Var x);

/// Bottleneck block [(1x1, mid), (3x3, mid, stride), (1x1, out)] with an
/// identity or 1x1 projection shortcut; out = relu(shortcut + branch).
struct ResidualBlock {
  std::int64_t in_c = 1;
  std::int64_t mid_c = 1;
  std::int64_t out_c = 1;
  int stride = 1;
  bool batch_norm = true;

  bool has_projection() const { return in_c != out_c || stride != 1; }
  void declare(ParamStore& store, const std::string& prefix) const;
  Shape out_shape(Shape in) const;
  Var forward(Context& ctx, const std::string& prefix, Var x) const;
};

/// 2x2 stride-2 transposed conv (+BN, ReLU) followed by `blocks` residual
/// blocks of (out_c, out_c).
struct UpconvBlock {
  std::int64_t in_c = 1;
  std::int64_t out_c = 1;
  int blocks = 1;
  bool batch_norm = true;

  void declare(ParamStore& store, const std::string& prefix) const;
  Shape out_shape(Shape in) const;
  Var forward(Context& ctx, const std::string& prefix, Var x) const;
};

/// idwt(y_ll_tilde, highs) + skip. Parameter-free.
Var wavelet_unpool(Var y_ll_tilde, Var lh, Var hl, Var hh, Var skip,
                   const wavelet::FilterPair& f = wavelet::haar_filters());
/// Validates the five input shapes; the error names the offending input.
Shape wavelet_unpool_shape(Shape y_ll_tilde, Shape lh, Shape hl, Shape hh, Shape skip);

/// Channel-preserving 2x2 stride-2 transposed conv with bias, plus skip.
struct TransposedUnpool {
  std::int64_t channels = 1;

  void declare(ParamStore& store, const std::string& prefix) const;
  Shape out_shape(Shape x, Shape skip) const;
  Var forward(Context& ctx, const std::string& prefix, Var x, Var skip) const;
};

enum class PyramidKind { LFP, FFC };

struct PyramidConfig {
  PyramidKind kind = PyramidKind::FFC;
  int levels = 4;
  std::int64_t in_c = 2048;
  /// Per-level conv width; LFP requires levels * level_width == in_c, FFC
  /// requires level_width == in_c.
  std::int64_t level_width = 2048;
  std::int64_t out_c = 1024;

  /// Throws ConfigError on inconsistent channel arithmetic.
  void validate() const;
  /// Default widths for a given conv5 depth.
  static PyramidConfig make(PyramidKind kind, std::int64_t in_c, std::int64_t out_c, int levels);
};

/// Wavelet pyramid over conv5 (LFP or FFC variant).
struct Pyramid {
  PyramidConfig cfg;

  void declare(ParamStore& store, const std::string& prefix) const;
  Shape out_shape(Shape in) const;
  /// Per-layer trace in the style of the pyramid configuration table.
  std::vector<TraceRow> trace(Shape in) const;
  Var forward(Context& ctx, const std::string& prefix, Var x) const;

  /// Features just before the final projection. With `skip_adds` false the
  /// FFC ascent and the conv5 addition are left out; inspection only.
  Var features(Context& ctx, const std::string& prefix, Var x, bool skip_adds = true) const;

 private:
  void check_input(Shape in) const;
};

/// The baseline replacement for a pyramid: 1x1 conv with bias and ReLU.
struct ConvPyramid {
  std::int64_t in_c = 2048;
  std::int64_t out_c = 1024;

  void declare(ParamStore& store, const std::string& prefix) const;
  Shape out_shape(Shape in) const;
  Var forward(Context& ctx, const std::string& prefix, Var x) const;
};

}  // namespace wcnn::layers
