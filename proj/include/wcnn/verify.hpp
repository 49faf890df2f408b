#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wcnn/wavelet.hpp"

/// Self-checks of the mathematical invariants, shared by `wcnn verify` and
/// the acceptance tests.
namespace wcnn::verify {

struct Check {
  std::string suite;
  std::string property;
  bool passed = false;
  /// Measured value (an error or a count) and the bound it was held to.
  double value = 0.0;
  double bound = 0.0;
  std::string detail;
};

using Reporter = std::function<void(const Check&)>;

/// idwt2_multi(dwt2_multi(x, L)) == x on `tensors` random inputs for L = 1..4,
/// in f64 (max abs error <= 1e-12) and f32 (relative error <= 1e-5).
std::vector<Check> reconstruction(const wavelet::FilterPair& f, int tensors = 100, std::uint64_t seed = 1);

/// <A x, y> == <x, A^T y> for the analysis/synthesis pair and for
/// conv2d/conv_transpose2d.
std::vector<Check> adjoint(const wavelet::FilterPair& f, int trials = 20, std::uint64_t seed = 2);

/// The low-low band equals 2x2 stride-2 average pooling (<= 1e-14, f64).
std::vector<Check> average_pooling(const wavelet::FilterPair& f, int tensors = 100, std::uint64_t seed = 3);

/// Central finite differences (<= 1e-4 relative, f64) over `instances`
/// random instances of every differentiable operation.
std::vector<Check> gradients(int instances = 20, std::uint64_t seed = 4, const Reporter& progress = {});

/// Layer-by-layer dims of the full-scale WCNN-FFC for a 512x1024 input
/// against the published table (symbolic, nothing allocated).
std::vector<Check> table_shapes();

/// DWT/iDWT layers hold no parameters; each WCNN variant is smaller than its
/// matched baseline by exactly the three transposed-conv unpool kernels.
std::vector<Check> parameter_free();

struct Options {
  /// Negative control: perturbs the Haar high-pass synthesis filter.
  bool corrupt_haar = false;
  int gradient_instances = 20;
};

/// The Haar pair, or the deliberately broken one when requested.
wavelet::FilterPair filters(bool corrupt);

/// Runs every suite, calling `report` as each check completes.
std::vector<Check> run_all(const Options& opts, const Reporter& report = {});

/// One row of the published layer table: layer name, resolution divisor
/// relative to the input, and feature depth.
struct TableRow {
  const char* layer;
  std::int64_t divisor;
  std::int64_t depth;
};
const std::vector<TableRow>& published_table();

}  // namespace wcnn::verify
