#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "wcnn/tensor.hpp"

namespace wcnn::data {

inline constexpr int kIgnoreLabel = 255;

/// 8-bit image, interleaved channels, row-major.
struct Image8 {
  std::int64_t h = 0;
  std::int64_t w = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Reads gray, gray+alpha, RGB or RGBA (8 or 16 bit); alpha is dropped and
/// 16-bit samples are reduced to their high byte. Palette images expand to RGB.
Image8 read_png(const std::filesystem::path& path);
/// Writes 1-channel (gray) or 3-channel (RGB) 8-bit PNGs.
void write_png(const std::filesystem::path& path, const Image8& image);

struct SegmentationSample {
  std::string name;
  /// 1x3xhxw, f32, values in [0, 1].
  Tensor image;
  /// n = 1.
  LabelMap labels;
};

struct Dataset {
  std::vector<SegmentationSample> samples;
  int num_classes = 0;
  int ignore_label = kIgnoreLabel;

  bool empty() const { return samples.empty(); }
  std::size_t size() const { return samples.size(); }
};

/// Loads {root}/{split}/images/*.png paired by file stem with
/// {root}/{split}/labels/*.png, sorted by name. A missing or empty split
/// yields an empty dataset and a warning on `warn`.
Dataset load_dataset(const std::filesystem::path& root, const std::string& split, int num_classes,
                     int ignore_label = kIgnoreLabel, std::ostream* warn = nullptr);

/// Writes a dataset in the layout load_dataset reads.
void save_dataset(const Dataset& ds, const std::filesystem::path& root, const std::string& split);

/// Random colored shapes on a textured background; class 0 is background,
/// then rectangles, circles, stripes, triangles and rings. Deterministic
/// per seed; pixel values are multiples of 1/255.
Dataset synth_generate(std::uint64_t seed, std::size_t n, std::int64_t h, std::int64_t w, int num_classes = 4);

/// Fraction of non-ignored pixels per class; sums to one.
std::vector<double> class_frequency(const Dataset& ds);

struct Batch {
  Tensor images;
  LabelMap labels;
};
Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices, DType dtype = DType::f32);

/// Image tensor (1x3xhxw) from an 8-bit image; gray is replicated.
Tensor to_tensor(const Image8& image);

}  // namespace wcnn::data
