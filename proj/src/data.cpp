#include "wcnn/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <ostream>

#include "wcnn/errors.hpp"
#include "wcnn/random.hpp"

namespace wcnn::data {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

}  // namespace

Image8 read_png(const fs::path& path) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DataError(path.string() + " is not a PNG file");

  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_fail, png_warn);
  if (!png) throw Error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("cannot decode " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img.w = png_get_image_width(png, info);
  img.h = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  const auto stride = png_get_rowbytes(png, info);
  img.pixels.resize(stride * static_cast<std::size_t>(img.h));
  rows.resize(static_cast<std::size_t>(img.h));
  for (std::int64_t y = 0; y < img.h; ++y) rows[y] = img.pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const fs::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ContractError("write_png: expected 1 or 3 channels, got " + std::to_string(img.channels));
  if (img.pixels.size() != static_cast<std::size_t>(img.h * img.w * img.channels))
    throw ContractError("write_png: pixel buffer size does not match dims");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  File file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("cannot write " + path.string());

  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_fail, png_warn);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.h));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("cannot encode " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const auto stride = static_cast<std::size_t>(img.w * img.channels);
  for (std::int64_t y = 0; y < img.h; ++y)
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * stride);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor to_tensor(const Image8& img) {
  Tensor t({1, 3, img.h, img.w}, DType::f32);
  auto d = t.data<float>();
  const auto plane = img.h * img.w;
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const int src = img.channels >= 3 ? c : 0;
      d[c * plane + i] = static_cast<float>(img.pixels[i * img.channels + src]) / 255.0f;
    }
  return t;
}

namespace {

Image8 from_tensor(const Tensor& t) {
  Image8 img{t.shape().h, t.shape().w, 3, {}};
  const auto plane = img.h * img.w;
  img.pixels.resize(static_cast<std::size_t>(plane * 3));
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(t.flat(c * plane + i), 0.0, 1.0);
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

std::map<std::string, fs::path> pngs_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") out.emplace(entry.path().stem().string(), entry.path());
  }
  return out;
}

}  // namespace

Dataset load_dataset(const fs::path& root, const std::string& split, int num_classes, int ignore_label,
                     std::ostream* warn) {
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  Dataset ds;
  ds.num_classes = num_classes;
  ds.ignore_label = ignore_label;

  const fs::path base = root / split;
  const auto images = pngs_by_stem(base / "images");
  const auto labels = pngs_by_stem(base / "labels");
  if (images.empty() && labels.empty()) {
    if (warn) *warn << "warning: no samples found under " << base.string() << "\n";
    return ds;
  }
  for (const auto& [stem, path] : images)
    if (!labels.count(stem)) throw DataError("image " + path.string() + " has no label map");
  for (const auto& [stem, path] : labels)
    if (!images.count(stem)) throw DataError("label map " + path.string() + " has no image");

  for (const auto& [stem, image_path] : images) {
    const auto& label_path = labels.at(stem);
    const Image8 img = read_png(image_path);
    const Image8 lab = read_png(label_path);
    if (lab.channels != 1) throw DataError(label_path.string() + ": label maps must be single-channel");
    if (lab.h != img.h || lab.w != img.w)
      throw DataError(label_path.string() + ": label map is " + std::to_string(lab.h) + "x" +
                      std::to_string(lab.w) + " but image is " + std::to_string(img.h) + "x" +
                      std::to_string(img.w));
    SegmentationSample s;
    s.name = stem;
    s.image = to_tensor(img);
    s.labels = LabelMap(1, lab.h, lab.w);
    for (std::int64_t y = 0; y < lab.h; ++y)
      for (std::int64_t x = 0; x < lab.w; ++x) {
        const int v = lab.pixels[y * lab.w + x];
        if (v != ignore_label && v >= num_classes)
          throw DataError(label_path.string() + ": label " + std::to_string(v) + " at (" + std::to_string(y) +
                          ", " + std::to_string(x) + ") is outside [0, " + std::to_string(num_classes) + ")");
        s.labels.at(0, y, x) = v;
      }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& root, const std::string& split) {
  for (const auto& s : ds.samples) {
    write_png(root / split / "images" / (s.name + ".png"), from_tensor(s.image));
    Image8 lab{s.labels.h, s.labels.w, 1, {}};
    lab.pixels.reserve(s.labels.data.size());
    for (auto v : s.labels.data) {
      if (v < 0 || v > 255) throw DataError(s.name + ": label " + std::to_string(v) + " does not fit in 8 bits");
      lab.pixels.push_back(static_cast<std::uint8_t>(v));
    }
    write_png(root / split / "labels" / (s.name + ".png"), lab);
  }
}

namespace {

enum class ShapeKind { Rectangle, Circle, Stripes, Triangle, Ring };
constexpr int kMaxSynthClasses = 6;

// Base colors per foreground class; each draw is jittered around it.
constexpr double kBaseColor[kMaxSynthClasses - 1][3] = {
    {0.85, 0.20, 0.15},  // rectangles
    {0.20, 0.80, 0.25},  // circles
    {0.20, 0.30, 0.90},  // stripes
    {0.90, 0.80, 0.15},  // triangles
    {0.80, 0.25, 0.85},  // rings
};

bool inside(ShapeKind kind, double y, double x, double cy, double cx, double r) {
  const double dy = y - cy, dx = x - cx;
  switch (kind) {
    case ShapeKind::Rectangle:
    case ShapeKind::Stripes:
      return std::abs(dy) <= 0.9 * r && std::abs(dx) <= 0.9 * r;
    case ShapeKind::Circle:
      return dy * dy + dx * dx <= r * r;
    case ShapeKind::Triangle:
      // Apex up, base at cy + r.
      return dy <= r && dy >= -r && std::abs(dx) <= (dy + r) * 0.6;
    case ShapeKind::Ring: {
      const double d2 = dy * dy + dx * dx;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
  }
  return false;
}

double quantize(double v) { return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

Dataset synth_generate(std::uint64_t seed, std::size_t n, std::int64_t h, std::int64_t w, int num_classes) {
  if (num_classes < 2 || num_classes > kMaxSynthClasses)
    throw ConfigError("synthetic data supports 2.." + std::to_string(kMaxSynthClasses) + " classes, got " +
                      std::to_string(num_classes));
  if (h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0)
    throw ConfigError("synthetic image dims must be positive multiples of 32, got " + std::to_string(h) + "x" +
                      std::to_string(w));
  Dataset ds;
  ds.num_classes = num_classes;
  Rng rng(seed);
  const double min_side = static_cast<double>(std::min(h, w));

  for (std::size_t i = 0; i < n; ++i) {
    SegmentationSample s;
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05zu", i);
    s.name = name;
    s.labels = LabelMap(1, h, w, 0);
    std::vector<double> rgb(static_cast<std::size_t>(3 * h * w));
    const auto plane = h * w;

    // Low-saturation background with a gentle gradient.
    const double gray = rng.uniform(0.25, 0.55);
    const double gy = rng.uniform(-0.1, 0.1), gx = rng.uniform(-0.1, 0.1);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double v = gray + gy * y / h + gx * x / w;
        for (int c = 0; c < 3; ++c) rgb[c * plane + y * w + x] = v + rng.uniform(-0.02, 0.02);
      }

    const int shapes = 2 + static_cast<int>(rng.below(3));
    for (int k = 0; k < shapes; ++k) {
      // The last (topmost) shape cycles through the classes so every class appears.
      const int cls = k == shapes - 1 ? 1 + static_cast<int>(i % (num_classes - 1))
                             : 1 + static_cast<int>(rng.below(num_classes - 1));
      const auto kind = static_cast<ShapeKind>(cls - 1);
      const double r = rng.uniform(0.15, 0.28) * min_side;
      const double cy = rng.uniform(r, h - r), cx = rng.uniform(r, w - r);
      double color[3];
      for (int c = 0; c < 3; ++c) color[c] = kBaseColor[cls - 1][c] + rng.uniform(-0.12, 0.12);
      const double period = rng.uniform(3.0, 5.0);
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          if (!inside(kind, y + 0.5, x + 0.5, cy, cx, r)) continue;
          double f = 1.0;
          if (kind == ShapeKind::Stripes && std::fmod((x + y) / period, 2.0) >= 1.0) f = 0.45;
          for (int c = 0; c < 3; ++c) rgb[c * plane + y * w + x] = color[c] * f + rng.uniform(-0.03, 0.03);
          s.labels.at(0, y, x) = cls;
        }
    }

    s.image = Tensor({1, 3, h, w}, DType::f32);
    auto d = s.image.data<float>();
    for (std::size_t j = 0; j < rgb.size(); ++j) d[j] = static_cast<float>(quantize(rgb[j]));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<double> class_frequency(const Dataset& ds) {
  std::vector<double> freq(static_cast<std::size_t>(ds.num_classes), 0.0);
  double total = 0.0;
  for (const auto& s : ds.samples)
    for (auto v : s.labels.data) {
      if (v == ds.ignore_label || v < 0 || v >= ds.num_classes) continue;
      freq[v] += 1.0;
      total += 1.0;
    }
  if (total > 0)
    for (auto& f : freq) f /= total;
  return freq;
}

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices, DType dtype) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const auto& first = ds.samples.at(indices[0]);
  const auto h = first.labels.h, w = first.labels.w;
  Batch b{Tensor({static_cast<std::int64_t>(indices.size()), 3, h, w}, dtype),
          LabelMap(static_cast<std::int64_t>(indices.size()), h, w)};
  const auto per_image = 3 * h * w;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& s = ds.samples.at(indices[k]);
    if (s.labels.h != h || s.labels.w != w)
      throw ShapeError("make_batch: sample " + s.name + " is " + std::to_string(s.labels.h) + "x" +
                       std::to_string(s.labels.w) + ", batch is " + std::to_string(h) + "x" + std::to_string(w));
    for (std::int64_t j = 0; j < per_image; ++j)
      b.images.set_flat(static_cast<std::int64_t>(k) * per_image + j, s.image.flat(j));
    std::copy(s.labels.data.begin(), s.labels.data.end(), b.labels.data.begin() + k * h * w);
  }
  return b;
}

}  // namespace wcnn::data
