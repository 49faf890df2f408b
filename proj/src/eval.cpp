#include "wcnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "wcnn/errors.hpp"
#include "wcnn/kernels.hpp"
#include "wcnn/random.hpp"

namespace wcnn::eval {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 0) throw ConfigError("confusion matrix needs a non-negative class count");
}

ConfusionMatrix ConfusionMatrix::from_counts(int num_classes, std::vector<std::int64_t> counts) {
  ConfusionMatrix m(num_classes);
  if (counts.size() != m.counts_.size())
    throw ShapeError("confusion matrix for " + std::to_string(num_classes) + " classes needs " +
                     std::to_string(m.counts_.size()) + " counts, got " + std::to_string(counts.size()));
  m.counts_ = std::move(counts);
  return m;
}

void ConfusionMatrix::add(const LabelMap& truth, const LabelMap& prediction, int ignore_label) {
  if (truth.n != prediction.n || truth.h != prediction.h || truth.w != prediction.w)
    throw ShapeError("confusion matrix: prediction and ground truth dims differ");
  for (std::int64_t b = 0; b < truth.n; ++b)
    for (std::int64_t y = 0; y < truth.h; ++y)
      for (std::int64_t x = 0; x < truth.w; ++x) {
        const int t = truth.at(b, y, x);
        if (t == ignore_label) continue;
        const int p = prediction.at(b, y, x);
        if (t < 0 || t >= classes_ || p < 0 || p >= classes_)
          throw DataError("confusion matrix: label " + std::to_string(t) + " / prediction " + std::to_string(p) +
                          " at (" + std::to_string(b) + ", " + std::to_string(y) + ", " + std::to_string(x) +
                          ") is outside [0, " + std::to_string(classes_) + ")");
        ++counts_[t * classes_ + p];
      }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

IouScores iou_scores(const ConfusionMatrix& m) {
  if (m.total() == 0) throw UndefinedScoreError("IoU is undefined for an empty confusion matrix");
  const int C = m.num_classes();
  IouScores s;
  s.per_class.assign(C, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0, diag = 0.0;
  int defined = 0;
  for (int c = 0; c < C; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < C; ++k) {
      row += m.at(c, k);
      col += m.at(k, c);
    }
    const std::int64_t tp = m.at(c, c);
    diag += static_cast<double>(tp);
    const std::int64_t denom = row + col - tp;
    if (denom == 0) continue;
    s.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += s.per_class[c];
    ++defined;
  }
  s.mean = sum / defined;
  s.pixel_accuracy = diag / static_cast<double>(m.total());
  return s;
}

LabelMap argmax(const Tensor& scores) {
  const Shape s = scores.shape();
  LabelMap out(s.n, s.h, s.w);
  dispatch(scores.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* d = scores.data<T>().data();
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t i = 0; i < s.plane(); ++i) {
        const T* px = d + n * s.c * s.plane() + i;
        int best = 0;
        for (std::int64_t c = 1; c < s.c; ++c)
          if (px[c * s.plane()] > px[best * s.plane()]) best = static_cast<int>(c);
        out.data[n * s.plane() + i] = best;
      }
  });
  return out;
}

Predictor logits_predictor(NetworkGraph& model) {
  return [&model](const Tensor& images) { return forward(model, images); };
}

std::pair<std::int64_t, std::int64_t> scaled_size(const NetworkGraph& model, std::int64_t h, std::int64_t w,
                                                  double scale) {
  if (!(scale > 0)) throw ConfigError("test-time scales must be positive");
  const auto g = model.granularity();
  auto round_to = [&](std::int64_t v) {
    const auto r = std::llround(static_cast<double>(v) * scale / static_cast<double>(g)) * g;
    if (r < g)
      throw ConfigError("scale " + std::to_string(scale) + " shrinks " + std::to_string(h) + "x" + std::to_string(w) +
                        " below the model's minimum input of " + std::to_string(g) + " pixels");
    return r;
  };
  return {round_to(h), round_to(w)};
}

Tensor ms_tta_predict(NetworkGraph& model, const Tensor& images, std::span<const double> scales) {
  if (scales.empty()) throw ConfigError("multi-scale prediction needs at least one scale");
  const Shape s = images.shape();
  Tensor fused;
  for (double scale : scales) {
    const auto [th, tw] = scaled_size(model, s.h, s.w, scale);
    const Tensor in = th == s.h && tw == s.w ? images : kernels::resize_bilinear(images, th, tw);
    Tensor prob = kernels::softmax_channels(forward(model, in).cast(DType::f64));
    if (th != s.h || tw != s.w) prob = kernels::resize_bilinear(prob, s.h, s.w);
    if (!fused.defined())
      fused = std::move(prob);
    else
      fused.add_(prob);
  }
  fused.scale_(1.0 / static_cast<double>(scales.size()));
  return fused;
}

Predictor ms_tta_predictor(NetworkGraph& model, std::vector<double> scales) {
  return [&model, scales = std::move(scales)](const Tensor& images) { return ms_tta_predict(model, images, scales); };
}

std::vector<double> random_scales(std::uint64_t seed, int count, double lo, double hi) {
  if (count < 1 || !(lo > 0) || hi < lo) throw ConfigError("random scales need count >= 1 and 0 < lo <= hi");
  Rng rng(seed);
  std::vector<double> out;
  for (int i = 0; i < count; ++i) out.push_back(rng.uniform(lo, hi));
  std::sort(out.begin(), out.end());
  return out;
}

Tensor pad_to_multiple(const Tensor& x, std::int64_t m) {
  if (m < 1) throw ContractError("pad_to_multiple: multiple must be positive");
  const Shape s = x.shape();
  const std::int64_t h = (s.h + m - 1) / m * m, w = (s.w + m - 1) / m * m;
  if (h == s.h && w == s.w) return x;
  Tensor out({s.n, s.c, h, w}, x.dtype());
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t z = 0; z < w; ++z)
          out.set(n, c, y, z, x.at(n, c, std::min(y, s.h - 1), std::min(z, s.w - 1)));
  return out;
}

LabelMap predict_labels(const Predictor& predict, const Tensor& images, std::int64_t granularity) {
  const Shape s = images.shape();
  const LabelMap full = argmax(predict(pad_to_multiple(images, granularity)));
  if (full.h == s.h && full.w == s.w) return full;
  LabelMap out(s.n, s.h, s.w);
  for (std::int64_t b = 0; b < s.n; ++b)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x) out.at(b, y, x) = full.at(b, y, x);
  return out;
}

EvalResult evaluate(const Predictor& predict, const data::Dataset& ds, int batch_size) {
  if (batch_size < 1) throw ConfigError("evaluation batch size must be positive");
  ConfusionMatrix m(ds.num_classes);
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = data::make_batch(ds, idx);
    const Tensor scores = predict(batch.images);
    if (scores.shape().h != batch.labels.h || scores.shape().w != batch.labels.w)
      throw ShapeError("predictor returned " + scores.shape().str() + " for " + batch.images.shape().str());
    m.add(batch.labels, argmax(scores), ds.ignore_label);
  }
  return {m, iou_scores(m)};
}

namespace {

std::string percent(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

}  // namespace

std::string format_report(std::span<const ReportRow> rows, std::span<const std::string> class_names,
                          std::span<const double> frequency) {
  std::size_t name_w = 5;
  for (const auto& n : class_names) name_w = std::max(name_w, n.size());
  std::vector<int> col_w;
  for (const auto& r : rows) col_w.push_back(static_cast<int>(std::max<std::size_t>(r.method.size(), 6)));
  const bool with_freq = !frequency.empty();

  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(name_w)) << "class" << std::right;
  if (with_freq) out << "  " << std::setw(6) << "freq";
  for (std::size_t m = 0; m < rows.size(); ++m) out << "  " << std::setw(col_w[m]) << rows[m].method;
  out << "\n";
  auto line = [&](const std::string& name, double freq, auto value_of) {
    out << std::left << std::setw(static_cast<int>(name_w)) << name << std::right;
    if (with_freq) out << "  " << std::setw(6) << percent(freq);
    for (std::size_t m = 0; m < rows.size(); ++m) out << "  " << std::setw(col_w[m]) << percent(value_of(rows[m]));
    out << "\n";
  };
  for (std::size_t c = 0; c < class_names.size(); ++c)
    line(class_names[c], c < frequency.size() ? frequency[c] : std::nan(""), [c](const ReportRow& r) {
      return c < r.result.scores.per_class.size() ? r.result.scores.per_class[c] : std::nan("");
    });
  line("avg", with_freq ? 1.0 : std::nan(""), [](const ReportRow& r) { return r.result.scores.mean; });
  return out.str();
}

std::string report_jsonl(std::span<const ReportRow> rows, std::span<const std::string> class_names) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::json per_class = nlohmann::json::object();
    for (std::size_t c = 0; c < r.result.scores.per_class.size(); ++c) {
      const std::string name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
      const double v = r.result.scores.per_class[c];
      per_class[name] = std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
    }
    nlohmann::json j{{"method", r.method},
                     {"miou", r.result.scores.mean},
                     {"pixel_accuracy", r.result.scores.pixel_accuracy},
                     {"iou", per_class}};
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<std::string> default_class_names(int num_classes) {
  std::vector<std::string> names;
  for (int c = 0; c < num_classes; ++c) names.push_back("class" + std::to_string(c));
  return names;
}

std::vector<Color> default_palette(int num_classes) {
  // Golden-angle hue walk at two brightness levels.
  std::vector<Color> out;
  for (int c = 0; c < num_classes; ++c) {
    const double hue = std::fmod(c * 137.508, 360.0) / 60.0;
    const double v = c % 2 == 0 ? 0.95 : 0.7, sat = 0.75;
    const double chroma = v * sat, xx = chroma * (1 - std::abs(std::fmod(hue, 2.0) - 1)), m = v - chroma;
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hue)) {
      case 0: r = chroma, g = xx; break;
      case 1: r = xx, g = chroma; break;
      case 2: g = chroma, b = xx; break;
      case 3: g = xx, b = chroma; break;
      case 4: r = xx, b = chroma; break;
      default: r = chroma, b = xx; break;
    }
    out.push_back({static_cast<std::uint8_t>(std::lround((r + m) * 255)),
                   static_cast<std::uint8_t>(std::lround((g + m) * 255)),
                   static_cast<std::uint8_t>(std::lround((b + m) * 255))});
  }
  return out;
}

void write_palette(const std::filesystem::path& path, std::span<const Color> palette) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write palette " + path.string());
  for (const auto& c : palette) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x\n", c[0], c[1], c[2]);
    out << buf;
  }
}

std::vector<Color> read_palette(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open palette " + path.string());
  std::vector<Color> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    unsigned r, g, b;
    if (line.size() < 7 || std::sscanf(line.c_str(), "#%2x%2x%2x", &r, &g, &b) != 3)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected #rrggbb");
    out.push_back({static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)});
  }
  return out;
}

void export_colormap(const LabelMap& labels, std::span<const Color> palette, const std::filesystem::path& path,
                     int ignore_label, std::int64_t b) {
  if (b < 0 || b >= labels.n) throw ContractError("export_colormap: image index out of range");
  data::Image8 img{labels.h, labels.w, 3, {}};
  img.pixels.resize(static_cast<std::size_t>(labels.h * labels.w * 3));
  for (std::int64_t y = 0; y < labels.h; ++y)
    for (std::int64_t x = 0; x < labels.w; ++x) {
      const int v = labels.at(b, y, x);
      Color c{0, 0, 0};
      if (v != ignore_label) {
        if (v < 0 || static_cast<std::size_t>(v) >= palette.size())
          throw DataError("export_colormap: class " + std::to_string(v) + " has no palette entry");
        c = palette[v];
      }
      std::copy(c.begin(), c.end(), img.pixels.begin() + (y * labels.w + x) * 3);
    }
  data::write_png(path, img);
}

LabelMap decode_colormap(const std::filesystem::path& path, std::span<const Color> palette, int ignore_label) {
  const auto img = data::read_png(path);
  if (img.channels != 3) throw DataError(path.string() + ": color maps are RGB");
  LabelMap out(1, img.h, img.w);
  for (std::int64_t i = 0; i < img.h * img.w; ++i) {
    const Color c{img.pixels[i * 3], img.pixels[i * 3 + 1], img.pixels[i * 3 + 2]};
    if (c == Color{0, 0, 0}) {
      out.data[i] = ignore_label;
      continue;
    }
    auto it = std::find(palette.begin(), palette.end(), c);
    if (it == palette.end()) throw DataError(path.string() + ": color not in palette");
    out.data[i] = static_cast<int>(it - palette.begin());
  }
  return out;
}

}  // namespace wcnn::eval
