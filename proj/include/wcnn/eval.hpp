#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "wcnn/data.hpp"
#include "wcnn/model.hpp"
#include "wcnn/tensor.hpp"

namespace wcnn::eval {

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);
  /// Builds a matrix from row-major counts.
  static ConfusionMatrix from_counts(int num_classes, std::vector<std::int64_t> counts);

  /// Adds every pixel whose ground truth is not `ignore_label`. Predictions
  /// and labels outside [0, C) raise DataError.
  void add(const LabelMap& truth, const LabelMap& prediction, int ignore_label = data::kIgnoreLabel);
  void merge(const ConfusionMatrix& other);

  int num_classes() const { return classes_; }
  std::int64_t at(int truth, int predicted) const { return counts_[truth * classes_ + predicted]; }
  std::int64_t total() const;
  const std::vector<std::int64_t>& counts() const { return counts_; }

 private:
  int classes_;
  std::vector<std::int64_t> counts_;
};

struct IouScores {
  /// Per-class IoU; NaN for classes absent from both truth and prediction.
  std::vector<double> per_class;
  /// Mean over classes with a defined IoU.
  double mean = 0.0;
  double pixel_accuracy = 0.0;
};

/// IoU = TP / (TP + FP + FN). Raises UndefinedScoreError for an empty matrix.
IouScores iou_scores(const ConfusionMatrix& m);

/// Per-pixel argmax over channels; ties go to the lowest class index.
LabelMap argmax(const Tensor& scores);

/// Maps a batch of images (n, 3, h, w) to per-class scores at the same h x w.
using Predictor = std::function<Tensor(const Tensor& images)>;

/// Plain single-scale logits.
Predictor logits_predictor(NetworkGraph& model);

/// Multi-scale test-time augmentation: the image is resized by each scale
/// (rounded to the model's input granularity), softmax probabilities are
/// resized back and averaged. Output is f64.
Tensor ms_tta_predict(NetworkGraph& model, const Tensor& images, std::span<const double> scales);
Predictor ms_tta_predictor(NetworkGraph& model, std::vector<double> scales);

/// `count` scales drawn uniformly from [lo, hi], sorted; deterministic per seed.
std::vector<double> random_scales(std::uint64_t seed, int count, double lo = 0.75, double hi = 1.25);

/// Input size the model sees for a given scale: each side rounded to the
/// nearest multiple of the model's granularity. ConfigError below one unit.
std::pair<std::int64_t, std::int64_t> scaled_size(const NetworkGraph& model, std::int64_t h, std::int64_t w,
                                                  double scale);

inline const std::vector<double>& default_scales() {
  static const std::vector<double> s{0.75, 1.0, 1.25};
  return s;
}

/// Replicates edge pixels so both spatial dims become multiples of `multiple`.
Tensor pad_to_multiple(const Tensor& images, std::int64_t multiple);

/// Per-pixel labels for images of any size: pads to the model granularity,
/// predicts, and crops the labels back to the input dims.
LabelMap predict_labels(const Predictor& predict, const Tensor& images, std::int64_t granularity);

struct EvalResult {
  ConfusionMatrix confusion;
  IouScores scores;
};

EvalResult evaluate(const Predictor& predict, const data::Dataset& ds, int batch_size = 1);

/// One row of the report: a method name and its result.
struct ReportRow {
  std::string method;
  EvalResult result;
};

/// Aligned text table: one line per class plus "avg", one IoU column (in
/// percent) per method, and a leading pixel-frequency column when given.
std::string format_report(std::span<const ReportRow> rows, std::span<const std::string> class_names,
                          std::span<const double> frequency = {});
/// One JSON object per row.
std::string report_jsonl(std::span<const ReportRow> rows, std::span<const std::string> class_names);

/// Names used when the caller has none: "class0", "class1", ...
std::vector<std::string> default_class_names(int num_classes);

using Color = std::array<std::uint8_t, 3>;
/// Deterministic distinct colors; black is never used.
std::vector<Color> default_palette(int num_classes);
/// One "#rrggbb" line per class.
void write_palette(const std::filesystem::path& path, std::span<const Color> palette);
std::vector<Color> read_palette(const std::filesystem::path& path);

/// Writes an RGB PNG for image `b` of the map; ignored pixels are black.
void export_colormap(const LabelMap& labels, std::span<const Color> palette, const std::filesystem::path& path,
                     int ignore_label = data::kIgnoreLabel, std::int64_t b = 0);
/// Inverse of export_colormap; black decodes to `ignore_label`.
LabelMap decode_colormap(const std::filesystem::path& path, std::span<const Color> palette,
                         int ignore_label = data::kIgnoreLabel);

}  // namespace wcnn::eval
