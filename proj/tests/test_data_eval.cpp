#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "support.hpp"
#include "wcnn/data.hpp"
#include "wcnn/errors.hpp"
#include "wcnn/eval.hpp"
#include "wcnn/model.hpp"

using namespace wcnn;
using wcnn::testing::TempDir;

namespace {

data::Image8 gray(std::int64_t h, std::int64_t w, std::vector<std::uint8_t> px) {
  return {h, w, 1, std::move(px)};
}

data::Image8 rgb(std::int64_t h, std::int64_t w, std::uint8_t fill) {
  return {h, w, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w * 3), fill)};
}

void write_pair(const std::filesystem::path& split, const std::string& stem, const data::Image8& image,
                const data::Image8& labels) {
  std::filesystem::create_directories(split / "images");
  std::filesystem::create_directories(split / "labels");
  data::write_png(split / "images" / (stem + ".png"), image);
  data::write_png(split / "labels" / (stem + ".png"), labels);
}

ModelConfig small(int classes = 4) {
  ModelConfig cfg;
  cfg.variant = Variant::Baseline;
  cfg.width_mult = 0.125;
  cfg.blocks_per_stage = {1, 1, 1, 1};
  cfg.decoder_blocks = {1, 1, 1, 1, 1};
  cfg.num_classes = classes;
  cfg.input_h = 64;
  cfg.input_w = 64;
  return cfg;
}

}  // namespace

TEST_CASE("png round trip keeps gray and rgb pixels") {
  TempDir dir("png");
  Rng rng(5);
  data::Image8 color{3, 5, 3, {}};
  for (int i = 0; i < 45; ++i) color.pixels.push_back(static_cast<std::uint8_t>(rng.below(256)));
  data::write_png(dir / "c.png", color);
  const auto back = data::read_png(dir / "c.png");
  CHECK(back.h == 3);
  CHECK(back.w == 5);
  CHECK(back.channels == 3);
  CHECK(back.pixels == color.pixels);

  const auto g = gray(2, 2, {0, 1, 254, 255});
  data::write_png(dir / "g.png", g);
  CHECK(data::read_png(dir / "g.png").pixels == g.pixels);

  const auto t = data::to_tensor(g);
  CHECK(t.shape() == Shape{1, 3, 2, 2});
  CHECK(t.at(0, 2, 1, 1) == doctest::Approx(1.0));
  CHECK(t.at(0, 0, 0, 1) == doctest::Approx(1.0 / 255));
}

TEST_CASE("load_dataset pairs files by name and keeps ignore pixels") {
  TempDir dir("ds");
  write_pair(dir / "train", "b", rgb(2, 3, 10), gray(2, 3, {0, 1, 2, 255, 1, 0}));
  write_pair(dir / "train", "a", rgb(2, 3, 200), gray(2, 3, {3, 3, 3, 3, 3, 3}));
  const auto ds = data::load_dataset(dir.path(), "train", 4);
  REQUIRE(ds.size() == 2);
  CHECK(ds.samples[0].name == "a");
  CHECK(ds.samples[1].name == "b");
  CHECK(ds.samples[1].labels.at(0, 1, 0) == 255);
  CHECK(ds.samples[0].image.at(0, 1, 1, 2) == doctest::Approx(200.0 / 255));

  const auto freq = data::class_frequency(ds);
  CHECK(std::accumulate(freq.begin(), freq.end(), 0.0) == doctest::Approx(1.0));
  CHECK(freq[3] == doctest::Approx(6.0 / 11));
}

TEST_CASE("a missing split is empty with a warning") {
  TempDir dir("ds");
  std::ostringstream warn;
  const auto ds = data::load_dataset(dir.path(), "val", 4, data::kIgnoreLabel, &warn);
  CHECK(ds.empty());
  CHECK(warn.str().find("warning") != std::string::npos);
}

TEST_CASE("malformed datasets raise DataError naming the file") {
  SUBCASE("unpaired image") {
    TempDir dir("ds");
    write_pair(dir / "train", "a", rgb(2, 2, 0), gray(2, 2, {0, 0, 0, 0}));
    data::write_png(dir / "train" / "images" / "orphan.png", rgb(2, 2, 0));
    try {
      data::load_dataset(dir.path(), "train", 4);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("orphan") != std::string::npos);
    }
  }
  SUBCASE("size mismatch") {
    TempDir dir("ds");
    write_pair(dir / "train", "a", rgb(2, 3, 0), gray(2, 2, {0, 0, 0, 0}));
    CHECK_THROWS_AS(data::load_dataset(dir.path(), "train", 4), DataError);
  }
  SUBCASE("label out of range") {
    TempDir dir("ds");
    write_pair(dir / "train", "a", rgb(2, 2, 0), gray(2, 2, {0, 1, 7, 0}));
    try {
      data::load_dataset(dir.path(), "train", 4);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("label 7") != std::string::npos);
      CHECK(msg.find("a.png") != std::string::npos);
    }
  }
}

TEST_CASE("save_dataset and load_dataset round trip") {
  TempDir dir("ds");
  const auto ds = data::synth_generate(4, 3, 32, 64);
  data::save_dataset(ds, dir.path(), "val");
  const auto back = data::load_dataset(dir.path(), "val", ds.num_classes);
  REQUIRE(back.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back.samples[i].labels == ds.samples[i].labels);
    CHECK(max_abs_diff(back.samples[i].image, ds.samples[i].image) < 1e-6);
  }
}

TEST_CASE("synthetic data is deterministic and covers every class") {
  const auto a = data::synth_generate(7, 64, 64, 64);
  const auto b = data::synth_generate(7, 64, 64, 64);
  const auto c = data::synth_generate(8, 64, 64, 64);
  REQUIRE(a.size() == 64);
  bool differs = false;
  std::set<int> seen;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bitwise_equal(a.samples[i].image, b.samples[i].image));
    CHECK(a.samples[i].labels == b.samples[i].labels);
    differs |= !bitwise_equal(a.samples[i].image, c.samples[i].image);
    for (auto v : a.samples[i].labels.data) seen.insert(v);
  }
  CHECK(differs);
  CHECK(seen == std::set<int>{0, 1, 2, 3});
  const auto freq = data::class_frequency(a);
  CHECK(std::accumulate(freq.begin(), freq.end(), 0.0) == doctest::Approx(1.0));
  for (double f : freq) CHECK(f > 0.02);

  CHECK_THROWS_AS(data::synth_generate(1, 1, 48, 64), ConfigError);
  CHECK_THROWS_AS(data::synth_generate(1, 1, 64, 64, 9), ConfigError);
}

TEST_CASE("make_batch stacks samples in order") {
  const auto ds = data::synth_generate(2, 3, 32, 32);
  const std::vector<std::size_t> idx{2, 0};
  const auto batch = data::make_batch(ds, idx, DType::f64);
  CHECK(batch.images.shape() == Shape{2, 3, 32, 32});
  CHECK(batch.images.dtype() == DType::f64);
  CHECK(batch.images.at(0, 1, 5, 7) == doctest::Approx(ds.samples[2].image.at(0, 1, 5, 7)));
  CHECK(batch.labels.at(1, 3, 4) == ds.samples[0].labels.at(0, 3, 4));
}

TEST_CASE("IoU from a hand-computed confusion matrix") {
  // rows are truth: class 0 -> 3 right, 1 wrong; class 1 -> 2 wrong, 4 right
  const auto m = eval::ConfusionMatrix::from_counts(2, {3, 1, 2, 4});
  const auto s = eval::iou_scores(m);
  CHECK(s.per_class[0] == doctest::Approx(3.0 / 6));
  CHECK(s.per_class[1] == doctest::Approx(4.0 / 7));
  CHECK(s.mean == doctest::Approx((3.0 / 6 + 4.0 / 7) / 2));
  CHECK(s.mean == doctest::Approx(0.5357).epsilon(1e-4));
  CHECK(s.pixel_accuracy == doctest::Approx(0.7));

  CHECK_THROWS_AS(eval::iou_scores(eval::ConfusionMatrix(3)), UndefinedScoreError);

  // class 2 never appears in truth or prediction
  const auto partial = eval::iou_scores(eval::ConfusionMatrix::from_counts(3, {1, 0, 0, 0, 1, 0, 0, 0, 0}));
  CHECK(std::isnan(partial.per_class[2]));
  CHECK(partial.mean == doctest::Approx(1.0));
}

TEST_CASE("confusion matrix ignores the ignore label and rejects bad labels") {
  LabelMap truth(1, 1, 4), pred(1, 1, 4);
  truth.data = {0, 1, 255, 1};
  pred.data = {0, 0, 1, 1};
  eval::ConfusionMatrix m(2);
  m.add(truth, pred);
  CHECK(m.total() == 3);
  CHECK(m.at(0, 0) == 1);
  CHECK(m.at(1, 0) == 1);
  CHECK(m.at(1, 1) == 1);

  eval::ConfusionMatrix twice(2);
  twice.merge(m);
  twice.merge(m);
  CHECK(twice.at(1, 1) == 2);

  pred.data[0] = 5;
  CHECK_THROWS_AS(m.add(truth, pred), DataError);
}

TEST_CASE("argmax breaks ties toward the lowest class") {
  Tensor s({1, 3, 1, 2}, DType::f64);
  s.set(0, 0, 0, 0, 1.0);
  s.set(0, 1, 0, 0, 2.0);
  s.set(0, 2, 0, 0, 2.0);
  const auto a = eval::argmax(s);
  CHECK(a.at(0, 0, 0) == 1);
  CHECK(a.at(0, 0, 1) == 0);
}

TEST_CASE("colormap export and decode round trip") {
  TempDir dir("cmap");
  const auto palette = eval::default_palette(6);
  std::set<eval::Color> distinct(palette.begin(), palette.end());
  CHECK(distinct.size() == 6);
  CHECK(distinct.count(eval::Color{0, 0, 0}) == 0);

  LabelMap labels(2, 3, 4);
  for (std::size_t i = 0; i < labels.data.size(); ++i) labels.data[i] = static_cast<int>(i % 6);
  labels.at(1, 2, 3) = 255;
  eval::export_colormap(labels, palette, dir / "m.png", 255, 1);
  const auto img = data::read_png(dir / "m.png");
  REQUIRE(img.channels == 3);
  const std::size_t last = static_cast<std::size_t>((2 * 4 + 3) * 3);
  CHECK(img.pixels[last] == 0);
  CHECK(img.pixels[last + 1] == 0);
  CHECK(img.pixels[last + 2] == 0);

  const auto back = eval::decode_colormap(dir / "m.png", palette, 255);
  for (std::int64_t y = 0; y < 3; ++y)
    for (std::int64_t x = 0; x < 4; ++x) CHECK(back.at(0, y, x) == labels.at(1, y, x));

  eval::write_palette(dir / "palette.txt", palette);
  CHECK(eval::read_palette(dir / "palette.txt") == palette);
}

TEST_CASE("report has one line per class plus the average") {
  const auto m = eval::ConfusionMatrix::from_counts(2, {3, 1, 2, 4});
  const std::vector<eval::ReportRow> rows{{"single", {m, eval::iou_scores(m)}}, {"ms", {m, eval::iou_scores(m)}}};
  const std::vector<std::string> names{"road", "car"};
  const std::vector<double> freq{0.4, 0.6};
  const std::string text = eval::format_report(rows, names, freq);
  std::istringstream in(text);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  REQUIRE(lines.size() == 4);  // header, two classes, avg
  CHECK(lines[1].find("road") == 0);
  CHECK(lines[1].find("50.0") != std::string::npos);
  CHECK(lines[2].find("57.1") != std::string::npos);
  CHECK(lines[3].find("avg") == 0);
  CHECK(lines[3].find("53.6") != std::string::npos);

  const std::string jl = eval::report_jsonl(rows, names);
  CHECK(std::count(jl.begin(), jl.end(), '\n') == 2);
}

TEST_CASE("multi-scale prediction at unit scale reduces to softmax of the logits") {
  NetworkGraph g = build_model(small());
  g.initialize(3, DType::f64);
  Rng rng(9);
  const Tensor x = rng.uniform_tensor({2, 3, 64, 64}, 0, 1);
  const Tensor logits = forward(g, x);

  const std::vector<double> one{1.0}, two{1.0, 1.0};
  const Tensor p1 = eval::ms_tta_predict(g, x, one);
  const Tensor p2 = eval::ms_tta_predict(g, x, two);
  CHECK(max_abs_diff(p1, p2) < 1e-15);

  const Shape s = logits.shape();
  double err = 0.0, simplex = 0.0;
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x_ = 0; x_ < s.w; ++x_) {
        double mx = -1e300, z = 0.0, total = 0.0;
        for (std::int64_t c = 0; c < s.c; ++c) mx = std::max(mx, logits.at(n, c, y, x_));
        for (std::int64_t c = 0; c < s.c; ++c) z += std::exp(logits.at(n, c, y, x_) - mx);
        for (std::int64_t c = 0; c < s.c; ++c) {
          err = std::max(err, std::abs(p1.at(n, c, y, x_) - std::exp(logits.at(n, c, y, x_) - mx) / z));
          total += p1.at(n, c, y, x_);
        }
        simplex = std::max(simplex, std::abs(total - 1.0));
      }
  CHECK(err < 1e-12);
  CHECK(simplex < 1e-12);
}

TEST_CASE("multi-scale probabilities stay on the simplex") {
  NetworkGraph g = build_model(small());
  g.initialize(4);
  Rng rng(10);
  const Tensor x = rng.uniform_tensor({1, 3, 64, 64}, 0, 1, DType::f32);
  const auto p = eval::ms_tta_predict(g, x, eval::default_scales());
  CHECK(p.shape() == Shape{1, 4, 64, 64});
  double worst = 0.0;
  for (std::int64_t y = 0; y < 64; ++y)
    for (std::int64_t x_ = 0; x_ < 64; ++x_) {
      double total = 0.0;
      for (std::int64_t c = 0; c < 4; ++c) {
        CHECK(p.at(0, c, y, x_) >= 0.0);
        total += p.at(0, c, y, x_);
      }
      worst = std::max(worst, std::abs(total - 1.0));
    }
  CHECK(worst <= 1e-6);

  CHECK(eval::scaled_size(g, 64, 64, 1.25) == std::pair<std::int64_t, std::int64_t>{96, 96});
  CHECK_THROWS_AS(eval::scaled_size(g, 64, 64, 0.2), ConfigError);

  const auto r1 = eval::random_scales(5, 4), r2 = eval::random_scales(5, 4);
  CHECK(r1 == r2);
  CHECK(std::is_sorted(r1.begin(), r1.end()));
  for (double v : r1) CHECK((v >= 0.75 && v <= 1.25));
}

TEST_CASE("evaluate with an oracle predictor scores perfectly") {
  const auto ds = data::synth_generate(12, 5, 32, 32);
  auto oracle = [&ds](const Tensor& images) {
    // Recover the sample from its first pixel and emit its one-hot labels.
    for (const auto& s : ds.samples) {
      if (s.image.at(0, 0, 0, 0) != images.at(0, 0, 0, 0) || s.image.at(0, 1, 3, 3) != images.at(0, 1, 3, 3))
        continue;
      Tensor out({1, ds.num_classes, 32, 32}, DType::f64);
      for (std::int64_t y = 0; y < 32; ++y)
        for (std::int64_t x = 0; x < 32; ++x) out.set(0, s.labels.at(0, y, x), y, x, 1.0);
      return out;
    }
    throw std::runtime_error("unknown image");
  };
  const auto r = eval::evaluate(oracle, ds, 1);
  CHECK(r.scores.mean == doctest::Approx(1.0));
  CHECK(r.scores.pixel_accuracy == doctest::Approx(1.0));
  CHECK(r.confusion.total() == 5 * 32 * 32);
}

TEST_CASE("evaluate matches a hand-accumulated confusion matrix") {
  const auto ds = data::synth_generate(13, 4, 32, 32);
  NetworkGraph g = build_model(small());
  g.initialize(6, DType::f64);
  const auto r = eval::evaluate(eval::logits_predictor(g), ds, 3);

  eval::ConfusionMatrix manual(4);
  for (const auto& s : ds.samples) manual.add(s.labels, eval::argmax(forward(g, s.image)));
  CHECK(r.confusion.counts() == manual.counts());
}

TEST_CASE("predicting an odd-sized image pads the edges and crops back") {
  NetworkGraph g = build_model(small());
  g.initialize(8, DType::f64);
  const auto predict = eval::logits_predictor(g);
  Rng rng(14);
  const Tensor x = rng.uniform_tensor({1, 3, 50, 70}, 0, 1);

  // Oracle: replicate the last row and column by hand, predict, then crop.
  Tensor padded({1, 3, 64, 96}, DType::f64);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < 64; ++y)
      for (std::int64_t z = 0; z < 96; ++z) padded.set(0, c, y, z, x.at(0, c, std::min<std::int64_t>(y, 49),
                                                                       std::min<std::int64_t>(z, 69)));
  CHECK(bitwise_equal(eval::pad_to_multiple(x, 32), padded));
  const LabelMap full = eval::argmax(predict(padded));

  const LabelMap got = eval::predict_labels(predict, x, g.granularity());
  REQUIRE(got.h == 50);
  REQUIRE(got.w == 70);
  for (std::int64_t y = 0; y < 50; ++y)
    for (std::int64_t z = 0; z < 70; ++z) CHECK(got.at(0, y, z) == full.at(0, y, z));

  const Tensor even = rng.uniform_tensor({1, 3, 64, 64}, 0, 1);
  CHECK(eval::predict_labels(predict, even, 32) == eval::argmax(predict(even)));
}
