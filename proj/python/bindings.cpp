#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <optional>

#include "wcnn/checkpoint.hpp"
#include "wcnn/config.hpp"
#include "wcnn/data.hpp"
#include "wcnn/errors.hpp"
#include "wcnn/eval.hpp"
#include "wcnn/model.hpp"
#include "wcnn/training.hpp"
#include "wcnn/verify.hpp"
#include "wcnn/wavelet.hpp"

namespace py = pybind11;
using namespace wcnn;

namespace {

// ---- array conversion ------------------------------------------------------

template <typename T>
Tensor tensor_from(const py::array_t<T, py::array::c_style | py::array::forcecast>& a, DType dt) {
  if (a.ndim() != 4) throw ShapeError("expected a 4-d array (n, c, h, w), got " + std::to_string(a.ndim()) + " dims");
  Tensor t({a.shape(0), a.shape(1), a.shape(2), a.shape(3)}, dt);
  std::memcpy(t.data<T>().data(), a.data(), sizeof(T) * static_cast<std::size_t>(t.numel()));
  return t;
}

// float32 arrays stay f32; everything else becomes f64.
Tensor to_tensor(const py::array& a) {
  if (a.dtype().is(py::dtype::of<float>()))
    return tensor_from<float>(a.cast<py::array_t<float, py::array::c_style | py::array::forcecast>>(), DType::f32);
  return tensor_from<double>(a.cast<py::array_t<double, py::array::c_style | py::array::forcecast>>(), DType::f64);
}

Tensor to_tensor(const py::array& a, DType dt) { return to_tensor(a).cast(dt); }

py::array to_numpy(const Tensor& t) {
  const Shape s = t.shape();
  const std::vector<py::ssize_t> dims{s.n, s.c, s.h, s.w};
  return dispatch(t.dtype(), [&](auto tag) -> py::array {
    using T = decltype(tag);
    py::array_t<T> out(dims);
    std::memcpy(out.mutable_data(), t.data<T>().data(), sizeof(T) * static_cast<std::size_t>(t.numel()));
    return out;
  });
}

LabelMap to_labels(const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3) throw ShapeError("expected a 3-d label array (n, h, w)");
  LabelMap m(a.shape(0), a.shape(1), a.shape(2));
  std::memcpy(m.data.data(), a.data(), sizeof(std::int32_t) * m.data.size());
  return m;
}

py::array_t<std::int32_t> to_numpy(const LabelMap& m) {
  py::array_t<std::int32_t> out({m.n, m.h, m.w});
  std::memcpy(out.mutable_data(), m.data.data(), sizeof(std::int32_t) * m.data.size());
  return out;
}

// ---- datasets ----------------------------------------------------------------

data::Dataset dataset_from(const py::array& images, const py::array& labels, int num_classes) {
  const Tensor x = to_tensor(images, DType::f32);
  const LabelMap y = to_labels(labels.cast<py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>>());
  if (x.shape().n != y.n || x.shape().h != y.h || x.shape().w != y.w)
    throw ShapeError("images " + x.shape().str() + " and labels do not match");
  data::Dataset ds;
  ds.num_classes = num_classes;
  const Shape s = x.shape();
  for (std::int64_t i = 0; i < s.n; ++i) {
    data::SegmentationSample sample;
    sample.name = std::to_string(i);
    sample.image = Tensor({1, s.c, s.h, s.w}, DType::f32);
    std::memcpy(sample.image.data<float>().data(), x.data<float>().data() + i * s.c * s.plane(),
                sizeof(float) * static_cast<std::size_t>(s.c * s.plane()));
    sample.labels = LabelMap(1, s.h, s.w);
    std::copy_n(y.data.begin() + i * s.plane(), s.plane(), sample.labels.data.begin());
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

py::tuple dataset_arrays(const data::Dataset& ds) {
  if (ds.empty()) return py::make_tuple(py::none(), py::none());
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto batch = data::make_batch(ds, idx);
  return py::make_tuple(to_numpy(batch.images), to_numpy(batch.labels));
}

py::dict scores_dict(const eval::IouScores& s) {
  py::dict d;
  d["per_class"] = s.per_class;
  d["mean"] = s.mean;
  d["pixel_accuracy"] = s.pixel_accuracy;
  return d;
}

}  // namespace

PYBIND11_MODULE(_wcnn, m) {
  m.doc() = "Wavelet encoder-decoder networks: Haar transforms, models, training and evaluation.";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ManifestError>(m, "ManifestError", base.ptr());
  py::register_exception<UndefinedScoreError>(m, "UndefinedScoreError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());

  // ---- wavelets
  m.def(
      "dwt2",
      [](const py::array& x) {
        const auto s = wavelet::dwt2_single(to_tensor(x));
        return py::make_tuple(to_numpy(s.ll), to_numpy(s.lh), to_numpy(s.hl), to_numpy(s.hh));
      },
      py::arg("x"), "Single-level Haar DWT of an (n, c, h, w) array; returns (ll, lh, hl, hh).");
  m.def(
      "idwt2",
      [](const py::array& ll, const py::array& lh, const py::array& hl, const py::array& hh) {
        wavelet::SubbandSet s{to_tensor(ll), to_tensor(lh), to_tensor(hl), to_tensor(hh)};
        return to_numpy(wavelet::idwt2_single(s));
      },
      py::arg("ll"), py::arg("lh"), py::arg("hl"), py::arg("hh"));
  m.def(
      "dwt2_multi",
      [](const py::array& x, int levels) {
        const auto stack = wavelet::dwt2_multi(to_tensor(x), levels);
        py::list highs;
        for (const auto& lv : stack.levels) highs.append(py::make_tuple(to_numpy(lv.lh), to_numpy(lv.hl), to_numpy(lv.hh)));
        return py::make_tuple(to_numpy(stack.coarsest_ll), highs);
      },
      py::arg("x"), py::arg("levels"),
      "Multi-level Haar DWT; returns (coarsest_ll, [(lh, hl, hh) per level, finest first]).");
  m.def(
      "idwt2_multi",
      [](const py::array& coarsest_ll, const std::vector<std::tuple<py::array, py::array, py::array>>& highs) {
        wavelet::WaveletStack stack;
        stack.coarsest_ll = to_tensor(coarsest_ll);
        for (const auto& [lh, hl, hh] : highs) {
          wavelet::SubbandSet s;
          s.lh = to_tensor(lh);
          s.hl = to_tensor(hl);
          s.hh = to_tensor(hh);
          s.ll = s.lh.zeros_like();
          stack.levels.push_back(std::move(s));
        }
        return to_numpy(wavelet::idwt2_multi(stack));
      },
      py::arg("coarsest_ll"), py::arg("highs"));

  // ---- models
  py::enum_<Variant>(m, "Variant")
      .value("Baseline", Variant::Baseline)
      .value("BaselineLFP", Variant::BaselineLFP)
      .value("BaselineFFC", Variant::BaselineFFC)
      .value("WcnnLFP", Variant::WcnnLFP)
      .value("WcnnFFC", Variant::WcnnFFC)
      .def("__str__", [](Variant v) { return to_string(v); });
  m.def("parse_variant", &parse_variant, py::arg("name"));
  m.def("variants", &all_variants);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def(py::init([](const std::string& variant, double width_mult, int num_classes, std::int64_t input_h,
                       std::int64_t input_w) {
             ModelConfig c;
             c.variant = parse_variant(variant);
             c.width_mult = width_mult;
             c.num_classes = num_classes;
             c.input_h = input_h;
             c.input_w = input_w;
             return c;
           }),
           py::arg("variant"), py::arg("width_mult") = 1.0, py::arg("num_classes") = 19, py::arg("input_h") = 512,
           py::arg("input_w") = 1024)
      .def_readwrite("variant", &ModelConfig::variant)
      .def_readwrite("width_mult", &ModelConfig::width_mult)
      .def_readwrite("blocks_per_stage", &ModelConfig::blocks_per_stage)
      .def_readwrite("decoder_blocks", &ModelConfig::decoder_blocks)
      .def_readwrite("num_classes", &ModelConfig::num_classes)
      .def_readwrite("input_h", &ModelConfig::input_h)
      .def_readwrite("input_w", &ModelConfig::input_w)
      .def_readwrite("pyramid_levels", &ModelConfig::pyramid_levels)
      .def_readwrite("batch_norm", &ModelConfig::batch_norm)
      .def("validate", &ModelConfig::validate);

  py::class_<NetworkGraph>(m, "Model")
      .def(py::init([](const ModelConfig& c) { return build_model(c); }), py::arg("config"))
      .def_property_readonly("config", &NetworkGraph::config)
      .def_property_readonly("granularity", &NetworkGraph::granularity)
      .def(
          "initialize",
          [](NetworkGraph& g, std::uint64_t seed, const std::string& dtype) { g.initialize(seed, parse_dtype(dtype)); },
          py::arg("seed") = 0, py::arg("dtype") = "f32")
      .def("param_count", &NetworkGraph::param_count)
      .def("layer_param_count", &NetworkGraph::layer_param_count, py::arg("layer"))
      .def(
          "shape_trace",
          [](const NetworkGraph& g, std::int64_t h, std::int64_t w) {
            py::list rows;
            for (const auto& r : g.shape_trace(h, w))
              rows.append(py::make_tuple(r.layer, r.operation, r.input, py::make_tuple(r.shape.n, r.shape.c, r.shape.h, r.shape.w)));
            return rows;
          },
          py::arg("h"), py::arg("w"), "Per-layer (name, operation, input, (n, c, h, w)); allocates nothing.")
      .def(
          "forward",
          [](NetworkGraph& g, const py::array& images) {
            const Tensor x = to_tensor(images, g.params().dtype());
            Tensor y;
            {
              py::gil_scoped_release release;
              y = forward(g, x);
            }
            return to_numpy(y);
          },
          py::arg("images"), "Eval-mode logits for an (n, 3, h, w) batch.")
      .def(
          "predict",
          [](NetworkGraph& g, const py::array& images, std::optional<std::vector<double>> scales) {
            const Tensor x = to_tensor(images, g.params().dtype());
            const auto predictor = scales ? eval::ms_tta_predictor(g, *scales) : eval::logits_predictor(g);
            return to_numpy(eval::predict_labels(predictor, x, g.granularity()));
          },
          py::arg("images"), py::arg("scales") = py::none(),
          "Class labels (n, h, w) for images of any size; pass scales for multi-scale fusion.")
      .def(
          "ms_tta",
          [](NetworkGraph& g, const py::array& images, const std::vector<double>& scales) {
            return to_numpy(eval::ms_tta_predict(g, to_tensor(images, g.params().dtype()), scales));
          },
          py::arg("images"), py::arg("scales"), "Softmax probabilities averaged over scales (f64).")
      .def(
          "parameters",
          [](NetworkGraph& g) {
            py::dict d;
            for (const auto& spec : g.params().specs()) d[py::str(spec.name)] = to_numpy(g.params().get(spec.name));
            return d;
          },
          "Copies of every parameter and buffer, by name.")
      .def(
          "save", [](const NetworkGraph& g, const std::string& path, const std::string& config_text) {
            checkpoint::save(path, g.params(), config_text);
          },
          py::arg("path"), py::arg("config_text") = "")
      .def(
          "load", [](NetworkGraph& g, const std::string& path) { checkpoint::load_into(path, g.params()); },
          py::arg("path"));

  // ---- data and evaluation
  m.def(
      "synth_generate",
      [](std::uint64_t seed, std::size_t n, std::int64_t h, std::int64_t w, int num_classes) {
        return dataset_arrays(data::synth_generate(seed, n, h, w, num_classes));
      },
      py::arg("seed"), py::arg("n"), py::arg("h") = 64, py::arg("w") = 64, py::arg("num_classes") = 4,
      "Synthetic shapes: (images float32 (n, 3, h, w), labels int32 (n, h, w)).");
  m.def(
      "confusion_matrix",
      [](const py::array& truth, const py::array& prediction, int num_classes, int ignore_label) {
        eval::ConfusionMatrix cm(num_classes);
        cm.add(to_labels(truth.cast<py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>>()),
               to_labels(prediction.cast<py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>>()),
               ignore_label);
        py::array_t<std::int64_t> out({num_classes, num_classes});
        std::memcpy(out.mutable_data(), cm.counts().data(), sizeof(std::int64_t) * cm.counts().size());
        return out;
      },
      py::arg("truth"), py::arg("prediction"), py::arg("num_classes"), py::arg("ignore_label") = data::kIgnoreLabel);
  m.def(
      "iou_scores",
      [](const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& counts) {
        if (counts.ndim() != 2 || counts.shape(0) != counts.shape(1)) throw ShapeError("expected a square matrix");
        const auto c = static_cast<int>(counts.shape(0));
        std::vector<std::int64_t> v(counts.data(), counts.data() + counts.size());
        return scores_dict(eval::iou_scores(eval::ConfusionMatrix::from_counts(c, std::move(v))));
      },
      py::arg("confusion"), "Per-class IoU, mean IoU and pixel accuracy; rows are ground truth.");
  m.def(
      "evaluate",
      [](NetworkGraph& g, const py::array& images, const py::array& labels,
         std::optional<std::vector<double>> scales, int batch_size) {
        const auto ds = dataset_from(images, labels, g.config().num_classes);
        const auto predictor = scales ? eval::ms_tta_predictor(g, *scales) : eval::logits_predictor(g);
        return scores_dict(eval::evaluate(predictor, ds, batch_size).scores);
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("scales") = py::none(),
      py::arg("batch_size") = 1);

  // ---- configuration and training
  m.def("config_keys", &config::keys);
  m.def(
      "resolve_config", [](const std::string& text) { return config::dump(config::parse(text)); },
      py::arg("text") = "", "Fills defaults into 'key = value' text and returns the full config.");
  m.def(
      "train",
      [](const std::string& config_text, const std::string& run_dir) {
        const auto cfg = config::parse(config_text);
        config::validate(cfg);
        const auto sets = config::load_datasets(cfg);
        auto g = std::make_unique<NetworkGraph>(build_model(cfg.model));
        auto opts = config::train_options(cfg);
        opts.run_dir = run_dir;
        training::TrainResult r;
        {
          py::gil_scoped_release release;
          r = training::train(*g, sets.train, &sets.val, cfg.optim, cfg.loss, opts);
        }
        py::dict out;
        out["iterations"] = r.iterations;
        out["epochs_completed"] = r.epochs_completed;
        out["last_loss"] = r.last_loss;
        out["val_miou"] = r.last_val_miou ? py::cast(*r.last_val_miou) : py::none();
        out["diverged"] = r.diverged;
        out["checkpoint"] = r.checkpoint.string();
        return py::make_tuple(std::move(g), out);
      },
      py::arg("config_text"), py::arg("run_dir") = "",
      "Trains from config text; returns (model, summary dict).");

  m.def(
      "verify",
      [](bool corrupt_haar, int gradient_instances) {
        verify::Options opts;
        opts.corrupt_haar = corrupt_haar;
        opts.gradient_instances = gradient_instances;
        py::list out;
        for (const auto& c : verify::run_all(opts)) {
          py::dict d;
          d["suite"] = c.suite;
          d["property"] = c.property;
          d["passed"] = c.passed;
          d["value"] = c.value;
          d["bound"] = c.bound;
          out.append(d);
        }
        return out;
      },
      py::arg("corrupt_haar") = false, py::arg("gradient_instances") = 20);
}
