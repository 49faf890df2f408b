// wcnn command-line driver: train, eval, predict, synth, verify, inspect.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wcnn/checkpoint.hpp"
#include "wcnn/config.hpp"
#include "wcnn/data.hpp"
#include "wcnn/errors.hpp"
#include "wcnn/eval.hpp"
#include "wcnn/model.hpp"
#include "wcnn/training.hpp"
#include "wcnn/verify.hpp"

namespace fs = std::filesystem;
using namespace wcnn;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

// Configuration layers shared by the subcommands: an optional file, then one
// flag per config key. Flags are applied after the file.
struct ConfigFlags {
  std::string file;
  bool dump = false;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "config file of 'key = value' lines");
    app->add_flag("--dump-config", dump, "print the resolved config and exit");
    for (const auto& key : config::keys()) {
      app->add_option("--" + key, values[key], config::help(key))
          ->group("Config keys")
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }

  /// `base` is the starting point (defaults, or a checkpoint's stored config).
  config::RunConfig resolve(CLI::App* app, config::RunConfig base = {}) const {
    if (!file.empty()) {
      if (!fs::exists(file)) throw ConfigError("config file " + file + " does not exist");
      config::apply(base, read_file(file), file);
    }
    for (const auto& key : config::keys())
      if (app->count("--" + key) > 0) config::set(base, key, values.at(key));
    return base;
  }

  static std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path fresh_run_dir(const config::RunConfig& cfg) {
  const std::string base = timestamp() + "_seed" + std::to_string(cfg.seed);
  fs::path dir = fs::path(cfg.out_root) / base;
  for (int i = 1; fs::exists(dir); ++i) dir = fs::path(cfg.out_root) / (base + "-" + std::to_string(i));
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

// Config stored in a checkpoint, used as the base layer for eval and predict.
config::RunConfig checkpoint_config(const fs::path& ckpt) {
  const auto manifest = checkpoint::read_manifest(ckpt);
  if (manifest.config_text.empty()) return {};
  return config::parse(manifest.config_text, ckpt.string() + " (stored config)");
}

NetworkGraph load_model(const config::RunConfig& cfg, const fs::path& ckpt) {
  NetworkGraph g = build_model(cfg.model);
  g.initialize(cfg.seed, cfg.train.dtype);
  checkpoint::load_into(ckpt, g.params());
  return g;
}

std::string join(const std::vector<double>& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  return os.str();
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  ConfigFlags cfg;
  std::string run_dir;
};

int cmd_train(CLI::App* app, const TrainArgs& args) {
  const auto cfg = args.cfg.resolve(app);
  if (args.cfg.dump) {
    std::cout << config::dump(cfg);
    return kOk;
  }
  config::validate(cfg);

  const auto sets = config::load_datasets(cfg, &std::cerr);
  if (sets.train.empty()) throw DataError("no training samples found");
  const fs::path dir = args.run_dir.empty() ? fresh_run_dir(cfg) : fs::path(args.run_dir);
  fs::create_directories(dir);
  write_text(dir / "config.txt", config::dump(cfg));
  std::cout << "run directory " << dir.string() << "\n"
            << "model " << to_string(cfg.model.variant) << ", " << sets.train.size() << " training and "
            << sets.val.size() << " validation samples\n";

  NetworkGraph g = build_model(cfg.model);
  auto opts = config::train_options(cfg);
  opts.run_dir = dir;
  const auto r = training::train(g, sets.train, &sets.val, cfg.optim, cfg.loss, opts, &std::cout);
  if (r.diverged) {
    std::cerr << "training diverged after " << r.iterations << " iterations; last good weights in "
              << r.checkpoint.string() << "\n";
    return kFailure;
  }
  std::cout << "finished " << r.iterations << " iterations";
  if (r.last_val_miou) std::cout << ", val mIoU " << *r.last_val_miou;
  std::cout << "\ncheckpoint " << r.checkpoint.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  ConfigFlags cfg;
  std::string checkpoint;
  bool ms = false;
  bool both = false;
  std::string out;
};

int cmd_eval(CLI::App* app, const EvalArgs& args) {
  auto cfg = args.cfg.resolve(app, checkpoint_config(args.checkpoint));
  if (args.ms) cfg.eval.ms = true;
  if (args.cfg.dump) {
    std::cout << config::dump(cfg);
    return kOk;
  }
  config::validate(cfg);
  NetworkGraph g = load_model(cfg, args.checkpoint);
  const auto val = config::load_datasets(cfg, &std::cerr).val;
  if (val.empty()) throw DataError("validation split is empty");

  const auto scales = config::eval_scales(cfg);
  std::vector<eval::ReportRow> rows;
  if (args.both || !cfg.eval.ms)
    rows.push_back({"single", eval::evaluate(eval::logits_predictor(g), val, cfg.eval.batch_size)});
  if (args.both || cfg.eval.ms)
    rows.push_back({"ms", eval::evaluate(eval::ms_tta_predictor(g, scales), val, cfg.eval.batch_size)});
  // A lone column keeps one header so the table layout is the same with and
  // without --ms.
  if (!args.both) rows.front().method = "IoU";

  const auto names = eval::default_class_names(cfg.model.num_classes);
  const auto freq = data::class_frequency(val);
  const std::string table = eval::format_report(rows, names, freq);
  std::cout << "checkpoint " << args.checkpoint << ", " << val.size() << " samples, scales "
            << (cfg.eval.ms || args.both ? join(scales) : "1") << "\n"
            << table;
  if (!args.out.empty()) {
    fs::create_directories(args.out);
    write_text(fs::path(args.out) / "report.txt", table);
    write_text(fs::path(args.out) / "report.jsonl", eval::report_jsonl(rows, names));
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  ConfigFlags cfg;
  std::string checkpoint;
  std::vector<std::string> images;
  std::string out;
  std::string palette;
  bool ms = false;
};

int cmd_predict(CLI::App* app, const PredictArgs& args) {
  auto cfg = args.cfg.resolve(app, checkpoint_config(args.checkpoint));
  if (args.ms) cfg.eval.ms = true;
  if (args.cfg.dump) {
    std::cout << config::dump(cfg);
    return kOk;
  }
  if (args.images.empty()) throw ConfigError("no input images given");
  cfg.model.validate();
  NetworkGraph g = load_model(cfg, args.checkpoint);
  const auto palette =
      args.palette.empty() ? eval::default_palette(cfg.model.num_classes) : eval::read_palette(args.palette);
  if (static_cast<int>(palette.size()) < cfg.model.num_classes)
    throw ConfigError("palette has " + std::to_string(palette.size()) + " colors for " +
                      std::to_string(cfg.model.num_classes) + " classes");

  fs::create_directories(args.out);
  eval::write_palette(fs::path(args.out) / "palette.txt", palette);
  const auto predict = cfg.eval.ms ? eval::ms_tta_predictor(g, config::eval_scales(cfg)) : eval::logits_predictor(g);
  for (const auto& path : args.images) {
    const Tensor image = data::to_tensor(data::read_png(path));
    const Shape s = image.shape();
    const LabelMap labels = eval::predict_labels(predict, image.cast(g.params().dtype()), g.granularity());
    const fs::path target = fs::path(args.out) / (fs::path(path).stem().string() + ".png");
    eval::export_colormap(labels, palette, target);
    std::cout << path << " -> " << target.string();
    const std::int64_t m = g.granularity();
    const std::int64_t ph = (s.h + m - 1) / m * m, pw = (s.w + m - 1) / m * m;
    if (ph != s.h || pw != s.w)
      std::cout << " (padded " << s.h << "x" << s.w << " to " << ph << "x" << pw << ", cropped back)";
    std::cout << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t train = 256;
  std::size_t val = 64;
  std::int64_t size = 64;
  int classes = 4;
  std::uint64_t seed = 1;
};

// Writes the generated data in the on-disk layout, so the data.root path can
// be exercised without a real dataset.
int cmd_synth(const SynthArgs& args) {
  data::save_dataset(data::synth_generate(args.seed, args.train, args.size, args.size, args.classes), args.out,
                     "train");
  data::save_dataset(data::synth_generate(config::synth_val_seed(args.seed), args.val, args.size, args.size,
                                          args.classes),
                     args.out, "val");
  eval::write_palette(fs::path(args.out) / "palette.txt", eval::default_palette(args.classes));
  std::cout << "wrote " << args.train << " training and " << args.val << " validation samples to " << args.out
            << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  bool corrupt_haar = false;
  int instances = 20;
};

int cmd_verify(const VerifyArgs& args) {
  verify::Options opts;
  opts.corrupt_haar = args.corrupt_haar;
  opts.gradient_instances = args.instances;
  const auto start = std::chrono::steady_clock::now();
  int failed = 0;
  const auto checks = verify::run_all(opts, [&](const verify::Check& c) {
    if (!c.passed) ++failed;
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.suite << ": " << c.property << "  (" << c.value
              << " <= " << c.bound << ")";
    if (!c.detail.empty()) std::cout << "  " << c.detail;
    std::cout << "\n" << std::flush;
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << checks.size() - failed << "/" << checks.size() << " checks passed in " << std::fixed
            << std::setprecision(1) << secs << " s\n";
  return failed == 0 ? kOk : kFailure;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  ConfigFlags cfg;
  std::int64_t height = 0;
  std::int64_t width = 0;
};

int cmd_inspect(CLI::App* app, const InspectArgs& args) {
  auto cfg = args.cfg.resolve(app);
  if (args.cfg.dump) {
    std::cout << config::dump(cfg);
    return kOk;
  }
  if (args.height > 0) cfg.model.input_h = args.height;
  if (args.width > 0) cfg.model.input_w = args.width;
  cfg.model.validate();
  const std::int64_t h = cfg.model.input_h, w = cfg.model.input_w;
  const NetworkGraph g = build_model(cfg.model);
  if (h % g.granularity() != 0 || w % g.granularity() != 0)
    throw ConfigError("input " + std::to_string(h) + "x" + std::to_string(w) + " is not a multiple of " +
                      std::to_string(g.granularity()) + " for " + to_string(cfg.model.variant));

  std::cout << to_string(cfg.model.variant) << " for a " << h << "x" << w << " input\n\n";
  std::cout << std::left << std::setw(14) << "layer" << std::setw(30) << "operation" << std::setw(14) << "input"
            << std::right << std::setw(8) << "res" << std::setw(8) << "depth" << std::setw(16) << "dims"
            << std::setw(12) << "params" << "\n";
  for (const auto& row : g.shape_trace(h, w)) {
    std::int64_t params = 0;
    try {
      params = g.layer_param_count(row.layer);
    } catch (const ContractError&) {
      params = 0;  // pyramid sub-rows are reported under their parent layer
    }
    std::cout << std::left << std::setw(14) << row.layer << std::setw(30) << row.operation << std::setw(14)
              << row.input << std::right << std::setw(8) << ("1/" + std::to_string(h / row.shape.h))
              << std::setw(8) << row.shape.c << std::setw(16)
              << (std::to_string(row.shape.h) + "x" + std::to_string(row.shape.w)) << std::setw(12) << params
              << "\n";
  }

  std::cout << "\ntrainable parameters (width " << cfg.model.width_mult << ", " << cfg.model.num_classes
            << " classes)\n";
  std::map<Variant, std::int64_t> counts;
  for (Variant v : all_variants()) {
    ModelConfig mc = cfg.model;
    mc.variant = v;
    counts[v] = build_model(mc).param_count();
  }
  for (Variant v : all_variants()) {
    std::cout << "  " << std::left << std::setw(14) << to_string(v) << std::right << std::setw(14) << counts[v];
    if (uses_wavelet_unpool(v)) {
      const Variant m = matched_variant(v);
      std::cout << "   " << counts[m] - counts[v] << " fewer than " << to_string(m);
    }
    std::cout << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wavelet encoder-decoder networks for dense prediction", "wcnn"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "wcnn 0.1.0");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoints");
  train.cfg.attach(train_cmd);
  train_cmd->add_option("--run-dir", train.run_dir, "output directory (default: {out_root}/{time}_seed{seed})");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "per-class IoU of a checkpoint on the validation split");
  ev.cfg.attach(eval_cmd);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_flag("--ms", ev.ms, "multi-scale test-time augmentation");
  eval_cmd->add_flag("--both", ev.both, "report single-scale and multi-scale columns side by side");
  eval_cmd->add_option("--out", ev.out, "directory for report.txt and report.jsonl");

  PredictArgs pred;
  auto* predict_cmd = app.add_subcommand("predict", "write color-mapped predictions for PNG images");
  pred.cfg.attach(predict_cmd);
  predict_cmd->add_option("--checkpoint", pred.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("images", pred.images, "input PNG files");
  predict_cmd->add_option("-o,--out", pred.out, "output directory")->required();
  predict_cmd->add_option("--palette", pred.palette, "palette file, one #rrggbb per class");
  predict_cmd->add_flag("--ms", pred.ms, "multi-scale test-time augmentation");

  SynthArgs syn;
  auto* synth_cmd = app.add_subcommand("synth", "write a generated dataset in the on-disk layout");
  synth_cmd->add_option("-o,--out", syn.out, "dataset root")->required();
  synth_cmd->add_option("--train", syn.train, "training samples");
  synth_cmd->add_option("--val", syn.val, "validation samples");
  synth_cmd->add_option("--size", syn.size, "image side, a multiple of 32");
  synth_cmd->add_option("--classes", syn.classes, "class count, 2 to 6");
  synth_cmd->add_option("--seed", syn.seed, "generator seed (same meaning as data.synth_seed)");

  VerifyArgs ver;
  auto* verify_cmd = app.add_subcommand("verify", "run the invariant checks");
  verify_cmd->add_option("--instances", ver.instances, "random instances per gradient check")
      ->check(CLI::PositiveNumber);
  verify_cmd->add_flag("--corrupt-haar", ver.corrupt_haar)->group("");

  InspectArgs insp;
  auto* inspect_cmd = app.add_subcommand("inspect", "print the layer trace and parameter counts");
  insp.cfg.attach(inspect_cmd);
  inspect_cmd->add_option("--height", insp.height, "input height (default: model.input_h)");
  inspect_cmd->add_option("--width", insp.width, "input width (default: model.input_w)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_cmd, train);
    if (eval_cmd->parsed()) return cmd_eval(eval_cmd, ev);
    if (predict_cmd->parsed()) return cmd_predict(predict_cmd, pred);
    if (synth_cmd->parsed()) return cmd_synth(syn);
    if (verify_cmd->parsed()) return cmd_verify(ver);
    if (inspect_cmd->parsed()) return cmd_inspect(inspect_cmd, insp);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
