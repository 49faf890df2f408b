#include "wcnn/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "wcnn/errors.hpp"
#include "wcnn/eval.hpp"

namespace wcnn::config {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError(key + ": cannot parse '" + value + "' as " + expected);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "true/false");
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& v, F item) {
  std::vector<T> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(item(trim(part)));
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i]);
  return out;
}

struct Field {
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
};

// Helpers that bind a member accessor to text conversions.
template <typename Access>
Field number(std::string help, Access access) {
  return {std::move(help), [access](const RunConfig& c) { return format_double(access(const_cast<RunConfig&>(c))); },
          [access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_double(k, v); }};
}

template <typename Access>
Field integer(std::string help, Access access) {
  return {std::move(help),
          [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); },
          [access](RunConfig& c, const std::string& k, const std::string& v) {
            auto& ref = access(c);
            ref = parse_int<std::remove_reference_t<decltype(ref)>>(k, v);
          }};
}

template <typename Access>
Field boolean(std::string help, Access access) {
  return {std::move(help), [access](const RunConfig& c) { return access(const_cast<RunConfig&>(c)) ? "true" : "false"; },
          [access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_bool(k, v); }};
}

template <typename Access>
Field text(std::string help, Access access) {
  return {std::move(help), [access](const RunConfig& c) { return access(const_cast<RunConfig&>(c)); },
          [access](RunConfig& c, const std::string&, const std::string& v) { access(c) = v; }};
}

template <typename Access>
Field int_list(std::string help, Access access) {
  return {std::move(help),
          [access](const RunConfig& c) {
            return join(access(const_cast<RunConfig&>(c)), [](int x) { return std::to_string(x); });
          },
          [access](RunConfig& c, const std::string& k, const std::string& v) {
            access(c) = parse_list<int>(v, [&](const std::string& s) { return parse_int<int>(k, s); });
          }};
}

const std::vector<std::pair<std::string, Field>>& table() {
  static const std::vector<std::pair<std::string, Field>> t = {
      {"model.variant",
       {"baseline | baseline-lfp | baseline-ffc | wcnn-lfp | wcnn-ffc",
        [](const RunConfig& c) { return to_string(c.model.variant); },
        [](RunConfig& c, const std::string&, const std::string& v) { c.model.variant = parse_variant(v); }}},
      {"model.width_mult", number("channel width multiplier", [](RunConfig& c) -> double& { return c.model.width_mult; })},
      {"model.blocks_per_stage",
       int_list("residual blocks of conv2..conv5", [](RunConfig& c) -> auto& { return c.model.blocks_per_stage; })},
      {"model.decoder_blocks", int_list("residual blocks of dconv4, dconv3, dconv2, upconv2, upconv1",
                                        [](RunConfig& c) -> auto& { return c.model.decoder_blocks; })},
      {"model.num_classes", integer("number of classes", [](RunConfig& c) -> int& { return c.model.num_classes; })},
      {"model.input_h", integer("input height", [](RunConfig& c) -> std::int64_t& { return c.model.input_h; })},
      {"model.input_w", integer("input width", [](RunConfig& c) -> std::int64_t& { return c.model.input_w; })},
      {"model.pyramid_levels",
       integer("pyramid depth, 0 = deepest the input allows", [](RunConfig& c) -> int& { return c.model.pyramid_levels; })},
      {"model.batch_norm", boolean("batch normalization in every block", [](RunConfig& c) -> bool& { return c.model.batch_norm; })},

      {"optim.lr0", number("initial learning rate", [](RunConfig& c) -> double& { return c.optim.lr0; })},
      {"optim.momentum", number("SGD momentum", [](RunConfig& c) -> double& { return c.optim.momentum; })},
      {"optim.decay_factor", number("learning-rate decay factor", [](RunConfig& c) -> double& { return c.optim.decay_factor; })},
      {"optim.decay_every_epochs",
       integer("epochs between decays", [](RunConfig& c) -> int& { return c.optim.decay_every_epochs; })},
      {"optim.batch_size", integer("images per step", [](RunConfig& c) -> int& { return c.optim.batch_size; })},
      {"optim.nesterov", boolean("Nesterov momentum", [](RunConfig& c) -> bool& { return c.optim.nesterov; })},

      {"loss.kind",
       {"ce | bootstrap",
        [](const RunConfig& c) { return std::string(c.loss.kind == training::LossKind::CrossEntropy ? "ce" : "bootstrap"); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "ce")
            c.loss.kind = training::LossKind::CrossEntropy;
          else if (v == "bootstrap")
            c.loss.kind = training::LossKind::Bootstrap;
          else
            bad_value(k, v, "ce or bootstrap");
        }}},
      {"loss.k_pixels", integer("hardest pixels per image at 512x1024",
                                [](RunConfig& c) -> std::int64_t& { return c.loss.k_pixels; })},
      {"loss.scale_k_to_area",
       boolean("scale k_pixels to the image area", [](RunConfig& c) -> bool& { return c.loss.scale_k_to_area; })},
      {"loss.ignore_label",
       {"label excluded from loss and metrics, or none",
        [](const RunConfig& c) { return c.loss.ignore_label ? std::to_string(*c.loss.ignore_label) : "none"; },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "none")
            c.loss.ignore_label.reset();
          else
            c.loss.ignore_label = parse_int<int>(k, v);
        }}},

      {"data.root", text("dataset root (falls back to $WCNN_DATA_ROOT)", [](RunConfig& c) -> auto& { return c.data.root; })},
      {"data.train_split", text("training split directory", [](RunConfig& c) -> auto& { return c.data.train_split; })},
      {"data.val_split", text("validation split directory", [](RunConfig& c) -> auto& { return c.data.val_split; })},
      {"data.synth", boolean("generate synthetic shapes instead of reading files",
                             [](RunConfig& c) -> bool& { return c.data.synth; })},
      {"data.synth_train", integer("synthetic training samples", [](RunConfig& c) -> int& { return c.data.synth_train; })},
      {"data.synth_val", integer("synthetic validation samples", [](RunConfig& c) -> int& { return c.data.synth_val; })},
      {"data.synth_seed",
       integer("synthetic data seed", [](RunConfig& c) -> std::uint64_t& { return c.data.synth_seed; })},

      {"train.epochs", integer("training epochs", [](RunConfig& c) -> int& { return c.train.epochs; })},
      {"train.max_iterations",
       integer("stop after this many steps, 0 = no limit", [](RunConfig& c) -> std::int64_t& { return c.train.max_iterations; })},
      {"train.checkpoint_every",
       integer("epochs between checkpoints, 0 = final only", [](RunConfig& c) -> int& { return c.train.checkpoint_every; })},
      {"train.dtype",
       {"f32 | f64", [](const RunConfig& c) { return to_string(c.train.dtype); },
        [](RunConfig& c, const std::string&, const std::string& v) { c.train.dtype = parse_dtype(v); }}},

      {"eval.scales",
       {"comma-separated test-time scales",
        [](const RunConfig& c) { return join(c.eval.scales, format_double); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.eval.scales = parse_list<double>(v, [&](const std::string& s) { return parse_double(k, s); });
        }}},
      {"eval.random_scales",
       integer("draw this many random scales instead (seeded), 0 = use eval.scales",
               [](RunConfig& c) -> int& { return c.eval.random_scales; })},
      {"eval.ms", boolean("report multi-scale results as well", [](RunConfig& c) -> bool& { return c.eval.ms; })},
      {"eval.batch_size", integer("images per evaluation batch", [](RunConfig& c) -> int& { return c.eval.batch_size; })},

      {"seed", integer("seed for initialization, shuffling and random scales",
                       [](RunConfig& c) -> std::uint64_t& { return c.seed; })},
      {"out_root", text("parent directory of run directories", [](RunConfig& c) -> auto& { return c.out_root; })},
  };
  return t;
}

const Field& field(const std::string& key) {
  static const auto index = [] {
    std::map<std::string, const Field*> m;
    for (const auto& [k, f] : table()) m.emplace(k, &f);
    return m;
  }();
  auto it = index.find(key);
  if (it == index.end()) throw ConfigError("unknown config key '" + key + "'");
  return *it->second;
}

}  // namespace

const std::vector<std::string>& keys() {
  static const auto k = [] {
    std::vector<std::string> out;
    for (const auto& [key, f] : table()) out.push_back(key);
    return out;
  }();
  return k;
}

const std::string& help(const std::string& key) { return field(key).help; }

void set(RunConfig& cfg, const std::string& key, const std::string& value) {
  field(key).set(cfg, key, trim(value));
}

std::string get(const RunConfig& cfg, const std::string& key) { return field(key).get(cfg); }

void apply(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    try {
      set(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

RunConfig parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  apply(cfg, text, origin);
  return cfg;
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string dump(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, f] : table()) out += key + " = " + f.get(cfg) + "\n";
  return out;
}

std::string data_root(const RunConfig& cfg) {
  if (!cfg.data.root.empty()) return cfg.data.root;
  if (const char* env = std::getenv(kDataRootEnv)) return env;
  return "";
}

void validate(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.optim.validate();
  cfg.loss.validate();
  if (cfg.train.epochs < 0) throw ConfigError("train.epochs must be non-negative");
  if (cfg.train.max_iterations < 0) throw ConfigError("train.max_iterations must be non-negative");
  if (cfg.train.checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be non-negative");
  if (cfg.eval.batch_size < 1) throw ConfigError("eval.batch_size must be at least 1");
  if (cfg.eval.random_scales < 0) throw ConfigError("eval.random_scales must be non-negative");
  if (cfg.eval.random_scales == 0 && cfg.eval.scales.empty()) throw ConfigError("eval.scales is empty");
  for (double s : cfg.eval.scales)
    if (!(s > 0)) throw ConfigError("eval.scales must be positive");
  if (cfg.data.synth) {
    if (cfg.data.synth_train < 1) throw ConfigError("data.synth_train must be at least 1");
    if (cfg.data.synth_val < 0) throw ConfigError("data.synth_val must be non-negative");
    if (cfg.model.num_classes < 2 || cfg.model.num_classes > 6)
      throw ConfigError("synthetic data supports 2..6 classes, model.num_classes is " +
                        std::to_string(cfg.model.num_classes));
  } else if (data_root(cfg).empty()) {
    throw ConfigError(std::string("no dataset: set data.root, export ") + kDataRootEnv + ", or set data.synth = true");
  }
}

std::vector<double> eval_scales(const RunConfig& cfg) {
  if (cfg.eval.random_scales > 0) return eval::random_scales(cfg.seed, cfg.eval.random_scales);
  return cfg.eval.scales;
}

std::uint64_t synth_val_seed(std::uint64_t synth_seed) {
  std::uint64_t z = synth_seed + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Datasets load_datasets(const RunConfig& cfg, std::ostream* warn) {
  const auto& m = cfg.model;
  if (cfg.data.synth) {
    return {data::synth_generate(cfg.data.synth_seed, cfg.data.synth_train, m.input_h, m.input_w, m.num_classes),
            data::synth_generate(synth_val_seed(cfg.data.synth_seed), cfg.data.synth_val, m.input_h, m.input_w,
                                 m.num_classes)};
  }
  const std::string root = data_root(cfg);
  if (root.empty()) throw ConfigError(std::string("no dataset: set data.root or export ") + kDataRootEnv);
  const int ignore = cfg.loss.ignore_label.value_or(data::kIgnoreLabel);
  return {data::load_dataset(root, cfg.data.train_split, m.num_classes, ignore, warn),
          data::load_dataset(root, cfg.data.val_split, m.num_classes, ignore, warn)};
}

training::TrainOptions train_options(const RunConfig& cfg) {
  training::TrainOptions o;
  o.epochs = cfg.train.epochs;
  o.max_iterations = cfg.train.max_iterations;
  o.checkpoint_every = cfg.train.checkpoint_every;
  o.seed = cfg.seed;
  o.dtype = cfg.train.dtype;
  o.config_text = dump(cfg);
  return o;
}

}  // namespace wcnn::config
