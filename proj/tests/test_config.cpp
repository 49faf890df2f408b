#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "support.hpp"
#include "wcnn/config.hpp"
#include "wcnn/errors.hpp"

using namespace wcnn;
using wcnn::testing::TempDir;

TEST_CASE("defaults follow the published training recipe") {
  const config::RunConfig cfg;
  CHECK(cfg.optim.lr0 == 0.001);
  CHECK(cfg.optim.momentum == 0.9);
  CHECK(cfg.optim.decay_factor == 0.9);
  CHECK(cfg.optim.decay_every_epochs == 10);
  CHECK_FALSE(cfg.optim.nesterov);
  CHECK(cfg.loss.kind == training::LossKind::Bootstrap);
  CHECK(cfg.loss.k_pixels == 8192);
  CHECK(cfg.eval.scales == std::vector<double>{0.75, 1.0, 1.25});
}

TEST_CASE("dump and parse round trip every key") {
  config::RunConfig cfg;
  cfg.model.variant = Variant::BaselineLFP;
  cfg.model.width_mult = 0.1;
  cfg.model.blocks_per_stage = {1, 2, 3, 1};
  cfg.optim.lr0 = 1.0 / 3.0;
  cfg.optim.nesterov = true;
  cfg.loss.kind = training::LossKind::CrossEntropy;
  cfg.loss.ignore_label = std::nullopt;
  cfg.data.root = "/data/x y";
  cfg.train.dtype = DType::f64;
  cfg.eval.scales = {0.5, 1.75};
  cfg.seed = 1234567890123ULL;

  const std::string text = config::dump(cfg);
  const auto back = config::parse(text);
  CHECK(config::dump(back) == text);
  CHECK(back.optim.lr0 == cfg.optim.lr0);
  CHECK(back.model.variant == Variant::BaselineLFP);
  CHECK_FALSE(back.loss.ignore_label.has_value());
  CHECK(back.data.root == "/data/x y");
  CHECK(back.seed == cfg.seed);

  for (const auto& key : config::keys()) {
    CAPTURE(key);
    CHECK(text.find(key + " = ") != std::string::npos);
    CHECK_FALSE(config::help(key).empty());
  }
}

TEST_CASE("config text allows comments and reports line numbers") {
  const auto cfg = config::parse("# comment\n\nseed = 7   # trailing\nmodel.variant = wcnn-lfp\n");
  CHECK(cfg.seed == 7);
  CHECK(cfg.model.variant == Variant::WcnnLFP);

  auto message = [](const std::string& text) {
    try {
      config::parse(text, "run.cfg");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("seed = 1\nmodel.widht_mult = 2\n").find("run.cfg:2") != std::string::npos);
  CHECK(message("seed = 1\nmodel.widht_mult = 2\n").find("unknown config key 'model.widht_mult'") !=
        std::string::npos);
  CHECK(message("optim.lr0 = fast\n").find("cannot parse 'fast'") != std::string::npos);
  CHECK(message("just words\n").find("run.cfg:1") != std::string::npos);
}

TEST_CASE("load reads a file") {
  TempDir dir("cfg");
  {
    std::ofstream out(dir / "a.cfg");
    out << "optim.batch_size = 8\n";
  }
  CHECK(config::load(dir / "a.cfg").optim.batch_size == 8);
  CHECK_THROWS_AS(config::load(dir / "missing.cfg"), ConfigError);
}

TEST_CASE("validation needs a data source") {
  config::RunConfig cfg;
  ::unsetenv(config::kDataRootEnv);
  CHECK_THROWS_AS(config::validate(cfg), ConfigError);

  ::setenv(config::kDataRootEnv, "/srv/data", 1);
  CHECK(config::data_root(cfg) == "/srv/data");
  CHECK_NOTHROW(config::validate(cfg));
  cfg.data.root = "/elsewhere";
  CHECK(config::data_root(cfg) == "/elsewhere");
  ::unsetenv(config::kDataRootEnv);

  config::RunConfig synth;
  synth.data.synth = true;
  synth.model.num_classes = 4;
  CHECK_NOTHROW(config::validate(synth));
  synth.model.num_classes = 19;
  CHECK_THROWS_AS(config::validate(synth), ConfigError);
}

TEST_CASE("random evaluation scales come from the seed") {
  config::RunConfig cfg;
  CHECK(config::eval_scales(cfg) == cfg.eval.scales);
  cfg.eval.random_scales = 3;
  cfg.seed = 4;
  const auto a = config::eval_scales(cfg);
  CHECK(a.size() == 3);
  CHECK(a == config::eval_scales(cfg));

  const auto opts = config::train_options(cfg);
  CHECK(opts.seed == 4);
  CHECK(opts.config_text == config::dump(cfg));
}
