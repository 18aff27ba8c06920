#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "nlran/errors.hpp"
#include "nlran/run_config.hpp"

using namespace nlran;
using nlohmann::json;

TEST(RunConfig, DefaultsAreConsistent) {
  const RunConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.network.input_shape, (Extent3{16, 32, 32}));
  EXPECT_EQ(cfg.data.split_ratios, (std::array<std::size_t, 3>{8, 1, 1}));
  EXPECT_EQ(cfg.phantom.count, 300u);
  EXPECT_EQ(RunConfig::from_json(json::object()).to_json(), cfg.to_json());
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig cfg;
  cfg.train.learning_rate = 0.01;
  cfg.phantom.count = 42;
  cfg.phantom.noise_level = 0.0;
  cfg.data.split_seed = 99;
  cfg.paths.run_dir = "/tmp/r";
  cfg.network.attention_variant = AttentionVariant::Channel;
  const auto j = cfg.to_json();
  EXPECT_EQ(RunConfig::from_json(j).to_json(), j);
}

TEST(RunConfig, PartialOverlayKeepsOtherDefaults) {
  const auto cfg = RunConfig::from_json(json::parse(R"({"train": {"seed": 3}, "network": {"use_nonlocal": false}})"));
  EXPECT_EQ(cfg.train.seed, 3u);
  EXPECT_EQ(cfg.train.learning_rate, 0.001);
  EXPECT_FALSE(cfg.network.use_nonlocal);
  EXPECT_EQ(cfg.network.base_channels, 8u);
}

TEST(RunConfig, UnknownKeysRejectedAtEveryLevel) {
  for (const char* text : {R"({"optimizer": "adam"})", R"({"train": {"decay": 1}})", R"({"network": {"depth": 50}})",
                           R"({"phantom": {"colour": 1}})", R"({"data": {"shuffle": true}})",
                           R"({"data": {"preprocess": {"zoom": 2}}})", R"({"paths": {"tmp": "x"}})"}) {
    EXPECT_THROW(RunConfig::from_json(json::parse(text)), ConfigError) << text;
  }
}

TEST(RunConfig, CrossSectionValidation) {
  EXPECT_THROW(RunConfig::from_json(json::parse(R"({"data": {"preprocess": {"target_slices": 8}}})")), ConfigError);
  EXPECT_NO_THROW(RunConfig::from_json(
      json::parse(R"({"data": {"preprocess": {"target_slices": 8}}, "network": {"input_shape": [8, 32, 32]}})")));
  EXPECT_THROW(RunConfig::from_json(json::parse(R"({"data": {"split_ratios": [8, 0, 1]}})")), ConfigError);
  EXPECT_THROW(RunConfig::from_json(json::parse(R"({"train": {"learning_rate": "fast"}})")), ConfigError);
}

TEST(RunConfig, LoadErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "nlran_run_config_test";
  std::filesystem::create_directories(dir);
  EXPECT_THROW(RunConfig::load((dir / "absent.json").string()), ConfigError);
  std::ofstream((dir / "broken.json").string()) << "{ not json";
  EXPECT_THROW(RunConfig::load((dir / "broken.json").string()), ConfigError);
  std::ofstream((dir / "ok.json").string()) << R"({"phantom": {"count": 12}})";
  EXPECT_EQ(RunConfig::load((dir / "ok.json").string()).phantom.count, 12u);
}

TEST(PhantomJson, RoundTrip) {
  PhantomSpec spec;
  spec.seed = 77;
  spec.cp.intensity = 200.0f;
  const auto back = phantom_from_json(phantom_to_json(spec));
  EXPECT_EQ(phantom_to_json(back), phantom_to_json(spec));
  EXPECT_EQ(back.seed, 77u);
  const auto pre = preprocess_from_json(preprocess_to_json({8, 20, 24, false}));
  EXPECT_EQ(pre.crop_width, 24u);
  EXPECT_FALSE(pre.use_mask);
}
