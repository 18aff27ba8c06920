#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "nlran/errors.hpp"
#include "nlran/model.hpp"
#include "oracles.hpp"

using namespace nlran;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "nlran_model_test";
  fs::create_directories(dir);
  return dir / name;
}

Tensor<float> random_input(const NetworkConfig& cfg, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x({n, cfg.input_channels, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]});
  for (auto& v : x.values()) v = float(rng.uniform());
  return x;
}

std::vector<std::string> stage_extents(const NetworkConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& r : describe(cfg)) {
    if (!r.stage_row) continue;
    out.push_back(std::to_string(r.extents[0]) + "x" + std::to_string(r.extents[1]) + "x" + std::to_string(r.extents[2]));
  }
  return out;
}

}  // namespace

TEST(NetworkConfig, JsonRoundTripAndUnknownKeys) {
  auto cfg = NetworkConfig::resmix6();
  cfg.attention_variant = AttentionVariant::Spatial;
  const auto back = NetworkConfig::from_json(cfg.to_json());
  EXPECT_EQ(back, cfg);
  EXPECT_EQ(back.hash(), cfg.hash());
  EXPECT_NE(NetworkConfig::resmix3().hash(), cfg.hash());
  EXPECT_EQ(cfg.hash().size(), 16u);
  auto j = cfg.to_json();
  j["dropout"] = 0.5;
  EXPECT_THROW(NetworkConfig::from_json(j), ConfigError);
  EXPECT_THROW(NetworkConfig::from_json(nlohmann::json::array()), ConfigError);
}

TEST(NetworkConfig, InvalidValues) {
  auto cfg = NetworkConfig::resmix3();
  cfg.input_shape = {0, 32, 32};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = NetworkConfig::resmix3();
  cfg.base_channels = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = NetworkConfig::resmix3();
  cfg.num_classes = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ShapeEngine, FullScaleStageRows) {
  const std::vector<std::string> table{"32x80x80", "16x40x40", "16x40x40", "16x40x40", "8x20x20",
                                       "8x20x20",  "4x10x10",  "4x10x10",  "2x5x5",   "1x1x1"};
  EXPECT_EQ(stage_extents(NetworkConfig::full_scale(false)), table);
  EXPECT_EQ(stage_extents(NetworkConfig::full_scale(true)), table);
}

TEST(ShapeEngine, ModuleSequenceFollowsStacks) {
  std::vector<std::string> kinds;
  for (const auto& r : describe(NetworkConfig::resmix6()))
    if (r.kind == "attention" || r.kind == "nonlocal") kinds.push_back(r.name);
  EXPECT_EQ(kinds, (std::vector<std::string>{"stage1.attention0", "stage2.attention0", "stage2.attention1",
                                             "stage3.attention0", "stage3.attention1", "stage3.attention2",
                                             "nonlocal"}));
  for (const auto& r : describe(NetworkConfig::resnet_baseline())) {
    EXPECT_NE(r.kind, "attention");
    EXPECT_NE(r.kind, "nonlocal");
  }
}

TEST(ShapeEngine, CountsAgreeWithBuiltModel) {
  for (const auto& cfg : {NetworkConfig::resmix3(), NetworkConfig::resmix6(), NetworkConfig::resnet_baseline()}) {
    Model<float> model(cfg, 1);
    EXPECT_EQ(count_params(cfg), count_params(model));
    EXPECT_EQ(count_params(cfg), model.parameters().element_count());
  }
  EXPECT_EQ(Model<float>(NetworkConfig::resmix6(), 0).attention_module_count(), 6u);
}

TEST(ShapeEngine, ClosedFormCounts) {
  EXPECT_EQ(ConvSpec::cube(2, 4, 3).parameter_count(), 220u);
  ParameterStore<float> store;
  Rng rng(1);
  LinearLayer<float> fc(store, "fc", 256, 3, rng);
  EXPECT_EQ(store.element_count(), 771u);
}

TEST(ShapeEngine, MacsScaleWithVolume) {
  auto small = NetworkConfig::resnet_baseline();
  auto big = small;
  big.input_shape = {32, 32, 32};
  const auto rows_small = describe(small), rows_big = describe(big);
  // The stem convolution output doubles in volume, so do its MACs.
  EXPECT_EQ(rows_big[0].macs, 2 * rows_small[0].macs);
  EXPECT_EQ(rows_small[0].macs, std::uint64_t(8) * 8 * 16 * 16 * 1 * 343);
}

TEST(Model, DeskForwardShapeAndFiniteLogits) {
  const auto cfg = NetworkConfig::resmix3();
  Model<float> model(cfg, 3);
  const auto logits = model.predict_logits(random_input(cfg, 2, 4));
  EXPECT_EQ(logits.shape(), (Shape{2, 3}));
  EXPECT_TRUE(logits.all_finite());
  EXPECT_THROW(model.predict_logits(Tensor<float>({1, 1, 8, 32, 32})), ShapeError);
}

TEST(Model, SameSeedSameParameters) {
  Model<float> a(NetworkConfig::resmix3(), 9), b(NetworkConfig::resmix3(), 9), c(NetworkConfig::resmix3(), 10);
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    all_equal = all_equal && a.parameters()[i].value == b.parameters()[i].value;
    any_diff = any_diff || !(a.parameters()[i].value == c.parameters()[i].value);
  }
  EXPECT_TRUE(all_equal);
  EXPECT_TRUE(any_diff);
}

TEST(Model, CaptureDoesNotChangeLogits) {
  const auto cfg = NetworkConfig::resmix3();
  Model<float> model(cfg, 5);
  const auto x = random_input(cfg, 1, 6);
  Tape<float> plain, captured;
  const auto a = model.forward(plain, plain.constant(x)).value();
  ForwardCapture<float> cap;
  const auto b = model.forward(captured, captured.constant(x), &cap).value();
  EXPECT_EQ(a, b);
  EXPECT_EQ(cap.attention_masks.size(), 3u);
  EXPECT_TRUE(cap.features.valid());
}

TEST(Model, MicroConfigFiniteDifferences) {
  NetworkConfig cfg;
  cfg.base_channels = 4;
  cfg.input_shape = {8, 16, 16};
  Model<double> model(cfg, 7);
  Rng rng(8);
  const auto x = oracle::random_tensor({1, 1, 8, 16, 16}, rng, 0.0, 1.0);
  auto objective = [&](Tape<double>& t, Var<double> v) { return ops::softmax_cross_entropy(model.forward(t, v), {1}); };
  EXPECT_LT(finite_difference_check<double>(objective, x, 1e-6), 1e-3);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto cfg = NetworkConfig::resmix3();
  Model<float> model(cfg, 11);
  const auto path = temp_file("rt.nlck").string();
  save_checkpoint(model, path, 17, 0.75);
  CheckpointInfo info;
  auto loaded = load_checkpoint<float>(path, &info, &cfg);
  EXPECT_EQ(info.epoch, 17);
  EXPECT_EQ(info.best_metric, 0.75);
  EXPECT_EQ(info.config, cfg);
  EXPECT_EQ(count_params(loaded), count_params(model));
  const auto x = random_input(cfg, 2, 12);
  EXPECT_EQ(loaded.predict_logits(x), model.predict_logits(x));
  EXPECT_EQ(read_checkpoint_info(path).epoch, 17);
}

TEST(Checkpoint, CorruptionAndMismatch) {
  const auto cfg = NetworkConfig::resnet_baseline();
  Model<float> model(cfg, 13);
  const auto path = temp_file("bad.nlck").string();
  save_checkpoint(model, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XLCK", 4);
  }
  EXPECT_THROW(load_checkpoint<float>(path), FormatError);

  save_checkpoint(model, path);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size / 2);
  EXPECT_THROW(load_checkpoint<float>(path), FormatError);

  save_checkpoint(model, path);
  const auto other = NetworkConfig::resmix3();
  EXPECT_THROW(load_checkpoint<float>(path, nullptr, &other), ConfigError);
  EXPECT_THROW(load_checkpoint<float>(temp_file("missing.nlck").string()), FormatError);
}
