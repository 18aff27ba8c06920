#include <gtest/gtest.h>

#include <filesystem>

#include "nlran/errors.hpp"
#include "nlran/explain.hpp"
#include "oracles.hpp"

using namespace nlran;
namespace fs = std::filesystem;

namespace {

HeatMap heat(Tensor<double> v) { return HeatMap{std::move(v), HeatSource::Attention, "x", -1}; }

Tensor<double> block_mask(const Shape& s) {
  Tensor<double> m(s);
  for (std::size_t z = 0; z < s[0]; ++z)
    for (std::size_t y = 0; y < s[1] / 2; ++y)
      for (std::size_t x = 0; x < s[2] / 2; ++x) m.at({z, y, x}) = 1.0;
  return m;
}

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "nlran_explain_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Tensor<float> phantom_like_input(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x({1, 16, 32, 32});
  for (auto& v : x.values()) v = float(rng.uniform());
  return x;
}

}  // namespace

TEST(Normalize, FlatAndRange) {
  const auto flat = min_max_normalize(Tensor<double>({2, 2, 2}, 3.0));
  for (double v : flat.values()) EXPECT_EQ(v, 0.5);
  const auto n = min_max_normalize(Tensor<double>({1, 1, 3}, {2.0, 4.0, 3.0}));
  EXPECT_EQ(n.storage(), (std::vector<double>{0.0, 1.0, 0.5}));
}

TEST(ActivationHeatmap, SameResolutionSingleChannelIsMinMax) {
  Rng rng(1);
  const auto m = oracle::random_tensor({1, 2, 3, 4}, rng);
  EXPECT_LT(oracle::max_abs_diff(activation_heatmap(m, {2, 3, 4}), min_max_normalize(m.reshaped({2, 3, 4}))), 1e-15);
  const auto flat = activation_heatmap(Tensor<double>({3, 1, 2, 2}, 0.7), {2, 4, 4});
  for (double v : flat.values()) EXPECT_EQ(v, 0.5);
  EXPECT_THROW(activation_heatmap(Tensor<double>({2, 2, 2}), {2, 2, 2}), RankError);
}

TEST(ActivationHeatmap, InvariantUnderPositiveRescaling) {
  Rng rng(2);
  const auto m = oracle::random_tensor({3, 2, 2, 2}, rng, 0.0, 1.0);
  auto scaled = m;
  for (auto& v : scaled.values()) v *= 4.0;
  for (auto r : {ChannelReduction::Mean, ChannelReduction::Max})
    EXPECT_EQ(activation_heatmap(m, {4, 4, 4}, r), activation_heatmap(scaled, {4, 4, 4}, r));
}

TEST(Cam, HandWeightedSum) {
  Rng rng(3);
  const auto f = oracle::random_tensor({2, 2, 3, 3}, rng);
  std::vector<double> expect(18);
  for (std::size_t i = 0; i < 18; ++i) expect[i] = std::max(0.0, 2.0 * f[i] - f[18 + i]);
  const auto ref = min_max_normalize(Tensor<double>({2, 3, 3}, expect));
  EXPECT_LT(oracle::max_abs_diff(cam_from_features(f, {2.0, -1.0}, {2, 3, 3}), ref), 1e-15);

  const auto one = oracle::random_tensor({1, 2, 2, 2}, rng, 0.1, 1.0);
  EXPECT_LT(oracle::max_abs_diff(cam_from_features(one, {1.0}, {2, 2, 2}), min_max_normalize(one.reshaped({2, 2, 2}))),
            1e-15);
  const auto zero_weights = cam_from_features(f, {0.0, 0.0}, {2, 3, 3});
  for (double v : zero_weights.values()) EXPECT_EQ(v, 0.5);
  EXPECT_THROW(cam_from_features(f, {1.0}, {2, 3, 3}), ShapeError);
}

TEST(Cam, TargetedClassHighlightsItsChannel) {
  // Channel 0 fires on the lesion block, channel 1 elsewhere; class 0 reads
  // channel 0 and class 1 reads channel 1.
  const Shape s{2, 4, 4};
  const auto lesion = block_mask(s);
  Tensor<double> f({2, 2, 4, 4});
  for (std::size_t i = 0; i < 32; ++i) {
    f[i] = lesion[i] + 0.1;
    f[32 + i] = 1.0 - lesion[i];
  }
  const auto on = overlap_score(HeatMap{cam_from_features(f, {1.0, 0.0}, {2, 4, 4}), HeatSource::CAM, "", 0}, lesion);
  const auto off = overlap_score(HeatMap{cam_from_features(f, {0.0, 1.0}, {2, 4, 4}), HeatSource::CAM, "", 1}, lesion);
  EXPECT_GT(on.difference, off.difference);
}

TEST(Overlap, Examples) {
  const Shape s{2, 4, 4};
  const auto mask = block_mask(s);
  const auto same = overlap_score(heat(mask), mask);
  EXPECT_EQ(same.difference, 1.0);
  EXPECT_EQ(same.voxel_auc, 1.0);
  const auto flat = overlap_score(heat(Tensor<double>(s, 0.5)), mask);
  EXPECT_EQ(flat.difference, 0.0);
  EXPECT_EQ(flat.voxel_auc, 0.5);
  EXPECT_THROW(overlap_score(heat(mask), Tensor<double>(s)), DataError);
  EXPECT_THROW(overlap_score(heat(mask), Tensor<double>(s, 1.0)), DataError);
}

TEST(Overlap, RandomHeatIsChance) {
  Rng rng(4);
  double total = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    const auto h = oracle::random_tensor({4, 8, 8}, rng, 0.0, 1.0);
    Tensor<double> m({4, 8, 8});
    for (auto& v : m.values()) v = rng.below(4) == 0 ? 1.0 : 0.0;
    const auto score = overlap_score(heat(h), m);
    std::vector<double> s(h.storage());
    std::vector<int> truth;
    for (double v : m.values()) truth.push_back(v > 0 ? 1 : 0);
    EXPECT_NEAR(score.voxel_auc, oracle::mann_whitney(s, truth), 1e-12);
    total += score.voxel_auc;
  }
  EXPECT_NEAR(total / trials, 0.5, 0.03);
}

TEST(Export, PgmStackAndCsvRoundTrip) {
  Rng rng(5);
  const auto values = oracle::random_tensor({3, 4, 5}, rng, 0.0, 1.0);
  const auto dir = temp_dir("export");
  export_heatmap(heat(values), (dir / "pgm").string(), HeatFormat::PgmStack);
  std::size_t slices = 0;
  for (const auto& e : fs::directory_iterator(dir / "pgm")) slices += e.path().extension() == ".pgm";
  EXPECT_EQ(slices, 3u);
  for (std::size_t z = 0; z < 3; ++z) {
    const auto slice = read_pgm((dir / "pgm" / ("heat_s00" + std::to_string(z) + ".pgm")).string());
    ASSERT_EQ(slice.size(), 20u);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_LE(std::abs(slice[i] / 255.0 - values[z * 20 + i]), 0.5 / 255.0 + 1e-12);
  }
  export_heatmap(heat(Tensor<double>({2, 2, 2}, 1.0)), (dir / "ones").string(), HeatFormat::PgmStack, "att");
  const auto ones = read_pgm((dir / "ones" / "att_s001.pgm").string());
  for (double v : ones.values()) EXPECT_EQ(v, 255.0);

  const auto csv = (dir / "heat.csv").string();
  export_heatmap(heat(values), csv, HeatFormat::CSV);
  EXPECT_EQ(read_heatmap_csv(csv), values);
  EXPECT_EQ(parse_heat_format("pgm-stack"), HeatFormat::PgmStack);
  EXPECT_THROW(parse_heat_format("png"), ConfigError);
}

TEST(ModelHeatmaps, AttentionCaptureLeavesLogitsUnchanged) {
  Model<float> model(NetworkConfig::resmix3(), 6);
  const auto x = phantom_like_input(7);
  const auto plain = model.predict_logits(x.reshaped({1, 1, 16, 32, 32}));
  const auto e = explain(model, x, true, true, 1, "p");
  EXPECT_EQ(e.logits, plain);
  ASSERT_TRUE(e.attention && e.cam);
  EXPECT_EQ(e.attention->values.shape(), (Shape{16, 32, 32}));
  for (double v : e.attention->values.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(attention_heatmap(model, x).values, e.attention->values);
  EXPECT_EQ(cam_heatmap(model, x, 1).values, e.cam->values);
  EXPECT_THROW(explain(model, x, false, true, 3), ConfigError);
  EXPECT_THROW(explain(model, x, false, true, -1), ConfigError);
}

TEST(ModelHeatmaps, BaselineHasNoAttention) {
  Model<float> model(NetworkConfig::resnet_baseline(), 8);
  const auto x = phantom_like_input(9);
  EXPECT_THROW(attention_heatmap(model, x), CapabilityError);
  EXPECT_NO_THROW(cam_heatmap(model, x, 0));
}
