#include <gtest/gtest.h>

#include "nlran/attention.hpp"
#include "nlran/errors.hpp"
#include "nlran/gradcheck.hpp"
#include "oracles.hpp"

using namespace nlran;
using D = double;

namespace {

void randomize(ParameterStore<D>& store, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : store)
    for (auto& v : p->value.values()) v = rng.uniform(-0.5, 0.5);
}

void zero(Parameter<D>* p) {
  if (p) p->value.fill(0.0);
}

AttentionModuleConfig small_config(AttentionVariant variant, std::size_t channels = 4) {
  AttentionModuleConfig cfg;
  cfg.channels = channels;
  cfg.variant = variant;
  return cfg;
}

}  // namespace

TEST(ResidualUnit, ProjectionPresenceRule) {
  EXPECT_FALSE((ResidualUnitConfig{4, 2, 4, 1}.needs_projection()));
  EXPECT_TRUE((ResidualUnitConfig{4, 2, 8, 1}.needs_projection()));
  EXPECT_TRUE((ResidualUnitConfig{4, 2, 4, 2}.needs_projection()));
  ParameterStore<D> store;
  Rng rng(1);
  ResidualUnit<D> same(store, "a", {4, 2, 4, 1}, rng);
  ResidualUnit<D> proj(store, "b", {4, 2, 8, 2}, rng);
  EXPECT_FALSE(same.has_projection());
  EXPECT_TRUE(proj.has_projection());
  EXPECT_EQ(store.find("a.shortcut.weight"), nullptr);
  EXPECT_NE(store.find("b.shortcut.weight"), nullptr);
}

TEST(ResidualUnit, ZeroBranchIsReluOfInput) {
  ParameterStore<D> store;
  Rng rng(2);
  ResidualUnit<D> unit(store, "u", {3, 2, 3, 1}, rng);
  for (auto& p : store) p->value.fill(0.0);
  const auto x = oracle::random_tensor({2, 3, 2, 3, 2}, rng);
  Tape<D> t;
  const auto y = unit(t, t.constant(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], std::max(0.0, x[i]));
}

TEST(ResidualUnit, StrideHalvesExtents) {
  ParameterStore<D> store;
  Rng rng(3);
  ResidualUnit<D> unit(store, "u", {2, 2, 4, 2}, rng);
  Tape<D> t;
  EXPECT_EQ(unit(t, t.constant(Tensor<D>({1, 2, 4, 6, 5}))).shape(), (Shape{1, 4, 2, 3, 3}));
  EXPECT_THROW(unit(t, t.constant(Tensor<D>({1, 3, 4, 4, 4}))), ShapeError);
}

TEST(AttentionCombine, ZeroMaskGivesTrunk) {
  Rng rng(4);
  const auto f = oracle::random_tensor({1, 3, 2, 2, 2}, rng);
  Tape<D> t;
  EXPECT_EQ(residual_attention_combine(t.constant(Tensor<D>(f.shape(), 0.0)), t.constant(f)).value(), f);
  const auto two = residual_attention_combine(t.constant(Tensor<D>(f.shape(), 1.0)), t.constant(f)).value();
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(two[i], 2.0 * f[i]);
}

TEST(AttentionConfig, Validation) {
  auto cfg = small_config(AttentionVariant::Mixed);
  EXPECT_NO_THROW(cfg.validate());
  cfg.up_steps = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config(AttentionVariant::Mixed);
  cfg.trunk_units = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config(AttentionVariant::Mixed, 0);
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_EQ(parse_attention_variant("spatial"), AttentionVariant::Spatial);
  EXPECT_EQ(to_string(AttentionVariant::Channel), "channel");
  EXPECT_THROW(parse_attention_variant("softmax"), ConfigError);
}

TEST(AttentionModule, ZeroMaskHeadGivesHalfGate) {
  ParameterStore<D> store;
  Rng rng(5);
  AttentionModule<D> module(store, "att", small_config(AttentionVariant::Mixed), rng);
  zero(&module.mask_head(1).weight());
  zero(module.mask_head(1).bias());
  Tape<D> t;
  const auto out = module.forward(t, t.constant(oracle::random_tensor({1, 4, 4, 4, 4}, rng)));
  const auto& f = out.trunk.value();
  const auto& h = out.combined.value();
  for (double m : out.mask.value().values()) EXPECT_EQ(m, 0.5);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(h[i], 1.5 * f[i]);
}

TEST(AttentionModule, MixedMaskRangeAndGateRatio) {
  ParameterStore<D> store;
  Rng rng(6);
  AttentionModule<D> module(store, "att", small_config(AttentionVariant::Mixed), rng);
  randomize(store, 60);
  Tape<D> t;
  const auto out = module.forward(t, t.constant(oracle::random_tensor({2, 4, 4, 6, 6}, rng)));
  for (double m : out.mask.value().values()) {
    EXPECT_GT(m, 0.0);
    EXPECT_LT(m, 1.0);
  }
  const auto& f = out.trunk.value();
  const auto& h = out.combined.value();
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i] == 0.0) continue;
    EXPECT_GT(h[i] / f[i], 1.0);
    EXPECT_LT(h[i] / f[i], 2.0);
  }
}

TEST(AttentionModule, ShapePreservingForEveryVariant) {
  const std::vector<Shape> shapes{{1, 4, 4, 4, 4}, {2, 4, 2, 4, 4}, {1, 4, 5, 7, 3}, {1, 4, 1, 1, 1}};
  for (auto variant : {AttentionVariant::Mixed, AttentionVariant::Channel, AttentionVariant::Spatial}) {
    ParameterStore<D> store;
    Rng rng(7);
    AttentionModule<D> module(store, "att", small_config(variant), rng);
    for (const auto& s : shapes) {
      Tape<D> t;
      const auto out = module.forward(t, t.constant(oracle::random_tensor(s, rng)));
      EXPECT_EQ(out.output.shape(), s) << to_string(variant);
      EXPECT_EQ(out.mask.shape(), s) << to_string(variant);
    }
  }
}

TEST(AttentionModule, ChannelAndSpatialMaskProperties) {
  Rng rng(8);
  const auto x = oracle::random_tensor({1, 4, 4, 4, 4}, rng);
  {
    ParameterStore<D> store;
    AttentionModule<D> module(store, "att", small_config(AttentionVariant::Channel), rng);
    randomize(store, 80);
    Tape<D> t;
    const auto m = module.forward(t, t.constant(x)).mask.value();
    for (std::size_t p = 0; p < 64; ++p) {
      double sq = 0;
      for (std::size_t c = 0; c < 4; ++c) sq += m[c * 64 + p] * m[c * 64 + p];
      EXPECT_TRUE(sq == 0.0 || std::abs(std::sqrt(sq) - 1.0) < 1e-10);
    }
  }
  {
    ParameterStore<D> store;
    AttentionModule<D> module(store, "att", small_config(AttentionVariant::Spatial), rng);
    randomize(store, 81);
    Tape<D> t;
    for (double v : module.forward(t, t.constant(x)).mask.value().values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(AttentionModule, GradientReachesTrunkAndMask) {
  ParameterStore<D> store;
  Rng rng(9);
  // Wide enough that no bottleneck is a single channel, which ReLU can
  // silence entirely at the coarsest mask level.
  AttentionModule<D> module(store, "att", small_config(AttentionVariant::Mixed, 16), rng);
  Tape<D> t;
  const auto out = module.forward(t, t.constant(oracle::random_tensor({1, 16, 8, 8, 8}, rng)));
  t.backward(ops::sum(ops::mul(out.output, t.constant(oracle::random_tensor(out.output.shape(), rng)))));
  auto nonzero = [](const Parameter<D>* p) {
    if (!p || p->grad.empty()) return false;
    for (double g : p->grad.values())
      if (g != 0.0) return true;
    return false;
  };
  EXPECT_TRUE(nonzero(store.find("att.trunk0.conv1.weight")));
  EXPECT_TRUE(nonzero(store.find("att.mask.head1.weight")));
  EXPECT_TRUE(nonzero(store.find("att.mask.down0.conv2.weight")));
}

TEST(AttentionModule, FiniteDifferencesEndToEnd) {
  for (auto variant : {AttentionVariant::Mixed, AttentionVariant::Channel, AttentionVariant::Spatial}) {
    ParameterStore<D> store;
    Rng rng(10);
    AttentionModule<D> module(store, "att", small_config(variant), rng);
    randomize(store, 100);
    const auto x = oracle::random_tensor({1, 4, 8, 8, 8}, rng);
    const auto r = oracle::random_tensor(x.shape(), rng);
    auto objective = [&](Tape<D>& t, Var<D> v) { return ops::sum(ops::mul(module.forward(t, v).output, t.constant(r))); };
    EXPECT_LT(finite_difference_check<D>(objective, x, 1e-6), 1e-4) << to_string(variant);
    const auto perr = parameter_difference_check(
        store, [&](Tape<D>& t) { return objective(t, t.constant(x)); }, 3, 11);
    EXPECT_LT(perr, 1e-4) << to_string(variant);
  }
}

TEST(AttentionStack, EmptyStackIsIdentityAndTwoEqualsComposition) {
  Rng rng(11);
  const auto x = oracle::random_tensor({1, 4, 4, 4, 4}, rng);
  ParameterStore<D> store;
  AttentionStack<D> none(store, "s0", 0, small_config(AttentionVariant::Mixed), rng);
  Tape<D> t;
  EXPECT_EQ(none(t, t.constant(x)).value(), x);

  AttentionStack<D> two(store, "s2", 2, small_config(AttentionVariant::Mixed), rng);
  std::vector<Var<D>> masks;
  const auto stacked = two(t, t.constant(x), &masks).value();
  EXPECT_EQ(masks.size(), 2u);
  const auto manual = two.module(1).forward(t, two.module(0).forward(t, t.constant(x)).output).output.value();
  EXPECT_EQ(stacked, manual);
}
