#include "nlran/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "nlran/attention.hpp"
#include "nlran/nonlocal.hpp"

namespace nlran {

namespace {

using D = double;

Tensor<D> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(shape);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Values spaced at least `gap` apart in random order, so max windows never
/// tie and a central difference never flips an argmax.
Tensor<D> distinct_tensor(const Shape& shape, Rng& rng, double gap = 0.01) {
  Tensor<D> t(shape);
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  for (std::size_t i = 0; i < t.size(); ++i) t[order[i]] = gap * (double(i) - double(t.size()) / 2.0);
  return t;
}

/// sum(f(x) * R) with a fixed random R, so every output component matters.
Var<D> weighted_sum(Tape<D>& tape, Var<D> y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, tape.constant(random_tensor(y.shape(), rng))));
}

/// Residual branches and the non-local output projection start at zero,
/// which would hide upstream gradients; checks use dense random weights.
void randomize(ParameterStore<D>& store, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : store) {
    for (auto& v : p->value.values()) v = rng.uniform(-0.5, 0.5);
  }
}

double relative_gap(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

}  // namespace

double parameter_difference_check(ParameterStore<double>& store, const std::function<Var<double>(Tape<double>&)>& loss,
                                  std::size_t per_parameter, std::uint64_t seed, double eps) {
  store.zero_grad();
  {
    Tape<D> tape;
    tape.backward(loss(tape));
  }
  auto evaluate = [&] {
    Tape<D> tape;
    tape.set_grad_enabled(false);
    return loss(tape).value().item();
  };
  Rng rng(seed);
  double worst = 0.0;
  for (auto& p : store) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> picks(n);
    std::iota(picks.begin(), picks.end(), 0);
    rng.shuffle(picks);
    picks.resize(std::min(n, per_parameter));
    for (std::size_t i : picks) {
      const double analytic = p->grad.empty() ? 0.0 : p->grad[i];
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double up = evaluate();
      p->value[i] = saved - eps;
      const double down = evaluate();
      p->value[i] = saved;
      worst = std::max(worst, relative_gap(analytic, (up - down) / (2.0 * eps)));
    }
  }
  store.zero_grad();
  return worst;
}

std::vector<GradcheckResult> run_gradcheck_suite(double tolerance, std::uint64_t seed,
                                                 const std::function<void(const GradcheckResult&)>& on_result) {
  constexpr double eps = 1e-6;
  std::vector<std::pair<std::string, std::function<double()>>> cases;
  Rng rng(seed);
  auto next_seed = [&] { return rng.next(); };

  auto input_case = [&](std::string name, Tensor<D> x, ScalarFunction<D> f) {
    cases.emplace_back(std::move(name), [x = std::move(x), f = std::move(f)] { return finite_difference_check(f, x, eps); });
  };

  {
    const auto spec = ConvSpec{2, 3, {3, 2, 3}, {2, 1, 1}, {1, 0, 1}, true};
    const auto w = random_tensor(spec.weight_shape(), rng);
    const auto b = random_tensor({3}, rng);
    const auto x = random_tensor({2, 2, 5, 4, 5}, rng);
    const auto s = next_seed();
    input_case("conv3d (input)", x, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::conv3d(v, t.constant(w), t.constant(b), spec), s);
    });
    input_case("conv3d (weight)", w, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::conv3d(t.constant(x), v, t.constant(b), spec), s);
    });
    input_case("conv3d (bias)", b, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::conv3d(t.constant(x), t.constant(w), v, spec), s);
    });
  }
  {
    const auto s = next_seed();
    input_case("maxpool3d", distinct_tensor({1, 2, 5, 6, 6}, rng), [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::maxpool3d(v, PoolSpec::cube(3, 2, 1)), s);
    });
  }
  {
    const auto x = random_tensor({1, 2, 3, 2, 3}, rng);
    const auto s1 = next_seed(), s2 = next_seed(), s3 = next_seed();
    input_case("upsample3d (nearest)", x, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::upsample3d(v, Extent3{2, 2, 2}, UpsampleMode::Nearest), s1);
    });
    input_case("upsample3d (trilinear)", x, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::upsample3d(v, Extent3{2, 3, 2}, UpsampleMode::Trilinear), s2);
    });
    input_case("resize3d", x, [=](Tape<D>& t, Var<D> v) { return weighted_sum(t, ops::resize3d(v, Extent3{5, 3, 7}), s3); });
  }
  {
    const auto x = random_tensor({2, 3, 2, 3, 2}, rng, -2.0, 2.0);
    const auto s1 = next_seed(), s2 = next_seed(), s3 = next_seed();
    input_case("mixed attention activation", x, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::mixed_attention_activation(v), s1);
    });
    input_case("channel attention activation", x, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::channel_attention_activation(v), s2);
    });
    input_case("spatial attention activation", x, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::spatial_attention_activation(v), s3);
    });
  }
  {
    const auto s = next_seed();
    input_case("global average pool", random_tensor({2, 3, 2, 3, 4}, rng),
               [=](Tape<D>& t, Var<D> v) { return weighted_sum(t, ops::global_average_pool(v), s); });
  }
  {
    const auto x = random_tensor({4, 5}, rng);
    const auto w = random_tensor({3, 5}, rng);
    const auto b = random_tensor({3}, rng);
    const auto s = next_seed();
    input_case("fully connected (input)", x, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::fully_connected(v, t.constant(w), t.constant(b)), s);
    });
    input_case("fully connected (weight)", w, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::fully_connected(t.constant(x), v, t.constant(b)), s);
    });
    input_case("fully connected (bias)", b, [=](Tape<D>& t, Var<D> v) {
      return weighted_sum(t, ops::fully_connected(t.constant(x), t.constant(w), v), s);
    });
  }
  {
    const std::vector<int> labels{0, 2, 1, 2};
    input_case("softmax cross-entropy", random_tensor({4, 3}, rng, -3.0, 3.0),
               [=](Tape<D>&, Var<D> v) { return ops::softmax_cross_entropy(v, labels); });
  }
  {
    const auto a = random_tensor({2, 3, 4}, rng);
    const auto b = random_tensor({2, 5, 4}, rng);
    const auto s = next_seed();
    input_case("bmm", a, [=](Tape<D>& t, Var<D> v) { return weighted_sum(t, ops::bmm(v, t.constant(b), false, true), s); });
  }
  {
    const auto x = random_tensor({2, 3, 2, 2, 2}, rng);
    const auto y = random_tensor({2, 3, 2, 2, 2}, rng);
    const auto s = next_seed();
    input_case("elementwise chain", x, [=](Tape<D>& t, Var<D> v) {
      auto h = ops::mul(ops::add(v, t.constant(y)), ops::sigmoid(ops::sub(v, t.constant(y))));
      return weighted_sum(t, ops::relu(ops::add_scalar(ops::scale(h, 1.5), 0.1)), s);
    });
  }

  for (auto variant : {AttentionVariant::Mixed, AttentionVariant::Channel, AttentionVariant::Spatial}) {
    const auto module_seed = next_seed();
    const auto x = random_tensor({1, 4, 8, 8, 8}, rng);
    const auto s = next_seed();
    const std::string label = "attention module (" + to_string(variant) + ")";
    cases.emplace_back(label + " input", [=] {
      auto store = std::make_shared<ParameterStore<D>>();
      Rng init(module_seed);
      AttentionModuleConfig cfg;
      cfg.channels = 4;
      cfg.variant = variant;
      auto module = std::make_shared<AttentionModule<D>>(*store, "attention", cfg, init);
      randomize(*store, module_seed);
      return finite_difference_check<D>(
          [=](Tape<D>& t, Var<D> v) { return weighted_sum(t, module->forward(t, v).output, s); }, x, eps);
    });
    cases.emplace_back(label + " parameters", [=] {
      ParameterStore<D> store;
      Rng init(module_seed);
      AttentionModuleConfig cfg;
      cfg.channels = 4;
      cfg.variant = variant;
      AttentionModule<D> module(store, "attention", cfg, init);
      randomize(store, module_seed);
      return parameter_difference_check(
          store, [&](Tape<D>& t) { return weighted_sum(t, module.forward(t, t.constant(x)).output, s); }, 6, s);
    });
  }

  {
    const auto block_seed = next_seed();
    const auto x = random_tensor({2, 4, 2, 3, 2}, rng);
    const auto s = next_seed();
    auto build = [=](ParameterStore<D>& store) {
      Rng init(block_seed);
      NonLocalBlock<D> block(store, "nonlocal", NonLocalConfig{4, 0}, init);
      randomize(store, block_seed);
      return block;
    };
    cases.emplace_back("non-local block input", [=] {
      auto store = std::make_shared<ParameterStore<D>>();
      auto block = std::make_shared<NonLocalBlock<D>>(build(*store));
      return finite_difference_check<D>([=](Tape<D>& t, Var<D> v) { return weighted_sum(t, (*block)(t, v), s); }, x, eps);
    });
    cases.emplace_back("non-local block parameters", [=] {
      ParameterStore<D> store;
      const auto block = build(store);
      return parameter_difference_check(store, [&](Tape<D>& t) { return weighted_sum(t, block(t, t.constant(x)), s); }, 12, s);
    });
  }

  std::vector<GradcheckResult> results;
  for (const auto& [name, run] : cases) {
    const auto start = std::chrono::steady_clock::now();
    GradcheckResult r;
    r.name = name;
    r.max_error = run();
    r.passed = std::isfinite(r.max_error) && r.max_error < tolerance;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (on_result) on_result(r);
    results.push_back(r);
  }
  return results;
}

}  // namespace nlran
