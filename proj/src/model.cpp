#include "nlran/model.hpp"

#include <cstdio>
#include <functional>

#include "nlran/errors.hpp"

namespace nlran {

using nlohmann::json;

namespace {

std::size_t volume(const Extent3& e) { return e[0] * e[1] * e[2]; }

std::string extents_text(const Extent3& e) {
  return std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" + std::to_string(e[2]);
}

/// Stage widths shared by describe() and Model.
struct StagePlan {
  std::size_t in, mid, out, stride;
};

std::vector<StagePlan> stage_plan(const NetworkConfig& cfg) {
  const std::size_t c = cfg.base_channels;
  std::vector<StagePlan> plan;
  std::size_t in = c;
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t mid = c << k;
    plan.push_back({in, mid, 4 * mid, k == 0 ? 1u : 2u});
    in = 4 * mid;
  }
  return plan;
}

constexpr std::size_t kTailUnits = 3;

// --- symbolic walk ---------------------------------------------------------

struct Walker {
  std::vector<LayerRecord>& rows;
  std::string scope;

  Extent3 conv(const ConvSpec& spec, const Extent3& in, std::size_t& params, std::uint64_t& macs) const {
    Extent3 out;
    try {
      out = conv_output_extents(in, spec);
    } catch (const ShapeError& e) {
      throw ConfigError(scope + ": input " + extents_text(in) + " infeasible (" + e.what() + ")");
    }
    params += spec.parameter_count();
    macs += static_cast<std::uint64_t>(spec.out_channels) * volume(out) * spec.in_channels * spec.kernel[0] *
            spec.kernel[1] * spec.kernel[2];
    return out;
  }

  Extent3 pool(const PoolSpec& spec, const Extent3& in) const {
    try {
      return pool_output_extents(in, spec);
    } catch (const ShapeError& e) {
      throw ConfigError(scope + ": input " + extents_text(in) + " infeasible (" + e.what() + ")");
    }
  }

  Extent3 residual(const ResidualUnitConfig& u, const Extent3& in, std::size_t& params, std::uint64_t& macs) const {
    conv(ConvSpec::cube(u.in_channels, u.mid_channels, 1), in, params, macs);
    auto out = conv(ConvSpec::cube(u.mid_channels, u.mid_channels, 3, u.stride), in, params, macs);
    conv(ConvSpec::cube(u.mid_channels, u.out_channels, 1), out, params, macs);
    if (u.needs_projection()) conv(ConvSpec::cube(u.in_channels, u.out_channels, 1, u.stride), in, params, macs);
    return out;
  }

  void attention(const AttentionModuleConfig& a, const Extent3& in, std::size_t& params, std::uint64_t& macs) const {
    const ResidualUnitConfig unit{a.channels, std::max<std::size_t>(1, a.channels / 4), a.channels, 1};
    for (std::size_t i = 0; i < a.pre_units + a.trunk_units + a.post_units; ++i) residual(unit, in, params, macs);
    std::vector<Extent3> levels{in};
    for (std::size_t s = 0; s < a.down_steps; ++s) {
      levels.push_back(pool(PoolSpec::cube(3, 2, 1), levels.back()));
      residual(unit, levels.back(), params, macs);
      if (s + 1 < a.down_steps) residual(unit, levels.back(), params, macs);
    }
    for (std::size_t s = 0; s < a.up_steps; ++s) residual(unit, levels[a.down_steps - s], params, macs);
    conv(ConvSpec::cube(a.channels, a.channels, 1), in, params, macs);
    conv(ConvSpec::cube(a.channels, a.channels, 1), in, params, macs);
  }
};

}  // namespace

void NetworkConfig::validate() const {
  if (base_channels == 0) throw ConfigError("base_channels must be positive");
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  if (input_channels == 0) throw ConfigError("input_channels must be positive");
  for (auto e : input_shape) {
    if (e == 0) throw ConfigError("input_shape extents must be positive");
  }
  (void)describe(*this);
}

json NetworkConfig::to_json() const {
  return json{{"base_channels", base_channels},
              {"attention_stacks", attention_stacks},
              {"attention_variant", to_string(attention_variant)},
              {"use_nonlocal", use_nonlocal},
              {"num_classes", num_classes},
              {"input_shape", input_shape},
              {"input_channels", input_channels}};
}

NetworkConfig NetworkConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("network config must be a JSON object");
  NetworkConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "base_channels") c.base_channels = value.get<std::size_t>();
      else if (key == "attention_stacks") c.attention_stacks = value.get<std::array<std::size_t, 3>>();
      else if (key == "attention_variant") c.attention_variant = parse_attention_variant(value.get<std::string>());
      else if (key == "use_nonlocal") c.use_nonlocal = value.get<bool>();
      else if (key == "num_classes") c.num_classes = value.get<std::size_t>();
      else if (key == "input_shape") c.input_shape = value.get<Extent3>();
      else if (key == "input_channels") c.input_channels = value.get<std::size_t>();
      else throw ConfigError("unknown network config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("network config key '" + key + "': " + e.what());
    }
  }
  return c;
}

std::string NetworkConfig::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<LayerRecord> describe(const NetworkConfig& cfg) {
  if (cfg.base_channels == 0) throw ConfigError("base_channels must be positive");
  std::vector<LayerRecord> rows;
  Walker walk{rows, ""};
  auto emit = [&](std::string name, std::string kind, std::size_t channels, Extent3 ext, std::size_t params,
                  std::uint64_t macs, bool stage_row) {
    rows.push_back({std::move(name), std::move(kind), channels, ext, params, macs, stage_row});
  };
  const std::size_t c = cfg.base_channels;

  std::size_t params = 0;
  std::uint64_t macs = 0;
  walk.scope = "stem.conv";
  Extent3 ext = walk.conv(ConvSpec::cube(cfg.input_channels, c, 7, 2), cfg.input_shape, params, macs);
  emit("stem.conv", "conv", c, ext, params, macs, true);
  walk.scope = "stem.pool";
  ext = walk.pool(PoolSpec::cube(3, 2, 1), ext);
  emit("stem.pool", "maxpool", c, ext, 0, 0, true);

  const auto plan = stage_plan(cfg);
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string stage = "stage" + std::to_string(k + 1);
    params = 0;
    macs = 0;
    walk.scope = stage + ".unit0";
    ext = walk.residual({plan[k].in, plan[k].mid, plan[k].out, plan[k].stride}, ext, params, macs);
    emit(stage + ".unit0", "residual_unit", plan[k].out, ext, params, macs, true);
    AttentionModuleConfig a;
    a.channels = plan[k].out;
    a.variant = cfg.attention_variant;
    for (std::size_t i = 0; i < cfg.attention_stacks[k]; ++i) {
      params = 0;
      macs = 0;
      walk.scope = stage + ".attention" + std::to_string(i);
      walk.attention(a, ext, params, macs);
      emit(walk.scope, "attention", plan[k].out, ext, params, macs, i + 1 == cfg.attention_stacks[k]);
    }
  }
  for (std::size_t i = 0; i < kTailUnits; ++i) {
    params = 0;
    macs = 0;
    const std::string name = "stage4.unit" + std::to_string(i);
    walk.scope = name;
    const ResidualUnitConfig u = i == 0 ? ResidualUnitConfig{plan[3].in, plan[3].mid, plan[3].out, plan[3].stride}
                                        : ResidualUnitConfig{plan[3].out, plan[3].mid, plan[3].out, 1};
    ext = walk.residual(u, ext, params, macs);
    emit(name, "residual_unit", plan[3].out, ext, params, macs, i + 1 == kTailUnits);
  }
  const std::size_t cf = cfg.final_channels();
  if (cfg.use_nonlocal) {
    params = 0;
    macs = 0;
    walk.scope = "nonlocal";
    const NonLocalConfig nl{cf, 0};
    const std::size_t cb = nl.bottleneck();
    if (cb < 1) throw ConfigError("nonlocal: bottleneck channels would be zero");
    for (int i = 0; i < 3; ++i) walk.conv(ConvSpec::cube(cf, cb, 1), ext, params, macs);
    walk.conv(ConvSpec::cube(cb, cf, 1), ext, params, macs);
    const std::uint64_t p = volume(ext);
    macs += 2 * p * p * cb;
    emit("nonlocal", "nonlocal", cf, ext, params, macs, false);
  }
  emit("gap", "gap", cf, {1, 1, 1}, 0, 0, true);
  emit("fc", "fc", cfg.num_classes, {1, 1, 1}, cf * cfg.num_classes + cfg.num_classes,
       static_cast<std::uint64_t>(cf) * cfg.num_classes, false);
  return rows;
}

std::size_t count_params(const NetworkConfig& cfg) {
  std::size_t total = 0;
  for (const auto& r : describe(cfg)) total += r.params;
  return total;
}

std::uint64_t count_flops(const NetworkConfig& cfg) {
  std::uint64_t total = 0;
  for (const auto& r : describe(cfg)) total += r.macs;
  return total;
}

std::size_t count_params(const Model<float>& model) { return model.parameters().element_count(); }
std::size_t count_params(const Model<double>& model) { return model.parameters().element_count(); }

template <typename T>
Model<T>::Model(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(std::make_unique<ParameterStore<T>>()) {
  cfg.validate();
  Rng rng(seed);
  auto& store = *store_;
  const std::size_t c = cfg.base_channels;
  stem_ = Conv3dLayer<T>(store, "stem.conv", ConvSpec::cube(cfg.input_channels, c, 7, 2), rng);
  const auto plan = stage_plan(cfg);
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string stage = "stage" + std::to_string(k + 1);
    stage_entry_.emplace_back(store, stage + ".unit0",
                              ResidualUnitConfig{plan[k].in, plan[k].mid, plan[k].out, plan[k].stride}, rng);
    AttentionModuleConfig a;
    a.channels = plan[k].out;
    a.variant = cfg.attention_variant;
    stacks_.emplace_back(store, stage, cfg.attention_stacks[k], a, rng);
  }
  for (std::size_t i = 0; i < kTailUnits; ++i) {
    const ResidualUnitConfig u = i == 0 ? ResidualUnitConfig{plan[3].in, plan[3].mid, plan[3].out, plan[3].stride}
                                        : ResidualUnitConfig{plan[3].out, plan[3].mid, plan[3].out, 1};
    tail_.emplace_back(store, "stage4.unit" + std::to_string(i), u, rng);
  }
  if (cfg.use_nonlocal) nonlocal_.emplace(store, "nonlocal", NonLocalConfig{cfg.final_channels(), 0}, rng);
  fc_ = LinearLayer<T>(store, "fc", cfg.final_channels(), cfg.num_classes, rng);
}

template <typename T>
std::size_t Model<T>::attention_module_count() const {
  std::size_t n = 0;
  for (const auto& s : stacks_) n += s.size();
  return n;
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, Var<T> x, ForwardCapture<T>* capture) const {
  const auto& s = x.shape();
  if (s.size() != 5 || s[1] != cfg_.input_channels || Extent3{s[2], s[3], s[4]} != cfg_.input_shape) {
    throw ShapeError("model expects input [N," + std::to_string(cfg_.input_channels) + "," +
                     extents_text(cfg_.input_shape) + "], got " + to_string(s));
  }
  auto h = ops::relu(stem_(tape, x));
  h = ops::maxpool3d(h, PoolSpec::cube(3, 2, 1));
  for (std::size_t k = 0; k < 3; ++k) {
    h = stage_entry_[k](tape, h);
    h = stacks_[k](tape, h, capture ? &capture->attention_masks : nullptr);
  }
  for (const auto& u : tail_) h = u(tape, h);
  if (nonlocal_) h = (*nonlocal_)(tape, h);
  auto pooled = ops::global_average_pool(h);
  if (capture) {
    capture->features = h;
    capture->pooled = pooled;
  }
  auto flat = ops::reshape(pooled, Shape{s[0], cfg_.final_channels()});
  return fc_(tape, flat);
}

template <typename T>
Tensor<T> Model<T>::predict_logits(const Tensor<T>& x) const {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  return forward(tape, tape.constant(x)).value();
}

template class Model<float>;
template class Model<double>;

}  // namespace nlran
