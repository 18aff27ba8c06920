#include "nlran/attention.hpp"

#include "nlran/errors.hpp"

namespace nlran {

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::Mixed: return "mixed";
    case AttentionVariant::Channel: return "channel";
    case AttentionVariant::Spatial: return "spatial";
  }
  return "unknown";
}

AttentionVariant parse_attention_variant(const std::string& name) {
  if (name == "mixed") return AttentionVariant::Mixed;
  if (name == "channel") return AttentionVariant::Channel;
  if (name == "spatial") return AttentionVariant::Spatial;
  throw ConfigError("unknown attention variant '" + name + "' (expected mixed|channel|spatial)");
}

void AttentionModuleConfig::validate() const {
  if (channels == 0) throw ConfigError("attention module needs a positive channel count");
  if (down_steps != up_steps) throw ConfigError("attention module: down_steps must equal up_steps");
  if (down_steps == 0) throw ConfigError("attention module: mask branch needs at least one downsampling");
  if (trunk_units == 0) throw ConfigError("attention module: trunk_units must be at least 1");
}

template <typename T>
ResidualUnit<T>::ResidualUnit(ParameterStore<T>& store, const std::string& name, const ResidualUnitConfig& cfg,
                              Rng& rng)
    : cfg_(cfg) {
  if (cfg.in_channels == 0 || cfg.mid_channels == 0 || cfg.out_channels == 0 || cfg.stride == 0) {
    throw ConfigError(name + ": residual unit channels and stride must be positive");
  }
  convs_.emplace_back(store, name + ".conv1", ConvSpec::cube(cfg.in_channels, cfg.mid_channels, 1), rng);
  convs_.emplace_back(store, name + ".conv2", ConvSpec::cube(cfg.mid_channels, cfg.mid_channels, 3, cfg.stride), rng);
  // Without normalization layers every residual sum roughly doubles the
  // activation variance, so the branch output starts small.
  convs_.emplace_back(store, name + ".conv3", ConvSpec::cube(cfg.mid_channels, cfg.out_channels, 1), rng,
                      kResidualBranchGain);
  has_projection_ = cfg.needs_projection();
  if (has_projection_) {
    projection_ = Conv3dLayer<T>(store, name + ".shortcut", ConvSpec::cube(cfg.in_channels, cfg.out_channels, 1, cfg.stride), rng);
  }
}

template <typename T>
Var<T> ResidualUnit<T>::operator()(Tape<T>& tape, Var<T> x) const {
  if (x.shape().size() != 5 || x.shape()[1] != cfg_.in_channels) {
    throw ShapeError("residual unit expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                     to_string(x.shape()));
  }
  auto h = ops::relu(convs_[0](tape, x));
  h = ops::relu(convs_[1](tape, h));
  h = convs_[2](tape, h);
  auto skip = has_projection_ ? projection_(tape, x) : x;
  return ops::relu(ops::add(h, skip));
}

template <typename T>
Var<T> attention_activation(Var<T> logits, AttentionVariant variant) {
  switch (variant) {
    case AttentionVariant::Mixed: return ops::mixed_attention_activation(logits);
    case AttentionVariant::Channel: return ops::channel_attention_activation(logits);
    case AttentionVariant::Spatial: return ops::spatial_attention_activation(logits);
  }
  throw ConfigError("unknown attention variant");
}

template <typename T>
Var<T> residual_attention_combine(Var<T> mask, Var<T> trunk) {
  return ops::mul(ops::add_scalar(mask, T(1)), trunk);
}

template <typename T>
AttentionModule<T>::AttentionModule(ParameterStore<T>& store, const std::string& name,
                                    const AttentionModuleConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels;
  const ResidualUnitConfig unit{c, std::max<std::size_t>(1, c / 4), c, 1};
  auto make = [&](std::vector<ResidualUnit<T>>& into, std::size_t count, const std::string& prefix) {
    for (std::size_t i = 0; i < count; ++i) into.emplace_back(store, name + "." + prefix + std::to_string(i), unit, rng);
  };
  make(pre_, cfg.pre_units, "pre");
  make(trunk_, cfg.trunk_units, "trunk");
  make(down_, cfg.down_steps, "mask.down");
  make(skip_, cfg.down_steps - 1, "mask.skip");
  make(up_, cfg.up_steps, "mask.up");
  head_.emplace_back(store, name + ".mask.head1", ConvSpec::cube(c, c, 1), rng);
  head_.emplace_back(store, name + ".mask.head2", ConvSpec::cube(c, c, 1), rng);
  make(post_, cfg.post_units, "post");
}

template <typename T>
AttentionOutput<T> AttentionModule<T>::forward(Tape<T>& tape, Var<T> x) const {
  if (x.shape().size() != 5 || x.shape()[1] != cfg_.channels) {
    throw ShapeError("attention module expects " + std::to_string(cfg_.channels) + " channels, got " +
                     to_string(x.shape()));
  }
  for (const auto& u : pre_) x = u(tape, x);

  Var<T> trunk = x;
  for (const auto& u : trunk_) trunk = u(tape, trunk);

  const auto pool = PoolSpec::cube(3, 2, 1);
  auto extents_of = [](Var<T> v) { return Extent3{v.shape()[2], v.shape()[3], v.shape()[4]}; };
  std::vector<Extent3> level_extents{extents_of(x)};
  std::vector<Var<T>> skips;
  Var<T> m = x;
  for (std::size_t s = 0; s < cfg_.down_steps; ++s) {
    m = down_[s](tape, ops::maxpool3d(m, pool));
    level_extents.push_back(extents_of(m));
    if (s + 1 < cfg_.down_steps) skips.push_back(skip_[s](tape, m));
  }
  for (std::size_t s = 0; s < cfg_.up_steps; ++s) {
    const std::size_t target_level = cfg_.down_steps - 1 - s;
    m = ops::resize3d(up_[s](tape, m), level_extents[target_level]);
    if (target_level >= 1) m = ops::add(m, skips[target_level - 1]);
  }
  auto logits = head_[1](tape, ops::relu(head_[0](tape, m)));
  auto mask = attention_activation(logits, cfg_.variant);

  auto combined = residual_attention_combine(mask, trunk);
  Var<T> out = combined;
  for (const auto& u : post_) out = u(tape, out);
  return {out, combined, trunk, mask};
}

template <typename T>
AttentionStack<T>::AttentionStack(ParameterStore<T>& store, const std::string& name, std::size_t count,
                                  const AttentionModuleConfig& cfg, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) modules_.emplace_back(store, name + ".attention" + std::to_string(i), cfg, rng);
}

template <typename T>
Var<T> AttentionStack<T>::operator()(Tape<T>& tape, Var<T> x, std::vector<Var<T>>* masks) const {
  for (const auto& module : modules_) {
    auto out = module.forward(tape, x);
    if (masks) masks->push_back(out.mask);
    x = out.output;
  }
  return x;
}

template class ResidualUnit<float>;
template class ResidualUnit<double>;
template class AttentionModule<float>;
template class AttentionModule<double>;
template class AttentionStack<float>;
template class AttentionStack<double>;
template Var<float> attention_activation(Var<float>, AttentionVariant);
template Var<double> attention_activation(Var<double>, AttentionVariant);
template Var<float> residual_attention_combine(Var<float>, Var<float>);
template Var<double> residual_attention_combine(Var<double>, Var<double>);

}  // namespace nlran
