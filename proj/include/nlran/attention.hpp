#pragma once

#include <string>
#include <vector>

#include "nlran/layers.hpp"

namespace nlran {

/// Bottleneck residual unit: 1x1x1 (in->mid), 3x3x3 (mid->mid, strided),
/// 1x1x1 (mid->out), plus an identity or 1x1x1 projection shortcut.
struct ResidualUnitConfig {
  std::size_t in_channels = 0;
  std::size_t mid_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;

  bool needs_projection() const { return in_channels != out_channels || stride != 1; }
};

/// Scale applied to the initial weights of the last convolution in every
/// residual branch.
inline constexpr double kResidualBranchGain = 0.2;

template <typename T>
class ResidualUnit {
 public:
  ResidualUnit() = default;
  ResidualUnit(ParameterStore<T>& store, const std::string& name, const ResidualUnitConfig& cfg, Rng& rng);

  /// relu(conv3(relu(conv2(relu(conv1(x))))) + shortcut(x))
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

  const ResidualUnitConfig& config() const noexcept { return cfg_; }
  const Conv3dLayer<T>& conv(std::size_t i) const { return convs_.at(i); }
  bool has_projection() const noexcept { return has_projection_; }
  const Conv3dLayer<T>& projection() const { return projection_; }

 private:
  ResidualUnitConfig cfg_;
  std::vector<Conv3dLayer<T>> convs_;
  Conv3dLayer<T> projection_;
  bool has_projection_ = false;
};

enum class AttentionVariant { Mixed, Channel, Spatial };

std::string to_string(AttentionVariant v);
AttentionVariant parse_attention_variant(const std::string& name);

struct AttentionModuleConfig {
  std::size_t channels = 0;
  std::size_t down_steps = 2;
  std::size_t up_steps = 2;
  std::size_t pre_units = 1;
  std::size_t trunk_units = 2;
  std::size_t post_units = 1;
  AttentionVariant variant = AttentionVariant::Mixed;

  /// Throws ConfigError when the invariants do not hold.
  void validate() const;
};

/// Everything a forward pass of one attention module exposes.
template <typename T>
struct AttentionOutput {
  Var<T> output;    // combined map after the post units
  Var<T> combined;  // H = (1 + M) * F
  Var<T> trunk;     // F
  Var<T> mask;      // M, retained for heat maps
};

/// Applies the variant's activation to mask logits.
template <typename T>
Var<T> attention_activation(Var<T> logits, AttentionVariant variant);

/// H = (1 + M) * F, elementwise.
template <typename T>
Var<T> residual_attention_combine(Var<T> mask, Var<T> trunk);

/// Residual attention module: a trunk of residual units and a bottom-up /
/// top-down mask branch. The mask branch halves resolution down_steps times
/// (maxpool 3^3, stride 2, pad 1), keeps a skip at every intermediate scale,
/// then climbs back with trilinear resizes to the exact extents of each
/// level before the 1x1x1 head and the variant activation.
template <typename T>
class AttentionModule {
 public:
  AttentionModule() = default;
  AttentionModule(ParameterStore<T>& store, const std::string& name, const AttentionModuleConfig& cfg, Rng& rng);

  AttentionOutput<T> forward(Tape<T>& tape, Var<T> x) const;

  const AttentionModuleConfig& config() const noexcept { return cfg_; }
  const Conv3dLayer<T>& mask_head(std::size_t i) const { return head_.at(i); }
  const std::vector<ResidualUnit<T>>& trunk_units() const noexcept { return trunk_; }

 private:
  AttentionModuleConfig cfg_;
  std::vector<ResidualUnit<T>> pre_, trunk_, post_;
  std::vector<ResidualUnit<T>> down_, skip_, up_;
  std::vector<Conv3dLayer<T>> head_;
};

/// n sequential attention modules; n = 0 is the identity.
template <typename T>
class AttentionStack {
 public:
  AttentionStack() = default;
  AttentionStack(ParameterStore<T>& store, const std::string& name, std::size_t count,
                 const AttentionModuleConfig& cfg, Rng& rng);

  /// Appends the mask of every module to `masks` when given.
  Var<T> operator()(Tape<T>& tape, Var<T> x, std::vector<Var<T>>* masks = nullptr) const;

  std::size_t size() const noexcept { return modules_.size(); }
  const AttentionModule<T>& module(std::size_t i) const { return modules_.at(i); }

 private:
  std::vector<AttentionModule<T>> modules_;
};

extern template class ResidualUnit<float>;
extern template class ResidualUnit<double>;
extern template class AttentionModule<float>;
extern template class AttentionModule<double>;
extern template class AttentionStack<float>;
extern template class AttentionStack<double>;

}  // namespace nlran
