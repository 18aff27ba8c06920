#pragma once

#include <string>

#include "nlran/layers.hpp"

namespace nlran {

struct NonLocalConfig {
  std::size_t channels = 0;
  std::size_t bottleneck_channels = 0;  // 0 selects channels / 2

  std::size_t bottleneck() const { return bottleneck_channels ? bottleneck_channels : channels / 2; }
  void validate() const;
};

/// Entry (i, j) = <theta_i, phi_j> per batch element. Inputs are
/// [N, Cb, P] embeddings; output is [N, P, P].
template <typename T>
Var<T> pairwise_affinity(Var<T> theta, Var<T> phi);

/// y_i = (1/P) sum_j <theta_i, phi_j> g_j over all P positions.
///
/// The affinity is a plain dot product, so the sum reassociates:
/// Y = (G Phi^T) Theta / P. That costs O(P Cb^2) and never materialises the
/// P x P matrix; it equals the pairwise form up to reduction order.
template <typename T>
Var<T> nonlocal_aggregate(Var<T> theta, Var<T> phi, Var<T> g);

/// Non-local block with residual output x + W_z y. theta, phi, g and W_z are
/// 1x1x1 convolutions; W_z starts at zero so the block is the identity at
/// initialisation.
template <typename T>
class NonLocalBlock {
 public:
  NonLocalBlock() = default;
  NonLocalBlock(ParameterStore<T>& store, const std::string& name, const NonLocalConfig& cfg, Rng& rng);

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

  const NonLocalConfig& config() const noexcept { return cfg_; }
  const Conv3dLayer<T>& theta() const noexcept { return theta_; }
  const Conv3dLayer<T>& phi() const noexcept { return phi_; }
  const Conv3dLayer<T>& g() const noexcept { return g_; }
  const Conv3dLayer<T>& output_projection() const noexcept { return wz_; }

 private:
  NonLocalConfig cfg_;
  Conv3dLayer<T> theta_, phi_, g_, wz_;
};

extern template class NonLocalBlock<float>;
extern template class NonLocalBlock<double>;

}  // namespace nlran
