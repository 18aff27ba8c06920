#include "nlran/nonlocal.hpp"

#include "nlran/errors.hpp"

namespace nlran {

void NonLocalConfig::validate() const {
  if (channels == 0) throw ConfigError("non-local block needs a positive channel count");
  if (bottleneck() < 1) {
    throw ConfigError("non-local bottleneck_channels must be at least 1 (channels=" + std::to_string(channels) + ")");
  }
}

template <typename T>
Var<T> pairwise_affinity(Var<T> theta, Var<T> phi) {
  return ops::bmm(theta, phi, /*transpose_a=*/true, /*transpose_b=*/false);
}

template <typename T>
Var<T> nonlocal_aggregate(Var<T> theta, Var<T> phi, Var<T> g) {
  if (theta.shape() != phi.shape() || theta.shape() != g.shape() || theta.shape().size() != 3) {
    throw ShapeError("nonlocal_aggregate: theta, phi, g must share an [N,Cb,P] shape");
  }
  const auto positions = static_cast<T>(theta.shape()[2]);
  auto gram = ops::bmm(g, phi, false, true);  // [N, Cb, Cb]
  return ops::scale(ops::bmm(gram, theta), T(1) / positions);
}

template <typename T>
NonLocalBlock<T>::NonLocalBlock(ParameterStore<T>& store, const std::string& name, const NonLocalConfig& cfg,
                                Rng& rng)
    : cfg_(cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels, cb = cfg.bottleneck();
  theta_ = Conv3dLayer<T>(store, name + ".theta", ConvSpec::cube(c, cb, 1), rng);
  phi_ = Conv3dLayer<T>(store, name + ".phi", ConvSpec::cube(c, cb, 1), rng);
  g_ = Conv3dLayer<T>(store, name + ".g", ConvSpec::cube(c, cb, 1), rng);
  wz_ = Conv3dLayer<T>(store, name + ".wz", ConvSpec::cube(cb, c, 1), rng, /*init_gain=*/0.0);
}

template <typename T>
Var<T> NonLocalBlock<T>::operator()(Tape<T>& tape, Var<T> x) const {
  const auto& s = x.shape();
  if (s.size() != 5 || s[1] != cfg_.channels) {
    throw ShapeError("non-local block expects " + std::to_string(cfg_.channels) + " channels, got " + to_string(s));
  }
  const std::size_t n = s[0], cb = cfg_.bottleneck(), positions = s[2] * s[3] * s[4];
  const Shape flat{n, cb, positions};
  auto theta = ops::reshape(theta_(tape, x), flat);
  auto phi = ops::reshape(phi_(tape, x), flat);
  auto g = ops::reshape(g_(tape, x), flat);
  auto y = ops::reshape(nonlocal_aggregate(theta, phi, g), Shape{n, cb, s[2], s[3], s[4]});
  return ops::add(x, wz_(tape, y));
}

template class NonLocalBlock<float>;
template class NonLocalBlock<double>;
template Var<float> pairwise_affinity(Var<float>, Var<float>);
template Var<double> pairwise_affinity(Var<double>, Var<double>);
template Var<float> nonlocal_aggregate(Var<float>, Var<float>, Var<float>);
template Var<double> nonlocal_aggregate(Var<double>, Var<double>, Var<double>);

}  // namespace nlran
