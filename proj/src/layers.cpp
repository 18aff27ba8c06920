#include "nlran/layers.hpp"

#include <cmath>

#include "nlran/errors.hpp"

namespace nlran {

template <typename T>
Parameter<T>& ParameterStore<T>::create(std::string name, Tensor<T> value) {
  if (find(name)) throw ConfigError("duplicate parameter name " + name);
  params_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{std::move(name), std::move(value), {}}));
  return *params_.back();
}

template <typename T>
Parameter<T>* ParameterStore<T>::find(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

template <typename T>
const Parameter<T>* ParameterStore<T>::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

template <typename T>
std::size_t ParameterStore<T>::element_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p->value.size();
  return total;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
Tensor<T> kaiming_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(shape);
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(sd * rng.normal());
  return t;
}

template <typename T>
Conv3dLayer<T>::Conv3dLayer(ParameterStore<T>& store, const std::string& name, const ConvSpec& spec, Rng& rng,
                            double init_gain)
    : spec_(spec) {
  const auto shape = spec.weight_shape();
  const std::size_t fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1] * spec.kernel[2];
  Tensor<T> weight(shape);
  if (init_gain != 0.0) {
    weight = kaiming_normal<T>(shape, fan_in, rng);
    for (auto& v : weight.values()) v = static_cast<T>(v * init_gain);
  }
  weight_ = &store.create(name + ".weight", std::move(weight));
  if (spec.has_bias) bias_ = &store.create(name + ".bias", Tensor<T>(Shape{spec.out_channels}));
}

template <typename T>
Var<T> Conv3dLayer<T>::operator()(Tape<T>& tape, Var<T> x) const {
  Var<T> b = bias_ ? tape.parameter(*bias_) : Var<T>();
  return ops::conv3d(x, tape.parameter(*weight_), b, spec_);
}

template <typename T>
LinearLayer<T>::LinearLayer(ParameterStore<T>& store, const std::string& name, std::size_t in_features,
                            std::size_t out_features, Rng& rng)
    : in_(in_features), out_(out_features) {
  weight_ = &store.create(name + ".weight", kaiming_normal<T>(Shape{out_features, in_features}, in_features, rng));
  bias_ = &store.create(name + ".bias", Tensor<T>(Shape{out_features}));
}

template <typename T>
Var<T> LinearLayer<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return ops::fully_connected(x, tape.parameter(*weight_), tape.parameter(*bias_));
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Conv3dLayer<float>;
template class Conv3dLayer<double>;
template class LinearLayer<float>;
template class LinearLayer<double>;
template Tensor<float> kaiming_normal<float>(const Shape&, std::size_t, Rng&);
template Tensor<double> kaiming_normal<double>(const Shape&, std::size_t, Rng&);

}  // namespace nlran
