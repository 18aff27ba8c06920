#pragma once

#include <memory>
#include <string>
#include <vector>

#include "nlran/autodiff.hpp"
#include "nlran/ops.hpp"
#include "nlran/random.hpp"

namespace nlran {

/// Owns every parameter of a model. Pointers handed out stay valid for the
/// store's lifetime, including across moves.
template <typename T>
class ParameterStore {
 public:
  /// Registers a parameter; throws ConfigError on a duplicate name.
  Parameter<T>& create(std::string name, Tensor<T> value);

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }
  Parameter<T>* find(const std::string& name);
  const Parameter<T>* find(const std::string& name) const;

  std::size_t element_count() const;
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

/// Fan-in scaled normal, std = sqrt(2 / fan_in).
template <typename T>
Tensor<T> kaiming_normal(const Shape& shape, std::size_t fan_in, Rng& rng);

/// Weights are kaiming_normal scaled by `init_gain`; a gain of 0 gives an
/// all-zero kernel. Biases start at zero.
template <typename T>
class Conv3dLayer {
 public:
  Conv3dLayer() = default;
  Conv3dLayer(ParameterStore<T>& store, const std::string& name, const ConvSpec& spec, Rng& rng,
              double init_gain = 1.0);

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

  const ConvSpec& spec() const noexcept { return spec_; }
  Parameter<T>& weight() const { return *weight_; }
  Parameter<T>* bias() const { return bias_; }

 private:
  ConvSpec spec_;
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

template <typename T>
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(ParameterStore<T>& store, const std::string& name, std::size_t in_features,
              std::size_t out_features, Rng& rng);

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }
  Parameter<T>& weight() const { return *weight_; }
  Parameter<T>& bias() const { return *bias_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;
extern template class Conv3dLayer<float>;
extern template class Conv3dLayer<double>;
extern template class LinearLayer<float>;
extern template class LinearLayer<double>;

}  // namespace nlran
