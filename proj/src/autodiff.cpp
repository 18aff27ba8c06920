#include "nlran/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "nlran/errors.hpp"

namespace nlran {

template <typename T>
const Tensor<T>& BackwardContext<T>::grad_output() const {
  return tape_.nodes_[node_].grad;
}

template <typename T>
const Tensor<T>& BackwardContext<T>::output() const {
  return tape_.value(node_);
}

template <typename T>
const Tensor<T>& BackwardContext<T>::input(std::size_t k) const {
  return tape_.value(tape_.nodes_[node_].inputs.at(k));
}

template <typename T>
Tensor<T>* BackwardContext<T>::input_grad(std::size_t k) {
  return tape_.grad_slot(tape_.nodes_[node_].inputs.at(k));
}

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  if (!value.all_finite()) throw NumericError("non-finite value in constant leaf");
  Node node;
  node.op = "constant";
  node.value = std::move(value);
  node.leaf = true;
  return push(std::move(node));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  if (!value.all_finite()) throw NumericError("non-finite value in variable leaf");
  Node node;
  node.op = "variable";
  node.value = std::move(value);
  node.leaf = true;
  node.requires_grad = grad_enabled_;
  return push(std::move(node));
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& parameter) {
  if (!parameter.value.all_finite()) {
    throw NumericError("non-finite value in parameter " + parameter.name);
  }
  Node node;
  node.op = "parameter";
  node.external = &parameter.value;
  node.parameter = &parameter;
  node.leaf = true;
  node.requires_grad = grad_enabled_;
  return push(std::move(node));
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, std::initializer_list<Var<T>> inputs, Tensor<T> value,
                       BackwardFn backward) {
  return record(op, std::vector<Var<T>>(inputs), std::move(value), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, const std::vector<Var<T>>& inputs, Tensor<T> value,
                       BackwardFn backward) {
  Node node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (!in.valid() || &in.tape() != this || in.id() >= nodes_.size()) {
      throw InternalError(std::string(op) + ": input is not recorded on this tape");
    }
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + std::string(op) + " " +
                       to_string(value.shape()));
  }
  node.value = std::move(value);
  node.requires_grad = node.requires_grad && grad_enabled_;
  if (node.requires_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
  const auto& node = nodes_.at(id);
  return node.external ? *node.external : node.value;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var<T> v) const {
  const auto& node = nodes_.at(v.id());
  if (node.parameter) return node.parameter->grad;
  return node.grad;
}

template <typename T>
typename Tape<T>::NodeInfo Tape<T>::info(std::size_t id) const {
  const auto& node = nodes_.at(id);
  return NodeInfo{node.op, node.inputs, node.requires_grad};
}

template <typename T>
Tensor<T>* Tape<T>::grad_slot(std::size_t id) {
  auto& node = nodes_.at(id);
  if (!node.requires_grad) return nullptr;
  Tensor<T>& slot = node.parameter ? node.parameter->grad : node.grad;
  const auto& shape = value(id).shape();
  if (slot.shape() != shape) slot = Tensor<T>(shape);
  return &slot;
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (!root.valid() || &root.tape() != this) throw InternalError("backward root is not on this tape");
  const auto rid = root.id();
  if (value(rid).size() != 1) {
    throw RankError("backward needs a scalar root, got shape " + to_string(value(rid).shape()));
  }
  for (std::size_t i = 0; i <= rid; ++i) {
    auto& node = nodes_[i];
    if (!node.leaf) node.grad = Tensor<T>();
  }
  last_visits_ = 0;
  if (!nodes_[rid].requires_grad) return;

  if (nodes_[rid].leaf) {
    auto* slot = grad_slot(rid);
    (*slot)[0] += T(1);
    last_visits_ = 1;
    return;
  }
  nodes_[rid].grad = Tensor<T>(value(rid).shape(), T(1));

  for (std::size_t i = rid + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.leaf || !node.requires_grad || node.grad.empty()) continue;
    for (auto in : node.inputs) {
      if (in >= i) throw InternalError("tape cycle detected at node " + std::to_string(i));
    }
    if (!node.grad.all_finite()) {
      throw NumericError("non-finite gradient reaching " + std::string(node.op));
    }
    BackwardContext<T> ctx(*this, i);
    node.backward(ctx);
    ++last_visits_;
    node.grad = Tensor<T>();  // intermediate gradient no longer needed
  }

  for (std::size_t i = 0; i <= rid; ++i) {
    const auto& node = nodes_[i];
    if (!node.leaf || !node.requires_grad) continue;
    const auto& g = node.parameter ? node.parameter->grad : node.grad;
    if (!g.empty() && !g.all_finite()) {
      throw NumericError("non-finite gradient at leaf " +
                         (node.parameter ? node.parameter->name : std::string(node.op)));
    }
  }
}

template class Tape<float>;
template class Tape<double>;
template class BackwardContext<float>;
template class BackwardContext<double>;

template <typename T>
double finite_difference_check(const ScalarFunction<T>& f, const Tensor<T>& x, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_difference_check: eps must be positive");
  if (!x.all_finite()) throw NumericError("finite_difference_check: x must be finite");

  Tensor<T> analytic;
  {
    Tape<T> tape;
    auto xv = tape.variable(x);
    auto y = f(tape, xv);
    if (y.value().size() != 1) {
      throw RankError("finite_difference_check: objective must be scalar, got " +
                      to_string(y.value().shape()));
    }
    tape.backward(y);
    analytic = tape.grad(xv);
    if (analytic.empty()) analytic = Tensor<T>(x.shape());
  }

  auto evaluate = [&](const Tensor<T>& point) {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    auto y = f(tape, tape.constant(point));
    return static_cast<double>(y.value().item());
  };

  double worst = 0.0;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T original = probe[i];
    probe[i] = static_cast<T>(original + eps);
    const double plus = evaluate(probe);
    probe[i] = static_cast<T>(original - eps);
    const double minus = evaluate(probe);
    probe[i] = original;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double scale = std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, std::abs(a - numeric) / scale);
  }
  return worst;
}

template double finite_difference_check<float>(const ScalarFunction<float>&, const Tensor<float>&, double);
template double finite_difference_check<double>(const ScalarFunction<double>&, const Tensor<double>&, double);

}  // namespace nlran
