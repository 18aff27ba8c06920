#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "nlran/tensor.hpp"

namespace nlran {

template <typename T>
class Tape;

/// Trainable tensor with a stable name path ("stage1.unit0.conv2.weight").
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first backward that reaches it

  void zero_grad() { grad = Tensor<T>(); }
};

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr && id_ != npos; }
  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = npos;
};

/// View handed to an operation's backward closure.
template <typename T>
class BackwardContext {
 public:
  BackwardContext(Tape<T>& tape, std::size_t node) : tape_(tape), node_(node) {}

  const Tensor<T>& grad_output() const;
  const Tensor<T>& output() const;
  const Tensor<T>& input(std::size_t k) const;
  /// Accumulator for the k-th input's gradient, zero-initialized on first
  /// use; nullptr when that input does not require a gradient.
  Tensor<T>* input_grad(std::size_t k);

 private:
  Tape<T>& tape_;
  std::size_t node_;
};

/// Define-by-run reverse-mode tape. Forward values are computed eagerly by the
/// operations in ops.hpp and recorded here together with a backward closure.
/// A tape is confined to a single thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext<T>&)>;

  struct NodeInfo {
    std::string_view op;
    std::vector<std::size_t> inputs;
    bool requires_grad;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Leaf whose gradient is kept on the tape (see grad()).
  Var<T> variable(Tensor<T> value);
  /// Leaf bound to a parameter; gradients accumulate into parameter.grad.
  /// The parameter must outlive the tape.
  Var<T> parameter(Parameter<T>& parameter);

  Var<T> record(std::string_view op, std::initializer_list<Var<T>> inputs, Tensor<T> value,
                BackwardFn backward);
  Var<T> record(std::string_view op, const std::vector<Var<T>>& inputs, Tensor<T> value,
                BackwardFn backward);

  /// Reverse sweep from a scalar root. Leaf gradients accumulate across
  /// calls; intermediate gradients are reset at the start of each sweep.
  void backward(Var<T> root);

  const Tensor<T>& value(std::size_t id) const;
  const Tensor<T>& value(Var<T> v) const { return value(v.id()); }
  /// Accumulated gradient of a leaf (variable or parameter).
  const Tensor<T>& grad(Var<T> v) const;
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id()).requires_grad; }

  std::size_t size() const noexcept { return nodes_.size(); }
  NodeInfo info(std::size_t id) const;

  /// Disables closure recording; used for inference.
  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  /// Number of node visits made by the last backward sweep.
  std::size_t last_backward_visits() const noexcept { return last_visits_; }

 private:
  friend class BackwardContext<T>;

  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Parameter<T>* parameter = nullptr;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
  };

  Var<T> push(Node node);
  Tensor<T>* grad_slot(std::size_t id);

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
  std::size_t last_visits_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;
extern template class BackwardContext<float>;
extern template class BackwardContext<double>;

/// Scalar-valued function of one tensor, expressed on a tape.
template <typename T>
using ScalarFunction = std::function<Var<T>(Tape<T>&, Var<T>)>;

/// Largest |analytic - central difference| / max(1, |analytic|, |numeric|)
/// over all components of x.
template <typename T>
double finite_difference_check(const ScalarFunction<T>& f, const Tensor<T>& x, double eps);

}  // namespace nlran
