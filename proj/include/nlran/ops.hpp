#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "nlran/autodiff.hpp"
#include "nlran/tensor.hpp"

namespace nlran {

using Extent3 = std::array<std::size_t, 3>;

/// 3D convolution geometry. Weight layout is (Cout, Cin, kd, kh, kw).
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Extent3 kernel{1, 1, 1};
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
  bool has_bias = true;

  /// Cubic kernel with "same"-style padding floor(k/2).
  static ConvSpec cube(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1,
                       bool bias = true) {
    return ConvSpec{in, out, {k, k, k}, {stride, stride, stride}, {k / 2, k / 2, k / 2}, bias};
  }

  Shape weight_shape() const { return {out_channels, in_channels, kernel[0], kernel[1], kernel[2]}; }
  std::size_t parameter_count() const;
};

struct PoolSpec {
  Extent3 kernel{2, 2, 2};
  Extent3 stride{2, 2, 2};
  Extent3 padding{0, 0, 0};

  static PoolSpec cube(std::size_t k, std::size_t stride, std::size_t pad = 0) {
    return PoolSpec{{k, k, k}, {stride, stride, stride}, {pad, pad, pad}};
  }
};

enum class UpsampleMode { Nearest, Trilinear };

/// floor((in + 2p - k) / s) + 1; throws ShapeError when the window does not fit.
std::size_t strided_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                           const char* what);
Extent3 conv_output_extents(const Extent3& in, const ConvSpec& spec);
Extent3 pool_output_extents(const Extent3& in, const PoolSpec& spec);

namespace ops {

// Elementwise (operands must have identical shapes).
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> add_scalar(Var<T> a, T offset);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

// Reductions to a scalar of shape [1].
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

/// Cross-correlation with zero padding. x: [N,Cin,D,H,W]; bias may be an
/// invalid Var when spec.has_bias is false.
template <typename T>
Var<T> conv3d(Var<T> x, Var<T> weight, Var<T> bias, const ConvSpec& spec);

/// Max over each window; padded cells never win. Backward routes to the first
/// row-major argmax of each window.
template <typename T>
Var<T> maxpool3d(Var<T> x, const PoolSpec& spec);

/// Integer-factor upsampling. Nearest maps output i to input floor(i/f);
/// trilinear uses half-pixel centers (corner alignment off).
template <typename T>
Var<T> upsample3d(Var<T> x, const Extent3& factor, UpsampleMode mode);

/// Trilinear resize to explicit spatial extents (corner alignment off).
template <typename T>
Var<T> resize3d(Var<T> x, const Extent3& extents);

/// Mixed attention: elementwise logistic sigmoid.
template <typename T>
Var<T> mixed_attention_activation(Var<T> x);

/// Channel attention: each channel vector (fixed n,d,h,w) divided by its L2
/// norm; zero vectors map to zero.
template <typename T>
Var<T> channel_attention_activation(Var<T> x);

/// Spatial attention: per (n,c), sigmoid((x - mean) / (std + eps)) with
/// population std over the spatial elements.
template <typename T>
Var<T> spatial_attention_activation(Var<T> x, T eps = T(1e-5));

/// [N,C,D,H,W] -> [N,C,1,1,1] spatial mean.
template <typename T>
Var<T> global_average_pool(Var<T> x);

/// x: [N,F], weight: [K,F], bias: [K] -> x W^T + b.
template <typename T>
Var<T> fully_connected(Var<T> x, Var<T> weight, Var<T> bias);

/// Mean over the batch of -log softmax(logits)[label]. logits: [N,K].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& labels);

/// Batched matrix product over [B,M,K] x [B,K,N]; transposes apply to the
/// last two axes of each operand.
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_a = false, bool transpose_b = false);

}  // namespace ops

// Tape-free kernels shared with inference-side code.

/// Row-wise softmax of [N,K].
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

/// Trilinear resize of every [D,H,W] block of a rank>=3 tensor.
template <typename T>
Tensor<T> resize_trilinear(const Tensor<T>& x, const Extent3& extents);

}  // namespace nlran
