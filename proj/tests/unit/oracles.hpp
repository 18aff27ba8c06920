#pragma once

// Independent reference implementations used by the tests. They share no
// code with the library kernels.

#include <algorithm>
#include <cmath>
#include <vector>

#include "nlran/random.hpp"
#include "nlran/tensor.hpp"

namespace oracle {

using nlran::Shape;
using nlran::Tensor;

inline Tensor<double> random_tensor(const Shape& shape, nlran::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Direct 8-deep loop cross-correlation with zero padding.
inline Tensor<double> conv3d(const Tensor<double>& x, const Tensor<double>& w, const std::vector<double>& bias,
                             std::array<std::size_t, 3> stride, std::array<std::size_t, 3> pad) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t Co = w.dim(0), KD = w.dim(2), KH = w.dim(3), KW = w.dim(4);
  const std::size_t OD = (D + 2 * pad[0] - KD) / stride[0] + 1;
  const std::size_t OH = (H + 2 * pad[1] - KH) / stride[1] + 1;
  const std::size_t OW = (W + 2 * pad[2] - KW) / stride[2] + 1;
  Tensor<double> y({N, Co, OD, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t od = 0; od < OD; ++od)
        for (std::size_t oh = 0; oh < OH; ++oh)
          for (std::size_t ow = 0; ow < OW; ++ow) {
            double acc = bias.empty() ? 0.0 : bias[co];
            for (std::size_t ci = 0; ci < Ci; ++ci)
              for (std::size_t kd = 0; kd < KD; ++kd)
                for (std::size_t kh = 0; kh < KH; ++kh)
                  for (std::size_t kw = 0; kw < KW; ++kw) {
                    const long id = long(od * stride[0] + kd) - long(pad[0]);
                    const long ih = long(oh * stride[1] + kh) - long(pad[1]);
                    const long iw = long(ow * stride[2] + kw) - long(pad[2]);
                    if (id < 0 || ih < 0 || iw < 0 || id >= long(D) || ih >= long(H) || iw >= long(W)) continue;
                    acc += x.at({n, ci, std::size_t(id), std::size_t(ih), std::size_t(iw)}) *
                           w.at({co, ci, kd, kh, kw});
                  }
            y.at({n, co, od, oh, ow}) = acc;
          }
  return y;
}

/// 1x1x1 convolution as an explicit channel mix: out[n,o,p] = b[o] + sum_c w[o,c] x[n,c,p].
inline Tensor<double> channel_mix(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t N = x.dim(0), C = x.dim(1), O = w.dim(0);
  const std::size_t P = x.size() / (N * C);
  Shape shape = x.shape();
  shape[1] = O;
  Tensor<double> y(shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t p = 0; p < P; ++p) {
        double acc = b.empty() ? 0.0 : b[o];
        for (std::size_t c = 0; c < C; ++c) acc += w[o * C + c] * x[(n * C + c) * P + p];
        y[(n * O + o) * P + p] = acc;
      }
  return y;
}

/// Non-local block written as the explicit pairwise sum
///   z_i = x_i + Wz( (1/P) sum_j (theta_i . phi_j) g_j ).
inline Tensor<double> nonlocal_block(const Tensor<double>& x, const Tensor<double>& wt, const Tensor<double>& bt,
                                     const Tensor<double>& wp, const Tensor<double>& bp, const Tensor<double>& wg,
                                     const Tensor<double>& bg, const Tensor<double>& wz, const Tensor<double>& bz) {
  const auto theta = channel_mix(x, wt, bt);
  const auto phi = channel_mix(x, wp, bp);
  const auto g = channel_mix(x, wg, bg);
  const std::size_t N = x.dim(0), Cb = theta.dim(1), P = x.size() / (N * x.dim(1));
  Shape yshape = theta.shape();
  Tensor<double> y(yshape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < P; ++j) {
        double f = 0.0;
        for (std::size_t c = 0; c < Cb; ++c) f += theta[(n * Cb + c) * P + i] * phi[(n * Cb + c) * P + j];
        for (std::size_t c = 0; c < Cb; ++c) y[(n * Cb + c) * P + i] += f * g[(n * Cb + c) * P + j] / double(P);
      }
  auto z = channel_mix(y, wz, bz);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += x[i];
  return z;
}

/// Mann-Whitney U / (n_pos n_neg), ties counted one half.
inline double mann_whitney(const std::vector<double>& scores, const std::vector<int>& truth) {
  double wins = 0.0;
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (truth[i]) ++pos;
    else ++neg;
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!truth[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (truth[j]) continue;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  return wins / double(pos * neg);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace oracle
