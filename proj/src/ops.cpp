#include "nlran/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "nlran/errors.hpp"

namespace nlran {

std::size_t ConvSpec::parameter_count() const {
  return out_channels * in_channels * kernel[0] * kernel[1] * kernel[2] + (has_bias ? out_channels : 0);
}

std::size_t strided_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                           const char* what) {
  if (kernel == 0 || stride == 0) throw ShapeError(std::string(what) + ": kernel and stride must be positive");
  if (in + 2 * pad < kernel) {
    throw ShapeError(std::string(what) + ": window " + std::to_string(kernel) + " exceeds padded extent " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

Extent3 conv_output_extents(const Extent3& in, const ConvSpec& spec) {
  Extent3 out{};
  for (int a = 0; a < 3; ++a) out[a] = strided_extent(in[a], spec.kernel[a], spec.stride[a], spec.padding[a], "conv3d");
  return out;
}

Extent3 pool_output_extents(const Extent3& in, const PoolSpec& spec) {
  Extent3 out{};
  for (int a = 0; a < 3; ++a) {
    if (spec.padding[a] * 2 > spec.kernel[a]) throw ShapeError("maxpool3d: padding exceeds half the window");
    out[a] = strided_extent(in[a], spec.kernel[a], spec.stride[a], spec.padding[a], "maxpool3d");
  }
  return out;
}

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

Extent3 spatial(const Shape& s) { return {s[2], s[3], s[4]}; }

template <typename T>
void accumulate(Tensor<T>* dst, const Tensor<T>& src) {
  if (!dst) return;
  auto d = dst->values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// ----- conv3d --------------------------------------------------------------

struct ConvGeometry {
  std::size_t n, cin, cout;
  Extent3 in, out;
  ConvSpec spec;
  std::size_t in_positions() const { return in[0] * in[1] * in[2]; }
  std::size_t out_positions() const { return out[0] * out[1] * out[2]; }
  std::size_t patch() const { return cin * spec.kernel[0] * spec.kernel[1] * spec.kernel[2]; }
  bool pointwise() const {
    return spec.kernel == Extent3{1, 1, 1} && spec.stride == Extent3{1, 1, 1} && spec.padding == Extent3{0, 0, 0};
  }
};

// Gathers one sample into column layout, or scatter-adds columns back into the image.
template <bool ToColumns, typename T>
void transfer_columns(const ConvGeometry& g, const T* image, T* columns, T* image_out) {
  const auto [kd, kh, kw] = g.spec.kernel;
  const auto [sd, sh, sw] = g.spec.stride;
  const auto [pd, ph, pw] = g.spec.padding;
  const auto [D, H, W] = g.in;
  const auto [Do, Ho, Wo] = g.out;
  const std::size_t P = g.out_positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const std::size_t cbase = c * D * H * W;
    for (std::size_t kz = 0; kz < kd; ++kz) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
          T* col = columns + row * P;
          std::size_t p = 0;
          for (std::size_t oz = 0; oz < Do; ++oz) {
            const long iz = static_cast<long>(oz * sd + kz) - static_cast<long>(pd);
            const bool zin = iz >= 0 && iz < static_cast<long>(D);
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy * sh + ky) - static_cast<long>(ph);
              const bool yin = zin && iy >= 0 && iy < static_cast<long>(H);
              const std::size_t rbase = yin ? cbase + (static_cast<std::size_t>(iz) * H + static_cast<std::size_t>(iy)) * W : 0;
              for (std::size_t ox = 0; ox < Wo; ++ox, ++p) {
                const long ix = static_cast<long>(ox * sw + kx) - static_cast<long>(pw);
                const bool inside = yin && ix >= 0 && ix < static_cast<long>(W);
                if constexpr (ToColumns) {
                  col[p] = inside ? image[rbase + static_cast<std::size_t>(ix)] : T(0);
                } else {
                  if (inside) image_out[rbase + static_cast<std::size_t>(ix)] += col[p];
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, const ConvGeometry& g) {
  Tensor<T> y(Shape{g.n, g.cout, g.out[0], g.out[1], g.out[2]});
  const std::size_t K = g.patch();
  const std::size_t P = g.out_positions();
  const std::size_t Pin = g.in_positions();
  ConstMatrixMap<T> wm(w.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(K));
  AlignedVector<T> columns(g.pointwise() ? 0 : K * P);
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* xn = x.data() + n * g.cin * Pin;
    const T* cols = xn;
    if (!g.pointwise()) {
      transfer_columns<true>(g, xn, columns.data(), static_cast<T*>(nullptr));
      cols = columns.data();
    }
    ConstMatrixMap<T> cm(cols, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    MatrixMap<T> ym(y.data() + n * g.cout * P, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(P));
    ym.noalias() = wm * cm;
    if (b) {
      for (std::size_t co = 0; co < g.cout; ++co) ym.row(static_cast<Eigen::Index>(co)).array() += (*b)[co];
    }
  }
  return y;
}

template <typename T>
void conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, const ConvGeometry& g,
                     Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
  const std::size_t K = g.patch();
  const std::size_t P = g.out_positions();
  const std::size_t Pin = g.in_positions();
  ConstMatrixMap<T> wm(w.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(K));
  AlignedVector<T> columns(g.pointwise() ? 0 : K * P);
  RowMatrix<T> dcols;
  for (std::size_t n = 0; n < g.n; ++n) {
    ConstMatrixMap<T> dym(dy.data() + n * g.cout * P, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(P));
    if (db) {
      for (std::size_t co = 0; co < g.cout; ++co) (*db)[co] += dym.row(static_cast<Eigen::Index>(co)).sum();
    }
    if (dw) {
      const T* xn = x.data() + n * g.cin * Pin;
      const T* cols = xn;
      if (!g.pointwise()) {
        transfer_columns<true>(g, xn, columns.data(), static_cast<T*>(nullptr));
        cols = columns.data();
      }
      ConstMatrixMap<T> cm(cols, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      MatrixMap<T> dwm(dw->data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(K));
      dwm.noalias() += dym * cm.transpose();
    }
    if (dx) {
      T* dxn = dx->data() + n * g.cin * Pin;
      if (g.pointwise()) {
        MatrixMap<T> dxm(dxn, static_cast<Eigen::Index>(g.cin), static_cast<Eigen::Index>(P));
        dxm.noalias() += wm.transpose() * dym;
      } else {
        dcols.noalias() = wm.transpose() * dym;
        transfer_columns<false>(g, static_cast<const T*>(nullptr), dcols.data(), dxn);
      }
    }
  }
}

// ----- trilinear tables ----------------------------------------------------

template <typename T>
struct Lerp {
  std::size_t i0, i1;
  T w0, w1;
};

template <typename T>
std::vector<Lerp<T>> lerp_table(std::size_t in, std::size_t out) {
  std::vector<Lerp<T>> table(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = ratio * (static_cast<double>(o) + 0.5) - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
    std::size_t i1 = i0 + (i0 + 1 < in ? 1 : 0);
    const T l1 = static_cast<T>(src - static_cast<double>(i0));
    table[o] = {i0, i1, T(1) - l1, l1};
  }
  return table;
}

template <typename T>
struct ResizePlan {
  std::vector<Lerp<T>> z, y, x;
  Extent3 in, out;
};

template <typename T>
ResizePlan<T> make_plan(const Extent3& in, const Extent3& out) {
  return {lerp_table<T>(in[0], out[0]), lerp_table<T>(in[1], out[1]), lerp_table<T>(in[2], out[2]), in, out};
}

template <typename T>
void resize_block(const ResizePlan<T>& plan, const T* src, T* dst) {
  const auto [D, H, W] = plan.in;
  (void)D;
  std::size_t p = 0;
  for (const auto& lz : plan.z) {
    for (const auto& ly : plan.y) {
      const T* r00 = src + (lz.i0 * H + ly.i0) * W;
      const T* r01 = src + (lz.i0 * H + ly.i1) * W;
      const T* r10 = src + (lz.i1 * H + ly.i0) * W;
      const T* r11 = src + (lz.i1 * H + ly.i1) * W;
      const T w00 = lz.w0 * ly.w0, w01 = lz.w0 * ly.w1, w10 = lz.w1 * ly.w0, w11 = lz.w1 * ly.w1;
      for (const auto& lx : plan.x) {
        const T a = w00 * r00[lx.i0] + w01 * r01[lx.i0] + w10 * r10[lx.i0] + w11 * r11[lx.i0];
        const T b = w00 * r00[lx.i1] + w01 * r01[lx.i1] + w10 * r10[lx.i1] + w11 * r11[lx.i1];
        dst[p++] = lx.w0 * a + lx.w1 * b;
      }
    }
  }
}

template <typename T>
void resize_block_backward(const ResizePlan<T>& plan, const T* dout, T* dsrc) {
  const auto [D, H, W] = plan.in;
  (void)D;
  std::size_t p = 0;
  for (const auto& lz : plan.z) {
    for (const auto& ly : plan.y) {
      T* r00 = dsrc + (lz.i0 * H + ly.i0) * W;
      T* r01 = dsrc + (lz.i0 * H + ly.i1) * W;
      T* r10 = dsrc + (lz.i1 * H + ly.i0) * W;
      T* r11 = dsrc + (lz.i1 * H + ly.i1) * W;
      const T w00 = lz.w0 * ly.w0, w01 = lz.w0 * ly.w1, w10 = lz.w1 * ly.w0, w11 = lz.w1 * ly.w1;
      for (const auto& lx : plan.x) {
        const T g = dout[p++];
        const T ga = lx.w0 * g, gb = lx.w1 * g;
        r00[lx.i0] += w00 * ga; r01[lx.i0] += w01 * ga; r10[lx.i0] += w10 * ga; r11[lx.i0] += w11 * ga;
        r00[lx.i1] += w00 * gb; r01[lx.i1] += w01 * gb; r10[lx.i1] += w10 * gb; r11[lx.i1] += w11 * gb;
      }
    }
  }
}

std::size_t block_count(const Shape& s) {
  std::size_t count = 1;
  for (std::size_t i = 0; i + 3 < s.size(); ++i) count *= s[i];
  return count;
}

}  // namespace

template <typename T>
Tensor<T> resize_trilinear(const Tensor<T>& x, const Extent3& extents) {
  if (x.rank() < 3) throw ShapeError("resize_trilinear: rank must be at least 3");
  const auto r = x.rank();
  const Extent3 in{x.dim(r - 3), x.dim(r - 2), x.dim(r - 1)};
  Shape shape = x.shape();
  shape[r - 3] = extents[0];
  shape[r - 2] = extents[1];
  shape[r - 1] = extents[2];
  Tensor<T> y(shape);
  const auto plan = make_plan<T>(in, extents);
  const std::size_t blocks = block_count(x.shape());
  const std::size_t pin = in[0] * in[1] * in[2];
  const std::size_t pout = extents[0] * extents[1] * extents[2];
  for (std::size_t b = 0; b < blocks; ++b) resize_block(plan, x.data() + b * pin, y.data() + b * pout);
  return y;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    T* o = out.data() + i * k;
    const T m = *std::max_element(row, row + k);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) total += (o[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < k; ++j) o[j] /= total;
  }
  return out;
}

template Tensor<float> resize_trilinear(const Tensor<float>&, const Extent3&);
template Tensor<double> resize_trilinear(const Tensor<double>&, const Extent3&);
template Tensor<float> softmax_rows(const Tensor<float>&);
template Tensor<double> softmax_rows(const Tensor<double>&);

namespace ops {

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.tape().record("add", {a, b}, std::move(out), [](BackwardContext<T>& ctx) {
    accumulate(ctx.input_grad(0), ctx.grad_output());
    accumulate(ctx.input_grad(1), ctx.grad_output());
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.tape().record("sub", {a, b}, std::move(out), [](BackwardContext<T>& ctx) {
    accumulate(ctx.input_grad(0), ctx.grad_output());
    if (auto* gb = ctx.input_grad(1)) {
      auto g = ctx.grad_output().values();
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape().record("mul", {a, b}, std::move(out), [](BackwardContext<T>& ctx) {
    const auto g = ctx.grad_output().values();
    if (auto* ga = ctx.input_grad(0)) {
      const auto bv = ctx.input(1).values();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (auto* gb = ctx.input_grad(1)) {
      const auto av = ctx.input(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  return a.tape().record("scale", {a}, std::move(out), [factor](BackwardContext<T>& ctx) {
    if (auto* ga = ctx.input_grad(0)) {
      const auto g = ctx.grad_output().values();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += factor * g[i];
    }
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v += offset;
  return a.tape().record("add_scalar", {a}, std::move(out), [](BackwardContext<T>& ctx) {
    accumulate(ctx.input_grad(0), ctx.grad_output());
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return a.tape().record("relu", {a}, std::move(out), [](BackwardContext<T>& ctx) {
    if (auto* ga = ctx.input_grad(0)) {
      const auto g = ctx.grad_output().values();
      const auto y = ctx.output().values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (y[i] > T(0)) (*ga)[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = sigmoid_scalar(v);
  return a.tape().record("sigmoid", {a}, std::move(out), [](BackwardContext<T>& ctx) {
    if (auto* ga = ctx.input_grad(0)) {
      const auto g = ctx.grad_output().values();
      const auto y = ctx.output().values();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i] * (T(1) - y[i]);
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape().record("reshape", {a}, std::move(out), [](BackwardContext<T>& ctx) {
    accumulate(ctx.input_grad(0), ctx.grad_output());
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (auto v : a.value().values()) total += v;
  return a.tape().record("sum", {a}, Tensor<T>::scalar(total), [](BackwardContext<T>& ctx) {
    if (auto* ga = ctx.input_grad(0)) {
      const T g = ctx.grad_output()[0];
      for (auto& v : ga->values()) v += g;
    }
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  T total = 0;
  for (auto v : a.value().values()) total += v;
  const T inv = T(1) / static_cast<T>(a.value().size());
  return a.tape().record("mean", {a}, Tensor<T>::scalar(total * inv), [inv](BackwardContext<T>& ctx) {
    if (auto* ga = ctx.input_grad(0)) {
      const T g = ctx.grad_output()[0] * inv;
      for (auto& v : ga->values()) v += g;
    }
  });
}

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> weight, Var<T> bias, const ConvSpec& spec) {
  const auto& xs = x.shape();
  require_rank(xs, 5, "conv3d");
  if (xs[1] != spec.in_channels) {
    throw ShapeError("conv3d: input has " + std::to_string(xs[1]) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  require_same(weight.shape(), spec.weight_shape(), "conv3d weight");
  if (spec.has_bias != bias.valid()) throw ShapeError("conv3d: bias presence does not match spec");
  if (spec.has_bias) require_same(bias.shape(), Shape{spec.out_channels}, "conv3d bias");

  ConvGeometry g{xs[0], xs[1], spec.out_channels, spatial(xs), conv_output_extents(spatial(xs), spec), spec};
  auto y = conv3d_forward(x.value(), weight.value(), spec.has_bias ? &bias.value() : nullptr, g);
  std::vector<Var<T>> inputs{x, weight};
  if (spec.has_bias) inputs.push_back(bias);
  return x.tape().record("conv3d", inputs, std::move(y), [g](BackwardContext<T>& ctx) {
    Tensor<T>* db = g.spec.has_bias ? ctx.input_grad(2) : nullptr;
    conv3d_backward(ctx.input(0), ctx.input(1), ctx.grad_output(), g, ctx.input_grad(0), ctx.input_grad(1), db);
  });
}

template <typename T>
Var<T> maxpool3d(Var<T> x, const PoolSpec& spec) {
  const auto& xs = x.shape();
  require_rank(xs, 5, "maxpool3d");
  const Extent3 in = spatial(xs);
  const Extent3 out = pool_output_extents(in, spec);
  const std::size_t blocks = xs[0] * xs[1];
  const std::size_t pin = in[0] * in[1] * in[2];
  const std::size_t pout = out[0] * out[1] * out[2];
  Tensor<T> y(Shape{xs[0], xs[1], out[0], out[1], out[2]});
  std::vector<std::uint32_t> argmax(blocks * pout);
  const T* xd = x.value().data();
  for (std::size_t b = 0; b < blocks; ++b) {
    const T* src = xd + b * pin;
    std::size_t p = 0;
    for (std::size_t oz = 0; oz < out[0]; ++oz) {
      for (std::size_t oy = 0; oy < out[1]; ++oy) {
        for (std::size_t ox = 0; ox < out[2]; ++ox, ++p) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t where = 0;
          bool found = false;
          for (std::size_t kz = 0; kz < spec.kernel[0]; ++kz) {
            const long iz = static_cast<long>(oz * spec.stride[0] + kz) - static_cast<long>(spec.padding[0]);
            if (iz < 0 || iz >= static_cast<long>(in[0])) continue;
            for (std::size_t ky = 0; ky < spec.kernel[1]; ++ky) {
              const long iy = static_cast<long>(oy * spec.stride[1] + ky) - static_cast<long>(spec.padding[1]);
              if (iy < 0 || iy >= static_cast<long>(in[1])) continue;
              for (std::size_t kx = 0; kx < spec.kernel[2]; ++kx) {
                const long ix = static_cast<long>(ox * spec.stride[2] + kx) - static_cast<long>(spec.padding[2]);
                if (ix < 0 || ix >= static_cast<long>(in[2])) continue;
                const std::size_t idx = (static_cast<std::size_t>(iz) * in[1] + static_cast<std::size_t>(iy)) * in[2] +
                                        static_cast<std::size_t>(ix);
                if (!found || src[idx] > best) {
                  best = src[idx];
                  where = idx;
                  found = true;
                }
              }
            }
          }
          y[b * pout + p] = best;
          argmax[b * pout + p] = static_cast<std::uint32_t>(where);
        }
      }
    }
  }
  return x.tape().record("maxpool3d", {x}, std::move(y),
                         [argmax = std::move(argmax), blocks, pin, pout](BackwardContext<T>& ctx) {
                           auto* gx = ctx.input_grad(0);
                           if (!gx) return;
                           const auto& g = ctx.grad_output();
                           for (std::size_t b = 0; b < blocks; ++b) {
                             for (std::size_t p = 0; p < pout; ++p) {
                               (*gx)[b * pin + argmax[b * pout + p]] += g[b * pout + p];
                             }
                           }
                         });
}

template <typename T>
Var<T> resize3d(Var<T> x, const Extent3& extents) {
  const auto& xs = x.shape();
  require_rank(xs, 5, "resize3d");
  for (auto e : extents) {
    if (e == 0) throw ShapeError("resize3d: target extents must be positive");
  }
  const Extent3 in = spatial(xs);
  auto y = resize_trilinear(x.value(), extents);
  return x.tape().record("resize3d", {x}, std::move(y), [in, extents](BackwardContext<T>& ctx) {
    auto* gx = ctx.input_grad(0);
    if (!gx) return;
    const auto plan = make_plan<T>(in, extents);
    const std::size_t blocks = block_count(ctx.input(0).shape());
    const std::size_t pin = in[0] * in[1] * in[2];
    const std::size_t pout = extents[0] * extents[1] * extents[2];
    const T* g = ctx.grad_output().data();
    for (std::size_t b = 0; b < blocks; ++b) resize_block_backward(plan, g + b * pout, gx->data() + b * pin);
  });
}

template <typename T>
Var<T> upsample3d(Var<T> x, const Extent3& factor, UpsampleMode mode) {
  const auto& xs = x.shape();
  require_rank(xs, 5, "upsample3d");
  for (auto f : factor) {
    if (f == 0) throw ShapeError("upsample3d: factors must be positive");
  }
  const Extent3 in = spatial(xs);
  const Extent3 out{in[0] * factor[0], in[1] * factor[1], in[2] * factor[2]};
  if (mode == UpsampleMode::Trilinear) return resize3d(x, out);

  const std::size_t blocks = xs[0] * xs[1];
  const std::size_t pin = in[0] * in[1] * in[2];
  const std::size_t pout = out[0] * out[1] * out[2];
  auto source_index = [in, out, factor](std::size_t p) {
    const std::size_t ox = p % out[2];
    const std::size_t oy = (p / out[2]) % out[1];
    const std::size_t oz = p / (out[2] * out[1]);
    return ((oz / factor[0]) * in[1] + oy / factor[1]) * in[2] + ox / factor[2];
  };
  Tensor<T> y(Shape{xs[0], xs[1], out[0], out[1], out[2]});
  const T* xd = x.value().data();
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t p = 0; p < pout; ++p) y[b * pout + p] = xd[b * pin + source_index(p)];
  }
  return x.tape().record("upsample3d", {x}, std::move(y), [=](BackwardContext<T>& ctx) {
    auto* gx = ctx.input_grad(0);
    if (!gx) return;
    const auto& g = ctx.grad_output();
    for (std::size_t b = 0; b < blocks; ++b) {
      for (std::size_t p = 0; p < pout; ++p) (*gx)[b * pin + source_index(p)] += g[b * pout + p];
    }
  });
}

template <typename T>
Var<T> mixed_attention_activation(Var<T> x) {
  return sigmoid(x);
}

template <typename T>
Var<T> channel_attention_activation(Var<T> x) {
  const auto& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("channel_attention_activation: needs a channel axis");
  const std::size_t n = xs[0], c = xs[1];
  const std::size_t positions = x.value().size() / (n * c);
  Tensor<T> y(xs);
  std::vector<T> norms(n * positions);
  const T* xd = x.value().data();
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = xd + b * c * positions;
    T* yb = y.data() + b * c * positions;
    for (std::size_t p = 0; p < positions; ++p) {
      T sq = 0;
      for (std::size_t k = 0; k < c; ++k) sq += xb[k * positions + p] * xb[k * positions + p];
      const T norm = std::sqrt(sq);
      norms[b * positions + p] = norm;
      for (std::size_t k = 0; k < c; ++k) yb[k * positions + p] = norm > T(0) ? xb[k * positions + p] / norm : T(0);
    }
  }
  return x.tape().record("channel_attention", {x}, std::move(y),
                         [norms = std::move(norms), n, c, positions](BackwardContext<T>& ctx) {
                           auto* gx = ctx.input_grad(0);
                           if (!gx) return;
                           const T* g = ctx.grad_output().data();
                           const T* y = ctx.output().data();
                           for (std::size_t b = 0; b < n; ++b) {
                             const std::size_t base = b * c * positions;
                             for (std::size_t p = 0; p < positions; ++p) {
                               const T norm = norms[b * positions + p];
                               if (!(norm > T(0))) continue;
                               T dot = 0;
                               for (std::size_t k = 0; k < c; ++k) dot += y[base + k * positions + p] * g[base + k * positions + p];
                               for (std::size_t k = 0; k < c; ++k) {
                                 const std::size_t i = base + k * positions + p;
                                 (*gx)[i] += (g[i] - y[i] * dot) / norm;
                               }
                             }
                           }
                         });
}

template <typename T>
Var<T> spatial_attention_activation(Var<T> x, T eps) {
  const auto& xs = x.shape();
  if (xs.size() < 3) throw ShapeError("spatial_attention_activation: needs [N,C,...] input");
  const std::size_t blocks = xs[0] * xs[1];
  const std::size_t count = x.value().size() / blocks;
  struct Stats {
    T mean, std;
  };
  std::vector<Stats> stats(blocks);
  Tensor<T> y(xs);
  const T* xd = x.value().data();
  for (std::size_t b = 0; b < blocks; ++b) {
    const T* xb = xd + b * count;
    T total = 0;
    for (std::size_t i = 0; i < count; ++i) total += xb[i];
    const T mu = total / static_cast<T>(count);
    T var = 0;
    for (std::size_t i = 0; i < count; ++i) var += (xb[i] - mu) * (xb[i] - mu);
    const T sd = std::sqrt(var / static_cast<T>(count));
    stats[b] = {mu, sd};
    const T denom = sd + eps;
    for (std::size_t i = 0; i < count; ++i) y[b * count + i] = sigmoid_scalar((xb[i] - mu) / denom);
  }
  return x.tape().record("spatial_attention", {x}, std::move(y),
                         [stats = std::move(stats), blocks, count, eps](BackwardContext<T>& ctx) {
                           auto* gx = ctx.input_grad(0);
                           if (!gx) return;
                           const T* g = ctx.grad_output().data();
                           const T* y = ctx.output().data();
                           const T* x = ctx.input(0).data();
                           const T n = static_cast<T>(count);
                           std::vector<T> gz(count);
                           for (std::size_t b = 0; b < blocks; ++b) {
                             const std::size_t base = b * count;
                             const T mu = stats[b].mean, sd = stats[b].std, u = sd + eps;
                             T gz_sum = 0, gz_dev = 0;
                             for (std::size_t i = 0; i < count; ++i) {
                               gz[i] = g[base + i] * y[base + i] * (T(1) - y[base + i]);
                               gz_sum += gz[i];
                               gz_dev += gz[i] * (x[base + i] - mu);
                             }
                             // dz_i/dx_k = (delta_ik - 1/n)/u - (x_i - mu)(x_k - mu)/(u^2 n sd)
                             const T coupling = sd > T(0) ? gz_dev / (u * u * n * sd) : T(0);
                             for (std::size_t k = 0; k < count; ++k) {
                               (*gx)[base + k] += gz[k] / u - gz_sum / (n * u) - (x[base + k] - mu) * coupling;
                             }
                           }
                         });
}

template <typename T>
Var<T> global_average_pool(Var<T> x) {
  const auto& xs = x.shape();
  require_rank(xs, 5, "global_average_pool");
  const std::size_t blocks = xs[0] * xs[1];
  const std::size_t count = xs[2] * xs[3] * xs[4];
  Tensor<T> y(Shape{xs[0], xs[1], 1, 1, 1});
  const T* xd = x.value().data();
  for (std::size_t b = 0; b < blocks; ++b) {
    T total = 0;
    for (std::size_t i = 0; i < count; ++i) total += xd[b * count + i];
    y[b] = total / static_cast<T>(count);
  }
  return x.tape().record("global_average_pool", {x}, std::move(y), [blocks, count](BackwardContext<T>& ctx) {
    auto* gx = ctx.input_grad(0);
    if (!gx) return;
    const T inv = T(1) / static_cast<T>(count);
    for (std::size_t b = 0; b < blocks; ++b) {
      const T g = ctx.grad_output()[b] * inv;
      for (std::size_t i = 0; i < count; ++i) (*gx)[b * count + i] += g;
    }
  });
}

template <typename T>
Var<T> fully_connected(Var<T> x, Var<T> weight, Var<T> bias) {
  require_rank(x.shape(), 2, "fully_connected input");
  require_rank(weight.shape(), 2, "fully_connected weight");
  const std::size_t n = x.shape()[0], f = x.shape()[1], k = weight.shape()[0];
  if (weight.shape()[1] != f) {
    throw ShapeError("fully_connected: weight " + to_string(weight.shape()) + " does not match input " +
                     to_string(x.shape()));
  }
  require_same(bias.shape(), Shape{k}, "fully_connected bias");
  const auto N = static_cast<Eigen::Index>(n), F = static_cast<Eigen::Index>(f), K = static_cast<Eigen::Index>(k);
  Tensor<T> y(Shape{n, k});
  MatrixMap<T> ym(y.data(), N, K);
  ym.noalias() = ConstMatrixMap<T>(x.value().data(), N, F) * ConstMatrixMap<T>(weight.value().data(), K, F).transpose();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) y[i * k + j] += bias.value()[j];
  }
  return x.tape().record("fully_connected", {x, weight, bias}, std::move(y), [N, F, K](BackwardContext<T>& ctx) {
    ConstMatrixMap<T> dy(ctx.grad_output().data(), N, K);
    if (auto* gx = ctx.input_grad(0)) {
      MatrixMap<T>(gx->data(), N, F).noalias() += dy * ConstMatrixMap<T>(ctx.input(1).data(), K, F);
    }
    if (auto* gw = ctx.input_grad(1)) {
      MatrixMap<T>(gw->data(), K, F).noalias() += dy.transpose() * ConstMatrixMap<T>(ctx.input(0).data(), N, F);
    }
    if (auto* gb = ctx.input_grad(2)) {
      for (Eigen::Index j = 0; j < K; ++j) (*gb)[static_cast<std::size_t>(j)] += dy.col(j).sum();
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(n));
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    }
  }
  auto probs = softmax_rows(logits.value());
  T loss = 0;
  const T* z = logits.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z + i * k;
    const T m = *std::max_element(row, row + k);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(row[j] - m);
    loss += (m + std::log(total)) - row[labels[i]];
  }
  loss /= static_cast<T>(n);
  return logits.tape().record("softmax_cross_entropy", {logits}, Tensor<T>::scalar(loss),
                              [probs = std::move(probs), labels, n, k](BackwardContext<T>& ctx) {
                                auto* gz = ctx.input_grad(0);
                                if (!gz) return;
                                const T g = ctx.grad_output()[0] / static_cast<T>(n);
                                for (std::size_t i = 0; i < n; ++i) {
                                  for (std::size_t j = 0; j < k; ++j) {
                                    const T onehot = static_cast<std::size_t>(labels[i]) == j ? T(1) : T(0);
                                    (*gz)[i * k + j] += g * (probs[i * k + j] - onehot);
                                  }
                                }
                              });
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_a, bool transpose_b) {
  require_rank(a.shape(), 3, "bmm lhs");
  require_rank(b.shape(), 3, "bmm rhs");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as[0] != bs[0]) throw ShapeError("bmm: batch mismatch " + to_string(as) + " vs " + to_string(bs));
  const std::size_t batch = as[0];
  const std::size_t m = transpose_a ? as[2] : as[1];
  const std::size_t ka = transpose_a ? as[1] : as[2];
  const std::size_t kb = transpose_b ? bs[2] : bs[1];
  const std::size_t n = transpose_b ? bs[1] : bs[2];
  if (ka != kb) throw ShapeError("bmm: inner extents differ " + to_string(as) + " vs " + to_string(bs));
  const auto ar = static_cast<Eigen::Index>(as[1]), ac = static_cast<Eigen::Index>(as[2]);
  const auto br = static_cast<Eigen::Index>(bs[1]), bc = static_cast<Eigen::Index>(bs[2]);
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n);
  Tensor<T> y(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMatrixMap<T> am(a.value().data() + i * as[1] * as[2], ar, ac);
    ConstMatrixMap<T> bm(b.value().data() + i * bs[1] * bs[2], br, bc);
    MatrixMap<T> ym(y.data() + i * m * n, M, N);
    if (transpose_a && transpose_b) ym.noalias() = am.transpose() * bm.transpose();
    else if (transpose_a) ym.noalias() = am.transpose() * bm;
    else if (transpose_b) ym.noalias() = am * bm.transpose();
    else ym.noalias() = am * bm;
  }
  return a.tape().record("bmm", {a, b}, std::move(y), [=](BackwardContext<T>& ctx) {
    auto* ga = ctx.input_grad(0);
    auto* gb = ctx.input_grad(1);
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatrixMap<T> am(ctx.input(0).data() + i * as[1] * as[2], ar, ac);
      ConstMatrixMap<T> bm(ctx.input(1).data() + i * bs[1] * bs[2], br, bc);
      ConstMatrixMap<T> dy(ctx.grad_output().data() + i * m * n, M, N);
      // With Y = op(A) op(B): d op(A) = dY op(B)^T, d op(B) = op(A)^T dY.
      if (ga) {
        MatrixMap<T> dam(ga->data() + i * as[1] * as[2], ar, ac);
        if (!transpose_a && !transpose_b) dam.noalias() += dy * bm.transpose();
        else if (!transpose_a && transpose_b) dam.noalias() += dy * bm;
        else if (transpose_a && !transpose_b) dam.noalias() += bm * dy.transpose();
        else dam.noalias() += bm.transpose() * dy.transpose();
      }
      if (gb) {
        MatrixMap<T> dbm(gb->data() + i * bs[1] * bs[2], br, bc);
        if (!transpose_a && !transpose_b) dbm.noalias() += am.transpose() * dy;
        else if (transpose_a && !transpose_b) dbm.noalias() += am * dy;
        else if (!transpose_a && transpose_b) dbm.noalias() += dy.transpose() * am;
        else dbm.noalias() += dy.transpose() * am.transpose();
      }
    }
  });
}

#define NLRAN_INSTANTIATE_OPS(T)                                                            \
  template Var<T> add(Var<T>, Var<T>);                                                      \
  template Var<T> sub(Var<T>, Var<T>);                                                      \
  template Var<T> mul(Var<T>, Var<T>);                                                      \
  template Var<T> scale(Var<T>, T);                                                         \
  template Var<T> add_scalar(Var<T>, T);                                                    \
  template Var<T> relu(Var<T>);                                                             \
  template Var<T> sigmoid(Var<T>);                                                          \
  template Var<T> reshape(Var<T>, Shape);                                                   \
  template Var<T> sum(Var<T>);                                                              \
  template Var<T> mean(Var<T>);                                                             \
  template Var<T> conv3d(Var<T>, Var<T>, Var<T>, const ConvSpec&);                          \
  template Var<T> maxpool3d(Var<T>, const PoolSpec&);                                       \
  template Var<T> upsample3d(Var<T>, const Extent3&, UpsampleMode);                         \
  template Var<T> resize3d(Var<T>, const Extent3&);                                         \
  template Var<T> mixed_attention_activation(Var<T>);                                       \
  template Var<T> channel_attention_activation(Var<T>);                                     \
  template Var<T> spatial_attention_activation(Var<T>, T);                                  \
  template Var<T> global_average_pool(Var<T>);                                              \
  template Var<T> fully_connected(Var<T>, Var<T>, Var<T>);                                  \
  template Var<T> softmax_cross_entropy(Var<T>, const std::vector<int>&);                   \
  template Var<T> bmm(Var<T>, Var<T>, bool, bool);

NLRAN_INSTANTIATE_OPS(float)
NLRAN_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace nlran
