#pragma once

// Differentiable kernels on NCHW tensors. Every forward op has a matching
// *_backward that maps an upstream gradient to gradients of its inputs.

#include "triad/tensor.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace triad {

// ---------------------------------------------------------------------------
// Convolution

/// Static description of a 2-d convolution with a square kernel.
struct ConvSpec {
  Index in = 1;
  Index out = 1;
  Index kernel = 1;
  Index stride = 1;
  Index pad = 0;
  Index dilation = 1;
  Index groups = 1;

  bool depthwise() const { return groups > 1 && groups == in && groups == out; }
  Index weight_count() const { return out * (in / groups) * kernel * kernel; }
  Index param_count() const { return weight_count() + out; }
  Shape weight_shape() const { return Shape{out, in / groups, kernel, kernel}; }

  Index out_extent(Index extent) const {
    const Index span = dilation * (kernel - 1) + 1;
    return (extent + 2 * pad - span) / stride + 1;
  }

  void validate() const {
    require_shape(in >= 1 && out >= 1 && kernel >= 1, "conv: channel counts and kernel must be >= 1");
    require_shape(stride >= 1 && dilation >= 1 && pad >= 0, "conv: stride/dilation >= 1, pad >= 0");
    require_shape(groups >= 1 && in % groups == 0,
                  "conv: in channels " + std::to_string(in) + " not divisible by groups " + std::to_string(groups));
    require_shape(out % groups == 0,
                  "conv: out channels " + std::to_string(out) + " not divisible by groups " + std::to_string(groups));
  }
};

/// Padding that keeps spatial extents for an odd kernel at stride 1.
inline ConvSpec same_conv(Index in, Index out, Index kernel, Index stride = 1, Index groups = 1) {
  return ConvSpec{in, out, kernel, stride, kernel / 2, 1, groups};
}

template <typename Scalar>
struct ConvParams {
  ConvSpec spec;
  Tensor<Scalar> weight;  // [out, in/groups, k, k]
  Tensor<Scalar> bias;    // [out]

  ConvParams() = default;
  explicit ConvParams(const ConvSpec& s, bool allocate = true) : spec(s) {
    spec.validate();
    if (allocate) {
      weight = Tensor<Scalar>(spec.weight_shape());
      bias = Tensor<Scalar>(Shape{spec.out});
    }
  }
};

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> dx;
  Tensor<Scalar> dweight;
  Tensor<Scalar> dbias;
};

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
void check_conv_input(const Tensor<Scalar>& x, const ConvParams<Scalar>& p) {
  const ConvSpec& s = p.spec;
  s.validate();
  require_shape(x.rank() == 4, "conv2d: input rank " + std::to_string(x.rank()) + ", expected 4 (N,C,H,W)");
  require_shape(x.dim(1) == s.in, "conv2d: input channels (axis 1) = " + std::to_string(x.dim(1)) +
                                      ", expected " + std::to_string(s.in));
  require_shape(p.weight.shape() == s.weight_shape(),
                "conv2d: weight shape " + p.weight.shape().str() + ", expected " + s.weight_shape().str());
  require_shape(p.bias.shape() == Shape{s.out},
                "conv2d: bias shape " + p.bias.shape().str() + ", expected [" + std::to_string(s.out) + "]");
  require_shape(s.out_extent(x.dim(2)) >= 1, "conv2d: height (axis 2) = " + std::to_string(x.dim(2)) +
                                                 " too small for kernel " + std::to_string(s.kernel));
  require_shape(s.out_extent(x.dim(3)) >= 1, "conv2d: width (axis 3) = " + std::to_string(x.dim(3)) +
                                                 " too small for kernel " + std::to_string(s.kernel));
}

// Unfolds one group of one image into [cin_g*k*k, Ho*Wo].
template <typename Scalar>
void im2col(const Scalar* img, Index cin_g, Index H, Index W, const ConvSpec& s, Index Ho, Index Wo,
            RowMatrix<Scalar>& cols) {
  const Index k = s.kernel;
  cols.resize(cin_g * k * k, Ho * Wo);
  for (Index c = 0; c < cin_g; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* row = cols.data() + ((c * k + ky) * k + kx) * Ho * Wo;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * s.stride - s.pad + ky * s.dilation;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * s.stride - s.pad + kx * s.dilation;
            row[oy * Wo + ox] =
                (iy >= 0 && iy < H && ix >= 0 && ix < W) ? img[(c * H + iy) * W + ix] : Scalar(0);
          }
        }
      }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, Index cin_g, Index H, Index W, const ConvSpec& s, Index Ho, Index Wo,
            Scalar* img) {
  const Index k = s.kernel;
  for (Index c = 0; c < cin_g; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* row = cols.data() + ((c * k + ky) * k + kx) * Ho * Wo;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * s.stride - s.pad + ky * s.dilation;
          if (iy < 0 || iy >= H) continue;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * s.stride - s.pad + kx * s.dilation;
            if (ix >= 0 && ix < W) img[(c * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Grouped 2-d convolution via im2col and a GEMM per group.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const ConvParams<Scalar>& p) {
  detail::check_conv_input(x, p);
  const ConvSpec& s = p.spec;
  const Index N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const Index Ho = s.out_extent(H), Wo = s.out_extent(W);
  const Index cin_g = s.in / s.groups, cout_g = s.out / s.groups, kk = cin_g * s.kernel * s.kernel;
  Tensor<Scalar> y(Shape{N, s.out, Ho, Wo});
  detail::RowMatrix<Scalar> cols;
  for (Index n = 0; n < N; ++n)
    for (Index g = 0; g < s.groups; ++g) {
      detail::im2col(x.data() + (n * s.in + g * cin_g) * H * W, cin_g, H, W, s, Ho, Wo, cols);
      Eigen::Map<const detail::RowMatrix<Scalar>> wg(p.weight.data() + g * cout_g * kk, cout_g, kk);
      Eigen::Map<detail::RowMatrix<Scalar>> yg(y.data() + (n * s.out + g * cout_g) * Ho * Wo, cout_g, Ho * Wo);
      yg.noalias() = wg * cols;
      yg.colwise() += p.bias.vec().segment(g * cout_g, cout_g);
    }
  return y;
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& x, const ConvParams<Scalar>& p, const Tensor<Scalar>& dy) {
  detail::check_conv_input(x, p);
  const ConvSpec& s = p.spec;
  const Index N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const Index Ho = s.out_extent(H), Wo = s.out_extent(W);
  require_shape(dy.shape() == Shape{N, s.out, Ho, Wo}, "conv2d_backward: upstream gradient shape " +
                                                           dy.shape().str());
  const Index cin_g = s.in / s.groups, cout_g = s.out / s.groups, kk = cin_g * s.kernel * s.kernel;
  ConvGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>(p.weight.shape()), Tensor<Scalar>(p.bias.shape())};
  detail::RowMatrix<Scalar> cols, dcols;
  for (Index n = 0; n < N; ++n)
    for (Index gi = 0; gi < s.groups; ++gi) {
      detail::im2col(x.data() + (n * s.in + gi * cin_g) * H * W, cin_g, H, W, s, Ho, Wo, cols);
      Eigen::Map<const detail::RowMatrix<Scalar>> wg(p.weight.data() + gi * cout_g * kk, cout_g, kk);
      Eigen::Map<const detail::RowMatrix<Scalar>> dyg(dy.data() + (n * s.out + gi * cout_g) * Ho * Wo, cout_g,
                                                      Ho * Wo);
      Eigen::Map<detail::RowMatrix<Scalar>> dwg(g.dweight.data() + gi * cout_g * kk, cout_g, kk);
      dwg.noalias() += dyg * cols.transpose();
      g.dbias.vec().segment(gi * cout_g, cout_g) += dyg.rowwise().sum();
      dcols.noalias() = wg.transpose() * dyg;
      detail::col2im(dcols, cin_g, H, W, s, Ho, Wo, g.dx.data() + (n * s.in + gi * cin_g) * H * W);
    }
  return g;
}

// ---------------------------------------------------------------------------
// Fully connected

template <typename Scalar>
struct LinearParams {
  Index in = 1;
  Index out = 1;
  Tensor<Scalar> weight;  // [out, in]
  Tensor<Scalar> bias;    // [out]

  LinearParams() = default;
  LinearParams(Index in_features, Index out_features, bool allocate = true) : in(in_features), out(out_features) {
    require_shape(in >= 1 && out >= 1, "linear: feature counts must be >= 1");
    if (allocate) {
      weight = Tensor<Scalar>(Shape{out, in});
      bias = Tensor<Scalar>(Shape{out});
    }
  }
  Index param_count() const { return out * in + out; }
};

template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  require_shape(w.rank() == 2, "fully_connected: weight must be rank 2");
  require_shape(x.size() == w.dim(1), "fully_connected: input length " + std::to_string(x.size()) +
                                          " != weight columns " + std::to_string(w.dim(1)));
  require_shape(b.size() == w.dim(0), "fully_connected: bias length " + std::to_string(b.size()) +
                                          " != weight rows " + std::to_string(w.dim(0)));
  Eigen::Map<const detail::RowMatrix<Scalar>> wm(w.data(), w.dim(0), w.dim(1));
  Tensor<Scalar> y(Shape{w.dim(0)});
  y.vec().noalias() = wm * x.vec();
  y.vec() += b.vec();
  return y;
}

template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& x, const LinearParams<Scalar>& p) {
  return fully_connected(x, p.weight, p.bias);
}

template <typename Scalar>
struct LinearGrads {
  Tensor<Scalar> dx;
  Tensor<Scalar> dweight;
  Tensor<Scalar> dbias;
};

template <typename Scalar>
LinearGrads<Scalar> fully_connected_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                             const Tensor<Scalar>& dy) {
  require_shape(dy.size() == w.dim(0), "fully_connected_backward: upstream length mismatch");
  Eigen::Map<const detail::RowMatrix<Scalar>> wm(w.data(), w.dim(0), w.dim(1));
  LinearGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>(w.shape()), Tensor<Scalar>(Shape{w.dim(0)})};
  g.dx.vec().noalias() = wm.transpose() * dy.vec();
  Eigen::Map<detail::RowMatrix<Scalar>> dw(g.dweight.data(), w.dim(0), w.dim(1));
  dw.noalias() = dy.vec() * x.vec().transpose();
  g.dbias.vec() = dy.vec();
  return g;
}

// ---------------------------------------------------------------------------
// Pooling

/// Stride-1 max pooling with padding k/2; padded cells never win.
template <typename Scalar>
Tensor<Scalar> max_pool2d(const Tensor<Scalar>& x, Index k) {
  require(k >= 1 && k % 2 == 1, "max_pool2d: kernel size " + std::to_string(k) + " must be odd");
  require_shape(x.rank() == 4, "max_pool2d: input must be rank 4");
  const Index planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), r = k / 2;
  Tensor<Scalar> y(x.shape());
  for (Index p = 0; p < planes; ++p) {
    const Scalar* in = x.data() + p * H * W;
    Scalar* out = y.data() + p * H * W;
    for (Index i = 0; i < H; ++i)
      for (Index j = 0; j < W; ++j) {
        Scalar m = -std::numeric_limits<Scalar>::infinity();
        for (Index a = std::max<Index>(0, i - r); a <= std::min(H - 1, i + r); ++a)
          for (Index b = std::max<Index>(0, j - r); b <= std::min(W - 1, j + r); ++b) m = std::max(m, in[a * W + b]);
        out[i * W + j] = m;
      }
  }
  return y;
}

/// Routes each output gradient to the first maximal cell of its window in scan order.
template <typename Scalar>
Tensor<Scalar> max_pool2d_backward(const Tensor<Scalar>& x, Index k, const Tensor<Scalar>& dy) {
  require(k >= 1 && k % 2 == 1, "max_pool2d: kernel size " + std::to_string(k) + " must be odd");
  require_shape(dy.shape() == x.shape(), "max_pool2d_backward: gradient shape mismatch");
  const Index planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), r = k / 2;
  Tensor<Scalar> dx(x.shape());
  for (Index p = 0; p < planes; ++p) {
    const Scalar* in = x.data() + p * H * W;
    for (Index i = 0; i < H; ++i)
      for (Index j = 0; j < W; ++j) {
        Index best = -1;
        for (Index a = std::max<Index>(0, i - r); a <= std::min(H - 1, i + r); ++a)
          for (Index b = std::max<Index>(0, j - r); b <= std::min(W - 1, j + r); ++b)
            if (best < 0 || in[a * W + b] > in[best]) best = a * W + b;
        dx[p * H * W + best] += dy[p * H * W + i * W + j];
      }
  }
  return dx;
}

namespace detail {

inline std::array<bool, 4> axis_mask(int rank, const std::vector<int>& axes, const char* op) {
  require(!axes.empty(), std::string(op) + ": empty axis set");
  std::array<bool, 4> mask{false, false, false, false};
  for (int a : axes) {
    require(a >= 0 && a < rank, std::string(op) + ": axis " + std::to_string(a) + " outside tensor rank " +
                                    std::to_string(rank));
    mask[static_cast<std::size_t>(a)] = true;
  }
  return mask;
}

inline Shape reduced_shape(const Shape& s, const std::array<bool, 4>& mask) {
  Shape r = s;
  for (int a = 0; a < s.rank(); ++a)
    if (mask[static_cast<std::size_t>(a)]) r = r.with(a, 1);
  return r;
}

// Offset into the reduced tensor for a flat index of the full tensor.
inline Index reduced_offset(const Shape& full, const Shape& red, Index flat) {
  Index off = 0, rem = flat;
  std::array<Index, 4> idx{};
  for (int a = full.rank() - 1; a >= 0; --a) {
    idx[static_cast<std::size_t>(a)] = rem % full[a];
    rem /= full[a];
  }
  for (int a = 0; a < full.rank(); ++a) off = off * red[a] + (red[a] == 1 ? 0 : idx[static_cast<std::size_t>(a)]);
  return off;
}

}  // namespace detail

/// Mean over the named axes; reduced axes are kept with extent 1.
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x, const std::vector<int>& axes) {
  const auto mask = detail::axis_mask(x.rank(), axes, "global_avg_pool");
  const Shape rs = detail::reduced_shape(x.shape(), mask);
  Tensor<Scalar> y(rs);
  for (Index i = 0; i < x.size(); ++i) y[detail::reduced_offset(x.shape(), rs, i)] += x[i];
  y.vec() /= static_cast<Scalar>(x.size() / rs.size());
  return y;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& x_shape, const std::vector<int>& axes, const Tensor<Scalar>& dy) {
  const auto mask = detail::axis_mask(x_shape.rank(), axes, "global_avg_pool");
  const Shape rs = detail::reduced_shape(x_shape, mask);
  require_shape(dy.shape() == rs, "global_avg_pool_backward: gradient shape mismatch");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x_shape.size() / rs.size());
  Tensor<Scalar> dx(x_shape);
  for (Index i = 0; i < dx.size(); ++i) dx[i] = dy[detail::reduced_offset(x_shape, rs, i)] * inv;
  return dx;
}

template <typename Scalar>
struct DirectionalPool {
  Tensor<Scalar> along_h;  // [N, C, H, 1], mean over width
  Tensor<Scalar> along_w;  // [N, C, 1, W], mean over height
};

/// Row means and column means of every channel plane.
template <typename Scalar>
DirectionalPool<Scalar> directional_pool(const Tensor<Scalar>& x) {
  require_shape(x.rank() == 4, "directional_pool: input must be rank 4");
  return {global_avg_pool(x, {3}), global_avg_pool(x, {2})};
}

template <typename Scalar>
Tensor<Scalar> directional_pool_backward(const Shape& x_shape, const Tensor<Scalar>& d_along_h,
                                         const Tensor<Scalar>& d_along_w) {
  Tensor<Scalar> dx = global_avg_pool_backward(x_shape, {3}, d_along_h);
  dx += global_avg_pool_backward(x_shape, {2}, d_along_w);
  return dx;
}

// ---------------------------------------------------------------------------
// Bilinear sampling

/// Four-corner interpolation stencil for a point in an H x W plane. Corners
/// outside the plane have offset -1 and contribute zero.
template <typename Scalar>
struct BilinearStencil {
  std::array<Index, 4> offset{-1, -1, -1, -1};
  std::array<Scalar, 4> weight{};
  std::array<Scalar, 4> dweight_dy{};
  std::array<Scalar, 4> dweight_dx{};

  Scalar sample(const Scalar* plane) const {
    Scalar v = 0;
    for (int i = 0; i < 4; ++i)
      if (offset[i] >= 0) v += weight[i] * plane[offset[i]];
    return v;
  }
  Scalar d_dy(const Scalar* plane) const {
    Scalar v = 0;
    for (int i = 0; i < 4; ++i)
      if (offset[i] >= 0) v += dweight_dy[i] * plane[offset[i]];
    return v;
  }
  Scalar d_dx(const Scalar* plane) const {
    Scalar v = 0;
    for (int i = 0; i < 4; ++i)
      if (offset[i] >= 0) v += dweight_dx[i] * plane[offset[i]];
    return v;
  }
  void scatter(Scalar* dplane, Scalar g) const {
    for (int i = 0; i < 4; ++i)
      if (offset[i] >= 0) dplane[offset[i]] += weight[i] * g;
  }
};

template <typename Scalar>
BilinearStencil<Scalar> bilinear_stencil(Index H, Index W, Scalar py, Scalar px) {
  require(!std::isnan(py) && !std::isnan(px), "bilinear_sample: NaN coordinate");
  require(std::isfinite(py) && std::isfinite(px), "bilinear_sample: non-finite coordinate");
  BilinearStencil<Scalar> st;
  const Scalar fy = std::floor(py), fx = std::floor(px);
  const Scalar ly = py - fy, lx = px - fx;
  // Far outside the plane every corner is dropped; skip the integer conversion.
  if (fy < Scalar(-2) || fx < Scalar(-2) || fy > static_cast<Scalar>(H) || fx > static_cast<Scalar>(W)) return st;
  const Index y0 = static_cast<Index>(fy), x0 = static_cast<Index>(fx);
  const std::array<Index, 4> ys{y0, y0, y0 + 1, y0 + 1};
  const std::array<Index, 4> xs{x0, x0 + 1, x0, x0 + 1};
  st.weight = {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
  st.dweight_dy = {-(1 - lx), -lx, 1 - lx, lx};
  st.dweight_dx = {-(1 - ly), 1 - ly, -ly, ly};
  for (int i = 0; i < 4; ++i)
    if (ys[i] >= 0 && ys[i] < H && xs[i] >= 0 && xs[i] < W) st.offset[i] = ys[i] * W + xs[i];
  return st;
}

/// Bilinear read of x[n, c] at fractional (py, px) with zero padding.
template <typename Scalar>
Scalar bilinear_sample(const Tensor<Scalar>& x, Index n, Index c, Scalar py, Scalar px) {
  require_shape(x.rank() == 4, "bilinear_sample: input must be rank 4");
  const Index H = x.dim(2), W = x.dim(3);
  return bilinear_stencil(H, W, py, px).sample(x.data() + (n * x.dim(1) + c) * H * W);
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { identity, relu, leaky_relu, sigmoid, hard_sigmoid };

inline constexpr double kLeakySlope = 0.1;

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

/// max(0, min(1, (x + 1) / 2))
template <typename Scalar>
Scalar hard_sigmoid(Scalar x) {
  return std::clamp((x + Scalar(1)) / Scalar(2), Scalar(0), Scalar(1));
}

template <typename Scalar>
Scalar activate(Activation kind, Scalar x) {
  switch (kind) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0 ? x : Scalar(0);
    case Activation::leaky_relu: return x > 0 ? x : Scalar(kLeakySlope) * x;
    case Activation::sigmoid: return sigmoid(x);
    case Activation::hard_sigmoid: return hard_sigmoid(x);
  }
  return x;
}

/// Derivative at the pre-activation value; kinks get subgradient 0
/// (leaky_relu uses its negative slope at 0).
template <typename Scalar>
Scalar activation_derivative(Activation kind, Scalar x) {
  switch (kind) {
    case Activation::identity: return Scalar(1);
    case Activation::relu: return x > 0 ? Scalar(1) : Scalar(0);
    case Activation::leaky_relu: return x > 0 ? Scalar(1) : Scalar(kLeakySlope);
    case Activation::sigmoid: {
      const Scalar s = sigmoid(x);
      return s * (1 - s);
    }
    case Activation::hard_sigmoid: return (x > -1 && x < 1) ? Scalar(0.5) : Scalar(0);
  }
  return Scalar(1);
}

template <typename Scalar>
Tensor<Scalar> activation(Activation kind, const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  y.vec() = x.vec().unaryExpr([kind](Scalar v) { return activate(kind, v); });
  return y;
}

template <typename Scalar>
Tensor<Scalar> activation_backward(Activation kind, const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  require_shape(x.shape() == dy.shape(), "activation_backward: gradient shape mismatch");
  Tensor<Scalar> dx(x.shape());
  dx.vec() = x.vec().unaryExpr([kind](Scalar v) { return activation_derivative(kind, v); }).cwiseProduct(dy.vec());
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization (inference statistics)

template <typename Scalar>
struct BatchNormParams {
  Index channels = 1;
  Tensor<Scalar> scale;  // learnable
  Tensor<Scalar> shift;  // learnable
  Tensor<Scalar> mean;   // running statistic
  Tensor<Scalar> var;    // running statistic
  Scalar eps = Scalar(1e-5);

  BatchNormParams() = default;
  explicit BatchNormParams(Index c, bool allocate = true) : channels(c) {
    if (allocate) {
      scale = Tensor<Scalar>(Shape{c}, Scalar(1));
      shift = Tensor<Scalar>(Shape{c});
      mean = Tensor<Scalar>(Shape{c});
      var = Tensor<Scalar>(Shape{c}, Scalar(1));
    }
  }
  Index param_count() const { return 4 * channels; }
};

template <typename Scalar>
void check_batchnorm(const Tensor<Scalar>& x, const BatchNormParams<Scalar>& p) {
  require_shape(x.rank() == 4, "batchnorm: input must be rank 4");
  const Shape cs{x.dim(1)};
  require_shape(p.scale.shape() == cs && p.shift.shape() == cs && p.mean.shape() == cs && p.var.shape() == cs,
                "batchnorm: parameter vectors must have length C = " + std::to_string(x.dim(1)));
  for (Index c = 0; c < x.dim(1); ++c)
    require(p.var[c] >= 0, "batchnorm: negative variance at channel " + std::to_string(c));
}

template <typename Scalar>
Tensor<Scalar> batchnorm_inference(const Tensor<Scalar>& x, const BatchNormParams<Scalar>& p) {
  check_batchnorm(x, p);
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<Scalar> y(x.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const Scalar a = p.scale[c] / std::sqrt(p.var[c] + p.eps);
      const Scalar b = p.shift[c] - p.mean[c] * a;
      y.vec().segment((n * C + c) * HW, HW) = (x.vec().segment((n * C + c) * HW, HW) * a).array() + b;
    }
  return y;
}

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> dx;
  Tensor<Scalar> dscale;
  Tensor<Scalar> dshift;
};

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_inference_backward(const Tensor<Scalar>& x, const BatchNormParams<Scalar>& p,
                                                    const Tensor<Scalar>& dy) {
  check_batchnorm(x, p);
  require_shape(dy.shape() == x.shape(), "batchnorm_backward: gradient shape mismatch");
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  BatchNormGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>(Shape{C}), Tensor<Scalar>(Shape{C})};
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const Scalar inv_std = Scalar(1) / std::sqrt(p.var[c] + p.eps);
      const auto xs = x.vec().segment((n * C + c) * HW, HW);
      const auto ds = dy.vec().segment((n * C + c) * HW, HW);
      g.dx.vec().segment((n * C + c) * HW, HW) = ds * (p.scale[c] * inv_std);
      g.dshift[c] += ds.sum();
      g.dscale[c] += ((xs.array() - p.mean[c]) * inv_std * ds.array()).sum();
    }
  return g;
}

// ---------------------------------------------------------------------------
// Concatenation and splitting

template <typename Scalar>
Tensor<Scalar> concat_axis(const std::vector<Tensor<Scalar>>& xs, int axis) {
  require(!xs.empty(), "concat_axis: empty input list");
  const Shape& s0 = xs.front().shape();
  require_shape(axis >= 0 && axis < s0.rank(), "concat_axis: axis out of range");
  Index total = 0;
  for (const auto& t : xs) {
    require_shape(t.rank() == s0.rank(), "concat_axis: rank mismatch");
    for (int a = 0; a < s0.rank(); ++a)
      require_shape(a == axis || t.dim(a) == s0[a], "concat_axis: extent mismatch on axis " + std::to_string(a) +
                                                        " (" + std::to_string(t.dim(a)) + " vs " +
                                                        std::to_string(s0[a]) + ")");
    total += t.dim(axis);
  }
  Tensor<Scalar> y(s0.with(axis, total));
  Index outer = 1;
  for (int a = 0; a < axis; ++a) outer *= s0[a];
  const Index inner = s0.stride(axis);
  Index at = 0;
  for (const auto& t : xs) {
    const Index chunk = t.dim(axis) * inner;
    for (Index o = 0; o < outer; ++o)
      std::copy(t.data() + o * chunk, t.data() + (o + 1) * chunk, y.data() + o * total * inner + at * inner);
    at += t.dim(axis);
  }
  return y;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> split_axis(const Tensor<Scalar>& x, int axis, const std::vector<Index>& sizes) {
  require_shape(axis >= 0 && axis < x.rank(), "split_axis: axis out of range");
  Index sum = 0;
  for (Index s : sizes) sum += s;
  require_shape(sum == x.dim(axis), "split_axis: sizes sum to " + std::to_string(sum) + ", axis extent is " +
                                        std::to_string(x.dim(axis)));
  Index outer = 1;
  for (int a = 0; a < axis; ++a) outer *= x.dim(a);
  const Index inner = x.shape().stride(axis), total = x.dim(axis);
  std::vector<Tensor<Scalar>> parts;
  Index at = 0;
  for (Index s : sizes) {
    Tensor<Scalar> t(x.shape().with(axis, s));
    const Index chunk = s * inner;
    for (Index o = 0; o < outer; ++o)
      std::copy(x.data() + o * total * inner + at * inner, x.data() + o * total * inner + at * inner + chunk,
                t.data() + o * chunk);
    parts.push_back(std::move(t));
    at += s;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Resampling and elementwise helpers

template <typename Scalar>
Tensor<Scalar> upsample_nearest2x(const Tensor<Scalar>& x) {
  require_shape(x.rank() == 4, "upsample: input must be rank 4");
  const Index P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<Scalar> y(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W});
  for (Index p = 0; p < P; ++p)
    for (Index i = 0; i < 2 * H; ++i)
      for (Index j = 0; j < 2 * W; ++j) y[(p * 2 * H + i) * 2 * W + j] = x[(p * H + i / 2) * W + j / 2];
  return y;
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest2x_backward(const Tensor<Scalar>& dy) {
  require_shape(dy.rank() == 4 && dy.dim(2) % 2 == 0 && dy.dim(3) % 2 == 0, "upsample_backward: odd extents");
  const Index P = dy.dim(0) * dy.dim(1), H = dy.dim(2) / 2, W = dy.dim(3) / 2;
  Tensor<Scalar> dx(Shape{dy.dim(0), dy.dim(1), H, W});
  for (Index p = 0; p < P; ++p)
    for (Index i = 0; i < 2 * H; ++i)
      for (Index j = 0; j < 2 * W; ++j) dx[(p * H + i / 2) * W + j / 2] += dy[(p * 2 * H + i) * 2 * W + j];
  return dx;
}

template <typename Scalar>
Tensor<Scalar> hadamard(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_shape(a.shape() == b.shape(), "hadamard: shape " + a.shape().str() + " vs " + b.shape().str());
  return Tensor<Scalar>(a.shape(), a.vec().cwiseProduct(b.vec()));
}

template <typename Scalar>
Scalar sum(const Tensor<Scalar>& x) {
  return x.vec().sum();
}

/// Weighted sum <w, x>; the scalar projection used by gradient checks.
template <typename Scalar>
Scalar dot(const Tensor<Scalar>& w, const Tensor<Scalar>& x) {
  require_shape(w.size() == x.size(), "dot: length mismatch");
  return w.vec().dot(x.vec());
}

}  // namespace triad
