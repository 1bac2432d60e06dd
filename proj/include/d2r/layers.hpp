#pragma once

// Differentiable layer kit. Every layer is a pure forward function plus an
// explicit backward that maps an upstream gradient to input and parameter
// gradients. Layer structs satisfy the `Differentiable` concept so the
// finite-difference checker can drive them uniformly.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "d2r/tensor.hpp"

namespace d2r {

struct LayerGradients {
  Tensor input_grad;
  std::map<std::string, Tensor> param_grads;
};

using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

template <typename L>
concept Differentiable = requires(L& layer, const Tensor& x, const Tensor& dy) {
  { layer.forward(x) } -> std::convertible_to<Tensor>;
  { layer.backward(x, dy) } -> std::convertible_to<LayerGradients>;
  { layer.parameters() } -> std::convertible_to<ParamRefs>;
};

// ---------------------------------------------------------------------------
// Scalar activations

inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor softplus(const Tensor& x) { return map(x, [](double v) { return softplus(v); }); }

inline Tensor softplus_backward(const Tensor& x, const Tensor& dy) {
  require_same_shape(x, dy, "softplus_backward");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * sigmoid(x[i]);
  return dx;
}

// NaN passes through so divergence stays visible downstream.
inline Tensor relu(const Tensor& x) { return map(x, [](double v) { return v < 0 ? 0.0 : v; }); }

inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  require_same_shape(x, dy, "relu_backward");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0 ? dy[i] : 0.0;
  return dx;
}

inline Tensor sigmoid(const Tensor& x) { return map(x, [](double v) { return sigmoid(v); }); }

// ---------------------------------------------------------------------------
// Convolution (direct cross-correlation, (h, w, c) input, (o, i, kh, kw) kernel)

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvSpec& s) {
  const std::size_t span = s.dilation * (k - 1) + 1;
  if (in + 2 * s.padding < span)
    throw ShapeError("conv2d: kernel extent " + std::to_string(span) + " exceeds padded input " +
                     std::to_string(in + 2 * s.padding));
  return (in + 2 * s.padding - span) / s.stride + 1;
}

inline void check_conv_args(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                            const ConvSpec& spec) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be rank 3 (h,w,c), got " + shape_str(input.shape()));
  if (kernel.rank() != 4) throw ShapeError("conv2d: kernel must be rank 4 (out,in,kh,kw), got " + shape_str(kernel.shape()));
  if (kernel.extent(1) != input.extent(2))
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.extent(1)) +
                     " input channels, input has " + std::to_string(input.extent(2)));
  if (bias && (bias->rank() != 1 || bias->extent(0) != kernel.extent(0)))
    throw ShapeError("conv2d: bias must be (" + std::to_string(kernel.extent(0)) + ")");
  if (spec.stride == 0 || spec.dilation == 0) throw ShapeError("conv2d: stride and dilation must be >= 1");
}

// (o, i, kh, kw) -> (kh, kw, i, o) so the innermost loop runs over output channels.
inline std::vector<double> transpose_kernel(const Tensor& k) {
  const std::size_t O = k.extent(0), I = k.extent(1), KH = k.extent(2), KW = k.extent(3);
  std::vector<double> t(k.size());
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t y = 0; y < KH; ++y)
        for (std::size_t x = 0; x < KW; ++x) t[((y * KW + x) * I + i) * O + o] = k(o, i, y, x);
  return t;
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias, const ConvSpec& spec) {
  detail::check_conv_args(input, kernel, bias, spec);
  const std::size_t H = input.extent(0), W = input.extent(1), I = input.extent(2);
  const std::size_t O = kernel.extent(0), KH = kernel.extent(2), KW = kernel.extent(3);
  const std::size_t OH = detail::conv_out_extent(H, KH, spec), OW = detail::conv_out_extent(W, KW, spec);
  const auto kt = detail::transpose_kernel(kernel);
  Tensor out({OH, OW, O});
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t oy = 0; oy < OH; ++oy) {
    for (std::size_t ox = 0; ox < OW; ++ox) {
      double* y = &out(oy, ox, 0);
      if (bias)
        for (std::size_t o = 0; o < O; ++o) y[o] = (*bias)[o];
      for (std::size_t ky = 0; ky < KH; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky * spec.dilation) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < KW; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx * spec.dilation) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* x = &input(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
          const double* kk = &kt[(ky * KW + kx) * I * O];
          for (std::size_t i = 0; i < I; ++i) {
            const double xv = x[i];
            const double* kr = kk + i * O;
            for (std::size_t o = 0; o < O; ++o) y[o] += xv * kr[o];
          }
        }
      }
    }
  }
  return out;
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  return conv2d(input, kernel, nullptr, ConvSpec{stride, padding, 1});
}

struct Conv2dGradients {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

inline Conv2dGradients conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& dy,
                                       const ConvSpec& spec, bool need_input_grad = true) {
  detail::check_conv_args(input, kernel, nullptr, spec);
  const std::size_t H = input.extent(0), W = input.extent(1), I = input.extent(2);
  const std::size_t O = kernel.extent(0), KH = kernel.extent(2), KW = kernel.extent(3);
  const std::size_t OH = detail::conv_out_extent(H, KH, spec), OW = detail::conv_out_extent(W, KW, spec);
  if (dy.shape() != Shape{OH, OW, O})
    throw ShapeError("conv2d_backward: upstream gradient " + shape_str(dy.shape()) + " expected " +
                     shape_str({OH, OW, O}));
  const auto kt = detail::transpose_kernel(kernel);
  std::vector<double> dkt(kt.size(), 0.0);
  Conv2dGradients g{need_input_grad ? Tensor(input.shape()) : Tensor{}, Tensor(kernel.shape()), Tensor({O})};
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t oy = 0; oy < OH; ++oy) {
    for (std::size_t ox = 0; ox < OW; ++ox) {
      const double* gy = &dy(oy, ox, 0);
      for (std::size_t o = 0; o < O; ++o) g.bias[o] += gy[o];
      for (std::size_t ky = 0; ky < KH; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky * spec.dilation) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < KW; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx * spec.dilation) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const auto uy = static_cast<std::size_t>(iy), ux = static_cast<std::size_t>(ix);
          const double* x = &input(uy, ux, 0);
          const std::size_t base = (ky * KW + kx) * I * O;
          for (std::size_t i = 0; i < I; ++i) {
            const double xv = x[i];
            double* dk = &dkt[base + i * O];
            for (std::size_t o = 0; o < O; ++o) dk[o] += xv * gy[o];
          }
          if (need_input_grad) {
            double* dx = &g.input(uy, ux, 0);
            for (std::size_t i = 0; i < I; ++i) {
              const double* kr = &kt[base + i * O];
              double acc = 0;
              for (std::size_t o = 0; o < O; ++o) acc += kr[o] * gy[o];
              dx[i] += acc;
            }
          }
        }
      }
    }
  }
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t y = 0; y < KH; ++y)
        for (std::size_t x = 0; x < KW; ++x) g.kernel(o, i, y, x) = dkt[((y * KW + x) * I + i) * O + o];
  return g;
}

// ---------------------------------------------------------------------------
// 2x2 stride-2 average pooling, ceil mode: partial windows average their valid cells.

inline Tensor avg_pool2(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("avg_pool2: input must be rank 3");
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
  const std::size_t OH = (H + 1) / 2, OW = (W + 1) / 2;
  Tensor y({OH, OW, C});
  for (std::size_t oy = 0; oy < OH; ++oy)
    for (std::size_t ox = 0; ox < OW; ++ox) {
      const std::size_t y1 = std::min(H, 2 * oy + 2), x1 = std::min(W, 2 * ox + 2);
      const double inv = 1.0 / double((y1 - 2 * oy) * (x1 - 2 * ox));
      for (std::size_t iy = 2 * oy; iy < y1; ++iy)
        for (std::size_t ix = 2 * ox; ix < x1; ++ix)
          for (std::size_t c = 0; c < C; ++c) y(oy, ox, c) += x(iy, ix, c) * inv;
    }
  return y;
}

inline Tensor avg_pool2_backward(const Tensor& x, const Tensor& dy) {
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
  Tensor dx(x.shape());
  for (std::size_t oy = 0; oy < dy.extent(0); ++oy)
    for (std::size_t ox = 0; ox < dy.extent(1); ++ox) {
      const std::size_t y1 = std::min(H, 2 * oy + 2), x1 = std::min(W, 2 * ox + 2);
      const double inv = 1.0 / double((y1 - 2 * oy) * (x1 - 2 * ox));
      for (std::size_t iy = 2 * oy; iy < y1; ++iy)
        for (std::size_t ix = 2 * ox; ix < x1; ++ix)
          for (std::size_t c = 0; c < C; ++c) dx(iy, ix, c) += dy(oy, ox, c) * inv;
    }
  return dx;
}

// ---------------------------------------------------------------------------
// Min-max normalization of a rank-2 map to [0, 1]. A constant map has no
// range to normalize and maps to all zeros (zero gradient).

inline Tensor minmax_normalize(const Tensor& x) {
  const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  const double range = *hi - *lo;
  Tensor y(x.shape());
  if (range == 0) return y;
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - *lo) / range;
  return y;
}

inline Tensor minmax_normalize_backward(const Tensor& x, const Tensor& dy) {
  require_same_shape(x, dy, "minmax_normalize_backward");
  const auto lo_it = std::min_element(x.values().begin(), x.values().end());
  const auto hi_it = std::max_element(x.values().begin(), x.values().end());
  const double lo = *lo_it, range = *hi_it - lo;
  Tensor dx(x.shape());
  if (range == 0) return dx;
  double g_sum = 0, gy_sum = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dx[i] = dy[i] / range;
    g_sum += dy[i];
    gy_sum += dy[i] * (x[i] - lo);
  }
  const auto imin = static_cast<std::size_t>(lo_it - x.values().begin());
  const auto imax = static_cast<std::size_t>(hi_it - x.values().begin());
  dx[imin] += -g_sum / range + gy_sum / (range * range);
  dx[imax] += -gy_sum / (range * range);
  return dx;
}

// ---------------------------------------------------------------------------
// Dense maps over vectors

/// y = W x + b, W is (out, in).
inline Tensor linear(const Tensor& W, const Tensor* b, std::span<const double> x) {
  const std::size_t O = W.extent(0), I = W.extent(1);
  if (x.size() != I) throw ShapeError("linear: expected input of size " + std::to_string(I) + ", got " + std::to_string(x.size()));
  Tensor y({O});
  for (std::size_t o = 0; o < O; ++o) {
    double acc = b ? (*b)[o] : 0.0;
    const double* row = &W(o, 0);
    for (std::size_t i = 0; i < I; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
  return y;
}

struct LinearGradients {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

inline LinearGradients linear_backward(const Tensor& W, std::span<const double> x, std::span<const double> dy) {
  const std::size_t O = W.extent(0), I = W.extent(1);
  LinearGradients g{Tensor({I}), Tensor(W.shape()), Tensor({O})};
  for (std::size_t o = 0; o < O; ++o) {
    g.bias[o] = dy[o];
    const double* row = &W(o, 0);
    double* grow = &g.weight(o, 0);
    for (std::size_t i = 0; i < I; ++i) {
      grow[i] = dy[o] * x[i];
      g.input[i] += dy[o] * row[i];
    }
  }
  return g;
}

inline Tensor l2_normalize(const Tensor& x) {
  const double n = l2_norm(x.values());
  if (n == 0) return Tensor(x.shape());
  return scale(x, 1.0 / n);
}

inline Tensor l2_normalize_backward(const Tensor& x, const Tensor& dy) {
  const double n = l2_norm(x.values());
  Tensor dx(x.shape());
  if (n == 0) return dx;
  const double ug = dot(x.values(), dy.values()) / n;
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = (dy[i] - (x[i] / n) * ug) / n;
  return dx;
}

// ---------------------------------------------------------------------------
// Global pooling over the spatial extent of an (h, w, c) map.

inline Tensor global_avg_pool(const Tensor& x) {
  const std::size_t N = x.extent(0) * x.extent(1), C = x.extent(2);
  Tensor y({C});
  for (std::size_t p = 0; p < N; ++p)
    for (std::size_t c = 0; c < C; ++c) y[c] += x[p * C + c];
  for (auto& v : y.values()) v /= double(N);
  return y;
}

/// Generalized-mean pooling per channel: (mean_p max(x,0)^p)^(1/p).
inline Tensor gem_pool(const Tensor& x, double p) {
  if (x.rank() != 3) throw ShapeError("gem_pool: input must be rank 3");
  if (!(p >= 1.0)) throw ShapeError("gem_pool: p must be >= 1");
  const std::size_t N = x.extent(0) * x.extent(1), C = x.extent(2);
  Tensor y({C});
  for (std::size_t c = 0; c < C; ++c) {
    // Factor out the channel max so large p does not overflow.
    double m = 0;
    for (std::size_t q = 0; q < N; ++q) m = std::max(m, x[q * C + c]);
    if (m == 0) continue;
    double acc = 0;
    for (std::size_t q = 0; q < N; ++q) acc += std::pow(std::max(x[q * C + c], 0.0) / m, p);
    y[c] = m * std::pow(acc / double(N), 1.0 / p);
  }
  return y;
}

inline Tensor gem_pool_backward(const Tensor& x, double p, const Tensor& dy) {
  const std::size_t N = x.extent(0) * x.extent(1), C = x.extent(2);
  const Tensor y = gem_pool(x, p);
  Tensor dx(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    if (y[c] == 0) continue;
    // dy_c/dx_qc = (1/N) (x_qc / y_c)^(p-1)
    for (std::size_t q = 0; q < N; ++q) {
      const double v = x[q * C + c];
      if (v > 0) dx[q * C + c] = dy[c] * std::pow(v / y[c], p - 1.0) / double(N);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Layer objects for uniform gradient checking.

struct Conv2dLayer {
  Tensor weight;
  Tensor bias;
  ConvSpec spec;

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, &bias, spec); }
  LayerGradients backward(const Tensor& x, const Tensor& dy) const {
    auto g = conv2d_backward(x, weight, dy, spec);
    return {std::move(g.input), {{"weight", std::move(g.kernel)}, {"bias", std::move(g.bias)}}};
  }
  ParamRefs parameters() { return {{"weight", &weight}, {"bias", &bias}}; }
};

struct LinearLayer {
  Tensor weight;
  Tensor bias;

  Tensor forward(const Tensor& x) const { return linear(weight, &bias, x.values()); }
  LayerGradients backward(const Tensor& x, const Tensor& dy) const {
    auto g = linear_backward(weight, x.values(), dy.values());
    return {std::move(g.input), {{"weight", std::move(g.weight)}, {"bias", std::move(g.bias)}}};
  }
  ParamRefs parameters() { return {{"weight", &weight}, {"bias", &bias}}; }
};

struct SoftplusLayer {
  Tensor forward(const Tensor& x) const { return softplus(x); }
  LayerGradients backward(const Tensor& x, const Tensor& dy) const { return {softplus_backward(x, dy), {}}; }
  ParamRefs parameters() { return {}; }
};

struct ReluLayer {
  Tensor forward(const Tensor& x) const { return relu(x); }
  LayerGradients backward(const Tensor& x, const Tensor& dy) const { return {relu_backward(x, dy), {}}; }
  ParamRefs parameters() { return {}; }
};

struct AvgPoolLayer {
  Tensor forward(const Tensor& x) const { return avg_pool2(x); }
  LayerGradients backward(const Tensor& x, const Tensor& dy) const { return {avg_pool2_backward(x, dy), {}}; }
  ParamRefs parameters() { return {}; }
};

struct MinMaxLayer {
  Tensor forward(const Tensor& x) const { return minmax_normalize(x); }
  LayerGradients backward(const Tensor& x, const Tensor& dy) const { return {minmax_normalize_backward(x, dy), {}}; }
  ParamRefs parameters() { return {}; }
};

struct GemLayer {
  double p = 3.0;
  Tensor forward(const Tensor& x) const { return gem_pool(x, p); }
  LayerGradients backward(const Tensor& x, const Tensor& dy) const { return {gem_pool_backward(x, p, dy), {}}; }
  ParamRefs parameters() { return {}; }
};

struct L2NormalizeLayer {
  Tensor forward(const Tensor& x) const { return l2_normalize(x); }
  LayerGradients backward(const Tensor& x, const Tensor& dy) const { return {l2_normalize_backward(x, dy), {}}; }
  ParamRefs parameters() { return {}; }
};

}  // namespace d2r
