// Forward/backward NN primitives: conv2d (cross-correlation), channel
// concat/slice, 2x2 max pooling, bilinear upsampling, relu, channel softmax
// and per-pixel cross entropy.
#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rfcnet/core.hpp"
#include "rfcnet/tensor.hpp"

namespace rfc {

/// 2-D convolution weights (out_ch, in_ch, k, k) with optional per-channel
/// bias stored as a (1, out_ch, 1, 1) tensor. Default padding (k-1)/2 keeps
/// stride-1 outputs the same spatial size.
template <typename T>
struct ConvKernel {
  Tensor<T> weights;
  Tensor<T> bias;  // undefined when bias-free
  int stride = 1;
  int padding = 0;

  int out_channels() const { return weights.shape().n; }
  int in_channels() const { return weights.shape().c; }
  int k() const { return weights.shape().h; }

  bool has_bias() const { return bias.defined(); }

  /// Weights uniform in +-sqrt(1/(in_ch*k^2)); bias zero.
  static ConvKernel init(int in_ch, int out_ch, int k, Rng& rng, bool with_bias = true,
                         int stride = 1, int padding = -1) {
    if (in_ch <= 0 || out_ch <= 0 || k <= 0 || stride <= 0)
      throw ArgumentError("ConvKernel: non-positive dimension");
    if (k % 2 == 0) throw ArgumentError("ConvKernel: kernel size must be odd, got " + std::to_string(k));
    ConvKernel kernel;
    const T bound = static_cast<T>(std::sqrt(1.0 / (static_cast<double>(in_ch) * k * k)));
    kernel.weights = Tensor<T>::uniform(Shape{out_ch, in_ch, k, k}, -bound, bound, rng);
    kernel.weights.set_requires_grad(true);
    if (with_bias) {
      kernel.bias = Tensor<T>::zeros(Shape{1, out_ch, 1, 1});
      kernel.bias.set_requires_grad(true);
    }
    kernel.stride = stride;
    kernel.padding = padding >= 0 ? padding : (k - 1) / 2;
    return kernel;
  }

  std::int64_t weight_count() const { return weights.numel(); }
  std::int64_t bias_count() const { return has_bias() ? bias.numel() : 0; }
};

/// Cross-correlation (no kernel flip). Output spatial dims follow
/// floor((in + 2p - k)/s) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& kernel) {
  const Shape xs = x.shape();
  const int out_ch = kernel.out_channels();
  const int in_ch = kernel.in_channels();
  const int k = kernel.k();
  const int s = kernel.stride;
  const int p = kernel.padding;
  if (xs.c != in_ch)
    throw DimensionError("conv2d: input channel axis " + std::to_string(xs.c) +
                         " != kernel in_ch " + std::to_string(in_ch));
  const int out_h = (xs.h + 2 * p - k) / s + 1;
  const int out_w = (xs.w + 2 * p - k) / s + 1;
  if (xs.h + 2 * p < k || xs.w + 2 * p < k)
    throw DimensionError("conv2d: spatial axes " + std::to_string(xs.h) + "x" +
                         std::to_string(xs.w) + " too small for k=" + std::to_string(k) +
                         " p=" + std::to_string(p));

  auto xn = x.node();
  auto wn = kernel.weights.node();
  auto bn = kernel.has_bias() ? kernel.bias.node() : nullptr;

  std::vector<Tensor<T>> parents{x, kernel.weights};
  if (kernel.has_bias()) parents.push_back(kernel.bias);

  const Shape out_shape{xs.n, out_ch, out_h, out_w};

  auto backward = [xn, wn, bn, xs, out_ch, in_ch, k, s, p, out_h, out_w](auto& node) {
    const T* g = node.grad.data();
    // d/dbias: sum of output grads per channel.
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (int n = 0; n < xs.n; ++n)
        for (int oc = 0; oc < out_ch; ++oc) {
          const T* gp = g + (static_cast<std::size_t>(n) * out_ch + oc) * out_h * out_w;
          T acc = T(0);
          for (int i = 0; i < out_h * out_w; ++i) acc += gp[i];
          bn->grad[oc] += acc;
        }
    }
    const bool need_x = xn->requires_grad;
    const bool need_w = wn->requires_grad;
    if (need_x) xn->ensure_grad();
    if (need_w) wn->ensure_grad();
    if (!need_x && !need_w) return;
    for (int n = 0; n < xs.n; ++n)
      for (int oc = 0; oc < out_ch; ++oc) {
        const T* gp = g + (static_cast<std::size_t>(n) * out_ch + oc) * out_h * out_w;
        for (int ic = 0; ic < in_ch; ++ic) {
          const T* xp = xn->value.data() + (static_cast<std::size_t>(n) * in_ch + ic) * xs.h * xs.w;
          T* xg = need_x ? xn->grad.data() + (static_cast<std::size_t>(n) * in_ch + ic) * xs.h * xs.w
                         : nullptr;
          const std::size_t w_base = (static_cast<std::size_t>(oc) * in_ch + ic) * k * k;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const std::size_t widx = w_base + static_cast<std::size_t>(ky) * k + kx;
              const T wv = wn->value[widx];
              T wacc = T(0);
              for (int oy = 0; oy < out_h; ++oy) {
                const int iy = oy * s + ky - p;
                if (iy < 0 || iy >= xs.h) continue;
                const T* grow = gp + static_cast<std::size_t>(oy) * out_w;
                const T* xrow = xp + static_cast<std::size_t>(iy) * xs.w;
                T* xgrow = need_x ? xg + static_cast<std::size_t>(iy) * xs.w : nullptr;
                for (int ox = 0; ox < out_w; ++ox) {
                  const int ix = ox * s + kx - p;
                  if (ix < 0 || ix >= xs.w) continue;
                  const T gv = grow[ox];
                  if (need_w) wacc += gv * xrow[ix];
                  if (need_x) xgrow[ix] += gv * wv;
                }
              }
              if (need_w) wn->grad[widx] += wacc;
            }
        }
      }
  };

  Tensor<T> out = Tensor<T>::make_result(out_shape, std::move(parents), backward);
  T* o = out.data().data();
  const T* xd = x.data().data();
  const T* wd = kernel.weights.data().data();
  for (int n = 0; n < xs.n; ++n)
    for (int oc = 0; oc < out_ch; ++oc) {
      T* op = o + (static_cast<std::size_t>(n) * out_ch + oc) * out_h * out_w;
      const T b = kernel.has_bias() ? kernel.bias.data()[oc] : T(0);
      for (int i = 0; i < out_h * out_w; ++i) op[i] = b;
      for (int ic = 0; ic < in_ch; ++ic) {
        const T* xp = xd + (static_cast<std::size_t>(n) * in_ch + ic) * xs.h * xs.w;
        const T* wp = wd + (static_cast<std::size_t>(oc) * in_ch + ic) * k * k;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const T wv = wp[ky * k + kx];
            if (wv == T(0)) continue;
            for (int oy = 0; oy < out_h; ++oy) {
              const int iy = oy * s + ky - p;
              if (iy < 0 || iy >= xs.h) continue;
              T* orow = op + static_cast<std::size_t>(oy) * out_w;
              const T* xrow = xp + static_cast<std::size_t>(iy) * xs.w;
              for (int ox = 0; ox < out_w; ++ox) {
                const int ix = ox * s + kx - p;
                if (ix < 0 || ix >= xs.w) continue;
                orow[ox] += wv * xrow[ix];
              }
            }
          }
      }
    }
  out.check_finite("conv2d");
  return out;
}

/// Concatenate along the channel axis, order preserved.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_channels: empty part list");
  const Shape first = parts.front().shape();
  int total_c = 0;
  for (const auto& part : parts) {
    const Shape ps = part.shape();
    if (ps.n != first.n || ps.h != first.h || ps.w != first.w)
      throw DimensionError("concat_channels: part shape " + ps.to_string() +
                           " mismatches " + first.to_string() + " on n/h/w axes");
    total_c += ps.c;
  }
  const Shape out_shape{first.n, total_c, first.h, first.w};
  const std::size_t plane = static_cast<std::size_t>(first.h) * first.w;

  std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes;
  nodes.reserve(parts.size());
  for (const auto& part : parts) nodes.push_back(part.node());

  auto backward = [nodes, first, total_c, plane](auto& node) {
    for (int n = 0; n < first.n; ++n) {
      std::size_t src = static_cast<std::size_t>(n) * total_c * plane;
      for (auto& pn : nodes) {
        const std::size_t block = static_cast<std::size_t>(pn->shape.c) * plane;
        if (pn->requires_grad) {
          pn->ensure_grad();
          T* dst = pn->grad.data() + static_cast<std::size_t>(n) * block;
          const T* g = node.grad.data() + src;
          for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
        }
        src += block;
      }
    }
  };

  Tensor<T> out = Tensor<T>::make_result(out_shape, parts, backward);
  T* o = out.data().data();
  for (int n = 0; n < first.n; ++n) {
    std::size_t dst = static_cast<std::size_t>(n) * total_c * plane;
    for (const auto& part : parts) {
      const std::size_t block = static_cast<std::size_t>(part.shape().c) * plane;
      const T* src = part.data().data() + static_cast<std::size_t>(n) * block;
      std::copy(src, src + block, o + dst);
      dst += block;
    }
  }
  return out;
}

/// Channels [c0, c0+len) as a view-copy; gradient scatters back.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int len) {
  const Shape xs = x.shape();
  if (c0 < 0 || len <= 0 || c0 + len > xs.c)
    throw ArgumentError("slice_channels: range [" + std::to_string(c0) + "," +
                        std::to_string(c0 + len) + ") outside " + std::to_string(xs.c) + " channels");
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  auto xn = x.node();
  auto backward = [xn, xs, c0, len, plane](auto& node) {
    xn->ensure_grad();
    for (int n = 0; n < xs.n; ++n) {
      T* dst = xn->grad.data() + (static_cast<std::size_t>(n) * xs.c + c0) * plane;
      const T* g = node.grad.data() + static_cast<std::size_t>(n) * len * plane;
      for (std::size_t i = 0; i < static_cast<std::size_t>(len) * plane; ++i) dst[i] += g[i];
    }
  };
  Tensor<T> out = Tensor<T>::make_result(Shape{xs.n, len, xs.h, xs.w}, {x}, backward);
  T* o = out.data().data();
  for (int n = 0; n < xs.n; ++n) {
    const T* src = x.data().data() + (static_cast<std::size_t>(n) * xs.c + c0) * plane;
    std::copy(src, src + static_cast<std::size_t>(len) * plane,
              o + static_cast<std::size_t>(n) * len * plane);
  }
  return out;
}

/// 2x2 max pool, stride 2. Odd extents are padded right/bottom with -inf.
/// Gradient routes to the argmax element, first in row-major order on ties.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  const Shape xs = x.shape();
  const int out_h = (xs.h + 1) / 2;
  const int out_w = (xs.w + 1) / 2;
  const Shape out_shape{xs.n, xs.c, out_h, out_w};

  auto argmax = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(out_shape.numel()));
  auto xn = x.node();
  auto backward = [xn, argmax](auto& node) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) xn->grad[(*argmax)[i]] += node.grad[i];
  };

  Tensor<T> out = Tensor<T>::make_result(out_shape, {x}, backward);
  T* o = out.data().data();
  const T* xd = x.data().data();
  std::size_t oi = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * xs.c + c) * xs.h * xs.w;
      for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int iy = oy * 2 + dy;
              const int ix = ox * 2 + dx;
              if (iy >= xs.h || ix >= xs.w) continue;
              const std::size_t idx = base + static_cast<std::size_t>(iy) * xs.w + ix;
              if (xd[idx] > best) {
                best = xd[idx];
                best_idx = idx;
              }
            }
          o[oi] = best;
          (*argmax)[oi] = best_idx;
        }
    }
  out.check_finite("maxpool2");
  return out;
}

namespace detail {
// Source taps for one output coordinate under align-corners=false.
struct LerpTap {
  int lo, hi;
  double w_lo, w_hi;
};

inline LerpTap lerp_tap(int dst, int factor, int in_extent) {
  const double src = (dst + 0.5) / factor - 0.5;
  double base = std::floor(src);
  LerpTap t;
  t.w_hi = src - base;
  t.w_lo = 1.0 - t.w_hi;
  t.lo = std::clamp(static_cast<int>(base), 0, in_extent - 1);
  t.hi = std::clamp(static_cast<int>(base) + 1, 0, in_extent - 1);
  return t;
}
}  // namespace detail

/// Integer-factor bilinear upsampling, align-corners=false (border replicate).
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor) {
  if (factor < 1) throw ArgumentError("bilinear_upsample: factor must be >= 1, got " + std::to_string(factor));
  const Shape xs = x.shape();
  if (factor == 1) {
    // Identity, but still a node so gradients flow.
    auto xn = x.node();
    Tensor<T> out = Tensor<T>::make_result(xs, {x}, [xn](auto& node) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) xn->grad[i] += node.grad[i];
    });
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    return out;
  }
  const int out_h = xs.h * factor;
  const int out_w = xs.w * factor;
  auto xn = x.node();
  auto backward = [xn, xs, factor, out_h, out_w](auto& node) {
    xn->ensure_grad();
    std::size_t oi = 0;
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * xs.c + c) * xs.h * xs.w;
        for (int oy = 0; oy < out_h; ++oy) {
          const auto ty = detail::lerp_tap(oy, factor, xs.h);
          for (int ox = 0; ox < out_w; ++ox, ++oi) {
            const auto tx = detail::lerp_tap(ox, factor, xs.w);
            const T g = node.grad[oi];
            xn->grad[base + static_cast<std::size_t>(ty.lo) * xs.w + tx.lo] += g * static_cast<T>(ty.w_lo * tx.w_lo);
            xn->grad[base + static_cast<std::size_t>(ty.lo) * xs.w + tx.hi] += g * static_cast<T>(ty.w_lo * tx.w_hi);
            xn->grad[base + static_cast<std::size_t>(ty.hi) * xs.w + tx.lo] += g * static_cast<T>(ty.w_hi * tx.w_lo);
            xn->grad[base + static_cast<std::size_t>(ty.hi) * xs.w + tx.hi] += g * static_cast<T>(ty.w_hi * tx.w_hi);
          }
        }
      }
  };
  Tensor<T> out = Tensor<T>::make_result(Shape{xs.n, xs.c, out_h, out_w}, {x}, backward);
  T* o = out.data().data();
  const T* xd = x.data().data();
  std::size_t oi = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * xs.c + c) * xs.h * xs.w;
      for (int oy = 0; oy < out_h; ++oy) {
        const auto ty = detail::lerp_tap(oy, factor, xs.h);
        for (int ox = 0; ox < out_w; ++ox, ++oi) {
          const auto tx = detail::lerp_tap(ox, factor, xs.w);
          const double v = ty.w_lo * (tx.w_lo * xd[base + static_cast<std::size_t>(ty.lo) * xs.w + tx.lo] +
                                      tx.w_hi * xd[base + static_cast<std::size_t>(ty.lo) * xs.w + tx.hi]) +
                           ty.w_hi * (tx.w_lo * xd[base + static_cast<std::size_t>(ty.hi) * xs.w + tx.lo] +
                                      tx.w_hi * xd[base + static_cast<std::size_t>(ty.hi) * xs.w + tx.hi]);
          o[oi] = static_cast<T>(v);
        }
      }
    }
  out.check_finite("bilinear_upsample");
  return out;
}

/// max(x, 0); gradient passes only where the input is strictly positive.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto xn = x.node();
  Tensor<T> out = Tensor<T>::make_result(x.shape(), {x}, [xn](auto& node) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i)
      if (xn->value[i] > T(0)) xn->grad[i] += node.grad[i];
  });
  auto od = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
  return out;
}

/// Softmax over the channel axis; channels sum to 1 at every pixel.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Shape xs = x.shape();
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  auto xn = x.node();

  Tensor<T> out = Tensor<T>::make_result(xs, {x}, [xn, xs, plane](auto& node) {
    xn->ensure_grad();
    for (int n = 0; n < xs.n; ++n)
      for (std::size_t px = 0; px < plane; ++px) {
        const std::size_t base = static_cast<std::size_t>(n) * xs.c * plane + px;
        T dot = T(0);
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t i = base + static_cast<std::size_t>(c) * plane;
          dot += node.grad[i] * node.value[i];
        }
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t i = base + static_cast<std::size_t>(c) * plane;
          xn->grad[i] += node.value[i] * (node.grad[i] - dot);
        }
      }
  });
  T* o = out.data().data();
  const T* xd = x.data().data();
  for (int n = 0; n < xs.n; ++n)
    for (std::size_t px = 0; px < plane; ++px) {
      const std::size_t base = static_cast<std::size_t>(n) * xs.c * plane + px;
      T m = xd[base];
      for (int c = 1; c < xs.c; ++c) m = std::max(m, xd[base + static_cast<std::size_t>(c) * plane]);
      T denom = T(0);
      for (int c = 0; c < xs.c; ++c) {
        const std::size_t i = base + static_cast<std::size_t>(c) * plane;
        o[i] = std::exp(xd[i] - m);
        denom += o[i];
      }
      for (int c = 0; c < xs.c; ++c) o[base + static_cast<std::size_t>(c) * plane] /= denom;
    }
  out.check_finite("softmax_channels");
  return out;
}

/// Per-pixel cross entropy -log softmax(logits)[target]; output (n,1,h,w).
template <typename T>
Tensor<T> ce_per_pixel(const Tensor<T>& logits, const ClassMask& target) {
  const Shape xs = logits.shape();
  if (target.n != xs.n || target.h != xs.h || target.w != xs.w)
    throw DimensionError("ce_per_pixel: target dims (" + std::to_string(target.n) + "," +
                         std::to_string(target.h) + "," + std::to_string(target.w) +
                         ") mismatch logits " + xs.to_string());
  for (const int id : target.ids)
    if (id < 0 || id >= xs.c)
      throw ArgumentError("ce_per_pixel: class id " + std::to_string(id) +
                          " outside [0," + std::to_string(xs.c) + ")");

  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  auto xn = logits.node();
  auto ids = std::make_shared<std::vector<int>>(target.ids);

  auto backward = [xn, xs, plane, ids](auto& node) {
    xn->ensure_grad();
    for (int n = 0; n < xs.n; ++n)
      for (std::size_t px = 0; px < plane; ++px) {
        const std::size_t base = static_cast<std::size_t>(n) * xs.c * plane + px;
        const T g = node.grad[static_cast<std::size_t>(n) * plane + px];
        if (g == T(0)) continue;
        const int t = (*ids)[static_cast<std::size_t>(n) * plane + px];
        T m = xn->value[base];
        for (int c = 1; c < xs.c; ++c)
          m = std::max(m, xn->value[base + static_cast<std::size_t>(c) * plane]);
        T denom = T(0);
        for (int c = 0; c < xs.c; ++c)
          denom += std::exp(xn->value[base + static_cast<std::size_t>(c) * plane] - m);
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t i = base + static_cast<std::size_t>(c) * plane;
          const T sm = std::exp(xn->value[i] - m) / denom;
          xn->grad[i] += g * (sm - (c == t ? T(1) : T(0)));
        }
      }
  };

  Tensor<T> out = Tensor<T>::make_result(Shape{xs.n, 1, xs.h, xs.w}, {logits}, backward);
  T* o = out.data().data();
  const T* xd = logits.data().data();
  for (int n = 0; n < xs.n; ++n)
    for (std::size_t px = 0; px < plane; ++px) {
      const std::size_t base = static_cast<std::size_t>(n) * xs.c * plane + px;
      const int t = target.ids[static_cast<std::size_t>(n) * plane + px];
      T m = xd[base];
      for (int c = 1; c < xs.c; ++c) m = std::max(m, xd[base + static_cast<std::size_t>(c) * plane]);
      T denom = T(0);
      for (int c = 0; c < xs.c; ++c) denom += std::exp(xd[base + static_cast<std::size_t>(c) * plane] - m);
      const T lse = m + std::log(denom);
      o[static_cast<std::size_t>(n) * plane + px] = lse - xd[base + static_cast<std::size_t>(t) * plane];
    }
  out.check_finite("ce_per_pixel");
  return out;
}

}  // namespace rfc
