#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "esknet/parallel.hpp"
#include "esknet/tensor.hpp"

namespace esknet {

// ---------------------------------------------------------------------------
// Parameter bundles

struct Padding {
  bool same = true;
  std::size_t amount = 0;

  static Padding Same() { return {}; }
  static Padding Explicit(std::size_t n) { return {false, n}; }
};

template <typename T>
struct ConvParams {
  Tensor<T> kernel;  // out_channels x in_channels x kh x kw
  Tensor<T> bias;    // out_channels
  std::size_t stride = 1;
  std::size_t dilation = 1;
  Padding padding = Padding::Same();

  std::size_t out_channels() const { return kernel.dim(0); }
  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t kernel_h() const { return kernel.dim(2); }
  std::size_t kernel_w() const { return kernel.dim(3); }
};

template <typename T>
struct DenseParams {
  Tensor<T> weight;  // out_dim x in_dim
  Tensor<T> bias;    // out_dim

  std::size_t out_dim() const { return weight.dim(0); }
  std::size_t in_dim() const { return weight.dim(1); }
};

enum class Mode { train, eval };

template <typename T>
struct BatchNormParams {
  Tensor<T> scale;
  Tensor<T> shift;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T epsilon = T(1e-3);
  T momentum = T(0.1);  // weight of the new batch statistic in the running update
  Mode mode = Mode::train;

  std::size_t channels() const { return scale.numel(); }
};

template <typename T>
BatchNormParams<T> make_batch_norm(std::size_t channels) {
  BatchNormParams<T> bn;
  bn.scale = Tensor<T>({channels}, T(1), true);
  bn.shift = Tensor<T>({channels}, T(0), true);
  bn.running_mean = Tensor<T>({channels}, T(0));
  bn.running_var = Tensor<T>({channels}, T(1));
  return bn;
}

enum class Activation { relu, sigmoid };

// ---------------------------------------------------------------------------
// Geometry helpers

struct ConvGeometry {
  std::size_t out_h, out_w;
  std::size_t pad_top, pad_left;
};

inline std::size_t effective_span(std::size_t k, std::size_t dilation) { return (k - 1) * dilation + 1; }

/// Output size and leading padding of a convolution. "Same" padding splits the
/// total padding symmetrically with the odd pixel on the high side.
inline ConvGeometry conv_geometry(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                                  std::size_t stride, std::size_t dilation, Padding padding) {
  if (kh == 0 || kw == 0) throw ShapeError("kernel extents must be >= 1");
  if (stride == 0) throw ShapeError("stride must be >= 1");
  if (dilation == 0) throw ShapeError("dilation must be >= 1");
  const std::size_t eh = effective_span(kh, dilation), ew = effective_span(kw, dilation);
  ConvGeometry g{};
  if (padding.same) {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    const std::size_t need_h = (g.out_h - 1) * stride + eh;
    const std::size_t need_w = (g.out_w - 1) * stride + ew;
    g.pad_top = need_h > h ? (need_h - h) / 2 : 0;
    g.pad_left = need_w > w ? (need_w - w) / 2 : 0;
  } else {
    const std::size_t ph = h + 2 * padding.amount, pw = w + 2 * padding.amount;
    if (ph < eh || pw < ew) {
      throw ShapeError("convolution produces zero-sized spatial output: padded input " + std::to_string(ph) + "x" +
                       std::to_string(pw) + " is smaller than the effective kernel span " + std::to_string(eh) +
                       "x" + std::to_string(ew));
    }
    g.out_h = (ph - eh) / stride + 1;
    g.out_w = (pw - ew) / stride + 1;
    g.pad_top = g.pad_left = padding.amount;
  }
  return g;
}

namespace detail {

struct Image4 {
  std::size_t n, c, h, w;
};

inline Image4 as_image(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw ShapeError(std::string(op) + " expects a CxHxW or NxCxHxW tensor, got " + to_string(s));
}

inline Shape image_shape(const Shape& like, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  if (like.size() == 3) return {c, h, w};
  return {n, c, h, w};
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct BroadcastPlan {
  Shape out;
  std::array<std::size_t, 4> extent{1, 1, 1, 1};
  std::array<std::size_t, 4> stride_a{0, 0, 0, 0};
  std::array<std::size_t, 4> stride_b{0, 0, 0, 0};
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  auto fail = [&] { return ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable"); };
  if (rank > 4) throw fail();
  std::array<std::size_t, 4> ea{1, 1, 1, 1}, eb{1, 1, 1, 1};
  for (std::size_t i = 0; i < a.size(); ++i) ea[4 - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) eb[4 - b.size() + i] = b[i];
  BroadcastPlan p;
  std::size_t sa = 1, sb = 1;
  for (int d = 3; d >= 0; --d) {
    if (ea[d] != eb[d] && ea[d] != 1 && eb[d] != 1) throw fail();
    p.extent[d] = std::max(ea[d], eb[d]);
    p.stride_a[d] = ea[d] == 1 ? 0 : sa;
    p.stride_b[d] = eb[d] == 1 ? 0 : sb;
    sa *= ea[d];
    sb *= eb[d];
  }
  for (std::size_t i = 4 - rank; i < 4; ++i) p.out.push_back(p.extent[i]);
  return p;
}

template <typename Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < p.extent[0]; ++i0)
    for (std::size_t i1 = 0; i1 < p.extent[1]; ++i1)
      for (std::size_t i2 = 0; i2 < p.extent[2]; ++i2) {
        std::size_t ia = i0 * p.stride_a[0] + i1 * p.stride_a[1] + i2 * p.stride_a[2];
        std::size_t ib = i0 * p.stride_b[0] + i1 * p.stride_b[1] + i2 * p.stride_b[2];
        for (std::size_t i3 = 0; i3 < p.extent[3]; ++i3, ++o) {
          fn(o, ia, ib);
          ia += p.stride_a[3];
          ib += p.stride_b[3];
        }
      }
}

enum class Binary { add, sub, mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary op) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(numel(plan.out));
  const auto av = a.data();
  const auto bv = b.data();
  switch (op) {
    case Binary::add:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = av[ia] + bv[ib]; });
      break;
    case Binary::sub:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = av[ia] - bv[ib]; });
      break;
    case Binary::mul:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = av[ia] * bv[ib]; });
      break;
  }
  return make_result<T>(plan.out, std::move(out), {a, b}, [plan, op](Node<T>& self) {
    const auto& g = self.grad;
    auto* ga = grad_target(self, 0);
    auto* gb = grad_target(self, 1);
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (op) {
        case Binary::add:
          if (ga) (*ga)[ia] += g[o];
          if (gb) (*gb)[ib] += g[o];
          break;
        case Binary::sub:
          if (ga) (*ga)[ia] += g[o];
          if (gb) (*gb)[ib] -= g[o];
          break;
        case Binary::mul:
          if (ga) (*ga)[ia] += g[o] * bv[ib];
          if (gb) (*gb)[ib] += g[o] * av[ia];
          break;
      }
    });
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class Elementwise { add, mul };

/// Elementwise add/multiply with broadcasting over extents of 1 (e.g. a Cx1x1
/// channel gate over CxHxW features, or a 1xHxW map over channels).
template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, Elementwise op) {
  return detail::binary(a, b, op == Elementwise::add ? detail::Binary::add : detail::Binary::mul);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary(a, b, detail::Binary::add); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary(a, b, detail::Binary::sub); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary(a, b, detail::Binary::mul); }

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

/// scale * x + shift.
template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, T scale, T shift) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = scale * xv[i] + shift;
  return make_result<T>(x.shape(), std::move(out), {x}, [scale](Node<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += scale * self.grad[i];
  });
}

/// 1 - x, the complementary gate.
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) { return scale_shift(x, T(-1), T(1)); }

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return make_result<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    const auto& xv = self.inputs[0]->data;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > T(0)) gx[i] += self.grad[i];
  });
}

template <typename T>
T sigmoid_value(T z) {
  // Split by sign so exp never overflows.
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = sigmoid_value(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T s = self.data[i];
      gx[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  return kind == Activation::relu ? relu(x) : sigmoid(x);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_result<T>({1}, {total}, {x}, [](Node<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale_shift(sum(x), T(1) / static_cast<T>(x.numel()), T(0));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Concatenates two image tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const auto ia = detail::as_image(a.shape(), "concat_channels");
  const auto ib = detail::as_image(b.shape(), "concat_channels");
  if (a.rank() != b.rank() || ia.n != ib.n || ia.h != ib.h || ia.w != ib.w) {
    throw ShapeError("concat_channels: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t hw = ia.h * ia.w, ca = ia.c * hw, cb = ib.c * hw;
  std::vector<T> out(ia.n * (ca + cb));
  for (std::size_t n = 0; n < ia.n; ++n) {
    std::copy_n(a.data().begin() + n * ca, ca, out.begin() + n * (ca + cb));
    std::copy_n(b.data().begin() + n * cb, cb, out.begin() + n * (ca + cb) + ca);
  }
  Shape shape = detail::image_shape(a.shape(), ia.n, ia.c + ib.c, ia.h, ia.w);
  return make_result<T>(std::move(shape), std::move(out), {a, b}, [n_ = ia.n, ca, cb](Node<T>& self) {
    auto* ga = grad_target(self, 0);
    auto* gb = grad_target(self, 1);
    for (std::size_t n = 0; n < n_; ++n) {
      const T* g = self.grad.data() + n * (ca + cb);
      if (ga)
        for (std::size_t i = 0; i < ca; ++i) (*ga)[n * ca + i] += g[i];
      if (gb)
        for (std::size_t i = 0; i < cb; ++i) (*gb)[n * cb + i] += g[ca + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling and resampling

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const auto im = detail::as_image(x.shape(), "global_avg_pool");
  const std::size_t hw = im.h * im.w;
  const auto xv = x.data();
  std::vector<T> out(im.n * im.c);
  for (std::size_t nc = 0; nc < im.n * im.c; ++nc) {
    T s = T(0);
    for (std::size_t i = 0; i < hw; ++i) s += xv[nc * hw + i];
    out[nc] = s / static_cast<T>(hw);
  }
  return make_result<T>(detail::image_shape(x.shape(), im.n, im.c, 1, 1), std::move(out), {x}, [hw](Node<T>& self) {
    auto& gx = self.inputs[0]->ensure_grad();
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t nc = 0; nc < self.grad.size(); ++nc)
      for (std::size_t i = 0; i < hw; ++i) gx[nc * hw + i] += self.grad[nc] * inv;
  });
}

/// Non-overlapping max pooling. Ties go to the first element in row-major order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window = 2) {
  const auto im = detail::as_image(x.shape(), "max_pool2d");
  if (window == 0) throw ShapeError("max_pool2d: window must be >= 1");
  if (im.h % window || im.w % window) {
    throw ShapeError("max_pool2d: spatial extent " + std::to_string(im.h) + "x" + std::to_string(im.w) +
                     " is not divisible by window " + std::to_string(window));
  }
  const std::size_t oh = im.h / window, ow = im.w / window;
  const auto xv = x.data();
  std::vector<T> out(im.n * im.c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < im.n * im.c; ++nc) {
    const std::size_t base = nc * im.h * im.w;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo, ++o) {
        std::size_t best = base + (y * window) * im.w + xo * window;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = base + (y * window + dy) * im.w + xo * window + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
  }
  return make_result<T>(detail::image_shape(x.shape(), im.n, im.c, oh, ow), std::move(out), {x},
                        [argmax](Node<T>& self) {
                          auto& gx = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) gx[(*argmax)[i]] += self.grad[i];
                        });
}

/// Nearest-neighbour upsampling: every pixel becomes a factor x factor block.
template <typename T>
Tensor<T> upsample2d(const Tensor<T>& x, std::size_t factor) {
  if (factor == 0) throw ShapeError("upsample2d: factor must be >= 1");
  const auto im = detail::as_image(x.shape(), "upsample2d");
  const std::size_t oh = im.h * factor, ow = im.w * factor;
  const auto xv = x.data();
  std::vector<T> out(im.n * im.c * oh * ow);
  for (std::size_t nc = 0; nc < im.n * im.c; ++nc)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo)
        out[(nc * oh + y) * ow + xo] = xv[(nc * im.h + y / factor) * im.w + xo / factor];
  return make_result<T>(detail::image_shape(x.shape(), im.n, im.c, oh, ow), std::move(out), {x},
                        [im, factor, oh, ow](Node<T>& self) {
                          auto& gx = self.inputs[0]->ensure_grad();
                          for (std::size_t nc = 0; nc < im.n * im.c; ++nc)
                            for (std::size_t y = 0; y < oh; ++y)
                              for (std::size_t xo = 0; xo < ow; ++xo)
                                gx[(nc * im.h + y / factor) * im.w + xo / factor] += self.grad[(nc * oh + y) * ow + xo];
                        });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t dilation, const ConvGeometry& g, T* col) {
  const std::size_t p = g.out_h * g.out_w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = col + ((ci * kh + i) * kw + j) * p;
        const long dy = static_cast<long>(i * dilation) - static_cast<long>(g.pad_top);
        const long dx = static_cast<long>(j * dilation) - static_cast<long>(g.pad_left);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride) + dy;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride) + dx;
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t dilation, const ConvGeometry& g, T* dx) {
  const std::size_t p = g.out_h * g.out_w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const T* row = col + ((ci * kh + i) * kw + j) * p;
        const long oy0 = static_cast<long>(i * dilation) - static_cast<long>(g.pad_top);
        const long ox0 = static_cast<long>(j * dilation) - static_cast<long>(g.pad_left);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride) + oy0;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = dx + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride) + ox0;
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution (cross-correlation) via im2col and a dense matrix product.
/// Weight gradients are reduced over the batch in sample order, so results do
/// not depend on num_threads().
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& params) {
  const auto& k = params.kernel;
  if (k.rank() != 4) throw ShapeError("conv2d: kernel must be 4-D, got " + to_string(k.shape()));
  const auto im = detail::as_image(x.shape(), "conv2d");
  if (im.c != params.in_channels()) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " does not match kernel " + to_string(k.shape()) +
                     " (channel mismatch)");
  }
  if (params.bias.numel() != params.out_channels()) {
    throw ShapeError("conv2d: bias " + to_string(params.bias.shape()) + " does not match kernel " + to_string(k.shape()));
  }
  const std::size_t co = params.out_channels(), kh = params.kernel_h(), kw = params.kernel_w();
  const std::size_t stride = params.stride, dil = params.dilation;
  const ConvGeometry g = conv_geometry(im.h, im.w, kh, kw, stride, dil, params.padding);
  const std::size_t kk = im.c * kh * kw, p = g.out_h * g.out_w, in_sz = im.c * im.h * im.w;

  auto cols = std::make_shared<std::vector<T>>(im.n * kk * p);
  std::vector<T> out(im.n * co * p);
  const T* xv = x.data().data();
  const T* kv = k.data().data();
  const T* bv = params.bias.data().data();
  parallel_for(im.n, [&](std::size_t n) {
    T* col = cols->data() + n * kk * p;
    detail::im2col(xv + n * in_sz, im.c, im.h, im.w, kh, kw, stride, dil, g, col);
    detail::MapMat<T> y(out.data() + n * co * p, co, p);
    y.noalias() = detail::ConstMapMat<T>(kv, co, kk) * detail::ConstMapMat<T>(col, kk, p);
    for (std::size_t o = 0; o < co; ++o) y.row(o).array() += bv[o];
  });

  Shape shape = detail::image_shape(x.shape(), im.n, co, g.out_h, g.out_w);
  return make_result<T>(std::move(shape), std::move(out), {x, params.kernel, params.bias},
                        [cols, im, co, kh, kw, stride, dil, g, kk, p, in_sz](Node<T>& self) {
                          auto* gx = grad_target(self, 0);
                          auto* gk = grad_target(self, 1);
                          auto* gb = grad_target(self, 2);
                          const T* go = self.grad.data();
                          const T* kv = self.inputs[1]->data.data();
                          std::vector<T> partial;
                          if (gk) partial.assign(im.n * co * kk, T(0));
                          parallel_for(im.n, [&](std::size_t n) {
                            detail::ConstMapMat<T> dy(go + n * co * p, co, p);
                            if (gk) {
                              detail::MapMat<T> dk(partial.data() + n * co * kk, co, kk);
                              dk.noalias() = dy * detail::ConstMapMat<T>(cols->data() + n * kk * p, kk, p).transpose();
                            }
                            if (gx) {
                              std::vector<T> dcol(kk * p);
                              detail::MapMat<T>(dcol.data(), kk, p).noalias() =
                                  detail::ConstMapMat<T>(kv, co, kk).transpose() * dy;
                              detail::col2im(dcol.data(), im.c, im.h, im.w, kh, kw, stride, dil, g,
                                             gx->data() + n * in_sz);
                            }
                          });
                          for (std::size_t n = 0; n < im.n; ++n) {
                            if (gk) {
                              const T* src = partial.data() + n * co * kk;
                              for (std::size_t i = 0; i < co * kk; ++i) (*gk)[i] += src[i];
                            }
                            if (gb) {
                              for (std::size_t o = 0; o < co; ++o) {
                                const T* row = go + (n * co + o) * p;
                                T s = T(0);
                                for (std::size_t i = 0; i < p; ++i) s += row[i];
                                (*gb)[o] += s;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Dense and batch normalisation

/// Affine map applied per sample. A rank-1 input is a single vector; otherwise
/// dimension 0 is the batch and the rest is flattened.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const DenseParams<T>& params) {
  const std::size_t in = params.in_dim(), od = params.out_dim();
  const std::size_t batch = x.rank() <= 1 ? 1 : x.dim(0);
  if (x.numel() != batch * in) {
    throw ShapeError("dense: input " + to_string(x.shape()) + " does not match weight " +
                     to_string(params.weight.shape()));
  }
  if (params.bias.numel() != od) {
    throw ShapeError("dense: bias " + to_string(params.bias.shape()) + " does not match weight " +
                     to_string(params.weight.shape()));
  }
  std::vector<T> out(batch * od);
  detail::MapMat<T> y(out.data(), batch, od);
  y.noalias() = detail::ConstMapMat<T>(x.data().data(), batch, in) *
                detail::ConstMapMat<T>(params.weight.data().data(), od, in).transpose();
  const auto bv = params.bias.data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < od; ++o) y(n, o) += bv[o];
  Shape shape = x.rank() <= 1 ? Shape{od} : Shape{batch, od};
  return make_result<T>(std::move(shape), std::move(out), {x, params.weight, params.bias},
                        [batch, in, od](Node<T>& self) {
                          detail::ConstMapMat<T> dy(self.grad.data(), batch, od);
                          if (auto* gx = grad_target(self, 0)) {
                            detail::MapMat<T>(gx->data(), batch, in) +=
                                dy * detail::ConstMapMat<T>(self.inputs[1]->data.data(), od, in);
                          }
                          if (auto* gw = grad_target(self, 1)) {
                            detail::MapMat<T>(gw->data(), od, in) +=
                                dy.transpose() * detail::ConstMapMat<T>(self.inputs[0]->data.data(), batch, in);
                          }
                          if (auto* gb = grad_target(self, 2)) {
                            for (std::size_t n = 0; n < batch; ++n)
                              for (std::size_t o = 0; o < od; ++o) (*gb)[o] += dy(n, o);
                          }
                        });
}

/// Batch normalisation over an NxC or NxCxHxW tensor (statistics per channel).
///
/// Train mode normalises with the biased batch statistics and moves the running
/// statistics toward them (unbiased variance). When a channel has a single
/// value per batch the batch statistics are meaningless, so normalisation falls
/// back to the running statistics without updating them, exactly as in eval mode.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& params) {
  if (x.rank() != 2 && x.rank() != 4) throw ShapeError("batch_norm expects NxC or NxCxHxW, got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (c != params.channels()) {
    throw ShapeError("batch_norm: input " + to_string(x.shape()) + " has " + std::to_string(c) +
                     " channels, parameters have " + std::to_string(params.channels()));
  }
  const std::size_t count = n * hw;
  const bool batch_stats = params.mode == Mode::train && count > 1;
  const auto xv = x.data();
  const auto gamma = params.scale.data();
  const auto beta = params.shift.data();

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  std::vector<T> out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (batch_stats) {
      T s = T(0);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += xv[(b * c + ch) * hw + i];
      mu = s / static_cast<T>(count);
      T ss = T(0);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = xv[(b * c + ch) * hw + i] - mu;
          ss += d * d;
        }
      var = ss / static_cast<T>(count);
      auto rm = params.running_mean.mutable_data();
      auto rv = params.running_var.mutable_data();
      rm[ch] = (T(1) - params.momentum) * rm[ch] + params.momentum * mu;
      rv[ch] = (T(1) - params.momentum) * rv[ch] + params.momentum * (ss / static_cast<T>(count - 1));
    } else {
      mu = params.running_mean[ch];
      var = params.running_var[ch];
    }
    const T is = T(1) / std::sqrt(var + params.epsilon);
    (*inv_std)[ch] = is;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        (*xhat)[idx] = (xv[idx] - mu) * is;
        out[idx] = gamma[ch] * (*xhat)[idx] + beta[ch];
      }
  }
  return make_result<T>(x.shape(), std::move(out), {x, params.scale, params.shift},
                        [xhat, inv_std, n, c, hw, count, batch_stats](Node<T>& self) {
                          const auto& g = self.grad;
                          const auto& gamma = self.inputs[1]->data;
                          auto* gx = grad_target(self, 0);
                          auto* gg = grad_target(self, 1);
                          auto* gbeta = grad_target(self, 2);
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            T sum_g = T(0), sum_gx = T(0);
                            for (std::size_t b = 0; b < n; ++b)
                              for (std::size_t i = 0; i < hw; ++i) {
                                const std::size_t idx = (b * c + ch) * hw + i;
                                sum_g += g[idx];
                                sum_gx += g[idx] * (*xhat)[idx];
                              }
                            if (gg) (*gg)[ch] += sum_gx;
                            if (gbeta) (*gbeta)[ch] += sum_g;
                            if (!gx) continue;
                            const T k = gamma[ch] * (*inv_std)[ch];
                            const T m = static_cast<T>(count);
                            for (std::size_t b = 0; b < n; ++b)
                              for (std::size_t i = 0; i < hw; ++i) {
                                const std::size_t idx = (b * c + ch) * hw + i;
                                if (batch_stats)
                                  (*gx)[idx] += k * (g[idx] - sum_g / m - (*xhat)[idx] * sum_gx / m);
                                else
                                  (*gx)[idx] += k * g[idx];
                              }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
inline constexpr T bce_clip = T(1e-7);

/// Mean binary cross-entropy with predictions clamped to [clip, 1 - clip].
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("bce_loss: prediction " + to_string(prediction.shape()) + " vs target " +
                     to_string(target.shape()));
  }
  const auto pv = prediction.data();
  const auto tv = target.data();
  const T lo = bce_clip<T>, hi = T(1) - bce_clip<T>;
  T total = T(0);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (tv[i] != T(0) && tv[i] != T(1)) throw ShapeError("bce_loss: target values must be 0 or 1");
    const T p = std::clamp(pv[i], lo, hi);
    total -= tv[i] == T(1) ? std::log(p) : std::log(T(1) - p);
  }
  const T m = static_cast<T>(pv.size());
  return make_result<T>({1}, {total / m}, {prediction, target}, [lo, hi, m](Node<T>& self) {
    auto* gp = grad_target(self, 0);
    if (!gp) return;
    const auto& pv = self.inputs[0]->data;
    const auto& tv = self.inputs[1]->data;
    const T g = self.grad[0] / m;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const T p = pv[i];
      if (p < lo || p > hi) continue;
      (*gp)[i] += tv[i] == T(1) ? -g / p : g / (T(1) - p);
    }
  });
}

}  // namespace esknet
