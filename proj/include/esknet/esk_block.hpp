#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>

#include "esknet/ops.hpp"
#include "esknet/random.hpp"

namespace esknet {

/// Configuration of one enhanced selective-kernel block. With both toggles off
/// the block is the plain selective-kernel unit: two branches fused by a
/// channel gate only.
struct EskBlockSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t reduction_dim = 32;
  bool enable_spatial_attention = true;
  bool enable_residual = true;
  std::size_t dilation = 3;

  /// Width of the squeeze layer; capped at out_channels for narrow blocks.
  std::size_t effective_reduction() const { return std::min(reduction_dim, out_channels); }
  bool needs_projection() const { return enable_residual && in_channels != out_channels; }

  void validate() const {
    if (in_channels == 0 || out_channels == 0) throw ConfigError("ESK block channel counts must be positive");
    if (reduction_dim == 0) throw ConfigError("ESK block reduction_dim must be >= 1");
    if (dilation == 0) throw ConfigError("ESK block dilation must be >= 1");
  }
};

template <typename T>
struct EskBlockParams {
  ConvParams<T> branch5;   // 5x5, dilation 1
  ConvParams<T> branch3d;  // 3x3, dilated
  DenseParams<T> fc_reduce;
  BatchNormParams<T> bn;
  DenseParams<T> fc_expand;
  std::optional<ConvParams<T>> spatial_conv;   // 1x1, out_channels -> 1
  std::optional<ConvParams<T>> residual_proj;  // 1x1, in_channels -> out_channels
};

/// Fan-in scaled uniform weights, zero bias.
template <typename T>
ConvParams<T> make_conv(std::size_t in, std::size_t out, std::size_t kh, std::size_t kw, Rng& rng,
                        std::size_t dilation = 1) {
  const T bound = static_cast<T>(std::sqrt(3.0 / static_cast<double>(in * kh * kw)));
  ConvParams<T> p;
  p.kernel = uniform_tensor<T>({out, in, kh, kw}, -bound, bound, rng, true);
  p.bias = Tensor<T>({out}, T(0), true);
  p.dilation = dilation;
  return p;
}

template <typename T>
DenseParams<T> make_dense(std::size_t in, std::size_t out, Rng& rng) {
  const T bound = static_cast<T>(std::sqrt(3.0 / static_cast<double>(in)));
  DenseParams<T> p;
  p.weight = uniform_tensor<T>({out, in}, -bound, bound, rng, true);
  p.bias = Tensor<T>({out}, T(0), true);
  return p;
}

template <typename T>
EskBlockParams<T> make_esk_params(const EskBlockSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t r = spec.effective_reduction();
  EskBlockParams<T> p;
  p.branch5 = make_conv<T>(spec.in_channels, spec.out_channels, 5, 5, rng);
  p.branch3d = make_conv<T>(spec.in_channels, spec.out_channels, 3, 3, rng, spec.dilation);
  p.fc_reduce = make_dense<T>(spec.out_channels, r, rng);
  p.bn = make_batch_norm<T>(r);
  p.fc_expand = make_dense<T>(r, spec.out_channels, rng);
  if (spec.enable_spatial_attention) p.spatial_conv = make_conv<T>(spec.out_channels, 1, 1, 1, rng);
  if (spec.needs_projection()) p.residual_proj = make_conv<T>(spec.in_channels, spec.out_channels, 1, 1, rng);
  return p;
}

/// Channel gate beta = sigmoid(fc_expand(ReLU(BN(fc_reduce(GAP(F_M)))))),
/// returned as N x C x 1 x 1.
template <typename T>
Tensor<T> channel_gate(const Tensor<T>& fused, EskBlockParams<T>& params) {
  const auto im = detail::as_image(fused.shape(), "channel_gate");
  const Tensor<T> squeezed = reshape(global_avg_pool(fused), {im.n, im.c});
  const Tensor<T> z_c = relu(batch_norm(dense(squeezed, params.fc_reduce), params.bn));
  const Tensor<T> z = dense(z_c, params.fc_expand);
  return reshape(sigmoid(z), detail::image_shape(fused.shape(), im.n, im.c, 1, 1));
}

/// Spatial gate alpha = sigmoid(conv1x1(ReLU(F_M))), shape N x 1 x H x W.
template <typename T>
Tensor<T> spatial_gate(const Tensor<T>& fused, const EskBlockParams<T>& params) {
  if (!params.spatial_conv) throw ConfigError("spatial attention is disabled for this block");
  return sigmoid(conv2d(relu(fused), *params.spatial_conv));
}

namespace detail {
template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c, const char* op) {
  if (a.shape() != b.shape() || a.shape() != c.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ: " + to_string(a.shape()) + ", " + to_string(b.shape()) +
                     ", " + to_string(c.shape()));
  }
}
}  // namespace detail

/// (F_C1, F_C2) = ((1 - beta) * F1, beta * F2).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_attention(const Tensor<T>& fused, const Tensor<T>& f1, const Tensor<T>& f2,
                                                  EskBlockParams<T>& params) {
  detail::require_same_shape(fused, f1, f2, "channel_attention");
  const Tensor<T> beta = channel_gate(fused, params);
  return {one_minus(beta) * f1, beta * f2};
}

/// (F_S1, F_S2) = ((1 - alpha) * F1, alpha * F2).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> spatial_attention(const Tensor<T>& fused, const Tensor<T>& f1, const Tensor<T>& f2,
                                                  const EskBlockParams<T>& params) {
  detail::require_same_shape(fused, f1, f2, "spatial_attention");
  const Tensor<T> alpha = spatial_gate(fused, params);
  return {one_minus(alpha) * f1, alpha * f2};
}

/// Every intermediate of one block evaluation, for inspection and tests.
template <typename T>
struct EskTrace {
  Tensor<T> f1, f2, fused;
  Tensor<T> beta, alpha;  // alpha undefined when spatial attention is off
  Tensor<T> fc1, fc2, fs1, fs2;
  Tensor<T> residual;  // undefined when the residual path is off
  Tensor<T> output;
};

/// Full trace of the block. The output is
///   R(F) + ((F_S1 + F_S2) + (F_C1 + F_C2))
/// with the terms absent when their toggle is off. Floating-point addition is
/// not associative; this grouping is fixed so the component-wise sum and the
/// module-wise form (see esk_forward_modular) are the same computation.
template <typename T>
EskTrace<T> esk_trace(const Tensor<T>& input, const EskBlockSpec& spec, EskBlockParams<T>& params) {
  const auto im = detail::as_image(input.shape(), "esk_forward");
  if (im.c != spec.in_channels) {
    throw ShapeError("esk_forward: input " + to_string(input.shape()) + " has " + std::to_string(im.c) +
                     " channels, block expects " + std::to_string(spec.in_channels));
  }
  if (spec.enable_spatial_attention != params.spatial_conv.has_value() ||
      spec.needs_projection() != params.residual_proj.has_value()) {
    throw ConfigError("ESK block parameters do not match the block toggles");
  }
  EskTrace<T> t;
  t.f1 = conv2d(input, params.branch5);
  t.f2 = conv2d(input, params.branch3d);
  t.fused = t.f1 + t.f2;

  t.beta = channel_gate(t.fused, params);
  t.fc1 = one_minus(t.beta) * t.f1;
  t.fc2 = t.beta * t.f2;
  Tensor<T> calibrated = t.fc1 + t.fc2;

  if (spec.enable_spatial_attention) {
    t.alpha = spatial_gate(t.fused, params);
    t.fs1 = one_minus(t.alpha) * t.f1;
    t.fs2 = t.alpha * t.f2;
    calibrated = (t.fs1 + t.fs2) + calibrated;
  }
  if (spec.enable_residual) {
    t.residual = params.residual_proj ? conv2d(input, *params.residual_proj) : input;
    t.output = t.residual + calibrated;
  } else {
    t.output = calibrated;
  }
  return t;
}

template <typename T>
Tensor<T> esk_forward(const Tensor<T>& input, const EskBlockSpec& spec, EskBlockParams<T>& params) {
  return esk_trace(input, spec, params).output;
}

/// The same block written as F + (SAM(F_M) + CAM(F_M)), calling the two
/// attention modules as units.
template <typename T>
Tensor<T> esk_forward_modular(const Tensor<T>& input, const EskBlockSpec& spec, EskBlockParams<T>& params) {
  const Tensor<T> f1 = conv2d(input, params.branch5);
  const Tensor<T> f2 = conv2d(input, params.branch3d);
  const Tensor<T> fused = f1 + f2;
  auto [fc1, fc2] = channel_attention(fused, f1, f2, params);
  Tensor<T> cam = fc1 + fc2;
  Tensor<T> attended = cam;
  if (spec.enable_spatial_attention) {
    auto [fs1, fs2] = spatial_attention(fused, f1, f2, params);
    attended = (fs1 + fs2) + cam;
  }
  if (!spec.enable_residual) return attended;
  const Tensor<T> residual = params.residual_proj ? conv2d(input, *params.residual_proj) : input;
  return residual + attended;
}

template <typename T>
void collect_params(EskBlockParams<T>& p, const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor<T>>>& out) {
  auto conv = [&](const std::string& name, ConvParams<T>& c) {
    out.emplace_back(prefix + name + ".kernel", c.kernel);
    out.emplace_back(prefix + name + ".bias", c.bias);
  };
  conv("branch5", p.branch5);
  conv("branch3d", p.branch3d);
  out.emplace_back(prefix + "fc_reduce.weight", p.fc_reduce.weight);
  out.emplace_back(prefix + "fc_reduce.bias", p.fc_reduce.bias);
  out.emplace_back(prefix + "bn.scale", p.bn.scale);
  out.emplace_back(prefix + "bn.shift", p.bn.shift);
  out.emplace_back(prefix + "fc_expand.weight", p.fc_expand.weight);
  out.emplace_back(prefix + "fc_expand.bias", p.fc_expand.bias);
  if (p.spatial_conv) conv("spatial_conv", *p.spatial_conv);
  if (p.residual_proj) conv("residual_proj", *p.residual_proj);
}

}  // namespace esknet
