#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "esknet/esk_block.hpp"

namespace esknet {

/// Block used at every encoder/decoder stage. `plain` is the two-convolution
/// U-net stage; `sk` drops spatial attention and the residual path; `esk` is
/// the full block.
enum class BlockKind { plain, sk, esk };

inline std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::plain: return "plain";
    case BlockKind::sk: return "sk";
    case BlockKind::esk: return "esk";
  }
  return "?";
}

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "plain") return BlockKind::plain;
  if (s == "sk") return BlockKind::sk;
  if (s == "esk") return BlockKind::esk;
  throw ConfigError("unknown block kind '" + s + "' (expected plain, sk or esk)");
}

inline constexpr std::size_t kLevels = 4;  // pooling steps
inline constexpr std::size_t kStages = kLevels + 1;

struct NetworkSpec {
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  std::size_t base_channels = 8;
  std::vector<std::size_t> widths;  // empty: base * {1, 2, 4, 8, 16}
  BlockKind block = BlockKind::esk;
  bool deep_supervision = true;
  std::vector<std::size_t> supervision_factors{16, 8, 4, 2, 1};
  std::size_t reduction_dim = 32;
  std::size_t dilation = 3;

  std::array<std::size_t, kStages> stage_widths() const {
    std::array<std::size_t, kStages> w{};
    for (std::size_t i = 0; i < kStages; ++i) w[i] = widths.empty() ? base_channels << i : widths[i];
    return w;
  }

  EskBlockSpec block_spec(std::size_t in, std::size_t out) const {
    EskBlockSpec s;
    s.in_channels = in;
    s.out_channels = out;
    s.reduction_dim = reduction_dim;
    s.dilation = dilation;
    s.enable_spatial_attention = block == BlockKind::esk;
    s.enable_residual = block == BlockKind::esk;
    return s;
  }

  void validate() const {
    const std::size_t div = std::size_t{1} << kLevels;
    if (input_h == 0 || input_w == 0 || input_h % div || input_w % div) {
      throw ConfigError("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                        " must be positive and divisible by 16");
    }
    if (widths.empty() && base_channels == 0) throw ConfigError("base_channels must be positive");
    if (!widths.empty()) {
      if (widths.size() != kStages) throw ConfigError("widths must list exactly 5 stage widths");
      for (auto w : widths)
        if (w == 0) throw ConfigError("stage widths must be positive");
    }
    if (supervision_factors.size() != kStages) throw ConfigError("supervision_factors must list 5 factors");
    // Stage i (0-based) sees features at input / 2^(4 - i); the factor must restore full size.
    for (std::size_t i = 0; i < kStages; ++i) {
      const std::size_t expected = std::size_t{1} << (kLevels - i);
      if (supervision_factors[i] != expected) {
        throw ConfigError("supervision factor " + std::to_string(i + 1) + " is " +
                          std::to_string(supervision_factors[i]) + " but the stage resolution requires " +
                          std::to_string(expected));
      }
    }
    if (reduction_dim == 0 || dilation == 0) throw ConfigError("reduction_dim and dilation must be >= 1");
  }

  bool operator==(const NetworkSpec&) const = default;
};

template <typename T>
struct PlainBlockParams {
  ConvParams<T> conv1;
  ConvParams<T> conv2;
};

template <typename T>
struct StageBlock {
  EskBlockSpec spec;
  std::variant<PlainBlockParams<T>, EskBlockParams<T>> impl;
};

template <typename T>
struct DecoderLevel {
  ConvParams<T> up_conv;  // 2x2 after nearest x2 upsampling, halves the width
  StageBlock<T> block;    // takes concat(skip, up) with 2 * width channels
};

template <typename T>
struct NetworkParams {
  NetworkSpec spec;
  std::array<StageBlock<T>, kLevels> encoder;
  StageBlock<T> bottleneck;
  std::array<DecoderLevel<T>, kLevels> decoder;  // index = resolution level, 0 is full size
  // Output heads for S_1..S_5; only S_5 exists without deep supervision.
  std::array<std::optional<ConvParams<T>>, kStages> heads;

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters();
  std::vector<std::pair<std::string, Tensor<T>>> named_buffers();
  void set_mode(Mode mode);
};

namespace detail {

template <typename T>
StageBlock<T> make_stage(const NetworkSpec& spec, std::size_t in, std::size_t out, Rng& rng) {
  StageBlock<T> s;
  s.spec = spec.block_spec(in, out);
  if (spec.block == BlockKind::plain) {
    s.impl = PlainBlockParams<T>{make_conv<T>(in, out, 3, 3, rng), make_conv<T>(out, out, 3, 3, rng)};
  } else {
    s.impl = make_esk_params<T>(s.spec, rng);
  }
  return s;
}

template <typename T>
Tensor<T> stage_forward(const Tensor<T>& x, StageBlock<T>& stage) {
  if (auto* plain = std::get_if<PlainBlockParams<T>>(&stage.impl)) {
    return relu(conv2d(relu(conv2d(x, plain->conv1)), plain->conv2));
  }
  return relu(esk_forward(x, stage.spec, std::get<EskBlockParams<T>>(stage.impl)));
}

template <typename T>
void collect_stage(StageBlock<T>& s, const std::string& prefix, std::vector<std::pair<std::string, Tensor<T>>>& out) {
  if (auto* plain = std::get_if<PlainBlockParams<T>>(&s.impl)) {
    out.emplace_back(prefix + "conv1.kernel", plain->conv1.kernel);
    out.emplace_back(prefix + "conv1.bias", plain->conv1.bias);
    out.emplace_back(prefix + "conv2.kernel", plain->conv2.kernel);
    out.emplace_back(prefix + "conv2.bias", plain->conv2.bias);
  } else {
    collect_params(std::get<EskBlockParams<T>>(s.impl), prefix, out);
  }
}

template <typename T>
void for_each_bn(NetworkParams<T>& net, const std::function<void(const std::string&, BatchNormParams<T>&)>& fn) {
  auto visit = [&](StageBlock<T>& s, const std::string& prefix) {
    if (auto* esk = std::get_if<EskBlockParams<T>>(&s.impl)) fn(prefix + "bn.", esk->bn);
  };
  for (std::size_t i = 0; i < kLevels; ++i) visit(net.encoder[i], "encoder" + std::to_string(i) + ".");
  visit(net.bottleneck, "bottleneck.");
  for (std::size_t i = 0; i < kLevels; ++i) visit(net.decoder[i].block, "decoder" + std::to_string(i) + ".block.");
}

}  // namespace detail

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> NetworkParams<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (std::size_t i = 0; i < kLevels; ++i) detail::collect_stage(encoder[i], "encoder" + std::to_string(i) + ".", out);
  detail::collect_stage(bottleneck, "bottleneck.", out);
  for (std::size_t i = 0; i < kLevels; ++i) {
    const std::string p = "decoder" + std::to_string(i) + ".";
    out.emplace_back(p + "up_conv.kernel", decoder[i].up_conv.kernel);
    out.emplace_back(p + "up_conv.bias", decoder[i].up_conv.bias);
    detail::collect_stage(decoder[i].block, p + "block.", out);
  }
  for (std::size_t i = 0; i < kStages; ++i) {
    if (!heads[i]) continue;
    const std::string p = "head" + std::to_string(i + 1) + ".";
    out.emplace_back(p + "kernel", heads[i]->kernel);
    out.emplace_back(p + "bias", heads[i]->bias);
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> NetworkParams<T>::named_buffers() {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  detail::for_each_bn<T>(*this, [&](const std::string& p, BatchNormParams<T>& bn) {
    out.emplace_back(p + "running_mean", bn.running_mean);
    out.emplace_back(p + "running_var", bn.running_var);
  });
  return out;
}

template <typename T>
void NetworkParams<T>::set_mode(Mode mode) {
  detail::for_each_bn<T>(*this, [&](const std::string&, BatchNormParams<T>& bn) { bn.mode = mode; });
}

/// Allocates and initialises every parameter. Deterministic in `seed`.
template <typename T = float>
NetworkParams<T> build(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const auto w = spec.stage_widths();
  NetworkParams<T> net;
  net.spec = spec;
  std::size_t in = 1;
  for (std::size_t i = 0; i < kLevels; ++i) {
    net.encoder[i] = detail::make_stage<T>(spec, in, w[i], rng);
    in = w[i];
  }
  net.bottleneck = detail::make_stage<T>(spec, w[kLevels - 1], w[kLevels], rng);
  for (std::size_t level = kLevels; level-- > 0;) {
    auto& d = net.decoder[level];
    d.up_conv = make_conv<T>(w[level + 1], w[level], 2, 2, rng);
    // Skip concatenation doubles the width going into the stage block.
    d.block = detail::make_stage<T>(spec, w[level] + w[level], w[level], rng);
  }
  // Stage index s sees features of width w[4 - s].
  for (std::size_t s = 0; s < kStages; ++s) {
    if (spec.deep_supervision || s == kStages - 1) net.heads[s] = make_conv<T>(w[kLevels - s], 1, 1, 1, rng);
  }
  return net;
}

/// Probability masks S_1..S_5 at full resolution (only S_5 without deep
/// supervision). The last entry is always the final prediction.
template <typename T>
std::vector<Tensor<T>> forward(NetworkParams<T>& net, const Tensor<T>& image) {
  const auto im = detail::as_image(image.shape(), "forward");
  if (im.c != 1 || im.h != net.spec.input_h || im.w != net.spec.input_w) {
    throw ShapeError("forward: image " + to_string(image.shape()) + " does not match network input 1x" +
                     std::to_string(net.spec.input_h) + "x" + std::to_string(net.spec.input_w));
  }
  std::array<Tensor<T>, kLevels> skips;
  Tensor<T> x = image;
  for (std::size_t i = 0; i < kLevels; ++i) {
    skips[i] = detail::stage_forward(x, net.encoder[i]);
    x = max_pool2d(skips[i], 2);
  }
  x = detail::stage_forward(x, net.bottleneck);

  std::array<Tensor<T>, kStages> features;  // F_D1..F_D5
  features[0] = x;
  for (std::size_t level = kLevels; level-- > 0;) {
    auto& d = net.decoder[level];
    const Tensor<T> up = relu(conv2d(upsample2d(x, 2), d.up_conv));
    x = detail::stage_forward(concat_channels(skips[level], up), d.block);
    features[kLevels - level] = x;
  }

  std::vector<Tensor<T>> masks;
  for (std::size_t s = 0; s < kStages; ++s) {
    if (!net.heads[s]) continue;
    masks.push_back(upsample2d(sigmoid(conv2d(features[s], *net.heads[s])), net.spec.supervision_factors[s]));
  }
  return masks;
}

/// Sum of per-stage BCE losses against the full-resolution target.
template <typename T>
Tensor<T> total_loss(const std::vector<Tensor<T>>& outputs, const Tensor<T>& target) {
  if (outputs.empty()) throw ShapeError("total_loss: no outputs");
  Tensor<T> loss = bce_loss(outputs[0], target);
  for (std::size_t i = 1; i < outputs.size(); ++i) loss = loss + bce_loss(outputs[i], target);
  return loss;
}

struct Complexity {
  std::uint64_t params = 0;
  // 2 x multiply-accumulates over convolution and dense layers for one
  // single-image forward pass; pooling, activations and bias adds excluded.
  std::uint64_t flops = 0;
};

/// Parameter and FLOP totals derived from a NetworkSpec's layer shapes alone.
inline Complexity count_params_flops(const NetworkSpec& spec) {
  spec.validate();
  Complexity c;
  const auto w = spec.stage_widths();
  auto conv = [&](std::uint64_t in, std::uint64_t out, std::uint64_t k, std::uint64_t h, std::uint64_t wd) {
    c.params += out * in * k * k + out;
    c.flops += 2 * out * in * k * k * h * wd;
  };
  auto fc = [&](std::uint64_t in, std::uint64_t out) {
    c.params += out * in + out;
    c.flops += 2 * out * in;
  };
  auto stage = [&](std::uint64_t in, std::uint64_t out, std::uint64_t h, std::uint64_t wd) {
    if (spec.block == BlockKind::plain) {
      conv(in, out, 3, h, wd);
      conv(out, out, 3, h, wd);
      return;
    }
    const std::uint64_t r = std::min<std::uint64_t>(spec.reduction_dim, out);
    conv(in, out, 5, h, wd);
    conv(in, out, 3, h, wd);
    fc(out, r);
    c.params += 2 * r;  // BN scale and shift
    fc(r, out);
    if (spec.block == BlockKind::esk) {
      conv(out, 1, 1, h, wd);
      if (in != out) conv(in, out, 1, h, wd);
    }
  };
  std::uint64_t h = spec.input_h, wd = spec.input_w, in = 1;
  for (std::size_t i = 0; i < kLevels; ++i) {
    stage(in, w[i], h >> i, wd >> i);
    in = w[i];
  }
  stage(w[3], w[4], h >> 4, wd >> 4);
  for (std::size_t level = 0; level < kLevels; ++level) {
    const std::uint64_t lh = h >> level, lw = wd >> level;
    c.params += w[level] * w[level + 1] * 4 + w[level];
    c.flops += 2 * w[level] * w[level + 1] * 4 * lh * lw;
    stage(2 * w[level], w[level], lh, lw);
  }
  for (std::size_t s = 0; s < kStages; ++s) {
    if (!spec.deep_supervision && s != kStages - 1) continue;
    conv(w[kLevels - s], 1, 1, h >> (kLevels - s), wd >> (kLevels - s));
  }
  return c;
}

template <typename T>
std::uint64_t parameter_count(NetworkParams<T>& net) {
  std::uint64_t n = 0;
  for (auto& [name, t] : net.named_parameters()) n += t.numel();
  return n;
}

}  // namespace esknet
