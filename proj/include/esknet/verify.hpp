#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "esknet/esk_block.hpp"
#include "esknet/gradcheck.hpp"
#include "esknet/metrics.hpp"
#include "esknet/network.hpp"

namespace esknet {

// ---------------------------------------------------------------------------
// Straight-line reference implementations. They share no code with the
// library ops and exist only to be compared against them.

namespace reference {

struct Image {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) { return v[((b * c + ch) * h + y) * w + x]; }
  double at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
    return v[((b * c + ch) * h + y) * w + x];
  }
};

inline Image from_tensor(const Tensor<double>& t) {
  Image im{t.dim(0), t.dim(1), t.dim(2), t.dim(3), {}};
  im.v.assign(t.data().begin(), t.data().end());
  return im;
}

/// Stride-1 convolution with zero "same" padding (extra pixel on the high side).
inline Image conv_same(const Image& x, const Tensor<double>& kernel, const Tensor<double>& bias, std::size_t dilation) {
  const std::size_t co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const long pad_t = static_cast<long>(((kh - 1) * dilation) / 2), pad_l = static_cast<long>(((kw - 1) * dilation) / 2);
  Image y{x.n, co, x.h, x.w, std::vector<double>(x.n * co * x.h * x.w)};
  const auto k = kernel.data();
  for (std::size_t b = 0; b < x.n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t r = 0; r < x.h; ++r)
        for (std::size_t s = 0; s < x.w; ++s) {
          double acc = bias[o];
          for (std::size_t i = 0; i < x.c; ++i)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t q = 0; q < kw; ++q) {
                const long yy = static_cast<long>(r) - pad_t + static_cast<long>(u * dilation);
                const long xx = static_cast<long>(s) - pad_l + static_cast<long>(q * dilation);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(x.h) || xx >= static_cast<long>(x.w)) continue;
                acc += k[((o * x.c + i) * kh + u) * kw + q] * x.at(b, i, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
              }
          y.at(b, o, r, s) = acc;
        }
  return y;
}

inline std::vector<double> affine(const std::vector<double>& in, const Tensor<double>& weight, const Tensor<double>& bias) {
  const std::size_t out = weight.dim(0), inn = weight.dim(1);
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = bias[o];
    for (std::size_t i = 0; i < inn; ++i) acc += weight.data()[o * inn + i] * in[i];
    y[o] = acc;
  }
  return y;
}

struct SkWeights {
  Tensor<double> k5, b5, k3, b3;
  Tensor<double> reduce_w, reduce_b;
  Tensor<double> bn_scale, bn_shift;
  double bn_epsilon = 1e-3;
  Tensor<double> head1_w, head1_b, head2_w, head2_b;  // per-branch selection logits
  std::size_t dilation = 3;
};

/// The original selective-kernel unit: two branches, global pooling, a
/// squeeze layer with batch normalisation (batch statistics) and ReLU, one
/// logit head per branch and a softmax across the two branches.
inline Image sk_block(const Image& x, const SkWeights& p) {
  const Image u1 = conv_same(x, p.k5, p.b5, 1);
  const Image u2 = conv_same(x, p.k3, p.b3, p.dilation);
  const std::size_t n = x.n, c = u1.c, hw = u1.h * u1.w;
  std::vector<std::vector<double>> s(n, std::vector<double>(c, 0.0));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (std::size_t y = 0; y < u1.h; ++y)
        for (std::size_t xx = 0; xx < u1.w; ++xx) acc += u1.at(b, ch, y, xx) + u2.at(b, ch, y, xx);
      s[b][ch] = acc / static_cast<double>(hw);
    }
  std::vector<std::vector<double>> z(n);
  for (std::size_t b = 0; b < n; ++b) z[b] = affine(s[b], p.reduce_w, p.reduce_b);
  const std::size_t d = z[0].size();
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0, var = 0;
    for (std::size_t b = 0; b < n; ++b) mu += z[b][j];
    mu /= static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) var += (z[b][j] - mu) * (z[b][j] - mu);
    var /= static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) {
      const double t = p.bn_scale[j] * (z[b][j] - mu) / std::sqrt(var + p.bn_epsilon) + p.bn_shift[j];
      z[b][j] = t > 0 ? t : 0.0;
    }
  }
  Image out{n, c, u1.h, u1.w, std::vector<double>(u1.v.size())};
  for (std::size_t b = 0; b < n; ++b) {
    const auto a1 = affine(z[b], p.head1_w, p.head1_b);
    const auto a2 = affine(z[b], p.head2_w, p.head2_b);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double m = std::max(a1[ch], a2[ch]);
      const double e1 = std::exp(a1[ch] - m), e2 = std::exp(a2[ch] - m);
      const double w1 = e1 / (e1 + e2), w2 = e2 / (e1 + e2);
      for (std::size_t y = 0; y < u1.h; ++y)
        for (std::size_t xx = 0; xx < u1.w; ++xx) out.at(b, ch, y, xx) = w1 * u1.at(b, ch, y, xx) + w2 * u2.at(b, ch, y, xx);
    }
  }
  return out;
}

/// Pixel-by-pixel confusion counts.
template <typename T>
ConfusionCounts count_pixels(const Tensor<T>& pred, const Tensor<T>& gt) {
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] > T(0.5), g = gt[i] > T(0.5);
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.tn += !p && !g;
  }
  return c;
}

struct RocPoint {
  double threshold;
  std::uint64_t tp, fp;
  bool operator<(const RocPoint& o) const { return std::tie(fp, tp) < std::tie(o.fp, o.tp); }
};

/// One operating point per distinct probability value (p >= cut), plus the
/// empty prediction above the largest value.
inline std::vector<RocPoint> all_cutpoints(const std::vector<double>& probs, const std::vector<bool>& labels) {
  std::set<double> cuts(probs.begin(), probs.end());
  std::vector<RocPoint> pts{{2.0, 0, 0}};
  for (double cut : cuts) {
    RocPoint pt{cut, 0, 0};
    for (std::size_t i = 0; i < probs.size(); ++i)
      if (probs[i] >= cut) (labels[i] ? pt.tp : pt.fp) += 1;
    pts.push_back(pt);
  }
  return pts;
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (the Mann-Whitney statistic).
inline double rank_auc(const std::vector<double>& probs, const std::vector<bool>& labels) {
  double wins = 0;
  std::uint64_t pairs = 0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    for (std::size_t j = 0; j < probs.size(); ++j) {
      if (!labels[i] || labels[j]) continue;
      ++pairs;
      wins += probs[i] > probs[j] ? 1.0 : probs[i] == probs[j] ? 0.5 : 0.0;
    }
  return wins / static_cast<double>(pairs);
}

}  // namespace reference

// ---------------------------------------------------------------------------
// Check registry

struct CheckResult {
  std::string group;
  std::string name;
  bool passed = false;
  double value = 0;      // worst observed error, or 0/1 for boolean checks
  double tolerance = 0;
  std::string detail;
};

struct VerifyOptions {
  std::size_t gradient_seeds = 20;
  std::size_t sk_inputs = 50;
  std::size_t metric_pairs = 100;
  std::uint64_t seed = 2024;
  std::string corrupt;  // name of a gradient check whose analytic gradient is perturbed
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  double seconds = 0;

  bool all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
  }
  bool group_passed(const std::string& g) const {
    bool any = false;
    for (const auto& c : checks)
      if (c.group == g) {
        any = true;
        if (!c.passed) return false;
      }
    return any;
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& c : checks)
      if (!c.passed) out.push_back(c.group + "/" + c.name);
    return out;
  }
};

namespace detail {

using Op = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Worst relative error over `seeds` random instances of a scalarised op:
/// loss = sum(op(inputs) * fixed random weights).
inline CheckResult gradient_case(const std::string& name, std::size_t seeds, std::uint64_t base_seed, double tol,
                                 const std::function<std::vector<Tensor<double>>(Rng&)>& make_inputs, const Op& op,
                                 double corrupt) {
  CheckResult r{"gradient", name, true, 0.0, tol, ""};
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng(derive_seed(base_seed, name, s));
    auto inputs = make_inputs(rng);
    const Shape out_shape = op(inputs).shape();
    const auto weights = uniform_tensor<double>(out_shape, -1.0, 1.0, rng);
    GradCheckOptions o;
    o.corrupt_analytic = corrupt;
    const auto res = check_gradients([&] { return sum(op(inputs) * weights); }, inputs, o);
    if (res.max_rel_error > r.value) {
      r.value = res.max_rel_error;
      r.detail = "seed " + std::to_string(s) + ", input " + std::to_string(res.worst_input);
    }
  }
  r.passed = r.value < tol;
  return r;
}

inline Tensor<double> away_from_zero(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), true);
}

/// Distinct values at least 0.05 apart, in random order.
inline Tensor<double> well_separated(Shape shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i) - 1.0;
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor<double>::from(std::move(shape), std::move(v), true);
}

inline Tensor<double> rnd(Shape shape, Rng& rng) { return uniform_tensor<double>(std::move(shape), -1.0, 1.0, rng, true); }

inline ConvParams<double> conv_from(const std::vector<Tensor<double>>& in, std::size_t k, std::size_t dilation,
                                    std::size_t stride, Padding pad) {
  ConvParams<double> p;
  p.kernel = in[k];
  p.bias = in[k + 1];
  p.dilation = dilation;
  p.stride = stride;
  p.padding = pad;
  return p;
}

/// Random ESK-family block over double tensors; BN runs on batch statistics.
inline EskBlockParams<double> random_block(const EskBlockSpec& spec, Rng& rng) {
  auto p = make_esk_params<double>(spec, rng);
  // Non-trivial BN affine parameters so scale and shift gradients are exercised.
  p.bn.scale = uniform_tensor<double>({spec.effective_reduction()}, 0.5, 1.5, rng, true);
  p.bn.shift = uniform_tensor<double>({spec.effective_reduction()}, -0.5, 0.5, rng, true);
  auto jitter = [&](Tensor<double>& t) { t = uniform_tensor<double>(t.shape(), -0.2, 0.2, rng, true); };
  jitter(p.branch5.bias);
  jitter(p.branch3d.bias);
  jitter(p.fc_reduce.bias);
  jitter(p.fc_expand.bias);
  if (p.spatial_conv) jitter(p.spatial_conv->bias);
  if (p.residual_proj) jitter(p.residual_proj->bias);
  return p;
}

inline std::vector<Tensor<double>> block_tensors(EskBlockParams<double>& p) {
  std::vector<std::pair<std::string, Tensor<double>>> named;
  collect_params(p, "", named);
  std::vector<Tensor<double>> out;
  for (auto& [n, t] : named) out.push_back(t);
  return out;
}

/// Smallest |argument| over the block's ReLUs: the fused map feeding the
/// spatial gate and the normalised squeeze vector.
inline double relu_margin(const Tensor<double>& x, const EskBlockSpec& spec, EskBlockParams<double>& p) {
  const auto t = esk_trace(x, spec, p);
  double m = std::numeric_limits<double>::infinity();
  if (spec.enable_spatial_attention)
    for (double v : t.fused.data()) m = std::min(m, std::abs(v));
  const auto squeezed = reshape(global_avg_pool(t.fused), {x.dim(0), spec.out_channels});
  const auto normalised = batch_norm(dense(squeezed, p.fc_reduce), p.bn);
  for (double v : normalised.data()) m = std::min(m, std::abs(v));
  return m;
}

inline CheckResult block_gradient_case(const std::string& name, const EskBlockSpec& spec, const VerifyOptions& opts,
                                       double tol) {
  // A central difference that straddles a ReLU kink measures a one-sided
  // slope mix, not the derivative, so instances with a ReLU argument closer
  // than kMargin to zero are redrawn.
  constexpr double kMargin = 1e-3;
  CheckResult r{"gradient", name, true, 0.0, tol, ""};
  std::size_t redraws = 0;
  for (std::size_t s = 0; s < opts.gradient_seeds; ++s) {
    Rng rng(derive_seed(opts.seed, name, s));
    auto params = random_block(spec, rng);
    auto x = rnd({2, spec.in_channels, 8, 8}, rng);
    while (relu_margin(x, spec, params) < kMargin) {
      ++redraws;
      params = random_block(spec, rng);
      x = rnd({2, spec.in_channels, 8, 8}, rng);
    }
    std::vector<Tensor<double>> inputs{x};
    for (auto& t : block_tensors(params)) inputs.push_back(t);
    const auto weights = uniform_tensor<double>({2, spec.out_channels, 8, 8}, -1.0, 1.0, rng);
    GradCheckOptions o;
    o.corrupt_analytic = opts.corrupt == name ? 1.0 : 0.0;
    const auto res = check_gradients([&] { return sum(esk_forward(inputs[0], spec, params) * weights); }, inputs, o);
    if (res.max_rel_error > r.value) {
      r.value = res.max_rel_error;
      r.detail = "seed " + std::to_string(s) + ", tensor " + std::to_string(res.worst_input);
    }
  }
  r.passed = r.value < tol;
  r.detail += "; " + std::to_string(redraws) + " near-kink draws replaced";
  return r;
}

}  // namespace detail

/// Finite-difference checks of every differentiable op and of the ESK and SK
/// blocks, in 64-bit arithmetic with step 1e-4.
inline std::vector<CheckResult> gradient_suite(const VerifyOptions& opts) {
  using namespace detail;
  const std::size_t n = opts.gradient_seeds;
  const double loose = 1e-4, smooth = 1e-6;
  std::vector<CheckResult> out;
  auto add = [&](const std::string& name, double tol, auto make, Op op) {
    out.push_back(gradient_case(name, n, opts.seed, tol, make, op, opts.corrupt == name ? 1.0 : 0.0));
  };

  add("conv2d_same_dilated", loose,
      [](Rng& r) { return std::vector{rnd({2, 2, 6, 6}, r), rnd({3, 2, 3, 3}, r), rnd({3}, r)}; },
      [](const auto& in) { return conv2d(in[0], conv_from(in, 1, 3, 1, Padding::Same())); });
  add("conv2d_5x5", loose,
      [](Rng& r) { return std::vector{rnd({1, 2, 5, 7}, r), rnd({2, 2, 5, 5}, r), rnd({2}, r)}; },
      [](const auto& in) { return conv2d(in[0], conv_from(in, 1, 1, 1, Padding::Same())); });
  add("conv2d_strided", loose,
      [](Rng& r) { return std::vector{rnd({2, 3, 7, 6}, r), rnd({2, 3, 3, 3}, r), rnd({2}, r)}; },
      [](const auto& in) { return conv2d(in[0], conv_from(in, 1, 1, 2, Padding::Explicit(1))); });
  add("conv2d_2x2_same", loose,
      [](Rng& r) { return std::vector{rnd({1, 2, 4, 4}, r), rnd({2, 2, 2, 2}, r), rnd({2}, r)}; },
      [](const auto& in) { return conv2d(in[0], conv_from(in, 1, 1, 1, Padding::Same())); });
  add("dense", loose, [](Rng& r) { return std::vector{rnd({3, 5}, r), rnd({4, 5}, r), rnd({4}, r)}; },
      [](const auto& in) { return dense(in[0], DenseParams<double>{in[1], in[2]}); });
  add("batch_norm_train_vector", loose,
      [](Rng& r) { return std::vector{rnd({4, 3}, r), uniform_tensor<double>({3}, 0.5, 1.5, r, true), rnd({3}, r)}; },
      [](const auto& in) {
        auto bn = make_batch_norm<double>(3);
        bn.scale = in[1];
        bn.shift = in[2];
        return batch_norm(in[0], bn);
      });
  add("batch_norm_train_image", loose,
      [](Rng& r) { return std::vector{rnd({2, 2, 3, 3}, r), uniform_tensor<double>({2}, 0.5, 1.5, r, true), rnd({2}, r)}; },
      [](const auto& in) {
        auto bn = make_batch_norm<double>(2);
        bn.scale = in[1];
        bn.shift = in[2];
        return batch_norm(in[0], bn);
      });
  add("batch_norm_eval", loose,
      [](Rng& r) { return std::vector{rnd({3, 2}, r), uniform_tensor<double>({2}, 0.5, 1.5, r, true), rnd({2}, r)}; },
      [](const auto& in) {
        auto bn = make_batch_norm<double>(2);
        bn.scale = in[1];
        bn.shift = in[2];
        bn.running_mean = Tensor<double>::from({2}, {0.3, -0.2});
        bn.running_var = Tensor<double>::from({2}, {0.5, 2.0});
        bn.mode = Mode::eval;
        return batch_norm(in[0], bn);
      });
  add("relu", smooth, [](Rng& r) { return std::vector{away_from_zero({2, 3, 4, 4}, r)}; },
      [](const auto& in) { return relu(in[0]); });
  add("sigmoid", smooth, [](Rng& r) { return std::vector{uniform_tensor<double>({2, 3, 4, 4}, -4.0, 4.0, r, true)}; },
      [](const auto& in) { return sigmoid(in[0]); });
  add("add_channel_broadcast", smooth, [](Rng& r) { return std::vector{rnd({2, 3, 4, 4}, r), rnd({2, 3, 1, 1}, r)}; },
      [](const auto& in) { return in[0] + in[1]; });
  add("mul_channel_broadcast", smooth, [](Rng& r) { return std::vector{rnd({2, 3, 1, 1}, r), rnd({2, 3, 4, 4}, r)}; },
      [](const auto& in) { return in[0] * in[1]; });
  add("mul_spatial_broadcast", smooth, [](Rng& r) { return std::vector{rnd({2, 1, 4, 4}, r), rnd({2, 3, 4, 4}, r)}; },
      [](const auto& in) { return in[0] * in[1]; });
  add("sub_same_shape", smooth, [](Rng& r) { return std::vector{rnd({2, 3, 3}, r), rnd({2, 3, 3}, r)}; },
      [](const auto& in) { return in[0] - in[1]; });
  add("one_minus", smooth, [](Rng& r) { return std::vector{rnd({2, 3, 3}, r)}; },
      [](const auto& in) { return one_minus(in[0]); });
  add("global_avg_pool", smooth, [](Rng& r) { return std::vector{rnd({2, 3, 4, 5}, r)}; },
      [](const auto& in) { return global_avg_pool(in[0]); });
  add("max_pool2d", loose, [](Rng& r) { return std::vector{well_separated({2, 2, 4, 6}, r)}; },
      [](const auto& in) { return max_pool2d(in[0], 2); });
  add("upsample2d", smooth, [](Rng& r) { return std::vector{rnd({2, 2, 3, 3}, r)}; },
      [](const auto& in) { return upsample2d(in[0], 4); });
  add("concat_channels", smooth, [](Rng& r) { return std::vector{rnd({2, 2, 3, 3}, r), rnd({2, 3, 3, 3}, r)}; },
      [](const auto& in) { return concat_channels(in[0], in[1]); });
  add("reshape", smooth, [](Rng& r) { return std::vector{rnd({2, 6}, r)}; },
      [](const auto& in) { return reshape(in[0], {2, 3, 2, 1}); });
  add("mean", smooth, [](Rng& r) { return std::vector{rnd({3, 4}, r)}; }, [](const auto& in) { return mean(in[0]); });
  add("bce_loss_logits", 1e-5,
      [](Rng& r) { return std::vector{uniform_tensor<double>({2, 1, 4, 4}, -3.0, 3.0, r, true)}; },
      [](const auto& in) {
        std::vector<double> t(in[0].numel());
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i * 7 + 3) % 5 < 2 ? 1.0 : 0.0;
        return bce_loss(sigmoid(in[0]), Tensor<double>::from(in[0].shape(), t));
      });

  EskBlockSpec esk;
  esk.in_channels = 2;
  esk.out_channels = 4;
  out.push_back(block_gradient_case("esk_block", esk, opts, loose));
  EskBlockSpec same = esk;
  same.in_channels = 4;
  out.push_back(block_gradient_case("esk_block_identity_residual", same, opts, loose));
  EskBlockSpec sk = esk;
  sk.enable_spatial_attention = false;
  sk.enable_residual = false;
  out.push_back(block_gradient_case("sk_block", sk, opts, loose));
  return out;
}

/// Gate ranges, the exact gate partition, the zero-parameter identity and the
/// bitwise equality of the component-wise and module-wise block forms.
inline std::vector<CheckResult> gate_suite(const VerifyOptions& opts) {
  std::vector<CheckResult> out;
  bool in_range = true, partition = true, half = true, modular64 = true, modular32 = true;
  double identity_err = 0;
  for (std::size_t s = 0; s < opts.gradient_seeds; ++s) {
    Rng rng(derive_seed(opts.seed, "gates", s));
    for (bool same_width : {false, true}) {
      EskBlockSpec spec;
      spec.in_channels = same_width ? 4 : 3;
      spec.out_channels = 4;
      auto params = detail::random_block(spec, rng);
      const auto x = uniform_tensor<double>({2, spec.in_channels, 8, 8}, -1.0, 1.0, rng);
      const auto t = esk_trace(x, spec, params);
      for (const auto* g : {&t.beta, &t.alpha}) {
        const auto comp = one_minus(*g);
        for (std::size_t i = 0; i < g->numel(); ++i) {
          in_range = in_range && (*g)[i] > 0.0 && (*g)[i] < 1.0;
          partition = partition && (*g)[i] + comp[i] == 1.0;
        }
      }
      const auto modular = esk_forward_modular(x, spec, params);
      if (!std::equal(t.output.data().begin(), t.output.data().end(), modular.data().begin())) modular64 = false;

      // All attention parameters zeroed: both gates are exactly one half.
      for (auto* d : {&params.fc_reduce, &params.fc_expand}) {
        d->weight = Tensor<double>(d->weight.shape(), 0.0, true);
        d->bias = Tensor<double>(d->bias.shape(), 0.0, true);
      }
      params.bn.shift = Tensor<double>(params.bn.shift.shape(), 0.0, true);
      params.spatial_conv->kernel = Tensor<double>(params.spatial_conv->kernel.shape(), 0.0, true);
      params.spatial_conv->bias = Tensor<double>(params.spatial_conv->bias.shape(), 0.0, true);
      const auto z = esk_trace(x, spec, params);
      for (const auto* g : {&z.beta, &z.alpha})
        for (std::size_t i = 0; i < g->numel(); ++i) half = half && (*g)[i] == 0.5;
      const auto expect = z.residual + (z.f1 + z.f2);
      for (std::size_t i = 0; i < expect.numel(); ++i) identity_err = std::max(identity_err, std::abs(expect[i] - z.output[i]));

      Rng frng(derive_seed(opts.seed, "gates32", s));
      auto fp = make_esk_params<float>(spec, frng);
      const auto xf = uniform_tensor<float>({2, spec.in_channels, 8, 8}, -1.0f, 1.0f, frng);
      const auto a = esk_forward(xf, spec, fp), b = esk_forward_modular(xf, spec, fp);
      if (!std::equal(a.data().begin(), a.data().end(), b.data().begin())) modular32 = false;
    }
  }
  out.push_back({"gates", "beta_alpha_in_open_unit_interval", in_range, in_range ? 0.0 : 1.0, 0, ""});
  out.push_back({"gates", "partition_sums_to_one_exactly", partition, partition ? 0.0 : 1.0, 0, ""});
  out.push_back({"gates", "zero_attention_gives_half", half, half ? 0.0 : 1.0, 0, ""});
  out.push_back({"gates", "zero_attention_output_identity", identity_err <= 1e-6, identity_err, 1e-6, ""});
  out.push_back({"gates", "modular_form_bitwise_64bit", modular64, modular64 ? 0.0 : 1.0, 0, ""});
  out.push_back({"gates", "modular_form_bitwise_32bit", modular32, modular32 ? 0.0 : 1.0, 0, ""});
  return out;
}

/// The block with spatial attention and residual off against the reference
/// softmax selective-kernel unit. Two-way softmax over head logits (a1, a2)
/// weights branch 2 by sigmoid(a2 - a1), so the block's expand layer is set
/// to the difference of the reference heads.
inline CheckResult sk_oracle_check(const VerifyOptions& opts) {
  CheckResult r{"sk_oracle", "sk_block_matches_softmax_reference", true, 0.0, 1e-6, ""};
  for (std::size_t s = 0; s < opts.sk_inputs; ++s) {
    Rng rng(derive_seed(opts.seed, "sk_oracle", s));
    EskBlockSpec spec;
    spec.in_channels = 3;
    spec.out_channels = 4;
    spec.enable_spatial_attention = false;
    spec.enable_residual = false;
    auto p = detail::random_block(spec, rng);
    const std::size_t d = spec.effective_reduction(), c = spec.out_channels;
    reference::SkWeights w;
    w.k5 = p.branch5.kernel;
    w.b5 = p.branch5.bias;
    w.k3 = p.branch3d.kernel;
    w.b3 = p.branch3d.bias;
    w.reduce_w = p.fc_reduce.weight;
    w.reduce_b = p.fc_reduce.bias;
    w.bn_scale = p.bn.scale;
    w.bn_shift = p.bn.shift;
    w.bn_epsilon = p.bn.epsilon;
    w.dilation = spec.dilation;
    w.head1_w = uniform_tensor<double>({c, d}, -1.0, 1.0, rng);
    w.head1_b = uniform_tensor<double>({c}, -0.5, 0.5, rng);
    w.head2_w = uniform_tensor<double>({c, d}, -1.0, 1.0, rng);
    w.head2_b = uniform_tensor<double>({c}, -0.5, 0.5, rng);
    p.fc_expand.weight = w.head2_w - w.head1_w;
    p.fc_expand.bias = w.head2_b - w.head1_b;

    const auto x = uniform_tensor<double>({2, 3, 8, 8}, -1.0, 1.0, rng);
    const auto got = esk_forward(x, spec, p);
    const auto want = reference::sk_block(reference::from_tensor(x), w);
    for (std::size_t i = 0; i < want.v.size(); ++i) r.value = std::max(r.value, std::abs(got[i] - want.v[i]));
  }
  r.passed = r.value <= r.tolerance;
  return r;
}

/// Confusion counts and the five scores against a per-pixel walk on random
/// mask pairs, plus the hand-counted worked example.
inline std::vector<CheckResult> metric_suite(const VerifyOptions& opts) {
  bool counts_ok = true, scores_ok = true, ordering = true;
  double dice_err = 0;
  Rng rng(derive_seed(opts.seed, "metrics"));
  for (std::size_t k = 0; k < opts.metric_pairs; ++k) {
    std::bernoulli_distribution fg(std::uniform_real_distribution<double>(0.05, 0.95)(rng));
    std::vector<float> a(64), b(64);
    for (auto& v : a) v = fg(rng) ? 1.0f : 0.0f;
    for (auto& v : b) v = fg(rng) ? 1.0f : 0.0f;
    const auto pred = Tensor<float>::from({1, 8, 8}, a), gt = Tensor<float>::from({1, 8, 8}, b);
    const auto c = confusion(pred, gt);
    const auto o = reference::count_pixels(pred, gt);
    counts_ok = counts_ok && c == o;
    const auto m = compute_metrics(c);
    const double tp = static_cast<double>(o.tp), fp = static_cast<double>(o.fp), fn = static_cast<double>(o.fn),
                 tn = static_cast<double>(o.tn);
    if (o.tp + o.fp > 0 && o.tp + o.fn > 0 && o.tn + o.fp > 0) {
      scores_ok = scores_ok && m.jaccard == tp / (fp + tp + fn) * 100.0 && m.precision == tp / (tp + fp) * 100.0 &&
                  m.recall == tp / (tp + fn) * 100.0 && m.specificity == tn / (tn + fp) * 100.0;
    }
    if (o.tp + o.fp + o.fn > 0) dice_err = std::max(dice_err, std::abs(m.dice - 200.0 * tp / (2 * tp + fp + fn)));
    ordering = ordering && m.jaccard <= m.dice;
  }
  const auto ex = compute_metrics(ConfusionCounts{6, 2, 5, 3});
  auto r2 = [](double v) { return std::round(v * 100.0) / 100.0; };
  const bool worked = r2(ex.jaccard) == 54.55 && r2(ex.precision) == 75.00 && r2(ex.recall) == 66.67 &&
                      r2(ex.specificity) == 71.43 && r2(ex.dice) == 70.59;
  return {{"metrics", "confusion_matches_pixel_walk", counts_ok, counts_ok ? 0.0 : 1.0, 0, ""},
          {"metrics", "scores_match_formulas_exactly", scores_ok, scores_ok ? 0.0 : 1.0, 0, ""},
          {"metrics", "jaccard_le_dice", ordering, ordering ? 0.0 : 1.0, 0, ""},
          {"metrics", "dice_equals_set_form", dice_err <= 1e-9, dice_err, 1e-9, ""},
          {"metrics", "worked_example_2dp", worked, worked ? 0.0 : 1.0, 0,
           "J " + std::to_string(ex.jaccard) + " D " + std::to_string(ex.dice)}};
}

/// The 16-pixel curve fixture: eight positives and eight negatives with
/// probabilities on a 1/16 grid, including tied positive/negative scores.
inline std::pair<Tensor<float>, Tensor<float>> curve_fixture() {
  const std::vector<float> p{15, 14, 14, 12, 11, 9, 9, 6, 13, 10, 9, 7, 5, 3, 2, 0};
  const std::vector<float> g{1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0};
  std::vector<float> probs(16);
  for (std::size_t i = 0; i < 16; ++i) probs[i] = p[i] / 16.0f;
  return {Tensor<float>::from({1, 4, 4}, probs), Tensor<float>::from({1, 4, 4}, g)};
}

inline std::vector<CheckResult> curve_suite(const VerifyOptions& opts) {
  std::vector<CheckResult> out;
  const auto [prob, gt] = curve_fixture();
  const auto cd = curves<float>({prob}, {gt}, 17);
  std::vector<double> pv(prob.data().begin(), prob.data().end());
  std::vector<bool> lv;
  for (float g : gt.data()) lv.push_back(g == 1.0f);
  std::size_t pos = 0;
  for (bool l : lv) pos += l;
  const double neg = static_cast<double>(lv.size() - pos);

  std::set<std::tuple<double, double, double>> swept, oracle;
  for (const auto& pt : cd.points) swept.emplace(pt.fpr, pt.tpr, pt.precision);
  for (const auto& pt : reference::all_cutpoints(pv, lv)) {
    const double prec = pt.tp + pt.fp == 0 ? 1.0 : static_cast<double>(pt.tp) / static_cast<double>(pt.tp + pt.fp);
    oracle.emplace(static_cast<double>(pt.fp) / neg, static_cast<double>(pt.tp) / static_cast<double>(pos), prec);
  }
  const bool points_ok = swept == oracle;
  out.push_back({"curves", "points_match_all_cutpoints", points_ok, points_ok ? 0.0 : 1.0, 0,
                 std::to_string(swept.size()) + " vs " + std::to_string(oracle.size()) + " points"});
  const double rank = reference::rank_auc(pv, lv);
  out.push_back({"curves", "auc_matches_rank_statistic", cd.auc == rank, std::abs(cd.auc - rank), 0,
                 "auc " + std::to_string(cd.auc)});

  Rng rng(derive_seed(opts.seed, "curves"));
  std::vector<Tensor<float>> gts, perfect, constant;
  for (int k = 0; k < 4; ++k) {
    std::vector<float> g(32 * 32);
    std::bernoulli_distribution fg(0.3);
    for (auto& v : g) v = fg(rng) ? 1.0f : 0.0f;
    gts.push_back(Tensor<float>::from({1, 32, 32}, g));
    perfect.push_back(gts.back().clone());
    constant.push_back(Tensor<float>({1, 32, 32}, 0.37f));
  }
  const double auc_perfect = curves(perfect, gts, 101).auc;
  const double auc_constant = curves(constant, gts, 101).auc;
  out.push_back({"curves", "perfect_predictor_auc_one", auc_perfect == 1.0, std::abs(auc_perfect - 1.0), 0, ""});
  out.push_back({"curves", "constant_predictor_auc_half", std::abs(auc_constant - 0.5) <= 0.01,
                 std::abs(auc_constant - 0.5), 0.01, ""});
  return out;
}

inline VerifyReport run_verify(const VerifyOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  VerifyReport rep;
  for (auto&& part : {gradient_suite(opts), gate_suite(opts), std::vector<CheckResult>{sk_oracle_check(opts)},
                      metric_suite(opts), curve_suite(opts)})
    rep.checks.insert(rep.checks.end(), part.begin(), part.end());
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline void print_verify(std::ostream& os, const VerifyReport& rep) {
  os << std::left << std::setw(11) << "group" << std::setw(40) << "check" << std::setw(6) << "ok" << std::setw(14)
     << "worst" << "tolerance\n";
  for (const auto& c : rep.checks) {
    os << std::setw(11) << c.group << std::setw(40) << c.name << std::setw(6) << (c.passed ? "PASS" : "FAIL")
       << std::setw(14) << std::setprecision(3) << std::scientific << c.value << std::defaultfloat << c.tolerance;
    if (!c.detail.empty()) os << "  (" << c.detail << ")";
    os << '\n';
  }
  os << std::right;
}

}  // namespace esknet
