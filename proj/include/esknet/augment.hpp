#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "esknet/data.hpp"

namespace esknet {

struct AugmentConfig {
  std::array<double, 2> rotation_low{0.0, 20.0};     // degrees
  std::array<double, 2> rotation_high{340.0, 357.0};  // degrees
  double elastic_alpha = 10.0;
  double elastic_sigma = 2.0;
  double elastic_alpha_affine = 2.0;
  std::array<double, 2> noise_std{5.0, 10.0};  // on the 0-255 scale
  std::size_t blur_kernel = 3;
  double gamma = 1.0;
  std::size_t multiplier = 20;
  double op_probability = 0.5;

  void validate() const {
    if (multiplier < 1) throw ConfigError("augment.multiplier must be >= 1");
    if (blur_kernel < 1 || blur_kernel % 2 == 0) throw ConfigError("augment.blur_kernel must be odd and >= 1");
    if (noise_std[0] < 0 || noise_std[1] < noise_std[0]) throw ConfigError("augment noise std range is invalid");
    if (gamma <= 0) throw ConfigError("augment.gamma must be positive");
  }
};

enum class FlipAxis { x, y };

namespace detail {

inline std::size_t reflect101(long i, std::size_t n) {
  if (n == 1) return 0;
  const long m = static_cast<long>(n);
  while (i < 0 || i >= m) i = i < 0 ? -i : 2 * m - 2 - i;
  return static_cast<std::size_t>(i);
}

/// k x k mean filter with reflect-101 borders; k = 1 copies.
inline std::vector<float> box_blur(const std::vector<float>& src, std::size_t h, std::size_t w, std::size_t k) {
  if (k <= 1) return src;
  const long r = static_cast<long>(k / 2);
  std::vector<double> tmp(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (long d = -r; d <= r; ++d) s += src[y * w + reflect101(static_cast<long>(x) + d, w)];
      tmp[y * w + x] = s;
    }
  std::vector<float> out(h * w);
  const double norm = 1.0 / static_cast<double>(k * k);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (long d = -r; d <= r; ++d) s += tmp[reflect101(static_cast<long>(y) + d, h) * w + x];
      out[y * w + x] = static_cast<float>(s * norm);
    }
  return out;
}

inline std::vector<double> gaussian_filter(const std::vector<double>& src, std::size_t h, std::size_t w, double sigma) {
  const long r = static_cast<long>(std::ceil(4.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double total = 0;
  for (long i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  std::vector<double> tmp(h * w), out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (long d = -r; d <= r; ++d) s += k[d + r] * src[y * w + reflect101(static_cast<long>(x) + d, w)];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (long d = -r; d <= r; ++d) s += k[d + r] * tmp[reflect101(static_cast<long>(y) + d, h) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

/// Resamples image (bilinear) and mask (nearest) through an inverse map
/// dst(y, x) <- src(map(y, x)). Points outside the source read 0.
inline void warp(SampleRecord& s, const std::function<std::array<double, 2>(double, double)>& inverse_map) {
  const std::size_t h = s.image.dim(1), w = s.image.dim(2);
  const float* img = s.image.data().data();
  const float* msk = s.mask.data().data();
  std::vector<float> out_img(h * w, 0.0f), out_msk(h * w, 0.0f);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto [sy, sx] = inverse_map(static_cast<double>(y), static_cast<double>(x));
      if (sy > -1.0 && sy < static_cast<double>(h) && sx > -1.0 && sx < static_cast<double>(w)) {
        // Bilinear with zero outside the frame.
        const double fy0 = std::floor(sy), fx0 = std::floor(sx);
        const double fy = sy - fy0, fx = sx - fx0;
        double acc = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const long yy = static_cast<long>(fy0) + dy, xx = static_cast<long>(fx0) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
            acc += (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx) * img[yy * static_cast<long>(w) + xx];
          }
        out_img[y * w + x] = static_cast<float>(acc);
      }
      const long ny = std::lround(sy), nx = std::lround(sx);
      if (ny >= 0 && nx >= 0 && ny < static_cast<long>(h) && nx < static_cast<long>(w))
        out_msk[y * w + x] = msk[ny * static_cast<long>(w) + nx] >= 0.5f ? 1.0f : 0.0f;
    }
  s.image = Tensor<float>::from({1, h, w}, std::move(out_img));
  s.mask = Tensor<float>::from({1, h, w}, std::move(out_msk));
}

inline std::string fmt_op(const std::string& name, double v) {
  std::ostringstream oss;
  oss.precision(4);
  oss << name << '(' << v << ')';
  return oss.str();
}

}  // namespace detail

// Geometric ops move image and mask together; photometric ops touch the image only.

inline SampleRecord flip(const SampleRecord& in, FlipAxis axis) {
  SampleRecord s = in;
  const std::size_t h = in.image.dim(1), w = in.image.dim(2);
  std::vector<float> img(h * w), msk(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t src = axis == FlipAxis::x ? y * w + (w - 1 - x) : (h - 1 - y) * w + x;
      img[y * w + x] = in.image[src];
      msk[y * w + x] = in.mask[src];
    }
  s.image = Tensor<float>::from({1, h, w}, std::move(img));
  s.mask = Tensor<float>::from({1, h, w}, std::move(msk));
  s.ops.push_back(axis == FlipAxis::x ? "flip_x" : "flip_y");
  return s;
}

/// Counter-clockwise rotation about the image centre, zero fill outside.
inline SampleRecord rotate(const SampleRecord& in, double degrees) {
  SampleRecord s = in;
  const double cy = (static_cast<double>(in.image.dim(1)) - 1) / 2, cx = (static_cast<double>(in.image.dim(2)) - 1) / 2;
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), sn = std::sin(th);
  detail::warp(s, [&](double y, double x) {
    const double dy = y - cy, dx = x - cx;
    // Inverse of a CCW rotation in image coordinates (y down).
    return std::array<double, 2>{cy + c * dy - sn * dx, cx + sn * dy + c * dx};
  });
  s.ops.push_back(detail::fmt_op("rotate", degrees));
  return s;
}

/// Random affine jitter of a centred square by up to alpha_affine pixels,
/// followed by a Gaussian-smoothed displacement field scaled by alpha.
inline SampleRecord elastic(const SampleRecord& in, double alpha, double sigma, double alpha_affine, Rng& rng) {
  SampleRecord s = in;
  const std::size_t h = in.image.dim(1), w = in.image.dim(2);
  std::uniform_real_distribution<double> jitter(-alpha_affine, alpha_affine);
  const double cy = static_cast<double>(h) / 2, cx = static_cast<double>(w) / 2;
  const double sq = static_cast<double>(std::min(h, w)) / 3;
  const std::array<std::array<double, 2>, 3> src{{{cy + sq, cx + sq}, {cy - sq, cx + sq}, {cy - sq, cx - sq}}};
  std::array<std::array<double, 2>, 3> dst{};
  for (std::size_t i = 0; i < 3; ++i) dst[i] = {src[i][0] + jitter(rng), src[i][1] + jitter(rng)};

  // Affine taking dst points back to src points: [y x 1] * M = src.
  auto solve3 = [](std::array<std::array<double, 3>, 3> a, std::array<double, 3> b) {
    for (int col = 0; col < 3; ++col) {
      int piv = col;
      for (int r = col + 1; r < 3; ++r)
        if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
      std::swap(a[col], a[piv]);
      std::swap(b[col], b[piv]);
      for (int r = 0; r < 3; ++r) {
        if (r == col) continue;
        const double f = a[r][col] / a[col][col];
        for (int k = 0; k < 3; ++k) a[r][k] -= f * a[col][k];
        b[r] -= f * b[col];
      }
    }
    return std::array<double, 3>{b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]};
  };
  std::array<std::array<double, 3>, 3> m{};
  for (std::size_t i = 0; i < 3; ++i) m[i] = {dst[i][0], dst[i][1], 1.0};
  const auto my = solve3(m, {src[0][0], src[1][0], src[2][0]});
  const auto mx = solve3(m, {src[0][1], src[1][1], src[2][1]});

  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<double> fy(h * w), fx(h * w);
  for (auto& v : fy) v = unit(rng);
  for (auto& v : fx) v = unit(rng);
  const auto dy = detail::gaussian_filter(fy, h, w, sigma);
  const auto dx = detail::gaussian_filter(fx, h, w, sigma);

  detail::warp(s, [&](double y, double x) {
    const std::size_t i = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
    const double qy = y + alpha * dy[i], qx = x + alpha * dx[i];
    return std::array<double, 2>{my[0] * qy + my[1] * qx + my[2], mx[0] * qy + mx[1] * qx + mx[2]};
  });
  s.ops.push_back("elastic");
  return s;
}

/// Additive Gaussian noise on the 0-255 scale, clamped and quantised to 8 bits.
inline SampleRecord gaussian_noise(const SampleRecord& in, double stddev, Rng& rng) {
  SampleRecord s = in;
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<float> img(in.image.numel());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(static_cast<double>(in.image[i]) * 255.0 + n(rng), 0.0, 255.0);
    img[i] = static_cast<float>(std::round(v) / 255.0);
  }
  s.image = Tensor<float>::from(in.image.shape(), std::move(img));
  s.ops.push_back(detail::fmt_op("noise", stddev));
  return s;
}

/// k x k box blur on the 0-255 scale, quantised to 8 bits.
inline SampleRecord blur(const SampleRecord& in, std::size_t k) {
  SampleRecord s = in;
  const std::size_t h = in.image.dim(1), w = in.image.dim(2);
  std::vector<float> scaled(in.image.numel());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = in.image[i] * 255.0f;
  auto out = detail::box_blur(scaled, h, w, k);
  for (auto& v : out) v = static_cast<float>(std::round(std::clamp(v, 0.0f, 255.0f)) / 255.0);
  s.image = Tensor<float>::from(in.image.shape(), std::move(out));
  s.ops.push_back(detail::fmt_op("blur", static_cast<double>(k)));
  return s;
}

/// image^gamma; gamma = 1 leaves values untouched.
inline SampleRecord gamma_transform(const SampleRecord& in, double gamma) {
  SampleRecord s = in;
  if (gamma != 1.0) {
    std::vector<float> img(in.image.numel());
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(std::pow(in.image[i], gamma));
    s.image = Tensor<float>::from(in.image.shape(), std::move(img));
  } else {
    s.image = in.image.clone();
  }
  s.ops.push_back(detail::fmt_op("gamma", gamma));
  return s;
}

/// Emits config.multiplier variants. Variant v uses its own seed derived from
/// (seed, sample id, v); each op fires independently with op_probability, in
/// the order flip_x, flip_y, rotate, elastic, noise, blur, gamma, and at least
/// one op always fires.
inline std::vector<SampleRecord> augment(const SampleRecord& sample, const AugmentConfig& config, std::uint64_t seed) {
  config.validate();
  check_sample(sample);
  std::vector<SampleRecord> out;
  out.reserve(config.multiplier);
  constexpr std::size_t kOps = 7;
  for (std::size_t v = 0; v < config.multiplier; ++v) {
    const std::uint64_t vseed = derive_seed(seed, sample.id, v);
    Rng rng(vseed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::array<bool, kOps> fire{};
    bool any = false;
    for (auto& f : fire) any |= (f = u01(rng) < config.op_probability);
    if (!any) fire[static_cast<std::size_t>(u01(rng) * kOps) % kOps] = true;

    SampleRecord s = sample;
    s.ops.clear();
    if (fire[0]) s = flip(s, FlipAxis::x);
    if (fire[1]) s = flip(s, FlipAxis::y);
    if (fire[2]) {
      const auto& range = u01(rng) < 0.5 ? config.rotation_low : config.rotation_high;
      s = rotate(s, range[0] + (range[1] - range[0]) * u01(rng));
    }
    if (fire[3]) s = elastic(s, config.elastic_alpha, config.elastic_sigma, config.elastic_alpha_affine, rng);
    if (fire[4]) s = gaussian_noise(s, config.noise_std[0] + (config.noise_std[1] - config.noise_std[0]) * u01(rng), rng);
    if (fire[5]) s = blur(s, config.blur_kernel);
    if (fire[6]) s = gamma_transform(s, config.gamma);

    s.id = sample.id + "#aug" + std::to_string(v);
    s.provenance = Provenance::augmented;
    s.seed = vseed;
    out.push_back(std::move(s));
  }
  return out;
}

/// image * (1 + n), n ~ N(0, sigma^2), clamped to [0, 1].
inline Tensor<float> multiplicative_noise(const Tensor<float>& image, double sigma, Rng& rng) {
  std::vector<float> out(image.numel());
  if (sigma == 0.0) {
    std::copy(image.data().begin(), image.data().end(), out.begin());
  } else {
    std::normal_distribution<double> n(0.0, sigma);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<float>(std::clamp(static_cast<double>(image[i]) * (1.0 + n(rng)), 0.0, 1.0));
  }
  return Tensor<float>::from(image.shape(), std::move(out));
}

/// Robustness degradation: multiplicative speckle noise, then a box blur.
/// The mask is carried over untouched.
inline SampleRecord degrade(const SampleRecord& sample, double noise_sigma = 0.2, std::size_t blur_kernel = 5,
                            std::uint64_t seed = 0) {
  check_sample(sample);
  Rng rng(derive_seed(seed, sample.id));
  SampleRecord s = sample;
  const Tensor<float> noisy = multiplicative_noise(sample.image, noise_sigma, rng);
  const std::size_t h = sample.image.dim(1), w = sample.image.dim(2);
  s.image = Tensor<float>::from(sample.image.shape(),
                                detail::box_blur(std::vector<float>(noisy.data().begin(), noisy.data().end()), h, w,
                                                 blur_kernel));
  s.provenance = Provenance::degraded;
  s.ops.push_back(detail::fmt_op("degrade_noise", noise_sigma));
  s.ops.push_back(detail::fmt_op("degrade_blur", static_cast<double>(blur_kernel)));
  return s;
}

}  // namespace esknet
