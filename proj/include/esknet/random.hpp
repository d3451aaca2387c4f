#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "esknet/tensor.hpp"

namespace esknet {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a label/index.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label, std::uint64_t index = 0) {
  // FNV-1a over the label, then a splitmix64 finaliser.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : label) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::uint64_t z = base ^ h ^ (index * 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, T lo, T hi, Rng& rng, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, T mean, T stddev, Rng& rng, bool requires_grad = false) {
  std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace esknet
