#include <catch_amalgamated.hpp>

#include <cmath>
#include <tuple>

#include "esknet/gradcheck.hpp"
#include "esknet/ops.hpp"
#include "esknet/parallel.hpp"
#include "esknet/random.hpp"
#include "esknet/verify.hpp"

using namespace esknet;
using Catch::Approx;

namespace {

Tensor<double> ramp(Shape s, double start = 1.0) {
  std::vector<double> v(numel(s));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = start + static_cast<double>(i);
  return Tensor<double>::from(std::move(s), std::move(v));
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

ConvParams<double> conv_params(Tensor<double> k, Tensor<double> b, std::size_t dilation = 1, Padding pad = Padding::Same()) {
  ConvParams<double> p;
  p.kernel = std::move(k);
  p.bias = std::move(b);
  p.dilation = dilation;
  p.padding = pad;
  return p;
}

}  // namespace

TEST_CASE("tensor construction enforces shape and size") {
  REQUIRE_THROWS_AS(Tensor<float>::from({2, 2}, {1, 2, 3}), ShapeError);
  REQUIRE_THROWS_AS(Tensor<float>({2, 0}), ShapeError);
  const auto t = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t[4] == 5.0f);
  CHECK_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("conv2d with a 1x1 identity kernel returns the input") {
  const auto x = Tensor<double>({1, 3, 3}, 1.0);
  const auto y = conv2d(x, conv_params(Tensor<double>({1, 1, 1, 1}, 1.0), Tensor<double>({1}, 0.0)));
  CHECK(y.shape() == Shape{1, 3, 3});
  CHECK(bitwise_equal(x, y));
}

TEST_CASE("dilated same-padded conv2d equals a nested-loop convolution exactly") {
  const auto x = ramp({1, 1, 4, 4});
  const auto k = Tensor<double>::from({1, 1, 3, 3}, {1, -2, 3, 0, 1, 2, -1, 1, 2});
  const auto b = Tensor<double>::from({1}, {0.5});
  const auto y = conv2d(x, conv_params(k, b, 3));
  const auto want = reference::conv_same(reference::from_tensor(x), k, b, 3);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) CHECK(y[i] == want.v[i]);
}

TEST_CASE("same padding on random inputs matches the reference at several kernel sizes") {
  Rng rng(11);
  for (std::size_t k : {1, 2, 3, 4, 5})
    for (std::size_t dil : {1, 2, 3}) {
      const auto x = uniform_tensor<double>({2, 3, 7, 6}, -1, 1, rng);
      const auto kern = uniform_tensor<double>({2, 3, k, k}, -1, 1, rng);
      const auto b = uniform_tensor<double>({2}, -1, 1, rng);
      const auto y = conv2d(x, conv_params(kern, b, dil));
      const auto want = reference::conv_same(reference::from_tensor(x), kern, b, dil);
      for (std::size_t i = 0; i < want.v.size(); ++i) REQUIRE(y[i] == Approx(want.v[i]).margin(1e-12));
    }
}

TEST_CASE("effective span of a dilated kernel") {
  CHECK(effective_span(3, 3) == 7);
  CHECK(effective_span(5, 1) == 5);
  const auto g = conv_geometry(8, 8, 3, 3, 1, 3, Padding::Same());
  CHECK(g.out_h == 8);
  CHECK(g.pad_top == 3);
}

TEST_CASE("conv2d errors name the offending shapes") {
  const auto x = Tensor<float>({1, 2, 5, 5});
  ConvParams<float> p;
  p.kernel = Tensor<float>({1, 3, 3, 3});
  p.bias = Tensor<float>({1});
  try {
    conv2d(x, p);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1x2x5x5]") != std::string::npos);
    CHECK(msg.find("[1x3x3x3]") != std::string::npos);
  }
  ConvParams<float> q;
  q.kernel = Tensor<float>({1, 2, 3, 3});
  q.bias = Tensor<float>({1});
  q.padding = Padding::Explicit(0);
  q.dilation = 3;
  CHECK_THROWS_AS(conv2d(x, q), ShapeError);
}

TEST_CASE("conv2d is linear in its input") {
  Rng rng(3);
  const auto a = uniform_tensor<double>({2, 3, 6, 6}, -1, 1, rng);
  const auto b = uniform_tensor<double>({2, 3, 6, 6}, -1, 1, rng);
  const auto p = conv_params(uniform_tensor<double>({4, 3, 3, 3}, -1, 1, rng), Tensor<double>({4}, 0.0), 3);
  const auto lhs = conv2d(a + b, p);
  const auto rhs = conv2d(a, p) + conv2d(b, p);
  for (std::size_t i = 0; i < lhs.numel(); ++i) REQUIRE(std::abs(lhs[i] - rhs[i]) < 1e-9);
}

TEST_CASE("conv2d forward and backward are bitwise independent of the thread count") {
  Rng rng(5);
  const auto x = uniform_tensor<float>({4, 3, 8, 8}, -1, 1, rng);
  auto run = [&](unsigned threads) {
    set_num_threads(threads);
    Rng r(9);
    ConvParams<float> p;
    p.kernel = uniform_tensor<float>({5, 3, 3, 3}, -1, 1, r, true);
    p.bias = uniform_tensor<float>({5}, -1, 1, r, true);
    auto xin = x.clone();
    xin.set_requires_grad(true);
    const auto y = conv2d(xin, p);
    sum(y * y).backward();
    return std::tuple{y.clone(), p.kernel.grad()[0], std::vector<float>(p.kernel.grad().begin(), p.kernel.grad().end()),
                      std::vector<float>(xin.grad().begin(), xin.grad().end())};
  };
  const auto one = run(1);
  const auto three = run(3);
  set_num_threads(1);
  CHECK(bitwise_equal(std::get<0>(one), std::get<0>(three)));
  CHECK(std::get<2>(one) == std::get<2>(three));
  CHECK(std::get<3>(one) == std::get<3>(three));
}

TEST_CASE("global average pooling") {
  CHECK(global_avg_pool(Tensor<double>({1, 3, 3}, 4.25))[0] == 4.25);
  CHECK(global_avg_pool(Tensor<double>::from({1, 2, 2}, {1, 2, 3, 4}))[0] == 2.5);
  auto x = Tensor<double>({2, 3, 4}, 1.0, true);
  sum(global_avg_pool(x)).backward();
  for (double g : x.grad()) CHECK(g == Approx(1.0 / 12.0));
  CHECK(global_avg_pool(x).shape() == Shape{2, 1, 1});
}

TEST_CASE("dense layer") {
  const auto x = Tensor<double>::from({3}, {1, -2, 4});
  DenseParams<double> id{Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor<double>({3}, 0.0)};
  CHECK(bitwise_equal(reshape(dense(x, id), {3}), x));
  DenseParams<double> zero{Tensor<double>({2, 3}, 0.0), Tensor<double>::from({2}, {0.5, -1.5})};
  const auto yb = dense(x, zero);
  CHECK(yb[0] == 0.5);
  CHECK(yb[1] == -1.5);
  DenseParams<double> w{Tensor<double>::from({2, 3}, {0.5, 1, -1, 2, 0, 3}), Tensor<double>::from({2}, {1, 2})};
  const auto y = dense(x, w);
  CHECK(y[0] == Approx(0.5 * 1 + 1 * -2 + -1 * 4 + 1));
  CHECK(y[1] == Approx(2 * 1 + 0 * -2 + 3 * 4 + 2));
  CHECK_THROWS_AS(dense(Tensor<double>({4}), w), ShapeError);
}

TEST_CASE("batch normalisation modes") {
  Rng rng(1);
  const auto x = uniform_tensor<double>({3, 2}, -2, 2, rng);
  auto bn = make_batch_norm<double>(2);
  bn.mode = Mode::eval;
  const auto y = batch_norm(x, bn);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == Approx(x[i] / std::sqrt(1.0 + bn.epsilon)));

  auto bt = make_batch_norm<double>(2);
  bt.shift = Tensor<double>::from({2}, {0.3, -0.7});
  const auto c = batch_norm(Tensor<double>({4, 2, 3, 3}, 5.0), bt);
  for (std::size_t i = 0; i < c.numel(); ++i) CHECK(c[i] == Approx((i / 9) % 2 == 0 ? 0.3 : -0.7));
  // Running stats moved towards the batch statistics by the momentum.
  CHECK(bt.running_mean[0] == Approx(0.1 * 5.0));
  CHECK(bt.running_var[0] == Approx(0.9));

  CHECK_THROWS_AS(batch_norm(Tensor<double>({2, 3}), bn), ShapeError);
}

TEST_CASE("batch normalisation with a single value per channel uses the running statistics") {
  auto bn = make_batch_norm<double>(2);
  bn.running_mean = Tensor<double>::from({2}, {1.0, 2.0});
  const auto y = batch_norm(Tensor<double>::from({1, 2}, {3.0, 2.0}), bn);
  CHECK(y[0] == Approx(2.0 / std::sqrt(1.0 + bn.epsilon)));
  CHECK(y[1] == Approx(0.0));
  CHECK(bn.running_mean[0] == 1.0);
}

TEST_CASE("batch normalisation train-mode gradient matches finite differences") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng rng(s);
    auto x = uniform_tensor<double>({4, 3, 2, 2}, -1, 1, rng, true);
    auto bn = make_batch_norm<double>(3);
    bn.scale = uniform_tensor<double>({3}, 0.5, 1.5, rng, true);
    const auto w = uniform_tensor<double>({4, 3, 2, 2}, -1, 1, rng);
    const auto r = check_gradients([&] { return sum(batch_norm(x, bn) * w); }, {x, bn.scale, bn.shift});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("activations") {
  auto z = Tensor<double>::from({1}, {0.0}, true);
  const auto s = sigmoid(z);
  CHECK(s[0] == 0.5);
  s.backward();
  CHECK(z.grad()[0] == 0.25);
  CHECK(relu(Tensor<double>::from({3}, {-0.5, -2.0, -1e-9}))[1] == 0.0);
  const auto big = sigmoid(Tensor<float>::from({2}, {-30.0f, 30.0f}));
  CHECK(big[0] >= 0.0f);
  CHECK(big[1] <= 1.0f);
  CHECK(std::isfinite(big[0]));
  const auto mid = sigmoid(Tensor<double>::from({2}, {-30.0, 30.0}));
  CHECK(mid[0] > 0.0);
  CHECK(mid[1] < 1.0);
  CHECK(activation(Tensor<double>::from({1}, {-1.0}), Activation::relu)[0] == 0.0);
}

TEST_CASE("max pooling values, ties and errors") {
  CHECK(max_pool2d(Tensor<double>::from({1, 2, 2}, {1, 2, 3, 4}))[0] == 4.0);
  auto c = Tensor<double>({1, 4, 4}, 2.0, true);
  const auto y = max_pool2d(c);
  CHECK(y.shape() == Shape{1, 2, 2});
  sum(y).backward();
  const auto g = c.grad();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t q = 0; q < 4; ++q) CHECK(g[r * 4 + q] == ((r % 2 == 0 && q % 2 == 0) ? 1.0 : 0.0));

  Rng rng(2);
  const auto x = uniform_tensor<double>({2, 4, 4}, -1, 1, rng);
  const auto p = max_pool2d(x);
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t q = 0; q < 2; ++q) {
        double m = -1e9;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) m = std::max(m, x[ch * 16 + (2 * r + a) * 4 + 2 * q + b]);
        CHECK(p[ch * 4 + r * 2 + q] == m);
      }
  CHECK_THROWS_AS(max_pool2d(Tensor<double>({1, 3, 4})), ShapeError);
}

TEST_CASE("nearest upsampling") {
  Rng rng(4);
  const auto x = uniform_tensor<double>({2, 3, 3}, -1, 1, rng);
  CHECK(bitwise_equal(upsample2d(x, 1), x));
  const auto one = upsample2d(Tensor<double>({1, 1, 1}, 0.7), 4);
  CHECK(one.shape() == Shape{1, 4, 4});
  for (double v : one.data()) CHECK(v == 0.7);
  CHECK(sum(upsample2d(x, 3)).item() == Approx(9.0 * sum(x).item()));
  CHECK_THROWS_AS(upsample2d(x, 0), ShapeError);
}

TEST_CASE("elementwise identities and broadcasting") {
  Rng rng(6);
  const auto a = uniform_tensor<double>({2, 3, 4, 4}, -1, 1, rng);
  CHECK(bitwise_equal(a + Tensor<double>(a.shape(), 0.0), a));
  CHECK(bitwise_equal(a * Tensor<double>(a.shape(), 1.0), a));

  const auto beta = uniform_tensor<double>({2, 3, 1, 1}, 0, 1, rng);
  const auto scaled = beta * a;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) CHECK(scaled[(n * 3 + c) * 16 + i] == beta[n * 3 + c] * a[(n * 3 + c) * 16 + i]);

  // Explicitly tiled operands give bit-identical results to broadcasting.
  std::vector<double> tiled(a.numel());
  for (std::size_t i = 0; i < tiled.size(); ++i) tiled[i] = beta[i / 16];
  CHECK(bitwise_equal(Tensor<double>::from(a.shape(), tiled) * a, scaled));
  const auto alpha = uniform_tensor<double>({2, 1, 4, 4}, 0, 1, rng);
  std::vector<double> tiled_a(a.numel());
  for (std::size_t i = 0; i < tiled_a.size(); ++i) tiled_a[i] = alpha[(i / 48) * 16 + i % 16];
  CHECK(bitwise_equal(a + Tensor<double>::from(a.shape(), tiled_a), a + alpha));
  CHECK(bitwise_equal(elementwise(a, alpha, Elementwise::mul), a * alpha));

  CHECK_THROWS_AS(a + Tensor<double>({2, 2, 4, 4}), ShapeError);
}

TEST_CASE("broadcast gradients match finite differences") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng rng(s);
    auto a = uniform_tensor<double>({2, 3, 1, 1}, -1, 1, rng, true);
    auto b = uniform_tensor<double>({2, 3, 4, 4}, -1, 1, rng, true);
    auto c = uniform_tensor<double>({2, 1, 4, 4}, -1, 1, rng, true);
    const auto r = check_gradients([&] { return sum((a * b + c) * b); }, {a, b, c});
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("binary cross-entropy") {
  const auto t = Tensor<double>::from({1, 2, 2}, {1, 0, 1, 0});
  CHECK(bce_loss(t, t).item() == Approx(0.0).margin(1e-6));
  CHECK(bce_loss(Tensor<double>({1, 2, 2}, 0.5), t).item() == Approx(std::log(2.0)));
  CHECK(std::isfinite(bce_loss(Tensor<float>::from({2}, {0, 1}), Tensor<float>::from({2}, {1, 0})).item()));
  CHECK_THROWS_AS(bce_loss(Tensor<double>({1, 2, 2}, 0.5), Tensor<double>({1, 2, 2}, 0.5)), ShapeError);
  CHECK_THROWS_AS(bce_loss(Tensor<double>({4}, 0.5), t), ShapeError);

  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng rng(s);
    auto logits = uniform_tensor<double>({1, 3, 3}, -3, 3, rng, true);
    const auto tgt = Tensor<double>::from({1, 3, 3}, {1, 0, 0, 1, 1, 0, 1, 0, 1});
    CHECK(check_gradients([&] { return bce_loss(sigmoid(logits), tgt); }, {logits}).max_rel_error < 1e-5);
  }
}

TEST_CASE("backward semantics") {
  auto x = Tensor<double>::from({3}, {1, -2, 3}, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  sum(x * x).backward();
  CHECK(x.grad()[1] == -4.0);
  CHECK(x.grad()[2] == 6.0);

  // Multiple uses of a tensor accumulate.
  x.zero_grad();
  sum(x + x + x).backward();
  CHECK(x.grad()[0] == 3.0);

  const auto loss = sum(x * x);
  loss.backward();
  CHECK_THROWS_AS(loss.backward(), AutodiffError);
  CHECK_THROWS_AS((x * x).backward(), AutodiffError);
  CHECK_THROWS_AS(sum(Tensor<double>({2}, 1.0)).backward(), AutodiffError);
}

TEST_CASE("gradient check detects a corrupted gradient") {
  auto x = Tensor<double>::from({2}, {0.3, -0.4}, true);
  GradCheckOptions o;
  o.corrupt_analytic = 0.5;
  CHECK(check_gradients([&] { return sum(sigmoid(x)); }, {x}, o).max_rel_error > 1e-2);
  CHECK(check_gradients([&] { return sum(sigmoid(x)); }, {x}).max_rel_error < 1e-6);
}
