#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <sstream>

#include "esknet/trainer.hpp"

using namespace esknet;
using Catch::Approx;

namespace {

NetworkSpec tiny_spec(BlockKind block = BlockKind::esk) {
  NetworkSpec s;
  s.input_h = s.input_w = 16;
  s.base_channels = 2;
  s.block = block;
  return s;
}

std::vector<SampleRecord> tiny_samples(std::size_t n, std::uint64_t seed) {
  auto index = synth_dataset(n, 16, seed);
  return index.records;
}

TrainConfig quick(std::size_t epochs = 3) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  const TrainConfig c;
  CHECK(lr_schedule(0, c) == 1e-3);
  CHECK(lr_schedule(5, c) == 1e-3);
  CHECK(lr_schedule(9, c) == 1e-3);
  CHECK(lr_schedule(10, c) == 5e-4);
  CHECK(lr_schedule(12, c) == 5e-4);
  CHECK(lr_schedule(19, c) == 5e-4);
  CHECK(lr_schedule(20, c) == 2.5e-4);
  CHECK(lr_schedule(30, c) == 1.25e-4);
  CHECK(lr_schedule(35, c) == 1.25e-4);
  CHECK(lr_schedule(40, c) == 1e-4);
  CHECK(lr_schedule(45, c) == 1e-4);
  CHECK(lr_schedule(49, c) == 1e-4);
  double prev = lr_schedule(0, c);
  for (std::size_t e = 1; e < 500; ++e) {
    const double lr = lr_schedule(e, c);
    CHECK(lr <= prev);
    CHECK(lr >= c.lr_floor);
    prev = lr;
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.lr_floor = 1e-2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.validation_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("Adam with zero gradient leaves parameters unchanged") {
  auto p = Tensor<double>::from({3}, {0.5, -1.0, 2.0}, true);
  std::vector<Tensor<double>> params{p};
  AdamState<double> st;
  for (int k = 0; k < 3; ++k) {
    for (auto& g : params[0].mutable_grad()) g = 0.0;
    adam_step(params, st, 1e-3);
  }
  CHECK(p[0] == 0.5);
  CHECK(p[1] == -1.0);
  CHECK(p[2] == 2.0);

  // A parameter that never received a gradient is skipped.
  auto q = Tensor<double>::from({2}, {1.0, 1.0}, true);
  std::vector<Tensor<double>> two{p, q};
  AdamState<double> st2;
  two[0].mutable_grad()[0] = 1.0;
  adam_step(two, st2, 1e-2);
  CHECK(q[0] == 1.0);
  CHECK(p[0] != 0.5);
}

TEST_CASE("first Adam step moves each coordinate by about lr") {
  auto p = Tensor<double>::from({4}, {0.0, 0.0, 0.0, 0.0}, true);
  std::vector<Tensor<double>> params{p};
  const std::vector<double> g{3.0, -0.02, 1e3, -7.0};
  std::copy(g.begin(), g.end(), params[0].mutable_grad().begin());
  AdamState<double> st;
  adam_step(params, st, 1e-3);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p[i] == Approx(-1e-3 * (g[i] > 0 ? 1 : -1)).epsilon(1e-5));
  CHECK(st.step == 1);
}

TEST_CASE("Adam minimises a 2-D quadratic") {
  // f(x, y) = x^2 + 2 y^2 from (0.01, -0.01) at the default training rate.
  auto p = Tensor<double>::from({2}, {0.01, -0.01}, true);
  std::vector<Tensor<double>> params{p};
  AdamState<double> st;
  auto grad_norm = [&] { return std::hypot(2 * p[0], 4 * p[1]); };
  const double start = grad_norm();
  for (int k = 0; k < 50; ++k) {
    params[0].zero_grad();
    const auto x = p * p;
    sum(x * Tensor<double>::from({2}, {1.0, 2.0})).backward();
    adam_step(params, st, 1e-3);
  }
  CHECK(grad_norm() < 1e-3);
  CHECK(grad_norm() < start / 20);
}

TEST_CASE("Adam state mismatch is a shape error") {
  auto a = Tensor<double>({2}, 0.0, true), b = Tensor<double>({3}, 0.0, true);
  std::vector<Tensor<double>> one{a}, other{b}, two{a, b};
  AdamState<double> st;
  adam_step(one, st, 1e-3);
  CHECK_THROWS_AS(adam_step(other, st, 1e-3), ShapeError);
  CHECK_THROWS_AS(adam_step(two, st, 1e-3), ShapeError);
}

TEST_CASE("training is deterministic and logs the schedule") {
  const auto train = tiny_samples(6, 1), val = tiny_samples(2, 2);
  auto cfg = quick(3);
  cfg.lr_halving_period = 1;
  cfg.lr_floor = 1e-5;
  auto n1 = build<float>(tiny_spec(), 9), n2 = build<float>(tiny_spec(), 9);
  const auto a = fit(n1, train, val, cfg), b = fit(n2, train, val, cfg);
  CHECK(a.checkpoint == b.checkpoint);
  REQUIRE(a.log.epochs.size() == b.log.epochs.size());
  for (std::size_t e = 0; e < a.log.epochs.size(); ++e) {
    CHECK(a.log.epochs[e].train_loss == b.log.epochs[e].train_loss);
    CHECK(a.log.epochs[e].val_loss == b.log.epochs[e].val_loss);
    CHECK(a.log.epochs[e].lr == lr_schedule(e, cfg));
  }
  CHECK(a.log.steps == 9);  // 3 batches of 2 per epoch

  std::ostringstream os;
  write_train_log(os, a.log);
  CHECK(os.str().rfind("epoch\ttrain_loss\tval_loss\tlr\twall_seconds\n", 0) == 0);
  CHECK(os.str().find("# best_epoch=") != std::string::npos);
}

TEST_CASE("returned checkpoint is the best monitored epoch") {
  const auto train = tiny_samples(6, 3), val = tiny_samples(3, 4);
  auto cfg = quick(6);
  cfg.lr_initial = 3e-3;
  cfg.lr_floor = 1e-4;
  auto net = build<float>(tiny_spec(), 1);
  const auto r = fit(net, train, val, cfg);
  const auto& best = r.log.epochs[r.log.best_epoch];
  for (const auto& e : r.log.epochs) CHECK(best.val_loss <= e.val_loss);
  CHECK(r.checkpoint.epoch == r.log.best_epoch);
  auto restored = instantiate(r.checkpoint);
  CHECK(evaluate_loss(restored, val, cfg.batch_size) == best.val_loss);
}

TEST_CASE("early stopping fires after the patience window") {
  // One sample in batches of one: batch normalisation falls back to its
  // running statistics, so with frozen weights the loss repeats exactly.
  const auto train = tiny_samples(1, 5);
  for (std::size_t patience : {1, 3}) {
    auto cfg = quick(20);
    cfg.batch_size = 1;
    cfg.lr_initial = cfg.lr_floor = 0.0;
    cfg.early_stop_patience = patience;
    auto net = build<float>(tiny_spec(), 2);
    const auto r = fit(net, train, {}, cfg);
    CHECK(r.log.stop_reason == "early_stop");
    CHECK(r.log.epochs.size() == patience + 1);
    CHECK(r.log.best_epoch == 0);
  }
}

TEST_CASE("step cap, empty data and divergence") {
  const auto train = tiny_samples(4, 7);
  auto cfg = quick(5);
  cfg.max_steps = 3;
  auto net = build<float>(tiny_spec(BlockKind::plain), 3);
  const auto r = fit(net, train, {}, cfg);
  CHECK(r.log.steps == 3);
  CHECK(r.log.stop_reason == "max_steps");
  CHECK(r.log.epochs.back().val_loss == r.log.epochs.back().train_loss);

  CHECK_THROWS_AS(fit(net, {}, {}, cfg), DataError);

  // A NaN pixel is zeroed by the first ReLU; a NaN head bias reaches the loss.
  for (auto& [name, t] : net.named_parameters())
    if (name == "head5.bias") t.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(fit(net, train, {}, quick(2)), DivergenceError);
}

TEST_CASE("training reduces the loss") {
  const auto train = tiny_samples(4, 8);
  auto cfg = quick(8);
  cfg.lr_initial = 5e-3;
  cfg.lr_floor = 5e-3;
  auto net = build<float>(tiny_spec(), 4);
  const double before = evaluate_loss(net, train, 4);
  fit(net, train, {}, cfg);
  CHECK(evaluate_loss(net, train, 4) < 0.8 * before);
}

TEST_CASE("prediction returns one full-size map per sample") {
  auto net = build<float>(tiny_spec(), 4);
  const auto samples = tiny_samples(5, 9);
  const auto maps = predict(net, samples, 2);
  REQUIRE(maps.size() == 5);
  for (const auto& m : maps) CHECK(m.shape() == Shape{1, 16, 16});
  const auto one = predict(net, {samples[3]});
  // A single-sample batch takes a different GEMM path; agreement is to rounding.
  for (std::size_t i = 0; i < one[0].numel(); ++i) CHECK(one[0][i] == Approx(maps[3][i]).margin(1e-6));
}

TEST_CASE("fold preparation augments only the training portion") {
  auto index = synth_dataset(12, 24, 10);
  assign_folds(index, 3, 10);
  AugmentConfig aug;
  aug.multiplier = 3;
  const auto p = prepare_fold(index, 1, tiny_spec(), aug, true, 10);
  CHECK(p.test.size() == 4);
  CHECK(p.validation.size() == 2);
  CHECK(p.train.size() == 6 * 3);
  for (const auto& s : p.train) {
    CHECK(s.provenance == Provenance::augmented);
    CHECK(s.image.shape() == Shape{1, 16, 16});
  }
  for (const auto& s : p.test) CHECK(s.provenance == Provenance::synthetic);
  const auto q = prepare_fold(index, 1, tiny_spec(), aug, false, 10);
  CHECK(q.train.size() == 6);
  CHECK(q.manifest == p.manifest);
}

TEST_CASE("ablation runs four variants on identical folds") {
  auto index = synth_dataset(8, 16, 11);
  assign_folds(index, 2, 11);
  auto cfg = quick(1);
  const auto r = run_ablation(index, tiny_spec(), cfg, AugmentConfig{}, false);
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows[0].variant.name == "baseline_unet");
  CHECK(r.rows[3].variant.deep_supervision);
  for (const auto& row : r.rows) {
    CHECK(row.manifest_hash == r.rows[0].manifest_hash);
    CHECK(row.report.images.size() == 8);
    CHECK(row.logs.size() == 2);
  }
  CHECK(r.rows[0].params < r.rows[1].params);
  CHECK(r.rows[1].params < r.rows[2].params);
  CHECK(r.rows[2].params < r.rows[3].params);
  std::ostringstream os;
  write_ablation(os, r);
  const std::string text = os.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);
  CHECK(text.find(" +- ") != std::string::npos);

  DatasetIndex one_fold = index;
  one_fold.folds = {{0, 1, 2, 3, 4, 5, 6, 7}};
  CHECK_THROWS_AS(run_ablation(one_fold, tiny_spec(), cfg, AugmentConfig{}, false), ConfigError);
}
