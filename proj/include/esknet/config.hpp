#pragma once

#include <set>
#include <string>

#include "esknet/augment.hpp"
#include "esknet/checkpoint.hpp"
#include "esknet/kv.hpp"
#include "esknet/trainer.hpp"

namespace esknet {

struct DataSettings {
  std::string root;  // empty: generate a synthetic dataset
  std::size_t synthetic_count = 40;
  std::size_t synthetic_size = 64;
  std::size_t folds = 4;
  std::size_t fold = 0;
  bool augment = true;
};

struct EvalSettings {
  double threshold = 0.5;
  std::size_t n_thresholds = 101;
  double degrade_sigma = 0.2;
  std::size_t degrade_kernel = 5;
};

/// Everything a command needs, resolved from profile defaults, an optional
/// config file and command-line overrides (later sources win).
struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  NetworkSpec net;
  TrainConfig train;
  AugmentConfig augment;
  DataSettings data;
  EvalSettings eval;
};

/// desk: 64x64 synthetic data, base width 8, batch 4, short schedule.
/// paper: 384x384, batch 12, 50 epochs, x20 augmentation; needs a real dataset.
inline KeyValues profile_defaults(const std::string& name) {
  if (name == "desk") {
    return KeyValues::parse(R"(
net.input_h = 64
net.input_w = 64
net.base_channels = 8
train.epochs = 15
train.batch_size = 4
augment.multiplier = 4
data.synthetic_size = 64
data.synthetic_count = 40
)");
  }
  if (name == "paper") {
    return KeyValues::parse(R"(
net.input_h = 384
net.input_w = 384
net.base_channels = 64
train.epochs = 50
train.batch_size = 12
augment.multiplier = 20
data.synthetic_size = 384
)");
  }
  throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
}

namespace detail {
inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "run.profile", "run.seed", "run.threads",
      "net.input_size", "net.input_h", "net.input_w", "net.base_channels", "net.widths", "net.block",
      "net.deep_supervision", "net.supervision_factors", "net.reduction_dim", "net.dilation",
      "train.lr_initial", "train.lr_halving_period", "train.lr_floor", "train.epochs", "train.batch_size",
      "train.validation_fraction", "train.early_stop_patience", "train.max_steps",
      "augment.enabled", "augment.rotation_low", "augment.rotation_high", "augment.elastic_alpha",
      "augment.elastic_sigma", "augment.elastic_alpha_affine", "augment.noise_std", "augment.blur_kernel",
      "augment.gamma", "augment.multiplier", "augment.op_probability",
      "data.root", "data.synthetic_count", "data.synthetic_size", "data.folds", "data.fold",
      "eval.threshold", "eval.n_thresholds", "eval.degrade_sigma", "eval.degrade_kernel"};
  return keys;
}

inline std::array<double, 2> get_range(const KeyValues& kv, const std::string& key, std::array<double, 2> fallback) {
  const auto v = kv.get_list<double>(key, {fallback[0], fallback[1]});
  if (v.size() != 2) throw ConfigError("key " + key + ": expected two comma-separated numbers");
  return {v[0], v[1]};
}
}  // namespace detail

inline RunConfig run_config_from(const KeyValues& kv) {
  for (const auto& [k, v] : kv.entries())
    if (!detail::known_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");

  RunConfig c;
  c.profile = kv.get_string("run.profile", c.profile);
  c.seed = kv.get_number<std::uint64_t>("run.seed", c.seed);
  c.threads = kv.get_number<std::size_t>("run.threads", c.threads);
  c.net = spec_from_kv(kv);

  auto& t = c.train;
  t.lr_initial = kv.get_number<double>("train.lr_initial", t.lr_initial);
  t.lr_halving_period = kv.get_number<std::size_t>("train.lr_halving_period", t.lr_halving_period);
  t.lr_floor = kv.get_number<double>("train.lr_floor", t.lr_floor);
  t.epochs = kv.get_number<std::size_t>("train.epochs", t.epochs);
  t.batch_size = kv.get_number<std::size_t>("train.batch_size", t.batch_size);
  t.validation_fraction = kv.get_number<double>("train.validation_fraction", t.validation_fraction);
  t.early_stop_patience = kv.get_number<std::size_t>("train.early_stop_patience", t.early_stop_patience);
  t.max_steps = kv.get_number<std::size_t>("train.max_steps", t.max_steps);
  t.seed = c.seed;

  auto& a = c.augment;
  a.rotation_low = detail::get_range(kv, "augment.rotation_low", a.rotation_low);
  a.rotation_high = detail::get_range(kv, "augment.rotation_high", a.rotation_high);
  a.elastic_alpha = kv.get_number<double>("augment.elastic_alpha", a.elastic_alpha);
  a.elastic_sigma = kv.get_number<double>("augment.elastic_sigma", a.elastic_sigma);
  a.elastic_alpha_affine = kv.get_number<double>("augment.elastic_alpha_affine", a.elastic_alpha_affine);
  a.noise_std = detail::get_range(kv, "augment.noise_std", a.noise_std);
  a.blur_kernel = kv.get_number<std::size_t>("augment.blur_kernel", a.blur_kernel);
  a.gamma = kv.get_number<double>("augment.gamma", a.gamma);
  a.multiplier = kv.get_number<std::size_t>("augment.multiplier", a.multiplier);
  a.op_probability = kv.get_number<double>("augment.op_probability", a.op_probability);

  auto& d = c.data;
  d.root = kv.get_string("data.root", d.root);
  d.synthetic_count = kv.get_number<std::size_t>("data.synthetic_count", d.synthetic_count);
  d.synthetic_size = kv.get_number<std::size_t>("data.synthetic_size", d.synthetic_size);
  d.folds = kv.get_number<std::size_t>("data.folds", d.folds);
  d.fold = kv.get_number<std::size_t>("data.fold", d.fold);
  d.augment = kv.get_bool("augment.enabled", d.augment);

  auto& e = c.eval;
  e.threshold = kv.get_number<double>("eval.threshold", e.threshold);
  e.n_thresholds = kv.get_number<std::size_t>("eval.n_thresholds", e.n_thresholds);
  e.degrade_sigma = kv.get_number<double>("eval.degrade_sigma", e.degrade_sigma);
  e.degrade_kernel = kv.get_number<std::size_t>("eval.degrade_kernel", e.degrade_kernel);

  c.net.validate();
  t.validate();
  a.validate();
  if (d.folds < 1) throw ConfigError("data.folds must be >= 1");
  if (d.fold >= d.folds) throw ConfigError("data.fold must be < data.folds");
  if (e.threshold < 0 || e.threshold > 1) throw ConfigError("eval.threshold must lie in [0, 1]");
  if (e.n_thresholds < 2) throw ConfigError("eval.n_thresholds must be >= 2");
  if (c.threads == 0) throw ConfigError("run.threads must be >= 1");
  return c;
}

/// Full effective configuration; parsing it back yields the same RunConfig.
inline KeyValues to_kv(const RunConfig& c) {
  KeyValues kv = spec_to_kv(c.net);
  auto num = [&](const std::string& k, double v) { kv.set(k, KeyValues::number(v)); };
  auto cnt = [&](const std::string& k, std::uint64_t v) { kv.set(k, std::to_string(v)); };
  auto range = [&](const std::string& k, const std::array<double, 2>& r) {
    kv.set(k, KeyValues::number(r[0]) + "," + KeyValues::number(r[1]));
  };
  kv.set("run.profile", c.profile);
  cnt("run.seed", c.seed);
  cnt("run.threads", c.threads);
  num("train.lr_initial", c.train.lr_initial);
  cnt("train.lr_halving_period", c.train.lr_halving_period);
  num("train.lr_floor", c.train.lr_floor);
  cnt("train.epochs", c.train.epochs);
  cnt("train.batch_size", c.train.batch_size);
  num("train.validation_fraction", c.train.validation_fraction);
  cnt("train.early_stop_patience", c.train.early_stop_patience);
  cnt("train.max_steps", c.train.max_steps);
  kv.set("augment.enabled", c.data.augment ? "true" : "false");
  range("augment.rotation_low", c.augment.rotation_low);
  range("augment.rotation_high", c.augment.rotation_high);
  num("augment.elastic_alpha", c.augment.elastic_alpha);
  num("augment.elastic_sigma", c.augment.elastic_sigma);
  num("augment.elastic_alpha_affine", c.augment.elastic_alpha_affine);
  range("augment.noise_std", c.augment.noise_std);
  cnt("augment.blur_kernel", c.augment.blur_kernel);
  num("augment.gamma", c.augment.gamma);
  cnt("augment.multiplier", c.augment.multiplier);
  num("augment.op_probability", c.augment.op_probability);
  kv.set("data.root", c.data.root);
  cnt("data.synthetic_count", c.data.synthetic_count);
  cnt("data.synthetic_size", c.data.synthetic_size);
  cnt("data.folds", c.data.folds);
  cnt("data.fold", c.data.fold);
  num("eval.threshold", c.eval.threshold);
  cnt("eval.n_thresholds", c.eval.n_thresholds);
  num("eval.degrade_sigma", c.eval.degrade_sigma);
  cnt("eval.degrade_kernel", c.eval.degrade_kernel);
  return kv;
}

/// Profile defaults, then the config file, then explicit overrides.
inline RunConfig resolve_config(const std::string& profile, const std::string& config_path,
                                const KeyValues& overrides) {
  std::string chosen = profile;
  KeyValues file;
  if (!config_path.empty()) file = KeyValues::load(config_path);
  if (chosen.empty()) chosen = file.get_string("run.profile", "desk");
  KeyValues kv = profile_defaults(chosen);
  kv.merge(file);
  kv.merge(overrides);
  kv.set("run.profile", chosen);
  return run_config_from(kv);
}

}  // namespace esknet
