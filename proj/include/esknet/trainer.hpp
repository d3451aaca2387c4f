#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "esknet/augment.hpp"
#include "esknet/checkpoint.hpp"
#include "esknet/metrics.hpp"

namespace esknet {

struct TrainConfig {
  double lr_initial = 1e-3;
  std::size_t lr_halving_period = 10;
  double lr_floor = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 12;
  double validation_fraction = 0.2;
  std::size_t early_stop_patience = 5;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0 = no cap on optimizer steps

  void validate() const {
    if (lr_floor > lr_initial) throw ConfigError("train.lr_floor must not exceed train.lr_initial");
    if (lr_halving_period == 0) throw ConfigError("train.lr_halving_period must be >= 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (validation_fraction < 0 || validation_fraction >= 1) throw ConfigError("train.validation_fraction must be in [0, 1)");
  }
};

/// Step decay: halve every lr_halving_period epochs, never below lr_floor.
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  const auto halvings = static_cast<int>(epoch / cfg.lr_halving_period);
  return std::max(cfg.lr_floor, std::ldexp(cfg.lr_initial, -halvings));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One bias-corrected Adam update using each tensor's accumulated gradient.
/// Tensors that received no gradient are skipped entirely (their moments are
/// left as they are), so an untouched parameter never moves.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr, const AdamHyper& h = {}) {
  if (state.m.empty()) {
    for (auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state tracks a different parameter list");
  ++state.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.m[i].size() != p.numel()) {
      throw ShapeError("adam_step: state for parameter " + std::to_string(i) + " has " +
                       std::to_string(state.m[i].size()) + " entries, parameter has " + std::to_string(p.numel()));
    }
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = static_cast<T>(h.beta1 * m[k] + (1.0 - h.beta1) * g[k]);
      v[k] = static_cast<T>(h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k]);
      const double mh = m[k] / c1, vh = v[k] / c2;
      w[k] = static_cast<T>(w[k] - lr * mh / (std::sqrt(vh) + h.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;  // monitored loss: validation when available, else training
  double lr = 0;
  double wall_seconds = 0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  std::string stop_reason;
};

struct TrainResult {
  Checkpoint checkpoint;  // parameters at the best monitored epoch
  TrainLog log;
};

/// Stacks 1xHxW tensors into an N x 1 x H x W batch.
inline Tensor<float> stack(const std::vector<const Tensor<float>*>& items) {
  const Shape& s = items.front()->shape();
  std::vector<float> v;
  v.reserve(items.size() * items.front()->numel());
  for (const auto* t : items) {
    if (t->shape() != s) throw ShapeError("cannot batch tensors of shapes " + to_string(s) + " and " + to_string(t->shape()));
    v.insert(v.end(), t->data().begin(), t->data().end());
  }
  Shape out{items.size()};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor<float>::from(std::move(out), std::move(v));
}

/// Mean total loss over samples, in eval mode.
inline double evaluate_loss(NetworkParams<float>& net, const std::vector<SampleRecord>& samples, std::size_t batch) {
  net.set_mode(Mode::eval);
  double total = 0;
  for (std::size_t i = 0; i < samples.size(); i += batch) {
    std::vector<const Tensor<float>*> imgs, masks;
    for (std::size_t k = i; k < std::min(samples.size(), i + batch); ++k) {
      imgs.push_back(&samples[k].image);
      masks.push_back(&samples[k].mask);
    }
    const double l = total_loss(forward(net, stack(imgs)), stack(masks)).item();
    total += l * static_cast<double>(imgs.size());
  }
  return total / static_cast<double>(samples.size());
}

/// Final-stage probability maps (1xHxW each) in eval mode.
inline std::vector<Tensor<float>> predict(NetworkParams<float>& net, const std::vector<SampleRecord>& samples,
                                          std::size_t batch = 8) {
  net.set_mode(Mode::eval);
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < samples.size(); i += batch) {
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t k = i; k < std::min(samples.size(), i + batch); ++k) imgs.push_back(&samples[k].image);
    const Tensor<float> s5 = forward(net, stack(imgs)).back();
    const std::size_t per = s5.numel() / imgs.size();
    for (std::size_t k = 0; k < imgs.size(); ++k) {
      std::vector<float> v(s5.data().begin() + static_cast<long>(k * per),
                           s5.data().begin() + static_cast<long>((k + 1) * per));
      out.push_back(Tensor<float>::from({1, s5.dim(2), s5.dim(3)}, std::move(v)));
    }
  }
  return out;
}

/// Trains `net` in place. Each epoch shuffles with a seed derived from
/// (cfg.seed, epoch), runs mini-batches (the last may be short), then scores
/// the validation set. Stops after early_stop_patience epochs without a
/// strictly lower monitored loss, after cfg.epochs, or at cfg.max_steps.
inline TrainResult fit(NetworkParams<float>& net, const std::vector<SampleRecord>& train,
                       const std::vector<SampleRecord>& validation, const TrainConfig& cfg,
                       std::ostream* progress = nullptr) {
  cfg.validate();
  if (train.empty()) throw DataError("training set is empty");
  auto named = net.named_parameters();
  std::vector<Tensor<float>> params;
  for (auto& [name, t] : named) params.push_back(t);
  AdamState<float> adam;

  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(epoch, cfg);
    Rng rng(derive_seed(cfg.seed, "shuffle", epoch));
    std::shuffle(order.begin(), order.end(), rng);

    net.set_mode(Mode::train);
    double loss_sum = 0;
    std::size_t batches = 0;
    bool capped = false;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      std::vector<const Tensor<float>*> imgs, masks;
      for (std::size_t k = i; k < std::min(order.size(), i + cfg.batch_size); ++k) {
        imgs.push_back(&train[order[k]].image);
        masks.push_back(&train[order[k]].mask);
      }
      for (auto& p : params) p.zero_grad();
      const Tensor<float> loss = total_loss(forward(net, stack(imgs)), stack(masks));
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(result.log.steps));
      }
      loss.backward();
      adam_step(params, adam, lr);
      loss_sum += loss.item();
      ++batches;
      ++result.log.steps;
      if (cfg.max_steps && result.log.steps >= cfg.max_steps) {
        capped = true;
        break;
      }
    }

    EpochLog e;
    e.epoch = epoch;
    e.lr = lr;
    e.train_loss = loss_sum / static_cast<double>(batches);
    e.val_loss = validation.empty() ? e.train_loss : evaluate_loss(net, validation, cfg.batch_size);
    if (!std::isfinite(e.val_loss)) throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(e);
    if (progress) {
      *progress << "epoch " << epoch << "  train_loss " << std::setprecision(6) << e.train_loss << "  val_loss "
                << e.val_loss << "  lr " << lr << '\n'
                << std::flush;
    }

    if (e.val_loss < best) {
      best = e.val_loss;
      stale = 0;
      result.log.best_epoch = epoch;
      result.checkpoint = snapshot(net, epoch, cfg.seed);
      result.checkpoint.optimizer_step = adam.step;
    } else if (++stale >= cfg.early_stop_patience) {
      result.log.stop_reason = "early_stop";
      break;
    }
    if (capped) {
      result.log.stop_reason = "max_steps";
      break;
    }
  }
  if (result.log.stop_reason.empty()) result.log.stop_reason = "max_epochs";
  return result;
}

/// TrainLog as tab-separated text with a header row.
inline void write_train_log(std::ostream& os, const TrainLog& log) {
  os << "epoch\ttrain_loss\tval_loss\tlr\twall_seconds\n";
  os << std::setprecision(9);
  for (const auto& e : log.epochs)
    os << e.epoch << '\t' << e.train_loss << '\t' << e.val_loss << '\t' << e.lr << '\t' << e.wall_seconds << '\n';
  os << "# best_epoch=" << log.best_epoch << " steps=" << log.steps << " stop=" << log.stop_reason << '\n';
}

// ---------------------------------------------------------------------------
// Fold-level training and the component ablation

struct PreparedFold {
  FoldSplit split;
  std::vector<SampleRecord> train;       // augmented training set
  std::vector<SampleRecord> validation;  // originals only
  std::vector<SampleRecord> test;        // originals only
  std::string manifest;
};

inline std::vector<SampleRecord> resized(const DatasetIndex& index, const std::vector<std::size_t>& ids,
                                         const NetworkSpec& spec) {
  std::vector<SampleRecord> out;
  for (auto i : ids) out.push_back(resize(index.records[i], spec.input_h, spec.input_w));
  return out;
}

/// Resizes to the network input, then augments the training portion only;
/// validation and test keep their original samples.
inline PreparedFold prepare_fold(const DatasetIndex& index, std::size_t fold, const NetworkSpec& spec,
                                 const AugmentConfig& aug, bool augment_train, std::uint64_t seed) {
  PreparedFold p;
  p.split = split_fold(index, fold, seed);
  p.manifest = manifest_text(index, p.split);
  p.validation = resized(index, p.split.validation, spec);
  p.test = resized(index, p.split.test, spec);
  for (auto& s : resized(index, p.split.train, spec)) {
    if (!augment_train) {
      p.train.push_back(std::move(s));
      continue;
    }
    auto variants = augment(s, aug, derive_seed(seed, "augment", fold));
    for (auto& v : variants) p.train.push_back(std::move(v));
  }
  return p;
}

inline TrainResult train_fold(const NetworkSpec& spec, const PreparedFold& fold, const TrainConfig& cfg,
                              std::ostream* progress = nullptr) {
  auto net = build<float>(spec, derive_seed(cfg.seed, "init"));
  return fit(net, fold.train, fold.validation, cfg, progress);
}

/// Test-set report for a trained checkpoint.
inline MetricsReport evaluate_checkpoint(const Checkpoint& ck, const std::vector<SampleRecord>& samples,
                                         double threshold = 0.5) {
  auto net = instantiate(ck);
  const auto probs = predict(net, samples);
  std::map<std::string, Tensor<float>> pred, gt;
  std::map<std::string, std::string> cats;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    pred[samples[i].id] = probs[i];
    gt[samples[i].id] = samples[i].mask;
    if (!samples[i].category.empty()) cats[samples[i].id] = samples[i].category;
  }
  return evaluate_dataset(pred, gt, threshold, cats);
}

struct AblationVariant {
  std::string name;
  BlockKind block;
  bool deep_supervision;
};

inline std::vector<AblationVariant> ablation_variants() {
  return {{"baseline_unet", BlockKind::plain, false},
          {"+sk", BlockKind::sk, false},
          {"+esk", BlockKind::esk, false},
          {"+esk+deep_supervision", BlockKind::esk, true}};
}

struct AblationRow {
  AblationVariant variant;
  std::uint64_t params = 0;
  std::uint64_t manifest_hash = 0;  // hash over every fold's manifest
  MetricsReport report;             // per-image rows pooled over all test folds
  std::vector<TrainLog> logs;
};

struct AblationReport {
  std::vector<AblationRow> rows;
};

/// Trains the four component variants on identical folds, seeds and
/// augmented data, and scores each on the held-out folds.
inline AblationReport run_ablation(const DatasetIndex& index, const NetworkSpec& base, const TrainConfig& cfg,
                                   const AugmentConfig& aug, bool augment_train, std::vector<std::size_t> folds = {},
                                   std::ostream* progress = nullptr) {
  if (index.folds.size() < 2) throw ConfigError("ablation needs at least 2 folds");
  if (folds.empty())
    for (std::size_t f = 0; f < index.folds.size(); ++f) folds.push_back(f);
  std::vector<PreparedFold> prepared;
  for (auto f : folds) prepared.push_back(prepare_fold(index, f, base, aug, augment_train, cfg.seed));

  AblationReport report;
  for (const auto& variant : ablation_variants()) {
    NetworkSpec spec = base;
    spec.block = variant.block;
    spec.deep_supervision = variant.deep_supervision;
    AblationRow row;
    row.variant = variant;
    row.params = count_params_flops(spec).params;
    std::string manifests;
    std::vector<ImageRow> pooled;
    for (const auto& fold : prepared) {
      if (progress) *progress << "[" << variant.name << "] fold " << fold.split.fold << '\n' << std::flush;
      manifests += fold.manifest;
      TrainResult tr = train_fold(spec, fold, cfg, progress);
      const MetricsReport r = evaluate_checkpoint(tr.checkpoint, fold.test);
      pooled.insert(pooled.end(), r.images.begin(), r.images.end());
      row.logs.push_back(std::move(tr.log));
    }
    row.manifest_hash = fnv1a(manifests);
    row.report = build_report(std::move(pooled), 0.5);
    report.rows.push_back(std::move(row));
  }
  return report;
}

inline void write_ablation(std::ostream& os, const AblationReport& r) {
  os << "variant\tparams\tjaccard\tprecision\trecall\tspecificity\tdice\n";
  for (const auto& row : r.rows) {
    const auto& a = row.report.all();
    os << row.variant.name << '\t' << row.params << '\t' << format_stats(a.jaccard) << '\t'
       << format_stats(a.precision) << '\t' << format_stats(a.recall) << '\t' << format_stats(a.specificity) << '\t'
       << format_stats(a.dice) << '\n';
  }
}

}  // namespace esknet
