#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "esknet/config.hpp"
#include "esknet/image_io.hpp"
#include "esknet/parallel.hpp"
#include "esknet/verify.hpp"

namespace fs = std::filesystem;
using namespace esknet;

namespace {

enum ExitCode : int { kOk = 0, kConfig = 1, kData = 2, kDivergence = 3, kVerifyFailed = 4 };

struct Globals {
  std::string config_path;
  std::string profile;
  std::string out = "out";
  std::vector<std::string> set;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  bool quiet = false;
};

struct DataSource {
  std::string dataset;
  bool synthetic = false;
};

RunConfig resolve(const Globals& g) {
  KeyValues overrides;
  for (const auto& item : g.set) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    overrides.set(trim(item.substr(0, eq)), trim(item.substr(eq + 1)));
  }
  if (g.seed) overrides.set("run.seed", std::to_string(*g.seed));
  if (g.threads) overrides.set("run.threads", std::to_string(*g.threads));
  RunConfig cfg = resolve_config(g.profile, g.config_path, overrides);
  set_num_threads(cfg.threads);
  return cfg;
}

void echo_config(const Globals& g, const RunConfig& cfg, const std::string& command) {
  fs::create_directories(g.out);
  std::ofstream os(fs::path(g.out) / "effective_config.txt");
  os << "# esknet " << command << " (rerun with --config on this file)\n" << to_kv(cfg).format();
}

DatasetIndex obtain_dataset(const RunConfig& cfg, const DataSource& src) {
  DatasetIndex index;
  const std::string root = src.dataset.empty() ? cfg.data.root : src.dataset;
  if (!src.synthetic && !root.empty()) {
    index = load_dataset(root, cfg.data.folds, cfg.seed);
  } else {
    index = synth_dataset(cfg.data.synthetic_count, cfg.data.synthetic_size, cfg.seed);
    assign_folds(index, cfg.data.folds, cfg.seed);
  }
  index.validation_fraction = cfg.train.validation_fraction;
  return index;
}

void add_data_options(CLI::App* cmd, DataSource& src) {
  cmd->add_option("--dataset", src.dataset, "Dataset root with images/ and masks/");
  cmd->add_flag("--synthetic", src.synthetic, "Use the generated synthetic dataset");
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  os << text;
}

void print_aggregates(std::ostream& os, const MetricsReport& r) {
  for (const auto& a : r.aggregates) {
    os << a.group << ":  jaccard " << format_stats(a.jaccard) << "  precision " << format_stats(a.precision)
       << "  recall " << format_stats(a.recall) << "  specificity " << format_stats(a.specificity) << "  dice "
       << format_stats(a.dice) << '\n';
  }
}

// ---------------------------------------------------------------------------

int cmd_synth(const Globals& g, std::optional<std::size_t> count, std::optional<std::size_t> size) {
  RunConfig cfg = resolve(g);
  if (count) cfg.data.synthetic_count = *count;
  if (size) cfg.data.synthetic_size = *size;
  auto index = synth_dataset(cfg.data.synthetic_count, cfg.data.synthetic_size, cfg.seed);
  assign_folds(index, cfg.data.folds, cfg.seed);
  save_dataset(index, g.out);
  echo_config(g, cfg, "synth");
  std::ostringstream manifest;
  manifest << "id\tfold\n";
  for (std::size_t f = 0; f < index.folds.size(); ++f)
    for (auto i : index.folds[f]) manifest << index.records[i].id << '\t' << f << '\n';
  write_file(fs::path(g.out) / "folds.tsv", manifest.str());
  if (!g.quiet) std::cout << "wrote " << index.records.size() << " samples to " << g.out << '\n';
  return kOk;
}

int cmd_train(const Globals& g, const DataSource& src, bool use_all) {
  const RunConfig cfg = resolve(g);
  const DatasetIndex index = obtain_dataset(cfg, src);
  echo_config(g, cfg, "train");
  std::ostream* progress = g.quiet ? nullptr : &std::cout;

  PreparedFold fold;
  if (use_all) {
    for (const auto& r : index.records) {
      auto s = resize(r, cfg.net.input_h, cfg.net.input_w);
      if (!cfg.data.augment) {
        fold.train.push_back(std::move(s));
        continue;
      }
      for (auto& v : augment(s, cfg.augment, derive_seed(cfg.seed, "augment"))) fold.train.push_back(std::move(v));
    }
  } else {
    fold = prepare_fold(index, cfg.data.fold, cfg.net, cfg.augment, cfg.data.augment, cfg.seed);
    write_file(fs::path(g.out) / "manifest.tsv", fold.manifest);
  }
  TrainResult result = train_fold(cfg.net, fold, cfg.train, progress);
  save_checkpoint(fs::path(g.out) / "checkpoint.eskn", result.checkpoint);
  std::ofstream log(fs::path(g.out) / "train_log.tsv");
  write_train_log(log, result.log);
  if (!fold.test.empty()) {
    const auto report = evaluate_checkpoint(result.checkpoint, fold.test, cfg.eval.threshold);
    std::ofstream os(fs::path(g.out) / "test_metrics.tsv");
    write_report(os, report);
    if (!g.quiet) print_aggregates(std::cout << "test fold " << cfg.data.fold << ":\n", report);
  }
  if (!g.quiet) {
    std::cout << "best epoch " << result.log.best_epoch << ", stop: " << result.log.stop_reason << ", checkpoint "
              << (fs::path(g.out) / "checkpoint.eskn").string() << '\n';
  }
  return kOk;
}

int cmd_eval(const Globals& g, const DataSource& src, const std::string& checkpoint, bool degraded,
             std::optional<std::size_t> thresholds, const std::string& split) {
  RunConfig cfg = resolve(g);
  if (thresholds) cfg.eval.n_thresholds = *thresholds;
  if (cfg.eval.n_thresholds < 2) throw ConfigError("--thresholds must be >= 2");
  const Checkpoint ck = load_checkpoint(checkpoint);
  const DatasetIndex index = obtain_dataset(cfg, src);
  echo_config(g, cfg, "eval");

  std::vector<std::size_t> ids;
  if (split == "all") {
    for (std::size_t i = 0; i < index.records.size(); ++i) ids.push_back(i);
  } else {
    ids = split_fold(index, cfg.data.fold, cfg.seed).test;
  }
  std::vector<SampleRecord> samples;
  for (auto i : ids) {
    auto s = resize(index.records[i], ck.spec.input_h, ck.spec.input_w);
    if (degraded) s = degrade(s, cfg.eval.degrade_sigma, cfg.eval.degrade_kernel, derive_seed(cfg.seed, "degrade", i));
    samples.push_back(std::move(s));
  }
  auto net = instantiate(ck);
  const auto probs = predict(net, samples);
  std::map<std::string, Tensor<float>> pred, gt;
  std::map<std::string, std::string> cats;
  std::vector<Tensor<float>> masks;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    pred[samples[i].id] = probs[i];
    gt[samples[i].id] = samples[i].mask;
    masks.push_back(samples[i].mask);
    if (!samples[i].category.empty()) cats[samples[i].id] = samples[i].category;
  }
  const MetricsReport report = evaluate_dataset(pred, gt, cfg.eval.threshold, cats);
  const CurveData cd = curves(probs, masks, cfg.eval.n_thresholds);
  fs::create_directories(g.out);
  {
    std::ofstream os(fs::path(g.out) / "metrics.tsv");
    write_report(os, report);
    std::ofstream cs(fs::path(g.out) / "curves.tsv");
    write_curves(cs, cd);
  }
  print_aggregates(std::cout, report);
  std::cout << "auc " << std::setprecision(6) << cd.auc << '\n';
  return kOk;
}

int cmd_predict(const Globals& g, const std::string& checkpoint, const std::vector<std::string>& images,
                bool all_stages) {
  const RunConfig cfg = resolve(g);
  const Checkpoint ck = load_checkpoint(checkpoint);
  auto net = instantiate(ck);
  net.set_mode(Mode::eval);
  if (all_stages && !ck.spec.deep_supervision) {
    throw ConfigError("--all-stages needs a network trained with deep supervision");
  }
  fs::create_directories(g.out);
  for (const auto& path : images) {
    const GrayImage img = read_png(path);
    SampleRecord s;
    s.id = fs::path(path).stem().string();
    s.image = to_tensor(img);
    s.mask = Tensor<float>({1, img.height, img.width}, 0.0f);
    const auto input = resize(s, ck.spec.input_h, ck.spec.input_w);
    const auto stages = forward(net, input.image);
    auto to_source_size = [&](const Tensor<float>& prob) {
      SampleRecord r;
      r.image = Tensor<float>::from({1, ck.spec.input_h, ck.spec.input_w},
                                    std::vector<float>(prob.data().begin(), prob.data().end()));
      r.mask = Tensor<float>({1, ck.spec.input_h, ck.spec.input_w}, 0.0f);
      return resize(r, img.height, img.width).image;
    };
    const auto final_prob = to_source_size(stages.back());
    write_png(fs::path(g.out) / (s.id + "_prob.png"), to_gray(final_prob));
    write_png(fs::path(g.out) / (s.id + "_mask.png"), to_gray(binarize(final_prob, cfg.eval.threshold)));
    if (all_stages) {
      const fs::path dir = fs::path(g.out) / (s.id + "_stages");
      fs::create_directories(dir);
      for (std::size_t i = 0; i < stages.size(); ++i)
        write_png(dir / ("S" + std::to_string(i + 1) + ".png"), to_gray(to_source_size(stages[i])));
    }
    if (!g.quiet) std::cout << path << " -> " << (fs::path(g.out) / (s.id + "_mask.png")).string() << '\n';
  }
  return kOk;
}

int cmd_verify(const Globals& g, const std::string& corrupt, std::optional<std::size_t> seeds) {
  VerifyOptions opts;
  opts.corrupt = corrupt;
  if (g.seed) opts.seed = *g.seed;
  if (seeds) opts.gradient_seeds = *seeds;
  const VerifyReport rep = run_verify(opts);
  print_verify(std::cout, rep);
  std::cout << rep.checks.size() << " checks in " << std::setprecision(3) << rep.seconds << " s\n";
  if (rep.all_passed()) return kOk;
  std::cerr << "verify failed:";
  for (const auto& f : rep.failures()) std::cerr << ' ' << f;
  std::cerr << '\n';
  return kVerifyFailed;
}

int cmd_ablate(const Globals& g, const DataSource& src, const std::vector<std::size_t>& folds) {
  const RunConfig cfg = resolve(g);
  const DatasetIndex index = obtain_dataset(cfg, src);
  echo_config(g, cfg, "ablate");
  const AblationReport rep =
      run_ablation(index, cfg.net, cfg.train, cfg.augment, cfg.data.augment, folds, g.quiet ? nullptr : &std::cout);
  {
    std::ofstream os(fs::path(g.out) / "ablation.tsv");
    write_ablation(os, rep);
    std::ofstream hs(fs::path(g.out) / "ablation_manifests.tsv");
    hs << "variant\tmanifest_hash\n";
    for (const auto& row : rep.rows) {
      hs << row.variant.name << '\t' << std::hex << row.manifest_hash << std::dec << '\n';
      std::ofstream ms(fs::path(g.out) / ("ablation_" + row.variant.name + ".tsv"));
      write_report(ms, row.report);
    }
  }
  write_ablation(std::cout, rep);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ESKNet segmentation: data preparation, training, evaluation, prediction and verification"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Key/value config file");
  app.add_option("--profile", g.profile, "Default profile")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", g.seed, "Base seed for every random stream");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads");
  app.add_option("--set", g.set, "Override a config entry (key=value), repeatable");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress output");

  auto* synth = app.add_subcommand("synth", "Write a synthetic ellipse dataset to --out");
  std::optional<std::size_t> synth_count, synth_size;
  synth->add_option("--count", synth_count, "Number of samples");
  synth->add_option("--size", synth_size, "Image side length");

  auto* train = app.add_subcommand("train", "Train on one fold and write checkpoint, log and config");
  DataSource train_src;
  bool train_all = false;
  add_data_options(train, train_src);
  train->add_flag("--all", train_all, "Train on every sample, with no validation or test hold-out");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint: metrics and P-R/ROC curves");
  DataSource eval_src;
  std::string eval_ck, eval_split = "all";
  bool eval_degrade = false;
  std::optional<std::size_t> eval_thresholds;
  add_data_options(eval, eval_src);
  eval->add_option("--checkpoint", eval_ck, "Checkpoint file")->required();
  eval->add_flag("--degrade", eval_degrade, "Apply multiplicative noise and blur before scoring");
  eval->add_option("--thresholds", eval_thresholds, "Number of curve thresholds");
  eval->add_option("--split", eval_split, "Samples to score")->check(CLI::IsMember({"all", "test"}));

  auto* predict_cmd = app.add_subcommand("predict", "Write probability maps and binary masks for images");
  std::string pred_ck;
  std::vector<std::string> pred_images;
  bool all_stages = false;
  predict_cmd->add_option("--checkpoint", pred_ck, "Checkpoint file")->required();
  predict_cmd->add_option("images", pred_images, "8-bit grayscale PNG files")->required();
  predict_cmd->add_flag("--all-stages", all_stages, "Also write all five stage outputs");

  auto* verify = app.add_subcommand("verify", "Run gradient, gate, oracle and metric checks");
  std::string corrupt;
  std::optional<std::size_t> verify_seeds;
  verify->add_option("--corrupt-gradient", corrupt, "Perturb the analytic gradient of the named check");
  verify->add_option("--seeds", verify_seeds, "Random instances per gradient check");

  auto* ablate = app.add_subcommand("ablate", "Cross-validated comparison of the four block variants");
  DataSource ablate_src;
  std::vector<std::size_t> ablate_folds;
  add_data_options(ablate, ablate_src);
  ablate->add_option("--folds", ablate_folds, "Folds to hold out (default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*synth) return cmd_synth(g, synth_count, synth_size);
    if (*train) return cmd_train(g, train_src, train_all);
    if (*eval) return cmd_eval(g, eval_src, eval_ck, eval_degrade, eval_thresholds, eval_split);
    if (*predict_cmd) return cmd_predict(g, pred_ck, pred_images, all_stages);
    if (*verify) return cmd_verify(g, corrupt, verify_seeds);
    if (*ablate) return cmd_ablate(g, ablate_src, ablate_folds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  }
  return kOk;
}
