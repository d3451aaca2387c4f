#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "esknet/image_io.hpp"
#include "esknet/random.hpp"

namespace esknet {

enum class Provenance { original, augmented, degraded, synthetic };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::original: return "original";
    case Provenance::augmented: return "augmented";
    case Provenance::degraded: return "degraded";
    case Provenance::synthetic: return "synthetic";
  }
  return "?";
}

/// One grayscale image with its binary mask, both 1 x H x W.
struct SampleRecord {
  std::string id;
  Tensor<float> image;
  Tensor<float> mask;
  Provenance provenance = Provenance::original;
  std::vector<std::string> ops;  // augmentation ops applied, in order
  std::uint64_t seed = 0;
  std::string category;  // optional grouping tag for reports
  std::filesystem::path image_path;
  std::filesystem::path mask_path;
};

inline void check_sample(const SampleRecord& s) {
  if (s.image.shape() != s.mask.shape()) {
    throw DataError("sample " + s.id + ": image " + to_string(s.image.shape()) + " and mask " +
                    to_string(s.mask.shape()) + " differ in shape");
  }
  for (float v : s.mask.data())
    if (v != 0.0f && v != 1.0f) throw DataError("sample " + s.id + ": mask is not binary");
}

/// Catalogue of samples plus a k-way fold partition (indices into records).
struct DatasetIndex {
  std::vector<SampleRecord> records;
  std::vector<std::vector<std::size_t>> folds;
  double validation_fraction = 0.2;
};

/// Deterministic k-way partition of [0, n). Indices are shuffled by `seed` and
/// dealt into contiguous folds; the first n % k folds get one extra element.
inline std::vector<std::vector<std::size_t>> partition_folds(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ConfigError("fold count must be >= 1");
  if (n < k) throw DataError("cannot split " + std::to_string(n) + " samples into " + std::to_string(k) + " folds");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "folds"));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(order.begin() + static_cast<long>(pos), order.begin() + static_cast<long>(pos + size));
    std::sort(folds[f].begin(), folds[f].end());
    pos += size;
  }
  return folds;
}

/// Sorts records by id and assigns folds.
inline void assign_folds(DatasetIndex& index, std::size_t k, std::uint64_t seed) {
  std::sort(index.records.begin(), index.records.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.id < b.id; });
  index.folds = partition_folds(index.records.size(), k, seed);
}

/// Reads <root>/images/<id>.png and <root>/masks/<id>.png. An optional
/// <root>/categories.tsv (id<TAB>category) tags samples for grouped reports.
inline DatasetIndex load_dataset(const std::filesystem::path& root, std::size_t k, std::uint64_t seed) {
  namespace fs = std::filesystem;
  const fs::path images = root / "images", masks = root / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw DataError("dataset root " + root.string() + " must contain images/ and masks/");
  }
  auto stems = [](const fs::path& dir) {
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".png") out[e.path().stem().string()] = e.path();
    }
    return out;
  };
  const auto image_files = stems(images);
  const auto mask_files = stems(masks);
  for (const auto& [id, p] : image_files)
    if (!mask_files.count(id)) throw DataError("image " + p.string() + " has no matching mask");
  for (const auto& [id, p] : mask_files)
    if (!image_files.count(id)) throw DataError("mask " + p.string() + " has no matching image");
  if (image_files.empty()) throw DataError("dataset " + root.string() + " contains no images");

  std::map<std::string, std::string> categories;
  if (std::ifstream cat(root / "categories.tsv"); cat) {
    std::string line;
    while (std::getline(cat, line)) {
      const auto tab = line.find('\t');
      if (tab != std::string::npos) categories[line.substr(0, tab)] = line.substr(tab + 1);
    }
  }

  DatasetIndex index;
  for (const auto& [id, path] : image_files) {
    SampleRecord r;
    r.id = id;
    r.image_path = path;
    r.mask_path = mask_files.at(id);
    r.image = to_tensor(read_png(path));
    r.mask = to_mask(read_png(r.mask_path));
    r.provenance = Provenance::original;
    if (auto it = categories.find(id); it != categories.end()) r.category = it->second;
    check_sample(r);
    index.records.push_back(std::move(r));
  }
  assign_folds(index, k, seed);
  return index;
}

/// Writes records as <dir>/images/<id>.png and <dir>/masks/<id>.png.
inline void save_dataset(const DatasetIndex& index, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (const auto& r : index.records) {
    write_png(dir / "images" / (r.id + ".png"), to_gray(r.image));
    write_png(dir / "masks" / (r.id + ".png"), to_gray(r.mask));
  }
}

struct FoldSplit {
  std::size_t fold = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

/// Test = the held-out fold; validation = round(fraction * |rest|) samples
/// drawn from the remaining folds; train = the rest.
inline FoldSplit split_fold(const DatasetIndex& index, std::size_t fold, std::uint64_t seed) {
  if (fold >= index.folds.size()) {
    throw ConfigError("fold " + std::to_string(fold) + " out of range (have " + std::to_string(index.folds.size()) + ")");
  }
  FoldSplit s;
  s.fold = fold;
  s.test = index.folds[fold];
  std::vector<std::size_t> rest;
  for (std::size_t f = 0; f < index.folds.size(); ++f)
    if (f != fold) rest.insert(rest.end(), index.folds[f].begin(), index.folds[f].end());
  std::sort(rest.begin(), rest.end());
  Rng rng(derive_seed(seed, "validation", fold));
  std::shuffle(rest.begin(), rest.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(index.validation_fraction * static_cast<double>(rest.size())));
  s.validation.assign(rest.begin(), rest.begin() + static_cast<long>(n_val));
  s.train.assign(rest.begin() + static_cast<long>(n_val), rest.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

/// Plain-text audit manifest: "id<TAB>fold<TAB>role" with role in
/// {train, validation, test} for the given split.
inline std::string manifest_text(const DatasetIndex& index, const FoldSplit& split) {
  std::vector<std::string> role(index.records.size(), "unused");
  for (auto i : split.train) role[i] = "train";
  for (auto i : split.validation) role[i] = "validation";
  for (auto i : split.test) role[i] = "test";
  std::vector<std::size_t> fold_of(index.records.size(), 0);
  for (std::size_t f = 0; f < index.folds.size(); ++f)
    for (auto i : index.folds[f]) fold_of[i] = f;
  std::ostringstream oss;
  oss << "id\tfold\trole\n";
  for (std::size_t i = 0; i < index.records.size(); ++i)
    oss << index.records[i].id << '\t' << fold_of[i] << '\t' << role[i] << '\n';
  return oss.str();
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {
inline float sample_bilinear(const float* img, std::size_t h, std::size_t w, double sy, double sx) {
  sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
  if (fy == 0.0 && fx == 0.0) return img[y0 * w + x0];
  const double top = img[y0 * w + x0] * (1 - fx) + img[y0 * w + x1] * fx;
  const double bot = img[y1 * w + x0] * (1 - fx) + img[y1 * w + x1] * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}
}  // namespace detail

/// Half-pixel-centred resampling: bilinear for the image, nearest for the mask.
inline SampleRecord resize(const SampleRecord& sample, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ConfigError("resize target must be positive");
  check_sample(sample);
  const std::size_t h = sample.image.dim(1), w = sample.image.dim(2);
  SampleRecord out = sample;
  if (h == out_h && w == out_w) {
    out.image = sample.image.clone();
    out.mask = sample.mask.clone();
    return out;
  }
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  std::vector<float> img(out_h * out_w), msk(out_h * out_w);
  const float* src = sample.image.data().data();
  const float* srcm = sample.mask.data().data();
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      img[y * out_w + x] = detail::sample_bilinear(src, h, w, (static_cast<double>(y) + 0.5) * sy - 0.5,
                                                   (static_cast<double>(x) + 0.5) * sx - 0.5);
      const auto ny = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * sy));
      const auto nx = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * sx));
      msk[y * out_w + x] = srcm[ny * w + nx] >= 0.5f ? 1.0f : 0.0f;
    }
  out.image = Tensor<float>::from({1, out_h, out_w}, std::move(img));
  out.mask = Tensor<float>::from({1, out_h, out_w}, std::move(msk));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic ellipses

struct SyntheticConfig {
  double min_area_fraction = 0.02;
  double max_area_fraction = 0.40;
};

namespace detail {
inline std::vector<float> smooth_noise(std::size_t size, std::size_t grid, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<float> coarse(grid * grid);
  for (auto& v : coarse) v = static_cast<float>(u(rng));
  std::vector<float> out(size * size);
  const double scale = static_cast<double>(grid - 1) / static_cast<double>(size - 1);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      out[y * size + x] = sample_bilinear(coarse.data(), grid, grid, static_cast<double>(y) * scale,
                                          static_cast<double>(x) * scale);
  return out;
}
}  // namespace detail

/// n images of 1-2 bright ellipses on a textured dark background; the mask is
/// the union of ellipse interiors with area fraction in the configured band.
inline DatasetIndex synth_dataset(std::size_t n, std::size_t size, std::uint64_t seed,
                                  const SyntheticConfig& cfg = {}) {
  if (n == 0) throw ConfigError("synthetic dataset needs n >= 1");
  if (size < 8) throw ConfigError("synthetic images must be at least 8x8");
  DatasetIndex index;
  const double s = static_cast<double>(size);
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng(derive_seed(seed, "synth", k));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

    const std::size_t count = u01(rng) < 0.5 ? 1 : 2;
    std::vector<float> mask(size * size, 0.0f);
    std::vector<double> level(size * size, 0.0);
    double area = 0.0;
    do {
      std::fill(mask.begin(), mask.end(), 0.0f);
      for (std::size_t e = 0; e < count; ++e) {
        const double a = uniform(0.10, 0.28) * s, b = uniform(0.10, 0.28) * s;
        const double r = std::max(a, b);
        const double cy = uniform(r, s - r), cx = uniform(r, s - r);
        const double th = uniform(0.0, std::numbers::pi);
        const double intensity = uniform(0.65, 0.9);
        const double ct = std::cos(th), st = std::sin(th);
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
            const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
            if (u * u + v * v <= 1.0) {
              mask[y * size + x] = 1.0f;
              level[y * size + x] = intensity;
            }
          }
      }
      area = 0.0;
      for (float m : mask) area += m;
      area /= s * s;
    } while (area < cfg.min_area_fraction || area > cfg.max_area_fraction);

    const double base = uniform(0.15, 0.35);
    const auto texture = detail::smooth_noise(size, 5, rng);
    std::normal_distribution<double> speckle(0.0, 0.04);
    std::vector<float> image(size * size);
    for (std::size_t i = 0; i < image.size(); ++i) {
      const double v = (mask[i] > 0 ? level[i] : base) + 0.08 * texture[i] + speckle(rng);
      image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }

    SampleRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", k);
    rec.id = id;
    rec.image = Tensor<float>::from({1, size, size}, std::move(image));
    rec.mask = Tensor<float>::from({1, size, size}, std::move(mask));
    rec.provenance = Provenance::synthetic;
    rec.seed = derive_seed(seed, "synth", k);
    index.records.push_back(std::move(rec));
  }
  return index;
}

}  // namespace esknet
