#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <sstream>

#include "esknet/metrics.hpp"
#include "esknet/random.hpp"
#include "esknet/verify.hpp"

using namespace esknet;
using Catch::Approx;

namespace {

Tensor<float> mask4x4(std::initializer_list<int> bits) {
  std::vector<float> v;
  for (int b : bits) v.push_back(static_cast<float>(b));
  return Tensor<float>::from({1, 4, 4}, std::move(v));
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

}  // namespace

TEST_CASE("confusion counts") {
  const auto gt = mask4x4({1, 1, 0, 0, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0});
  CHECK(confusion(gt, gt) == ConfusionCounts{5, 0, 11, 0});
  std::vector<float> comp(16);
  for (std::size_t i = 0; i < 16; ++i) comp[i] = 1.0f - gt[i];
  const auto c = confusion(Tensor<float>::from({1, 4, 4}, comp), gt);
  CHECK(c.tp == 0);
  CHECK(c.tn == 0);
  CHECK(c.fp == 11);
  CHECK(c.fn == 5);
  CHECK_THROWS_AS(confusion(gt, Tensor<float>({1, 4, 5})), ShapeError);
  CHECK_THROWS_AS(confusion(Tensor<float>({1, 4, 4}, 0.5f), gt), ShapeError);
}

TEST_CASE("hand-counted 4x4 example") {
  // 6 hits, 2 false alarms, 3 misses, 5 true negatives.
  const auto gt = mask4x4({1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0});
  const auto pred = mask4x4({1, 1, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0});
  const auto c = confusion(pred, gt);
  CHECK(c == ConfusionCounts{6, 2, 5, 3});
  const auto m = compute_metrics(c);
  CHECK(round2(m.jaccard) == 54.55);
  CHECK(round2(m.precision) == 75.00);
  CHECK(round2(m.recall) == 66.67);
  CHECK(round2(m.specificity) == 71.43);
  CHECK(round2(m.dice) == 70.59);
  CHECK(m.flags == 0);
}

TEST_CASE("perfect prediction and degenerate conventions") {
  const auto perfect = compute_metrics({5, 0, 11, 0});
  for (double v : {perfect.jaccard, perfect.precision, perfect.recall, perfect.specificity, perfect.dice}) CHECK(v == 100.0);

  const auto vacuous = compute_metrics({0, 0, 16, 0});
  for (double v : {vacuous.jaccard, vacuous.precision, vacuous.recall, vacuous.specificity, vacuous.dice}) CHECK(v == 100.0);
  CHECK(vacuous.flags & kVacuous);

  const auto missed = compute_metrics({0, 0, 10, 6});
  CHECK(missed.jaccard == 0.0);
  CHECK(missed.precision == 0.0);
  CHECK(missed.recall == 0.0);
  CHECK(missed.dice == 0.0);
  CHECK(missed.flags & kEmptyPrediction);

  const auto spurious = compute_metrics({0, 4, 12, 0});
  CHECK(spurious.recall == 0.0);
  CHECK(spurious.flags & kEmptyGroundTruth);

  const auto all_fg = compute_metrics({16, 0, 0, 0});
  CHECK(all_fg.specificity == 100.0);
  CHECK(all_fg.flags & kNoNegatives);
}

TEST_CASE("metric identities on random masks") {
  Rng rng(17);
  for (int k = 0; k < 200; ++k) {
    std::bernoulli_distribution a(std::uniform_real_distribution<double>(0.05, 0.95)(rng));
    std::vector<float> p(64), g(64);
    for (auto& v : p) v = a(rng);
    for (auto& v : g) v = a(rng);
    const auto pt = Tensor<float>::from({1, 8, 8}, p), gt = Tensor<float>::from({1, 8, 8}, g);
    const auto c = confusion(pt, gt);
    CHECK(c.total() == 64);
    const auto m = compute_metrics(c);
    if (m.flags) continue;
    CHECK(m.jaccard <= m.dice + 1e-12);
    CHECK(m.dice == Approx(200.0 * c.tp / (2.0 * c.tp + c.fp + c.fn)).margin(1e-9));
    CHECK(m.dice == Approx(2 * m.jaccard / (100 + m.jaccard) * 100).margin(1e-9));
    const auto s = compute_metrics(confusion(gt, pt));
    CHECK(s.precision == m.recall);
    CHECK(s.recall == m.precision);
    CHECK(s.jaccard == m.jaccard);
    CHECK(s.dice == Approx(m.dice).margin(1e-12));
    for (double v : {m.jaccard, m.precision, m.recall, m.specificity, m.dice}) {
      CHECK(v >= 0.0);
      CHECK(v <= 100.0);
    }
  }
}

TEST_CASE("dataset aggregation is the mean of per-image values") {
  // Dice 60: tp 3, fp 2, fn 2. Dice 80: tp 4, fp 1, fn 1.
  auto image = [](int tp, int fp, int fn) {
    std::vector<float> p(16, 0.0f), g(16, 0.0f);
    int i = 0;
    for (int k = 0; k < tp; ++k, ++i) p[i] = g[i] = 1.0f;
    for (int k = 0; k < fp; ++k, ++i) p[i] = 0.9f;
    for (int k = 0; k < fn; ++k, ++i) g[i] = 1.0f;
    for (int k = 0; k < tp; ++k) p[k] = 0.7f;
    return std::pair{Tensor<float>::from({1, 4, 4}, p), Tensor<float>::from({1, 4, 4}, g)};
  };
  auto [p1, g1] = image(3, 2, 2);
  auto [p2, g2] = image(4, 1, 1);
  const auto r = evaluate_dataset<float>({{"a", p1}, {"b", p2}}, {{"a", g1}, {"b", g2}}, 0.5, {{"a", "x"}, {"b", "y"}});
  REQUIRE(r.images.size() == 2);
  CHECK(r.images[0].metrics.dice == Approx(60.0));
  CHECK(r.images[1].metrics.dice == Approx(80.0));
  CHECK(r.all().dice.mean == Approx(70.0));
  CHECK(r.all().dice.stddev == Approx(10.0));
  REQUIRE(r.aggregates.size() == 3);
  CHECK(r.aggregates[1].group == "x");
  CHECK(r.aggregates[1].dice.mean == Approx(60.0));
  CHECK(r.aggregates[1].dice.stddev == 0.0);

  const auto single = evaluate_dataset<float>({{"a", p1}}, {{"a", g1}});
  CHECK(single.all().jaccard.mean == single.images[0].metrics.jaccard);
  CHECK(single.all().jaccard.stddev == 0.0);

  CHECK_THROWS_AS(evaluate_dataset<float>({{"a", p1}}, {{"b", g1}}), DataError);

  std::ostringstream os;
  write_report(os, r);
  CHECK(os.str().rfind("id\tcategory\ttp", 0) == 0);
  CHECK(os.str().find("mean:All") != std::string::npos);
}

TEST_CASE("mean of per-image Dice differs from Dice of mean precision and recall") {
  // Image 1: precision 100, recall 10. Image 2: precision 10, recall 100.
  const auto a = compute_metrics({1, 0, 0, 9}), b = compute_metrics({1, 9, 0, 0});
  const double mean_dice = (a.dice + b.dice) / 2;
  const double p = (a.precision + b.precision) / 2, r = (a.recall + b.recall) / 2;
  CHECK(mean_dice == Approx(18.1818).epsilon(1e-4));
  CHECK(2 * p * r / (p + r) == Approx(55.0));
}

TEST_CASE("perfect and constant predictors") {
  const auto gt = mask4x4({1, 1, 0, 0, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1});
  const auto perfect = curves<float>({gt}, {gt}, 101);
  CHECK(perfect.auc == 1.0);
  CHECK(perfect.points.size() == 101);
  CHECK(perfect.points.front().threshold == 1.0);
  CHECK(perfect.points.back().threshold == 0.0);
  const auto flat = curves<float>({Tensor<float>({1, 4, 4}, 0.37f)}, {gt}, 101);
  CHECK(flat.auc == Approx(0.5).margin(0.01));
  const auto none = curves<float>({gt}, {Tensor<float>({1, 4, 4})}, 11);
  CHECK(none.flags & kNoPositivePixels);
  CHECK_THROWS_AS(curves<float>({Tensor<float>({1, 4, 4}, 1.5f)}, {gt}, 11), DataError);
  CHECK_THROWS_AS(curves<float>({gt}, {gt}, 1), ConfigError);
}

TEST_CASE("16-pixel fixture matches the exhaustive cutpoint oracle") {
  const auto [prob, gt] = curve_fixture();
  std::vector<double> p(prob.data().begin(), prob.data().end());
  std::vector<bool> l;
  for (float v : gt.data()) l.push_back(v == 1.0f);
  const auto oracle = reference::all_cutpoints(p, l);
  const auto cd = curves<float>({prob}, {gt}, 17);
  std::set<std::tuple<double, double, double>> got, want;
  for (const auto& pt : cd.points) got.insert({pt.fpr, pt.tpr, pt.precision});
  for (const auto& pt : oracle) {
    const double tp = static_cast<double>(pt.tp), fp = static_cast<double>(pt.fp);
    want.insert({fp / 8.0, tp / 8.0, pt.tp + pt.fp == 0 ? 1.0 : tp / (tp + fp)});
  }
  CHECK(got == want);
  CHECK(cd.auc == reference::rank_auc(p, l));
  CHECK(cd.auc == 0.828125);
}

TEST_CASE("AUC is invariant to monotone rescaling") {
  Rng rng(5);
  std::vector<float> p(64), q(64), g(64);
  std::uniform_int_distribution<int> grid(0, 32);
  for (std::size_t i = 0; i < 64; ++i) {
    p[i] = static_cast<float>(grid(rng)) / 32.0f;
    g[i] = (p[i] + static_cast<float>(grid(rng)) / 64.0f) > 0.6f ? 1.0f : 0.0f;
    q[i] = p[i] * p[i];  // monotone on [0, 1]; maps the grid onto a finer grid
  }
  const auto gt = Tensor<float>::from({1, 8, 8}, g);
  // Thresholds at every 1/1024 reach every distinct value of both maps.
  const auto a = curves<float>({Tensor<float>::from({1, 8, 8}, p)}, {gt}, 1025);
  const auto b = curves<float>({Tensor<float>::from({1, 8, 8}, q)}, {gt}, 1025);
  CHECK(a.auc == Approx(b.auc).margin(1e-12));
  std::vector<double> pd(p.begin(), p.end());
  std::vector<bool> l;
  for (float v : g) l.push_back(v == 1.0f);
  CHECK(a.auc == Approx(reference::rank_auc(pd, l)).margin(1e-12));

  std::ostringstream os;
  write_curves(os, a);
  std::string line;
  std::istringstream is(os.str());
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 1026);
}
