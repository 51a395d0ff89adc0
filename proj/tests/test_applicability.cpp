#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "cactusnet/applicability.hpp"
#include "cactusnet/csv.hpp"
#include "cactusnet/error.hpp"
#include "cactusnet/rng.hpp"

using namespace cnl;
using namespace cnl::app;
using data::SubsetLabel;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "cactusnet_test_applicability";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<SeparabilityRecord> row(int x, std::size_t layer, const std::vector<double>& xis) {
  std::vector<SeparabilityRecord> out;
  for (std::size_t j = 0; j < xis.size(); ++j) out.push_back({x, 100 + static_cast<int>(j), layer, xis[j], j});
  return out;
}

Network small_net(std::uint64_t seed) {
  return Network::create({12, 12, 1},
                         {LayerSpec::conv2d(4, 3), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
                          LayerSpec::conv2d(8, 3), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(8),
                          LayerSpec::relu(), LayerSpec::dense(3), LayerSpec::softmax()},
                         seed);
}

struct Corpus {
  data::DatasetManifest manifest;
  data::SplitStore splits;
};

// Ten synthetic classes: 0-2 known, 3-5 objective-unknown, 6-9 nonobjective-unknown.
Corpus synthetic_corpus(std::size_t per_class = 30) {
  Corpus c;
  auto ds = data::generate_synthetic(5, per_class, 12, 11);
  c.manifest.sources["syn"] = data::SourceSpec{};
  for (int id = 0; id < 10; ++id) {
    const auto subset = id < 3 ? SubsetLabel::ObjectiveKnown
                        : id < 6 ? SubsetLabel::ObjectiveUnknown
                                 : SubsetLabel::NonobjectiveUnknown;
    c.manifest.classes.push_back({id, ds.class_names[static_cast<std::size_t>(id)], subset, "syn", id});
  }
  c.manifest.probe_set = {3, 4, 5, 6, 7, 8};
  c.manifest.k = 6;
  c.manifest.seed = 4;
  data::SourceLibrary lib;
  lib.add("syn", {std::move(ds.images), std::move(ds.labels)});
  c.splits = data::build_splits(c.manifest, lib);
  return c;
}

// Left-bright versus right-bright images with pixel noise.
data::SplitStore halves_corpus(std::size_t per_class, std::uint64_t seed) {
  std::map<int, data::ClassSplit> splits;
  Rng rng(seed);
  for (int cls = 0; cls < 2; ++cls) {
    Tensor all({per_class, 12, 12, 1});
    for (std::size_t n = 0; n < per_class; ++n)
      for (std::size_t y = 0; y < 12; ++y)
        for (std::size_t x = 0; x < 12; ++x) {
          const bool lit = cls == 0 ? x < 6 : x >= 6;
          const double v = (lit ? 0.6 : 0.4) + 0.25 * rng.normal();
          all[(n * 12 + y) * 12 + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    const std::size_t n_train = per_class * 2 / 3;
    data::ClassSplit s;
    s.class_id = cls;
    s.name = cls == 0 ? "left" : "right";
    s.subset = SubsetLabel::ObjectiveUnknown;
    s.train = all.rows(0, n_train);
    s.test = all.rows(n_train, per_class);
    splits.emplace(cls, std::move(s));
  }
  return data::SplitStore(std::move(splits));
}

// Plain logistic regression on raw pixels, full-batch gradient descent in doubles.
double logistic_regression_accuracy(const data::SplitStore& s) {
  const std::size_t d = 144;
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  auto sample = [](const Tensor& t, std::size_t i) { return t.data() + i * 144; };
  for (int it = 0; it < 300; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    std::size_t n = 0;
    for (int cls = 0; cls < 2; ++cls) {
      const Tensor& t = s.at(cls).train;
      for (std::size_t i = 0; i < t.rows(); ++i, ++n) {
        double z = b;
        for (std::size_t k = 0; k < d; ++k) z += w[k] * sample(t, i)[k];
        const double err = 1.0 / (1.0 + std::exp(-z)) - cls;
        for (std::size_t k = 0; k < d; ++k) gw[k] += err * sample(t, i)[k];
        gb += err;
      }
    }
    for (std::size_t k = 0; k < d; ++k) w[k] -= 0.5 * gw[k] / static_cast<double>(n);
    b -= 0.5 * gb / static_cast<double>(n);
  }
  std::size_t correct = 0, total = 0;
  for (int cls = 0; cls < 2; ++cls) {
    const Tensor& t = s.at(cls).test;
    for (std::size_t i = 0; i < t.rows(); ++i, ++total) {
      double z = b;
      for (std::size_t k = 0; k < d; ++k) z += w[k] * sample(t, i)[k];
      correct += (z > 0) == (cls == 1);
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("moth row of separabilities averages to 0.9592") {
  const std::vector<double> moth{0.98, 0.932, 0.952, 0.964, 0.976, 0.972, 0.98, 0.952, 0.952, 0.932};
  long double oracle = 0;
  for (double v : moth) oracle += v;
  oracle /= moth.size();
  const double app = class_applicability(row(1, 4, moth), 10);
  CHECK(std::abs(app - static_cast<double>(oracle)) < 1e-12);
  CHECK(std::abs(app - 0.9592) < 1e-6);
}

TEST_CASE("class applicability examples") {
  CHECK(class_applicability(row(0, 0, {1.0, 1.0, 1.0, 1.0})) == 1.0);
  CHECK(class_applicability(row(0, 0, {0.5, 0.5})) == 0.5);
}

TEST_CASE("class applicability rejects malformed record sets") {
  auto recs = row(0, 1, {0.9, 0.8, 0.7});
  CHECK_THROWS_AS(class_applicability(recs, 4), AggregationError);
  auto mixed = recs;
  mixed[1].layer = 2;
  CHECK_THROWS_AS(class_applicability(mixed), AggregationError);
  auto other_x = recs;
  other_x[2].x = 5;
  CHECK_THROWS_AS(class_applicability(other_x), AggregationError);
  auto dup = recs;
  dup[2].probe = dup[0].probe;
  CHECK_THROWS_AS(class_applicability(dup), AggregationError);
  CHECK_THROWS_AS(class_applicability(std::vector<SeparabilityRecord>{}), AggregationError);
}

TEST_CASE("class applicability is invariant under record order") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> xis(6 + rng.below(15));
    for (auto& v : xis) v = rng.uniform();
    auto recs = row(2, 3, xis);
    const double base = class_applicability(recs);
    rng.shuffle(std::span(recs));
    CHECK(std::abs(class_applicability(recs) - base) < 1e-12);
  }
}

TEST_CASE("subset average examples") {
  ApplicabilityTable t({}, 2);
  t.set_app(1, 0, 0.9);
  t.set_app(1, 1, 0.8);
  t.set_app(2, 0, 0.7);
  t.set_app(2, 1, 0.6);
  t.set_app(3, 0, 0.55);
  t.set_app(3, 1, 0.45);
  const std::map<int, SubsetLabel> labels{{1, SubsetLabel::ObjectiveKnown},
                                          {2, SubsetLabel::ObjectiveKnown},
                                          {3, SubsetLabel::NonobjectiveUnknown}};
  const auto curves = subset_average(t, labels);
  CHECK(curves.at(SubsetLabel::ObjectiveKnown).at(0) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(curves.at(SubsetLabel::ObjectiveKnown).at(1) == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(curves.at(SubsetLabel::NonobjectiveUnknown).at(0) == 0.55);
  CHECK(curves.at(SubsetLabel::NonobjectiveUnknown).at(1) == 0.45);
  auto partial = labels;
  partial.erase(3);
  CHECK_THROWS_AS(subset_average(t, partial), AggregationError);
}

TEST_CASE("sweep plan counts jobs") {
  const std::vector<int> classes{0, 1, 2}, probes{3, 4, 5, 6, 7, 8};
  const std::vector<std::size_t> layers{1, 2, 4, 7};
  CHECK(plan_sweep(classes, probes, layers, true).size() == 72);
  const std::vector<int> overlapping{0, 1, 3};
  CHECK(plan_sweep(overlapping, probes, layers, true).size() == 68);
  CHECK(plan_sweep(overlapping, probes, layers, false).size() == 72);
}

TEST_CASE("layer sweep: 3 classes x 6 probes x 4 layers") {
  const auto corpus = synthetic_corpus();
  const auto net = small_net(3);
  const std::vector<int> classes{0, 1, 2};
  const auto& probes = corpus.manifest.probe_set;
  const std::vector<std::size_t> layers{1, 2, 4, 7};
  SweepConfig cfg;
  cfg.master_seed = 42;
  cfg.workers = 3;
  std::size_t callbacks = 0;
  const auto result = layer_sweep(net, classes, probes, layers, corpus.splits, cfg, {},
                                  [&](const SeparabilityRecord&) { ++callbacks; });
  CHECK(result.jobs_run == 72);
  CHECK(result.records.size() == 72);
  CHECK(callbacks == 72);
  CHECK(result.failures.empty());
  CHECK(result.table.entries().size() == 12);

  SUBCASE("entries equal the mean of their records") {
    for (const auto& [key, e] : result.table.entries()) {
      REQUIRE(e.records.size() == 6);
      double sum = 0;
      for (const auto& r : e.records) {
        CHECK(r.x == key.first);
        CHECK(r.layer == key.second);
        CHECK(r.xi >= 0.0);
        CHECK(r.xi <= 1.0);
        CHECK(r.seed == job_seed(42, r.x, r.probe, r.layer));
        sum += r.xi;
      }
      CHECK(std::abs(e.app - sum / 6.0) < 1e-9);
    }
  }
  SUBCASE("single worker and rerun give identical records") {
    cfg.workers = 1;
    const auto again = layer_sweep(net, classes, probes, layers, corpus.splits, cfg);
    CHECK(again.records == result.records);
  }
  SUBCASE("resuming from a partial record set reproduces the table") {
    std::vector<SeparabilityRecord> partial(result.records.begin(), result.records.begin() + 30);
    write_records_csv(scratch("partial.csv"), partial);
    const auto loaded = read_records_csv(scratch("partial.csv"));
    CHECK(loaded == partial);
    const auto resumed = layer_sweep(net, classes, probes, layers, corpus.splits, cfg, loaded);
    CHECK(resumed.jobs_run == 42);
    CHECK(resumed.records == result.records);
    for (const auto& [key, e] : result.table.entries()) CHECK(resumed.table.app(key.first, key.second) == e.app);
  }
  SUBCASE("table and curves CSV") {
    write_table_csv(scratch("table.csv"), result.table, corpus.manifest);
    const auto back = read_table_csv(scratch("table.csv"));
    CHECK(back.k() == 6);
    for (const auto& [key, e] : result.table.entries()) CHECK(back.app(key.first, key.second) == e.app);
    const auto curves = subset_average(result.table, corpus.manifest.subset_labels());
    write_curves_csv(scratch("curves.csv"), curves);
    const auto rows = csv::read(scratch("curves.csv"), "subset,layer,mean_app");
    CHECK(rows.size() == 4);
  }
}

TEST_CASE("failed jobs leave their cells absent and the sweep continues") {
  auto corpus = synthetic_corpus(12);
  auto splits = corpus.splits.all();
  splits.at(1).train[5] = std::numeric_limits<float>::quiet_NaN();
  const data::SplitStore broken(std::move(splits));
  const std::vector<int> classes{0, 1, 2, 42};
  const std::vector<std::size_t> layers{7};
  const auto result = layer_sweep(small_net(1), classes, corpus.manifest.probe_set, layers, broken, SweepConfig{});
  CHECK(result.failures.size() == 12);
  CHECK(result.table.app(0, 7).has_value());
  CHECK(result.table.app(2, 7).has_value());
  CHECK_FALSE(result.table.app(1, 7).has_value());
  CHECK_FALSE(result.table.app(42, 7).has_value());
}

TEST_CASE("pair separability reports numeric failures with the job identity") {
  auto corpus = synthetic_corpus(12);
  auto splits = corpus.splits.all();
  splits.at(3).train[0] = std::numeric_limits<float>::infinity();
  const data::SplitStore broken(std::move(splits));
  try {
    pair_separability(small_net(1), 4, 0, 3, broken, TrainConfig{0.01, 2, 32, 9});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("x=0, probe=3, layer=4") != std::string::npos);
  }
}

TEST_CASE("layer at or beyond the final dense layer is rejected") {
  const auto corpus = synthetic_corpus(12);
  CHECK_THROWS_AS(pair_separability(small_net(1), 8, 0, 3, corpus.splits, TrainConfig{}), ConfigError);
}

TEST_CASE("linearly separable pixels: freeze at layer 0 matches logistic regression") {
  const auto splits = halves_corpus(150, 8);
  const double oracle = logistic_regression_accuracy(splits);
  const auto net = small_net(12);
  auto budget = SweepConfig{}.train;
  budget.seed = 77;
  const auto rec = pair_separability(net, 0, 0, 1, splits, budget);
  CAPTURE(oracle);
  CHECK(rec.xi >= 0.9);
  CHECK(std::abs(rec.xi - oracle) <= 0.1);
}

TEST_CASE("a class paired with itself separates at chance on every layer") {
  const auto corpus = synthetic_corpus(300);
  const auto net = small_net(5);
  for (std::size_t layer : {0, 1, 2, 4, 7}) {
    auto budget = SweepConfig{}.train;
    budget.seed = 31 + layer;
    const auto rec = pair_separability(net, layer, 3, 3, corpus.splits, budget);
    CAPTURE(layer);
    CHECK(rec.self_control());
    CHECK(rec.xi >= 0.4);
    CHECK(rec.xi <= 0.6);
  }
}
