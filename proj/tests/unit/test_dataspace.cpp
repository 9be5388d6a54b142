#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "tseg/common.hpp"
#include "tseg/dataspace.hpp"
#include "tseg/evaluation.hpp"
#include "tseg/learner.hpp"
#include "tseg/selftrain.hpp"

namespace fs = std::filesystem;
using namespace tseg;

namespace {

SampleGrid one_feature(std::vector<float> values) {
  SampleGrid s;
  s.id = "s";
  s.height = 1;
  s.width = static_cast<int>(values.size());
  s.channels = 1;
  s.features = std::move(values);
  return s;
}

TaskSpec small_spec() {
  auto s = TaskSpec::default_shifted();
  s.grid_height = 12;
  s.grid_width = 12;
  s.num_source_images = 4;
  s.num_target_images = 4;
  return s;
}

}  // namespace

TEST_CASE("generation is a pure function of (spec, seed)") {
  const auto spec = small_spec();
  const auto a = generate_task(spec, 5);
  const auto b = generate_task(spec, 5);
  const auto c = generate_task(spec, 6);
  REQUIRE(a.labeled.samples.size() == 4);
  REQUIRE(a.target.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.labeled.samples[i].features == b.labeled.samples[i].features);
    CHECK(a.labeled.labels[i] == b.labeled.labels[i]);
    CHECK(a.target.samples()[i].features == b.target.samples()[i].features);
    CHECK(a.labeled.samples[i].id == b.labeled.samples[i].id);
  }
  CHECK(LabelOracle(a.target).labels() == LabelOracle(b.target).labels());
  CHECK(a.labeled.samples[0].features != c.labeled.samples[0].features);
}

TEST_CASE("invalid specs name the violated invariant") {
  auto s = small_spec();
  s.class_priors_target = {0.1, 0.3, 0.3, 0.2};  // sums to 0.9
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("prior"), ConfigError);
  s = small_spec();
  s.feature_noise_std = 0.0;
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("feature_noise_std"), ConfigError);
  s = small_spec();
  s.class_means_source.pop_back();
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec();
  s.grid_width = 0;
  CHECK_THROWS_AS(generate_task(s, 0), ConfigError);
}

TEST_CASE("blob classes follow the prior within 3 standard errors") {
  const auto spec = TaskSpec::default_shifted();
  for (const auto& prior : {spec.class_priors_source, spec.class_priors_target}) {
    std::mt19937_64 rng(99);
    std::vector<double> counts(prior.size(), 0.0);
    double n = 0.0;
    while (n < 20000) {
      for (const auto& b : draw_blobs(spec, prior, rng)) {
        counts[b.label] += 1.0;
        n += 1.0;
      }
    }
    for (std::size_t c = 0; c < prior.size(); ++c) {
      const double se = std::sqrt(prior[c] * (1.0 - prior[c]) / n);
      CHECK(std::abs(counts[c] / n - prior[c]) <= 3.0 * se);
    }
  }
}

TEST_CASE("pixel features are class mean plus noise") {
  auto spec = small_spec();
  spec.image_offset_std = 0.0;
  spec.num_source_images = 30;
  const auto task = generate_task(spec, 3);
  const int d = spec.feature_dim;
  std::vector<std::vector<double>> sum(spec.num_classes, std::vector<double>(d, 0.0));
  std::vector<double> n(spec.num_classes, 0.0);
  for (std::size_t i = 0; i < task.labeled.samples.size(); ++i) {
    const auto& s = task.labeled.samples[i];
    for (std::size_t p = 0; p < s.pixel_count(); ++p) {
      const int c = task.labeled.labels[i][p];
      n[c] += 1.0;
      for (int k = 0; k < d; ++k) sum[c][k] += s.features[p * d + k];
    }
  }
  for (int c = 0; c < spec.num_classes; ++c) {
    REQUIRE(n[c] > 100);
    for (int k = 0; k < d; ++k) {
      const double tol = 4.0 * spec.feature_noise_std / std::sqrt(n[c]);
      CHECK(std::abs(sum[c][k] / n[c] - spec.class_means_source[c][k]) <= tol);
    }
  }
}

TEST_CASE("z-score: hand values, degenerate feature, identity, inverse") {
  SUBCASE("{1, 3} -> {-1, +1}") {
    LabeledSet train;
    train.samples = {one_feature({1.0f, 3.0f})};
    train.labels = {LabelGrid(2, 0)};
    const auto r = zscore_fit_apply(train, {});
    CHECK(r.stats.mean[0] == doctest::Approx(2.0));
    CHECK(r.stats.std[0] == doctest::Approx(1.0));
    CHECK(r.train.samples[0].features[0] == doctest::Approx(-1.0));
    CHECK(r.train.samples[0].features[1] == doctest::Approx(1.0));
    CHECK_FALSE(r.warning);
  }
  SUBCASE("constant feature -> zeros with warning") {
    LabeledSet train;
    train.samples = {one_feature({4.0f, 4.0f, 4.0f})};
    train.labels = {LabelGrid(3, 0)};
    const auto r = zscore_fit_apply(train, {{one_feature({5.0f})}});
    CHECK(r.warning);
    CHECK(r.stats.std[0] == 1.0);
    for (float v : r.train.samples[0].features) CHECK(v == 0.0f);
    CHECK(r.others[0][0].features[0] == doctest::Approx(1.0));
  }
  SUBCASE("already standardized data is unchanged") {
    LabeledSet train;
    train.samples = {one_feature({-1.0f, 1.0f, -1.0f, 1.0f})};
    train.labels = {LabelGrid(4, 0)};
    const auto r = zscore_fit_apply(train, {});
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(std::abs(r.train.samples[0].features[i] - train.samples[0].features[i]) <= 1e-9);
    }
  }
  SUBCASE("inverse recovers the original within 1e-6 relative") {
    const auto task = generate_task(small_spec(), 1);
    const auto r = zscore_fit_apply(task.labeled, {task.target.samples()});
    for (std::size_t i = 0; i < task.target.size(); ++i) {
      const auto back = invert_zscore(r.stats, r.others[0][i]);
      const auto& orig = task.target.samples()[i].features;
      for (std::size_t k = 0; k < orig.size(); ++k) {
        CHECK(std::abs(back.features[k] - orig[k]) <= 1e-6 * std::max(1.0f, std::abs(orig[k])));
      }
    }
  }
}

TEST_CASE("two-fold split") {
  auto spec = small_spec();
  spec.num_target_images = 10;
  const auto ten = generate_task(spec, 0).target;
  spec.num_target_images = 11;
  const auto eleven = generate_task(spec, 0).target;
  const auto a = split_two_folds(ten, 4);
  CHECK(a.members(0).size() == 5);
  CHECK(a.members(1).size() == 5);
  const auto b = split_two_folds(eleven, 4);
  CHECK(b.members(0).size() == 6);
  CHECK(b.members(1).size() == 5);
  CHECK(split_two_folds(ten, 4).fold_assignment == a.fold_assignment);

  // The two folds partition the samples.
  std::vector<int> seen(11, 0);
  for (int f = 0; f < 2; ++f) {
    for (auto i : b.members(f)) ++seen[i];
  }
  for (int v : seen) CHECK(v == 1);

  spec.num_target_images = 1;
  CHECK_THROWS_AS(split_two_folds(generate_task(spec, 0).target, 0), ConfigError);
}

TEST_CASE("k-fold sizes differ by at most one") {
  for (std::size_t n : {5u, 12u, 13u}) {
    const auto s = split_k_folds(n, 5, 2);
    std::size_t lo = n, hi = 0;
    for (int f = 0; f < 5; ++f) {
      lo = std::min(lo, s.members(f).size());
      hi = std::max(hi, s.members(f).size());
    }
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("dataset directory round trip") {
  const fs::path dir = "scratch_dataset";
  fs::remove_all(dir);
  const auto spec = small_spec();
  const auto task = generate_task(spec, 21);
  DatasetStore::save(dir, spec, 21, task);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::file_size(dir / "images" / (task.labeled.samples[0].id + ".feat")) ==
        16 + 12 * 12 * 3 * 4);
  CHECK(fs::file_size(dir / "images" / (task.labeled.samples[0].id + ".lab")) == 16 + 12 * 12);
  const auto back = DatasetStore::load(dir);
  CHECK(back.seed == 21);
  CHECK(back.dataset_id == dataset_id(spec, 21));
  CHECK(back.dataset_id != dataset_id(spec, 22));
  for (std::size_t i = 0; i < task.labeled.samples.size(); ++i) {
    CHECK(back.task.labeled.samples[i].features == task.labeled.samples[i].features);
    CHECK(back.task.labeled.labels[i] == task.labeled.labels[i]);
  }
  CHECK(LabelOracle(back.task.target).labels() == LabelOracle(task.target).labels());
}

TEST_CASE("without shift, target accuracy tracks held-out source accuracy") {
  auto spec = small_spec();
  spec.class_priors_target = spec.class_priors_source;
  spec.class_means_target = spec.class_means_source;
  // Per-image offsets make small image counts noisy; hold out plenty.
  spec.num_source_images = 20;
  spec.num_target_images = 16;
  ClassifierSpec cs;
  cs.num_classes = spec.num_classes;
  cs.feature_dim = spec.feature_dim;
  TrainConfig tc;
  tc.epochs = 6;
  auto accuracy = [&](const ParamVector& p, const std::vector<SampleGrid>& xs,
                      const std::vector<LabelGrid>& ys) {
    double hit = 0.0, n = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto pred = predict_labels(forward(cs, p, xs[i]));
      for (std::size_t k = 0; k < pred.size(); ++k) hit += pred[k] == ys[i][k];
      n += static_cast<double>(pred.size());
    }
    return 100.0 * hit / n;
  };
  double source_acc = 0.0, target_acc = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto task = normalize_task(generate_task(spec, seed));
    // First half of the source images trains, the second half is held out.
    LabeledSet train;
    std::vector<SampleGrid> held_x;
    std::vector<LabelGrid> held_y;
    for (std::size_t i = 0; i < task.labeled.samples.size(); ++i) {
      if (i < 4) {
        train.samples.push_back(task.labeled.samples[i]);
        train.labels.push_back(task.labeled.labels[i]);
      } else {
        held_x.push_back(task.labeled.samples[i]);
        held_y.push_back(task.labeled.labels[i]);
      }
    }
    const auto p = train_member(cs, train, Objective::supervised(), tc, seed).params;
    source_acc += accuracy(p, held_x, held_y) / 10.0;
    target_acc += accuracy(p, task.target.samples(), LabelOracle(task.target).labels()) / 10.0;
  }
  INFO("source " << source_acc << " target " << target_acc);
  CHECK(std::abs(source_acc - target_acc) <= 2.0);
}
