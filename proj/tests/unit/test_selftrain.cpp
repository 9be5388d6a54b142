#include <doctest.h>

#include <filesystem>

#include "tseg/common.hpp"
#include "tseg/selftrain.hpp"

namespace fs = std::filesystem;
using namespace tseg;

namespace {

PosteriorGrid grid(int h, int w, int c, std::vector<double> probs) {
  return PosteriorGrid{h, w, c, std::move(probs)};
}

TaskSpec tiny_task() {
  TaskSpec s = TaskSpec::default_shifted();
  s.grid_height = 10;
  s.grid_width = 10;
  s.num_source_images = 3;
  s.num_target_images = 3;
  return s;
}

ClassifierSpec tiny_mlp() {
  ClassifierSpec s;
  s.hidden_widths = {8};
  s.num_classes = 4;
  s.feature_dim = 3;
  return s;
}

}  // namespace

TEST_CASE("confidence is the largest posterior") {
  CHECK(confidence(std::vector<double>{0.2, 0.5, 0.3}) == 0.5);
  CHECK(confidence(std::vector<double>{1.0, 0.0}) == 1.0);
}

TEST_CASE("threshold examples") {
  SUBCASE("a uniform pixel is masked and labeled 0") {
    const std::vector<PosteriorGrid> p{grid(1, 1, 3, {1.0 / 3, 1.0 / 3, 1.0 / 3})};
    const auto pl = make_pseudolabels(p, 0.5);
    CHECK(pl.labels[0][0] == 0);
    CHECK(pl.mask[0][0] == 0);
    CHECK(pl.masked_fraction == 1.0);
  }
  SUBCASE("confidence equal to the threshold is masked") {
    const std::vector<PosteriorGrid> p{grid(1, 1, 2, {0.9, 0.1})};
    CHECK(make_pseudolabels(p, 0.9).mask[0][0] == 0);
    CHECK(make_pseudolabels(p, 0.89).mask[0][0] == 1);
  }
  SUBCASE("t = 0 keeps every pixel") {
    const std::vector<PosteriorGrid> p{grid(1, 2, 2, {0.5, 0.5, 0.2, 0.8})};
    const auto pl = make_pseudolabels(p, 0.0);
    CHECK(pl.mask[0] == MaskGrid{1, 1});
    CHECK(pl.labels[0] == LabelGrid{0, 1});
    CHECK(pl.masked_fraction == 0.0);
  }
  SUBCASE("threshold outside [0, 1]") {
    const std::vector<PosteriorGrid> p{grid(1, 1, 2, {0.5, 0.5})};
    CHECK_THROWS_AS(make_pseudolabels(p, 1.5), ConfigError);
    CHECK_THROWS_AS(make_pseudolabels(p, -0.1), ConfigError);
  }
}

TEST_CASE("raising the threshold only removes pixels and never relabels") {
  std::mt19937_64 rng(5);
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<PosteriorGrid> p;
  for (int i = 0; i < 3; ++i) {
    PosteriorGrid q{6, 6, 4, {}};
    for (int k = 0; k < 36; ++k) {
      double v[4], sum = 0;
      for (double& x : v) sum += (x = g(rng));
      for (double x : v) q.probs.push_back(x / sum);
    }
    p.push_back(q);
  }
  const std::vector<double> ts{0.0, 0.3, 0.5, 0.6, 0.7, 0.9, 0.95, 1.0};
  for (std::size_t a = 0; a + 1 < ts.size(); ++a) {
    const auto lo = make_pseudolabels(p, ts[a]);
    const auto hi = make_pseudolabels(p, ts[a + 1]);
    CHECK(hi.masked_fraction >= lo.masked_fraction);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(lo.labels[i] == hi.labels[i]);
      for (std::size_t k = 0; k < 36; ++k) CHECK(hi.mask[i][k] <= lo.mask[i][k]);
    }
  }
  CHECK(make_pseudolabels(p, 1.0).masked_fraction == 1.0);
}

TEST_CASE("pseudo-label sets round trip") {
  const fs::path dir = "scratch_pseudolabels";
  fs::remove_all(dir);
  const std::vector<PosteriorGrid> p{grid(2, 2, 2, {0.9, 0.1, 0.4, 0.6, 0.5, 0.5, 0.2, 0.8}),
                                     grid(1, 2, 2, {0.3, 0.7, 0.99, 0.01})};
  const auto pl = make_pseudolabels(p, 0.7, "ensemble", {"a", "b"});
  std::vector<SampleGrid> samples(2);
  samples[0] = SampleGrid{"t0", 2, 2, 1, std::vector<float>(4, 0.f)};
  samples[1] = SampleGrid{"t1", 1, 2, 1, std::vector<float>(2, 0.f)};
  save_pseudolabels(dir, pl, samples);
  const auto back = load_pseudolabels(dir);
  CHECK(back.labels == pl.labels);
  CHECK(back.mask == pl.mask);
  CHECK(back.threshold == 0.7);
  CHECK(back.source_kind == "ensemble");
  CHECK(back.source_ids == std::vector<std::string>{"a", "b"});
  CHECK(back.masked_fraction == doctest::Approx(pl.masked_fraction));
}

TEST_CASE("averaging posteriors") {
  const std::vector<PosteriorGrid> two{grid(1, 1, 2, {1.0, 0.0}), grid(1, 1, 2, {0.0, 1.0})};
  const auto avg = average_posteriors(two);
  CHECK(avg.probs == std::vector<double>{0.5, 0.5});
  CHECK(confidence(avg.pixel(0)) == 0.5);

  const std::vector<PosteriorGrid> mismatched{grid(1, 1, 2, {1.0, 0.0}),
                                              grid(1, 2, 2, {1.0, 0.0, 1.0, 0.0})};
  CHECK_THROWS_AS(average_posteriors(mismatched), ConfigError);
}

TEST_CASE("ensembles") {
  const auto task = normalize_task(generate_task(tiny_task(), 3));
  const auto spec = tiny_mlp();
  TrainConfig cfg;
  cfg.epochs = 2;

  SUBCASE("K = 1 equals the single model") {
    const std::vector<std::uint64_t> seeds{4};
    const auto ens = train_ensemble(spec, task.labeled, Objective::supervised(), cfg, seeds);
    const auto single = train_member(spec, task.labeled, Objective::supervised(), cfg, 4).params;
    const auto& s = task.target.samples()[0];
    CHECK(ensemble_predict(ens, s).probs == forward(spec, single, s).probs);
  }
  SUBCASE("duplicate seeds are rejected") {
    const std::vector<std::uint64_t> seeds{1, 2, 1};
    CHECK_THROWS_AS(train_ensemble(spec, task.labeled, Objective::supervised(), cfg, seeds),
                    ConfigError);
  }
  SUBCASE("worker count does not change the members") {
    const std::vector<std::uint64_t> seeds{0, 1, 2};
    const auto a = train_ensemble(spec, task.labeled, Objective::supervised(), cfg, seeds, 1);
    const auto b = train_ensemble(spec, task.labeled, Objective::supervised(), cfg, seeds, 3);
    for (std::size_t k = 0; k < 3; ++k) CHECK(a.members[k].params == b.members[k].params);
    CHECK(a.member_ids().size() == 3);
  }
}

TEST_CASE("the pipeline depends on target features only") {
  const auto task = normalize_task(generate_task(tiny_task(), 8));
  const auto spec = tiny_mlp();
  PipelineConfig cfg;
  cfg.source_seeds = {0, 1};
  cfg.retrain_seeds = {5};
  cfg.threshold = 0.6;
  cfg.train.epochs = 2;

  const auto with_labels = self_train_pipeline(spec, task.labeled, task.target, cfg);
  const TargetSet features_only(task.target.samples());
  const auto without = self_train_pipeline(spec, task.labeled, features_only, cfg);
  REQUIRE(with_labels.transductive.size() == task.target.size());
  for (std::size_t i = 0; i < task.target.size(); ++i) {
    CHECK(with_labels.transductive[i].probs == without.transductive[i].probs);
  }
  CHECK(with_labels.pseudo.source_kind == "ensemble");
  CHECK(with_labels.pseudo.threshold == 0.6);
  CHECK(with_labels.phase1.size() == 2);
  CHECK(with_labels.phase2.size() == 1);

  TargetSet empty;
  CHECK_THROWS_AS(self_train_pipeline(spec, task.labeled, empty, cfg), ConfigError);
}
