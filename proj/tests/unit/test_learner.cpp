#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "tseg/common.hpp"
#include "tseg/learner.hpp"

namespace fs = std::filesystem;
using namespace tseg;

namespace {

ClassifierSpec small_mlp(int classes = 3, int features = 2, int rf = 3) {
  ClassifierSpec s;
  s.kind = ClassifierKind::kMlp;
  s.hidden_widths = {6};
  s.receptive_field = rf;
  s.num_classes = classes;
  s.feature_dim = features;
  return s;
}

SampleGrid random_grid(int h, int w, int d, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  SampleGrid s;
  s.id = "g" + std::to_string(seed);
  s.height = h;
  s.width = w;
  s.channels = d;
  s.features.resize(static_cast<std::size_t>(h * w * d));
  for (auto& f : s.features) f = static_cast<float>(n(rng));
  return s;
}

PosteriorGrid make_posteriors(int h, int w, int c, std::vector<double> probs) {
  return PosteriorGrid{h, w, c, std::move(probs)};
}

LabeledSet random_labeled(int n, int h, int w, int d, int classes, std::uint64_t seed) {
  LabeledSet set;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> label(0, classes - 1);
  for (int i = 0; i < n; ++i) {
    set.samples.push_back(random_grid(h, w, d, seed * 100 + i));
    LabelGrid l(h * w);
    for (auto& v : l) v = static_cast<std::uint8_t>(label(rng));
    set.labels.push_back(l);
  }
  return set;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("parameter layout and init") {
  const auto spec = small_mlp();
  CHECK(spec.input_dim() == 18);
  CHECK(spec.num_params() == 18 * 6 + 6 + 6 * 3 + 3);
  const auto a = init_params(spec, 1);
  CHECK(a == init_params(spec, 1));
  CHECK_FALSE(a == init_params(spec, 2));
  // Biases start at zero: the last C entries are the output bias.
  for (int k = 0; k < 3; ++k) CHECK(a.values[a.values.size() - 1 - k] == 0.0);

  const auto zero = init_params(spec, 1, 0.0);
  for (double v : zero.values) CHECK(v == 0.0);
  const auto post = forward(spec, zero, random_grid(4, 5, 2, 3));
  for (double p : post.probs) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("init scale follows fan-in") {
  auto spec = small_mlp();
  spec.hidden_widths = {400};
  const auto p = init_params(spec, 7);
  // First layer: 400 x 18 weights with sd sqrt(2 / 18).
  double ss = 0.0;
  for (std::size_t k = 0; k < 400 * 18; ++k) ss += p.values[k] * p.values[k];
  CHECK(std::sqrt(ss / (400 * 18)) == doctest::Approx(std::sqrt(2.0 / 18.0)).epsilon(0.05));
}

TEST_CASE("forward gives normalized posteriors") {
  const auto spec = small_mlp();
  const auto p = init_params(spec, 4, 3.0);
  const auto post = forward(spec, p, random_grid(5, 7, 2, 9, 4.0));
  CHECK(post.pixel_count() == 35);
  for (std::size_t k = 0; k < post.pixel_count(); ++k) {
    double sum = 0.0;
    for (double v : post.pixel(k)) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("a constant field gives equal posteriors wherever the patch is inside") {
  // Equal up to summation order inside the batched matrix product.
  SampleGrid s;
  s.id = "c";
  s.height = 6;
  s.width = 6;
  s.channels = 2;
  s.features.assign(72, 0.7f);
  for (int rf : {1, 3}) {
    const auto spec = small_mlp(3, 2, rf);
    const auto post = forward(spec, init_params(spec, 2), s);
    const int r = rf / 2;
    const auto ref = post.pixel(r * 6 + r);
    for (int y = r; y < 6 - r; ++y) {
      for (int x = r; x < 6 - r; ++x) {
        const auto q = post.pixel(y * 6 + x);
        for (int c = 0; c < 3; ++c) CHECK(std::abs(q[c] - ref[c]) <= 1e-14);
      }
    }
  }
}

TEST_CASE("non-finite input reports the pixel") {
  const auto spec = small_mlp();
  auto s = random_grid(4, 4, 2, 1);
  s.features[(2 * 4 + 1) * 2] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(forward(spec, init_params(spec, 0), s), doctest::Contains("y="),
                       NumericError);
}

TEST_CASE("supervised loss") {
  SUBCASE("one-hot on the truth -> 0") {
    const auto post = make_posteriors(1, 2, 2, {1.0, 0.0, 0.0, 1.0});
    const auto r = supervised_loss(post, {0, 1});
    CHECK(r.loss == 0.0);
  }
  SUBCASE("uniform -> ln C") {
    const auto post = make_posteriors(1, 3, 4, std::vector<double>(12, 0.25));
    CHECK(supervised_loss(post, {0, 2, 3}).loss == doctest::Approx(std::log(4.0)));
  }
  SUBCASE("half the 2x2 grid masked: mean over the rest") {
    // Included pixels 0 and 3 have true-class posteriors 0.8 and 0.5.
    const auto post = make_posteriors(2, 2, 2, {0.8, 0.2, 0.3, 0.7, 0.9, 0.1, 0.5, 0.5});
    const MaskGrid mask{1, 0, 0, 1};
    const auto r = supervised_loss(post, {0, 0, 1, 1}, &mask);
    CHECK(r.counted_pixels == 2);
    CHECK(r.loss == doctest::Approx(-(std::log(0.8) + std::log(0.5)) / 2.0));
    // Masked pixels contribute no gradient.
    for (int k : {2, 3, 4, 5}) CHECK(r.grad_logits[k] == 0.0);
  }
  SUBCASE("everything masked -> 0") {
    const auto post = make_posteriors(1, 2, 2, {0.5, 0.5, 0.5, 0.5});
    const MaskGrid mask{0, 0};
    const auto r = supervised_loss(post, {0, 1}, &mask);
    CHECK(r.loss == 0.0);
    CHECK(r.counted_pixels == 0);
  }
  SUBCASE("zero posterior on the truth is clamped and counted") {
    const auto post = make_posteriors(1, 1, 2, {0.0, 1.0});
    const auto r = supervised_loss(post, {0});
    CHECK(r.clamped == 1);
    CHECK(r.loss == doctest::Approx(-std::log(kProbabilityFloor)));
  }
}

TEST_CASE("entropy loss") {
  const auto uniform = make_posteriors(1, 2, 3, std::vector<double>(6, 1.0 / 3.0));
  CHECK(entropy_loss(uniform, 1.0).loss == doctest::Approx(std::log(3.0)));
  const auto sharp = make_posteriors(1, 1, 3, {1.0 - 2e-9, 1e-9, 1e-9});
  CHECK(entropy_loss(sharp, 1.0).loss < 1e-7);
  const auto off = entropy_loss(uniform, 0.0);
  CHECK(off.loss == 0.0);
  for (double g : off.grad_logits) CHECK(g == 0.0);
  // A uniform posterior is a stationary point of the entropy.
  for (double g : entropy_loss(uniform, 1.0).grad_logits) CHECK(std::abs(g) < 1e-15);
}

TEST_CASE("analytic gradients match central differences") {
  for (const auto& spec : {small_mlp(), small_mlp(4, 3, 1)}) {
    CHECK(spec.num_params() <= 200);
    for (auto which : {GradientCase::kSupervised, GradientCase::kEntropy, GradientCase::kCombined}) {
      const auto inst = make_gradient_instance(spec, which, 5);
      const auto r = gradient_check(spec, init_params(spec, 8), inst);
      CHECK(r.checked == spec.num_params());
      CHECK(r.max_relative_error < 1e-4);
    }
  }
}

TEST_CASE("objective decomposes into independently computed terms") {
  const auto spec = small_mlp();
  const auto inst = make_gradient_instance(spec, GradientCase::kCombined, 3);
  const auto params = init_params(spec, 1);
  const double beta = 0.7, em = 1.3;
  const auto total = evaluate_objective(spec, params, inst.batch, beta, em);

  PixelBatch sup = inst.batch;
  sup.pseudo_x.clear();
  sup.pseudo_y.clear();
  sup.em_x.clear();
  PixelBatch ps = inst.batch;
  ps.supervised_x.clear();
  ps.supervised_y.clear();
  ps.em_x.clear();
  PixelBatch en = inst.batch;
  en.supervised_x.clear();
  en.supervised_y.clear();
  en.pseudo_x.clear();
  en.pseudo_y.clear();
  const double s = evaluate_objective(spec, params, sup, 0.0, 0.0).total;
  const double p = evaluate_objective(spec, params, ps, 1.0, 0.0).total;
  const double e = evaluate_objective(spec, params, en, 0.0, 1.0).total;
  CHECK(std::abs(total.total - (s + beta * p + em * e)) <= 1e-9);
  CHECK(std::abs(total.supervised - s) <= 1e-9);
  CHECK(std::abs(total.pseudo - p) <= 1e-9);
  CHECK(std::abs(total.entropy - e) <= 1e-9);
}

TEST_CASE("masked pixels never reach the pseudo-label loss") {
  const auto spec = small_mlp(3, 2, 1);
  std::vector<SampleGrid> xs{random_grid(4, 4, 2, 11)};
  std::vector<LabelGrid> ys{LabelGrid(16, 1)};
  MaskGrid m(16, 1);
  m[5] = 0;
  std::vector<MaskGrid> ms{m};
  const auto params = init_params(spec, 2);
  const auto a = pseudo_label_loss(spec, params, {xs, ys, ms});
  xs[0].features[10] = 1e30f;
  xs[0].features[11] = std::numeric_limits<float>::infinity();
  ys[0][5] = 2;
  const auto b = pseudo_label_loss(spec, params, {xs, ys, ms});
  CHECK(std::memcmp(&a.total, &b.total, sizeof(double)) == 0);
  CHECK(same_bits(a.gradient, b.gradient));
}

TEST_CASE("training") {
  const auto spec = small_mlp();
  const auto labeled = random_labeled(2, 5, 5, 2, 3, 1);
  const auto init = init_params(spec, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_pixels = 8;
  cfg.seed = 3;

  SUBCASE("zero epochs returns the parameters unchanged") {
    TrainConfig z = cfg;
    z.epochs = 0;
    CHECK(train(spec, init, labeled, Objective::supervised(), z).params == init);
  }
  SUBCASE("bit-identical reruns") {
    const auto a = train(spec, init, labeled, Objective::supervised(), cfg);
    const auto b = train(spec, init, labeled, Objective::supervised(), cfg);
    CHECK(same_bits(a.params.values, b.params.values));
    CHECK(a.iterations == 3 * 7);
  }
  SUBCASE("beta = 0 reproduces supervised training exactly") {
    std::vector<SampleGrid> target{random_grid(5, 5, 2, 77)};
    std::vector<LabelGrid> pl{LabelGrid(25, 2)};
    std::vector<MaskGrid> pm{MaskGrid(25, 1)};
    TrainConfig b0 = cfg;
    b0.beta = 0.0;
    const auto a = train(spec, init, labeled, Objective::supervised(), cfg);
    const auto b = train(spec, init, labeled, Objective::pseudo_label({target, pl, pm}), b0);
    CHECK(same_bits(a.params.values, b.params.values));
    // And with beta = 1 the pseudo-labels do change the result.
    const auto c = train(spec, init, labeled, Objective::pseudo_label({target, pl, pm}), cfg);
    CHECK_FALSE(same_bits(a.params.values, c.params.values));
  }
  SUBCASE("entropy warm-up delays the entropy term") {
    std::vector<SampleGrid> target{random_grid(5, 5, 2, 78)};
    TrainConfig w = cfg;
    w.em_warmup_epochs = cfg.epochs;
    const auto a = train(spec, init, labeled, Objective::supervised(), cfg);
    const auto b = train(spec, init, labeled, Objective::entropy_min(target), w);
    CHECK(same_bits(a.params.values, b.params.values));
  }
  SUBCASE("divergence names the iteration") {
    TrainConfig bad = cfg;
    bad.learning_rate = 1e200;
    CHECK_THROWS_WITH_AS(train(spec, init, labeled, Objective::supervised(), bad),
                         doctest::Contains("iteration"), NumericError);
  }
  SUBCASE("invalid config") {
    TrainConfig bad = cfg;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(train(spec, init, labeled, Objective::supervised(), bad), ConfigError);
  }
}

TEST_CASE("linearly separable 2-class task reaches 99% with a linear classifier") {
  // Two classes split by the plane x0 + x1 = 0 with a margin.
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  LabeledSet set;
  for (int i = 0; i < 4; ++i) {
    SampleGrid s;
    s.id = "sep" + std::to_string(i);
    s.height = 8;
    s.width = 8;
    s.channels = 2;
    LabelGrid l(64);
    for (int p = 0; p < 64; ++p) {
      double a, b;
      do {
        a = u(rng);
        b = u(rng);
      } while (std::abs(a + b) < 0.3);
      s.features.push_back(static_cast<float>(a));
      s.features.push_back(static_cast<float>(b));
      l[p] = a + b > 0 ? 1 : 0;
    }
    set.samples.push_back(s);
    set.labels.push_back(l);
  }

  // Independent oracle: plain batch logistic regression on the same pixels.
  double w0 = 0, w1 = 0, bias = 0;
  for (int it = 0; it < 2000; ++it) {
    double g0 = 0, g1 = 0, gb = 0, n = 0;
    for (std::size_t i = 0; i < set.samples.size(); ++i) {
      for (int p = 0; p < 64; ++p) {
        const double x0 = set.samples[i].features[2 * p], x1 = set.samples[i].features[2 * p + 1];
        const double q = 1.0 / (1.0 + std::exp(-(w0 * x0 + w1 * x1 + bias)));
        const double e = q - set.labels[i][p];
        g0 += e * x0;
        g1 += e * x1;
        gb += e;
        n += 1;
      }
    }
    w0 -= 0.5 * g0 / n;
    w1 -= 0.5 * g1 / n;
    bias -= 0.5 * gb / n;
  }
  double oracle_hits = 0, hits = 0, total = 0;
  ClassifierSpec spec;
  spec.kind = ClassifierKind::kSoftmaxLinear;
  spec.hidden_widths.clear();
  spec.receptive_field = 1;
  spec.num_classes = 2;
  spec.feature_dim = 2;
  TrainConfig cfg;  // default budget
  const auto params = train(spec, init_params(spec, 0), set, Objective::supervised(), cfg).params;
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    const auto pred = predict_labels(forward(spec, params, set.samples[i]));
    for (int p = 0; p < 64; ++p) {
      const double x0 = set.samples[i].features[2 * p], x1 = set.samples[i].features[2 * p + 1];
      oracle_hits += ((w0 * x0 + w1 * x1 + bias > 0) ? 1 : 0) == set.labels[i][p];
      hits += pred[p] == set.labels[i][p];
      total += 1;
    }
  }
  REQUIRE(oracle_hits / total >= 0.99);
  CHECK(hits / total >= 0.99);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  CHECK(argmax(std::vector<double>{0.2, 0.4, 0.4}) == 1);
  CHECK(argmax(std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3}) == 0);
  CHECK(argmax(std::vector<double>{0.1, 0.9}) == 1);
}

TEST_CASE("checkpoint round trip stores float32 parameters") {
  const fs::path dir = "scratch_checkpoint";
  fs::remove_all(dir);
  Checkpoint ck;
  ck.spec = small_mlp();
  ck.seed = 12;
  ck.final_loss = 0.25;
  ck.params = init_params(ck.spec, 12);
  save_checkpoint(dir, ck);
  const auto back = load_checkpoint(dir);
  CHECK(back.seed == 12);
  CHECK(back.final_loss == 0.25);
  CHECK(back.spec.num_params() == ck.spec.num_params());
  REQUIRE(back.params.values.size() == ck.params.values.size());
  for (std::size_t k = 0; k < ck.params.values.size(); ++k) {
    CHECK(back.params.values[k] == static_cast<double>(static_cast<float>(ck.params.values[k])));
  }
  CHECK(fs::file_size(dir / "params.bin") == 16 + 4 * ck.spec.num_params());
}
