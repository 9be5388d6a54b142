#include "tseg/learner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "tseg/binary_io.hpp"
#include "tseg/common.hpp"

namespace tseg {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;

constexpr std::size_t kCheckpointRowWidth = 1024;

ConstRowMap weight(const ParamVector& p, const LayerLayout& l) {
  return ConstRowMap(p.values.data() + l.weight_offset, l.out, l.in);
}

Eigen::Map<const Eigen::RowVectorXd> bias(const ParamVector& p, const LayerLayout& l) {
  return Eigen::Map<const Eigen::RowVectorXd>(p.values.data() + l.bias_offset, l.out);
}

struct ForwardPass {
  std::vector<RowMat> inputs;  // input to each layer; hidden ones are post-ReLU
  RowMat probs;
};

ForwardPass run_network(const std::vector<LayerLayout>& layers, const ParamVector& params,
                        const double* x, std::size_t rows, int input_dim) {
  ForwardPass pass;
  pass.inputs.reserve(layers.size());
  pass.inputs.emplace_back(ConstRowMap(x, static_cast<Eigen::Index>(rows), input_dim));
  RowMat z;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    z.noalias() = pass.inputs.back() * weight(params, layers[l]).transpose();
    z.rowwise() += bias(params, layers[l]);
    if (l + 1 < layers.size()) {
      pass.inputs.emplace_back(z.cwiseMax(0.0));
    }
  }
  // Row-wise stable softmax.
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    z.row(r) = (z.row(r).array() - m).exp();
    z.row(r) /= z.row(r).sum();
  }
  pass.probs = std::move(z);
  return pass;
}

// Accumulates d loss / d params into `grad`, given d loss / d logits.
void backprop(const std::vector<LayerLayout>& layers, const ParamVector& params,
              const ForwardPass& pass, RowMat dz, std::vector<double>& grad) {
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& l = layers[li];
    const RowMat& a = pass.inputs[li];
    RowMap(grad.data() + l.weight_offset, l.out, l.in).noalias() += dz.transpose() * a;
    Eigen::Map<Eigen::RowVectorXd>(grad.data() + l.bias_offset, l.out) += dz.colwise().sum();
    if (li > 0) {
      RowMat da = dz * weight(params, l);
      dz = da.array() * (a.array() > 0.0).cast<double>();
    }
  }
}

double cross_entropy_rows(const RowMat& probs, std::span<const int> labels, RowMat& dlogits,
                          std::size_t& clamped) {
  const auto n = static_cast<double>(labels.size());
  dlogits = probs / n;
  double loss = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    double p = probs(static_cast<Eigen::Index>(r), labels[r]);
    if (p < kProbabilityFloor) {
      p = kProbabilityFloor;
      ++clamped;
    }
    loss -= std::log(p);
    dlogits(static_cast<Eigen::Index>(r), labels[r]) -= 1.0 / n;
  }
  return loss / n;
}

// Entropy (nats) of one softmax row and its gradient w.r.t. the logits:
// dH/dz_j = -p_j (ln p_j + H).
double entropy_row(std::span<const double> p, std::span<double> dz, double scale,
                   std::size_t& clamped) {
  double h = 0.0;
  for (double v : p) {
    if (v < kProbabilityFloor) {
      if (v > 0.0) ++clamped;
      continue;
    }
    h -= v * std::log(v);
  }
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double lp = std::log(std::max(p[j], kProbabilityFloor));
    dz[j] = -scale * p[j] * (lp + h);
  }
  return h;
}

double entropy_rows(const RowMat& probs, RowMat& dlogits, std::size_t& clamped) {
  const auto n = static_cast<double>(probs.rows());
  dlogits.resize(probs.rows(), probs.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    total += entropy_row({probs.row(r).data(), static_cast<std::size_t>(probs.cols())},
                         {dlogits.row(r).data(), static_cast<std::size_t>(probs.cols())},
                         1.0 / n, clamped);
  }
  return total / n;
}

struct PatchTable {
  int input_dim = 0;
  std::vector<double> x;
  std::vector<int> y;  // empty when unlabeled

  std::size_t rows() const { return input_dim ? x.size() / input_dim : 0; }
};

void append_patches(const SampleGrid& s, int r, const LabelGrid* labels, const MaskGrid* include,
                    PatchTable& table) {
  const int dim = table.input_dim;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * s.width + x;
      if (include && !(*include)[p]) continue;
      const std::size_t off = table.x.size();
      table.x.resize(off + dim);
      extract_patch(s, y, x, r, {table.x.data() + off, static_cast<std::size_t>(dim)});
      if (labels) table.y.push_back((*labels)[p]);
    }
  }
}

void check_sample(const ClassifierSpec& spec, const SampleGrid& s) {
  if (s.channels != spec.feature_dim) {
    throw ConfigError("sample " + s.id + " has feature_dim " + std::to_string(s.channels) +
                      ", classifier expects " + std::to_string(spec.feature_dim));
  }
}

PatchTable labeled_table(const ClassifierSpec& spec, std::span<const SampleGrid> samples,
                         std::span<const LabelGrid> labels, std::span<const MaskGrid> include) {
  if (labels.size() != samples.size()) throw ConfigError("labels must align with samples");
  if (!include.empty() && include.size() != samples.size()) {
    throw ConfigError("masks must align with samples");
  }
  PatchTable t;
  t.input_dim = spec.input_dim();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    check_sample(spec, samples[i]);
    if (labels[i].size() != samples[i].pixel_count()) throw ConfigError("label grid shape mismatch");
    for (auto l : labels[i]) {
      if (l >= spec.num_classes) throw ConfigError("label out of range for classifier");
    }
    append_patches(samples[i], spec.receptive_field, &labels[i],
                   include.empty() ? nullptr : &include[i], t);
  }
  return t;
}

PatchTable unlabeled_table(const ClassifierSpec& spec, std::span<const SampleGrid> samples) {
  PatchTable t;
  t.input_dim = spec.input_dim();
  for (const auto& s : samples) {
    check_sample(spec, s);
    append_patches(s, spec.receptive_field, nullptr, nullptr, t);
  }
  return t;
}

void gather_rows(const PatchTable& table, std::span<const std::size_t> rows,
                 std::vector<double>& x, std::vector<int>* y) {
  const int dim = table.input_dim;
  x.resize(rows.size() * dim);
  if (y) y->resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(table.x.data() + rows[i] * dim, dim, x.data() + i * dim);
    if (y) (*y)[i] = table.y[rows[i]];
  }
}

// Cycles through a reshuffled permutation of [0, n).
class RowSampler {
 public:
  RowSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    pos_ = n;
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count && !order_.empty()) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

}  // namespace

void ClassifierSpec::validate() const {
  if (receptive_field < 1 || receptive_field % 2 == 0) {
    throw ConfigError("receptive_field must be odd and >= 1");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (kind == ClassifierKind::kSoftmaxLinear && !hidden_widths.empty()) {
    throw ConfigError("softmax-linear classifier takes no hidden_widths");
  }
  for (int w : hidden_widths) {
    if (w < 1) throw ConfigError("hidden widths must be positive");
  }
}

std::size_t ClassifierSpec::num_params() const {
  const auto layers = layer_layout(*this);
  return layers.back().bias_offset + layers.back().out;
}

std::vector<LayerLayout> layer_layout(const ClassifierSpec& spec) {
  std::vector<int> widths{spec.input_dim()};
  if (spec.kind == ClassifierKind::kMlp) {
    widths.insert(widths.end(), spec.hidden_widths.begin(), spec.hidden_widths.end());
  }
  widths.push_back(spec.num_classes);
  std::vector<LayerLayout> layers;
  std::size_t offset = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    LayerLayout l;
    l.in = widths[i];
    l.out = widths[i + 1];
    l.weight_offset = offset;
    l.bias_offset = offset + static_cast<std::size_t>(l.in) * l.out;
    offset = l.bias_offset + l.out;
    layers.push_back(l);
  }
  return layers;
}

void to_json(nlohmann::json& j, const ClassifierSpec& s) {
  j = nlohmann::json{{"kind", s.kind == ClassifierKind::kMlp ? "mlp" : "softmax-linear"},
                     {"hidden_widths", s.hidden_widths},
                     {"receptive_field", s.receptive_field},
                     {"num_classes", s.num_classes},
                     {"feature_dim", s.feature_dim},
                     {"activation", "relu"}};
}

void from_json(const nlohmann::json& j, ClassifierSpec& s) {
  s = ClassifierSpec{};
  const auto kind = j.value("kind", std::string("mlp"));
  if (kind == "mlp") {
    s.kind = ClassifierKind::kMlp;
  } else if (kind == "softmax-linear") {
    s.kind = ClassifierKind::kSoftmaxLinear;
    s.hidden_widths.clear();
  } else {
    throw ConfigError("classifier.kind must be 'mlp' or 'softmax-linear'");
  }
  if (j.contains("hidden_widths")) j.at("hidden_widths").get_to(s.hidden_widths);
  if (j.value("activation", std::string("relu")) != "relu") {
    throw ConfigError("classifier.activation must be 'relu'");
  }
  s.receptive_field = j.value("receptive_field", s.receptive_field);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_pixels < 1) throw ConfigError("batch_pixels must be > 0");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(em_weight >= 0.0)) throw ConfigError("em_weight must be >= 0");
  if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be >= 0");
  if (em_warmup_epochs < 0) throw ConfigError("em_warmup_epochs must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"epochs", c.epochs},
                     {"batch_pixels", c.batch_pixels},   {"seed", c.seed},
                     {"beta", c.beta},                   {"em_weight", c.em_weight},
                     {"init_scale", c.init_scale},       {"em_warmup_epochs", c.em_warmup_epochs}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_pixels = j.value("batch_pixels", c.batch_pixels);
  c.seed = j.value("seed", c.seed);
  c.beta = j.value("beta", c.beta);
  c.em_weight = j.value("em_weight", c.em_weight);
  c.init_scale = j.value("init_scale", c.init_scale);
  c.em_warmup_epochs = j.value("em_warmup_epochs", c.em_warmup_epochs);
}

ParamVector init_params(const ClassifierSpec& spec, std::uint64_t seed, double init_scale) {
  spec.validate();
  const auto layers = layer_layout(spec);
  ParamVector p;
  p.values.assign(spec.num_params(), 0.0);
  std::mt19937_64 rng(mix_seed(seed, 0x1417));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double gain = spec.kind == ClassifierKind::kMlp ? 2.0 : 1.0;
  for (const auto& l : layers) {
    const double sd = init_scale * std::sqrt(gain / l.in);
    for (std::size_t k = 0; k < static_cast<std::size_t>(l.in) * l.out; ++k) {
      p.values[l.weight_offset + k] = sd * normal(rng);
    }
  }
  return p;
}

void extract_patch(const SampleGrid& s, int y, int x, int r, std::span<double> out) {
  const int half = r / 2;
  std::size_t k = 0;
  for (int dy = -half; dy <= half; ++dy) {
    for (int dx = -half; dx <= half; ++dx) {
      const int yy = y + dy;
      const int xx = x + dx;
      const bool inside = yy >= 0 && yy < s.height && xx >= 0 && xx < s.width;
      for (int c = 0; c < s.channels; ++c) {
        out[k++] = inside ? static_cast<double>(s.at(yy, xx, c)) : 0.0;
      }
    }
  }
}

PosteriorGrid forward(const ClassifierSpec& spec, const ParamVector& params,
                      const SampleGrid& sample) {
  check_sample(spec, sample);
  if (params.values.size() != spec.num_params()) {
    throw ConfigError("parameter vector does not match classifier layout");
  }
  const auto table = unlabeled_table(spec, std::span(&sample, 1));
  const auto pass =
      run_network(layer_layout(spec), params, table.x.data(), table.rows(), table.input_dim);
  PosteriorGrid out;
  out.height = sample.height;
  out.width = sample.width;
  out.num_classes = spec.num_classes;
  out.probs.assign(pass.probs.data(), pass.probs.data() + pass.probs.size());
  for (std::size_t i = 0; i < out.probs.size(); ++i) {
    if (!std::isfinite(out.probs[i])) {
      const std::size_t p = i / spec.num_classes;
      throw NumericError("non-finite posterior at pixel (y=" + std::to_string(p / sample.width) +
                         ", x=" + std::to_string(p % sample.width) + ") of " + sample.id);
    }
  }
  return out;
}

LossResult supervised_loss(const PosteriorGrid& posteriors, const LabelGrid& labels,
                           const MaskGrid* include) {
  const std::size_t n = posteriors.pixel_count();
  if (labels.size() != n || (include && include->size() != n)) {
    throw ConfigError("posterior, label and mask shapes must agree");
  }
  const int c = posteriors.num_classes;
  LossResult r;
  r.grad_logits.assign(posteriors.probs.size(), 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    if (!include || (*include)[p]) ++r.counted_pixels;
  }
  if (r.counted_pixels == 0) return r;
  const double inv = 1.0 / static_cast<double>(r.counted_pixels);
  for (std::size_t p = 0; p < n; ++p) {
    if (include && !(*include)[p]) continue;
    if (labels[p] >= c) throw ConfigError("label out of range");
    double pt = posteriors.probs[p * c + labels[p]];
    if (pt < kProbabilityFloor) {
      pt = kProbabilityFloor;
      ++r.clamped;
    }
    r.loss -= std::log(pt);
    for (int k = 0; k < c; ++k) {
      r.grad_logits[p * c + k] = inv * (posteriors.probs[p * c + k] - (k == labels[p] ? 1.0 : 0.0));
    }
  }
  r.loss *= inv;
  return r;
}

LossResult entropy_loss(const PosteriorGrid& posteriors, double weight) {
  const std::size_t n = posteriors.pixel_count();
  const auto c = static_cast<std::size_t>(posteriors.num_classes);
  LossResult r;
  r.grad_logits.assign(posteriors.probs.size(), 0.0);
  r.counted_pixels = n;
  if (n == 0 || weight == 0.0) return r;
  const double scale = weight / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    total += entropy_row(posteriors.pixel(p), {r.grad_logits.data() + p * c, c}, scale, r.clamped);
  }
  r.loss = weight * total / static_cast<double>(n);
  return r;
}

PixelBatch full_batch(const ClassifierSpec& spec, const LabeledSet& labeled,
                      const Objective& objective) {
  PixelBatch b;
  b.input_dim = spec.input_dim();
  auto sup = labeled_table(spec, labeled.samples, labeled.labels, {});
  b.supervised_x = std::move(sup.x);
  b.supervised_y = std::move(sup.y);
  if (objective.pseudo) {
    auto ps = labeled_table(spec, objective.pseudo->samples, objective.pseudo->labels,
                            objective.pseudo->include);
    b.pseudo_x = std::move(ps.x);
    b.pseudo_y = std::move(ps.y);
  }
  if (!objective.em_samples.empty()) {
    b.em_x = unlabeled_table(spec, objective.em_samples).x;
  }
  return b;
}

ObjectiveValue evaluate_objective(const ClassifierSpec& spec, const ParamVector& params,
                                  const PixelBatch& batch, double beta, double em_weight) {
  const auto layers = layer_layout(spec);
  const std::size_t np = spec.num_params();
  if (params.values.size() != np) throw ConfigError("parameter vector does not match classifier layout");
  ObjectiveValue v;
  v.gradient.assign(np, 0.0);
  RowMat dz;

  if (batch.supervised_rows() > 0) {
    const auto pass = run_network(layers, params, batch.supervised_x.data(),
                                  batch.supervised_rows(), batch.input_dim);
    v.supervised = cross_entropy_rows(pass.probs, batch.supervised_y, dz, v.clamped);
    backprop(layers, params, pass, std::move(dz), v.gradient);
  }
  if (beta != 0.0 && batch.pseudo_rows() > 0) {
    std::vector<double> g(np, 0.0);
    const auto pass =
        run_network(layers, params, batch.pseudo_x.data(), batch.pseudo_rows(), batch.input_dim);
    v.pseudo = cross_entropy_rows(pass.probs, batch.pseudo_y, dz, v.clamped);
    backprop(layers, params, pass, std::move(dz), g);
    for (std::size_t k = 0; k < np; ++k) v.gradient[k] += beta * g[k];
  }
  if (em_weight != 0.0 && batch.em_rows() > 0) {
    std::vector<double> g(np, 0.0);
    const auto pass = run_network(layers, params, batch.em_x.data(), batch.em_rows(), batch.input_dim);
    v.entropy = entropy_rows(pass.probs, dz, v.clamped);
    backprop(layers, params, pass, std::move(dz), g);
    for (std::size_t k = 0; k < np; ++k) v.gradient[k] += em_weight * g[k];
  }
  v.total = v.supervised + beta * v.pseudo + em_weight * v.entropy;
  return v;
}

ObjectiveValue pseudo_label_loss(const ClassifierSpec& spec, const ParamVector& params,
                                 const PseudoLabelTerm& term) {
  PixelBatch b;
  b.input_dim = spec.input_dim();
  auto ps = labeled_table(spec, term.samples, term.labels, term.include);
  b.pseudo_x = std::move(ps.x);
  b.pseudo_y = std::move(ps.y);
  return evaluate_objective(spec, params, b, 1.0, 0.0);
}

TrainResult train(const ClassifierSpec& spec, const ParamVector& initial,
                  const LabeledSet& labeled, const Objective& objective,
                  const TrainConfig& config) {
  spec.validate();
  config.validate();
  if (initial.values.size() != spec.num_params()) {
    throw ConfigError("initial parameters do not match classifier layout");
  }
  TrainResult result;
  result.params = initial;
  if (config.epochs == 0) return result;

  const auto sup = labeled_table(spec, labeled.samples, labeled.labels, {});
  if (sup.rows() == 0) throw ConfigError("labeled set has no pixels");
  PatchTable pseudo;
  const bool use_pseudo = objective.pseudo.has_value() && config.beta != 0.0;
  if (use_pseudo) {
    pseudo = labeled_table(spec, objective.pseudo->samples, objective.pseudo->labels,
                           objective.pseudo->include);
  }
  PatchTable em;
  const bool use_em = !objective.em_samples.empty() && config.em_weight != 0.0;
  if (use_em) em = unlabeled_table(spec, objective.em_samples);

  // Independent streams so that adding target terms never perturbs the
  // labeled-pixel schedule.
  std::mt19937_64 labeled_rng(mix_seed(config.seed, 2));
  RowSampler pseudo_sampler(pseudo.rows(), mix_seed(config.seed, 3));
  RowSampler em_sampler(em.rows(), mix_seed(config.seed, 4));

  const std::size_t batch = static_cast<std::size_t>(config.batch_pixels);
  std::vector<std::size_t> order(sup.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  PixelBatch b;
  b.input_dim = spec.input_dim();
  auto& params = result.params.values;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), labeled_rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      gather_rows(sup, std::span(order).subspan(start, end - start), b.supervised_x,
                  &b.supervised_y);
      if (use_pseudo) gather_rows(pseudo, pseudo_sampler.next(batch), b.pseudo_x, &b.pseudo_y);
      const bool em_on = use_em && epoch >= config.em_warmup_epochs;
      if (em_on) {
        gather_rows(em, em_sampler.next(batch), b.em_x, nullptr);
      } else {
        b.em_x.clear();
      }
      const auto v = evaluate_objective(spec, result.params, b, use_pseudo ? config.beta : 0.0,
                                        em_on ? config.em_weight : 0.0);
      if (!std::isfinite(v.total)) {
        throw NumericError("training diverged at iteration " + std::to_string(result.iterations) +
                           " (epoch " + std::to_string(epoch) + ")");
      }
      for (std::size_t k = 0; k < params.size(); ++k) {
        params[k] -= config.learning_rate * v.gradient[k];
      }
      result.final_loss = v.total;
      result.clamped += v.clamped;
      ++result.iterations;
    }
  }
  for (double p : params) {
    if (!std::isfinite(p)) {
      throw NumericError("training diverged: non-finite parameter after iteration " +
                         std::to_string(result.iterations));
    }
  }
  return result;
}

GradientCheckInstance make_gradient_instance(const ClassifierSpec& spec, GradientCase which,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x6C));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, spec.num_classes - 1);
  std::bernoulli_distribution keep(0.5);
  auto grid = [&](const std::string& id) {
    SampleGrid s;
    s.id = id;
    s.height = 4;
    s.width = 4;
    s.channels = spec.feature_dim;
    s.features.resize(16 * static_cast<std::size_t>(spec.feature_dim));
    for (auto& f : s.features) f = static_cast<float>(normal(rng));
    return s;
  };
  LabeledSet labeled;
  labeled.samples.push_back(grid("gc-labeled"));
  labeled.labels.emplace_back(16);
  for (auto& l : labeled.labels.back()) l = static_cast<std::uint8_t>(label(rng));
  std::vector<SampleGrid> target{grid("gc-target")};
  std::vector<LabelGrid> pseudo_labels(1, LabelGrid(16));
  for (auto& l : pseudo_labels[0]) l = static_cast<std::uint8_t>(label(rng));
  std::vector<MaskGrid> include(1, MaskGrid(16));
  for (auto& m : include[0]) m = keep(rng) ? 1 : 0;
  include[0][0] = 1;

  GradientCheckInstance inst;
  Objective obj;
  switch (which) {
    case GradientCase::kSupervised:
      break;
    case GradientCase::kEntropy:
      obj.em_samples = target;
      inst.em_weight = 1.0;
      break;
    case GradientCase::kCombined:
      obj.em_samples = target;
      obj.pseudo = PseudoLabelTerm{target, pseudo_labels, include};
      inst.beta = 1.0;
      inst.em_weight = 1.0;
      break;
  }
  inst.batch = full_batch(spec, labeled, obj);
  if (which == GradientCase::kEntropy) {
    inst.batch.supervised_x.clear();
    inst.batch.supervised_y.clear();
  }
  return inst;
}

GradientCheckResult gradient_check(const ClassifierSpec& spec, const ParamVector& params,
                                   const GradientCheckInstance& inst, double step) {
  const auto analytic = evaluate_objective(spec, params, inst.batch, inst.beta, inst.em_weight);
  GradientCheckResult r;
  ParamVector probe = params;
  for (std::size_t k = 0; k < params.values.size(); ++k) {
    probe.values[k] = params.values[k] + step;
    const double up = evaluate_objective(spec, probe, inst.batch, inst.beta, inst.em_weight).total;
    probe.values[k] = params.values[k] - step;
    const double down = evaluate_objective(spec, probe, inst.batch, inst.beta, inst.em_weight).total;
    probe.values[k] = params.values[k];
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic.gradient[k];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-7});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > r.max_relative_error) {
      r.max_relative_error = rel;
      r.worst_index = k;
    }
    ++r.checked;
  }
  return r;
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  const std::size_t n = ck.params.values.size();
  const std::size_t width = std::min(n, kCheckpointRowWidth);
  const std::size_t height = width ? (n + width - 1) / width : 0;
  if (height > 65535) throw IoError("parameter vector too large for checkpoint format");
  std::vector<float> flat(width * height, 0.0f);
  std::transform(ck.params.values.begin(), ck.params.values.end(), flat.begin(),
                 [](double v) { return static_cast<float>(v); });
  io::write_f32_grid(dir / "params.bin",
                     {static_cast<std::uint16_t>(height), static_cast<std::uint16_t>(width), 1},
                     flat);
  nlohmann::json m;
  m["format"] = "tseg-checkpoint";
  m["spec"] = ck.spec;
  m["config"] = ck.config;
  m["seed"] = ck.seed;
  m["final_loss"] = ck.final_loss;
  m["num_params"] = n;
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint manifest in " + dir.string());
  f << m.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("checkpoint manifest not found in " + dir.string());
  const auto m = nlohmann::json::parse(f);
  Checkpoint ck;
  ck.spec = m.at("spec").get<ClassifierSpec>();
  ck.config = m.at("config").get<TrainConfig>();
  ck.seed = m.at("seed").get<std::uint64_t>();
  ck.final_loss = m.at("final_loss").get<double>();
  const auto n = m.at("num_params").get<std::size_t>();
  if (n != ck.spec.num_params()) throw IoError("checkpoint num_params does not match spec");
  io::GridHeader h;
  const auto flat = io::read_f32_grid(dir / "params.bin", h);
  if (flat.size() < n) throw IoError("checkpoint parameter file too short");
  ck.params.values.assign(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(n));
  return ck;
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = static_cast<int>(i);
  }
  return best;
}

LabelGrid predict_labels(const PosteriorGrid& posteriors) {
  LabelGrid out(posteriors.pixel_count());
  for (std::size_t p = 0; p < out.size(); ++p) {
    out[p] = static_cast<std::uint8_t>(argmax(posteriors.pixel(p)));
  }
  return out;
}

}  // namespace tseg
