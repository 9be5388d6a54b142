#include "tseg/dataspace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "tseg/binary_io.hpp"
#include "tseg/common.hpp"

namespace tseg {
namespace {

void check_prior(const std::vector<double>& prior, int num_classes, const char* name) {
  if (static_cast<int>(prior.size()) != num_classes) {
    throw ConfigError(std::string(name) + " must have num_classes entries");
  }
  double sum = 0.0;
  for (double p : prior) {
    if (!(p >= 0.0)) throw ConfigError(std::string(name) + " has a negative entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError(std::string(name) + " must sum to 1 (sums to " +
                      std::to_string(sum) + ")");
  }
}

void check_means(const std::vector<std::vector<double>>& means, int num_classes,
                 int feature_dim, const char* name) {
  if (static_cast<int>(means.size()) != num_classes) {
    throw ConfigError(std::string(name) + " must have num_classes rows");
  }
  for (const auto& row : means) {
    if (static_cast<int>(row.size()) != feature_dim) {
      throw ConfigError(std::string(name) + " rows must have feature_dim entries");
    }
    for (double v : row) {
      if (!std::isfinite(v)) throw ConfigError(std::string(name) + " has a non-finite entry");
    }
  }
}

std::vector<double> feature_offset(const TaskSpec& spec, std::mt19937_64& rng) {
  std::vector<double> offset(spec.feature_dim, 0.0);
  if (spec.image_offset_std > 0.0) {
    std::normal_distribution<double> normal(0.0, spec.image_offset_std);
    for (auto& v : offset) v = normal(rng);
  }
  return offset;
}

SampleGrid render_features(const TaskSpec& spec, const LabelGrid& labels,
                           const std::vector<std::vector<double>>& means,
                           std::mt19937_64& rng, std::string id) {
  SampleGrid grid;
  grid.id = std::move(id);
  grid.height = spec.grid_height;
  grid.width = spec.grid_width;
  grid.channels = spec.feature_dim;
  grid.features.resize(grid.pixel_count() * spec.feature_dim);
  const auto offset = feature_offset(spec, rng);
  std::normal_distribution<double> noise(0.0, spec.feature_noise_std);
  std::size_t k = 0;
  for (std::size_t p = 0; p < grid.pixel_count(); ++p) {
    const auto& mu = means[labels[p]];
    for (int c = 0; c < spec.feature_dim; ++c) {
      grid.features[k++] = static_cast<float>(mu[c] + offset[c] + noise(rng));
    }
  }
  return grid;
}

std::string image_id(Domain domain, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%04d", domain == Domain::kSource ? "src" : "tgt",
                index);
  return buf;
}

}  // namespace

void TaskSpec::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (num_classes > 255) throw ConfigError("num_classes must fit in 8-bit labels");
  if (grid_height < 1 || grid_width < 1) throw ConfigError("grid dimensions must be positive");
  if (grid_height > 65535 || grid_width > 65535) throw ConfigError("grid dimensions exceed 65535");
  if (feature_dim < 1) throw ConfigError("feature_dim must be positive");
  check_prior(class_priors_source, num_classes, "class_priors_source");
  check_prior(class_priors_target, num_classes, "class_priors_target");
  check_means(class_means_source, num_classes, feature_dim, "class_feature_means_source");
  check_means(class_means_target, num_classes, feature_dim, "class_feature_means_target");
  if (!(feature_noise_std > 0.0)) throw ConfigError("feature_noise_std must be > 0");
  if (!(image_offset_std >= 0.0)) throw ConfigError("image_offset_std must be >= 0");
  if (blob_count_min < 0 || blob_count_max < blob_count_min) {
    throw ConfigError("blob_count_range must satisfy 0 <= min <= max");
  }
  if (blob_radius_min < 1 || blob_radius_max < blob_radius_min) {
    throw ConfigError("blob radius range must satisfy 1 <= min <= max");
  }
  if (num_source_images < 1 || num_target_images < 1) {
    throw ConfigError("num_source_images and num_target_images must be positive");
  }
}

TaskSpec TaskSpec::default_shifted() {
  TaskSpec s;
  s.num_classes = 4;
  s.grid_height = 24;
  s.grid_width = 24;
  s.feature_dim = 3;
  // Class 0 is background; blobs drawn as class 0 stay background.
  s.class_priors_source = {0.10, 0.30, 0.30, 0.30};
  s.class_priors_target = {0.10, 0.50, 0.25, 0.15};
  s.class_means_source = {{0.0, 0.0, 0.0}, {2.5, 0.0, 0.0}, {0.0, 2.5, 0.0}, {0.0, 0.0, 2.5}};
  // Target: every class moved by +0.9 in the first two channels.
  s.class_means_target = {{0.9, 0.9, 0.0}, {3.4, 0.9, 0.0}, {0.9, 3.4, 0.0}, {0.9, 0.9, 2.5}};
  s.feature_noise_std = 0.4;
  s.image_offset_std = 0.6;
  s.blob_count_min = 2;
  s.blob_count_max = 5;
  s.blob_radius_min = 2;
  s.blob_radius_max = 5;
  s.num_source_images = 12;
  s.num_target_images = 12;
  return s;
}

void to_json(nlohmann::json& j, const TaskSpec& s) {
  j = nlohmann::json{{"num_classes", s.num_classes},
                     {"grid_height", s.grid_height},
                     {"grid_width", s.grid_width},
                     {"feature_dim", s.feature_dim},
                     {"class_priors_source", s.class_priors_source},
                     {"class_priors_target", s.class_priors_target},
                     {"class_feature_means_source", s.class_means_source},
                     {"class_feature_means_target", s.class_means_target},
                     {"feature_noise_std", s.feature_noise_std},
                     {"image_offset_std", s.image_offset_std},
                     {"blob_count_range", {s.blob_count_min, s.blob_count_max}},
                     {"blob_radius_range", {s.blob_radius_min, s.blob_radius_max}},
                     {"num_source_images", s.num_source_images},
                     {"num_target_images", s.num_target_images}};
}

void from_json(const nlohmann::json& j, TaskSpec& s) {
  // Missing keys keep the default task's values.
  s = TaskSpec::default_shifted();
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("num_classes", s.num_classes);
  get("grid_height", s.grid_height);
  get("grid_width", s.grid_width);
  get("feature_dim", s.feature_dim);
  get("class_priors_source", s.class_priors_source);
  get("class_priors_target", s.class_priors_target);
  get("class_feature_means_source", s.class_means_source);
  get("class_feature_means_target", s.class_means_target);
  get("feature_noise_std", s.feature_noise_std);
  get("image_offset_std", s.image_offset_std);
  if (j.contains("blob_count_range")) {
    const auto& r = j.at("blob_count_range");
    if (!r.is_array() || r.size() != 2) throw ConfigError("blob_count_range must be [min, max]");
    s.blob_count_min = r[0].get<int>();
    s.blob_count_max = r[1].get<int>();
  }
  if (j.contains("blob_radius_range")) {
    const auto& r = j.at("blob_radius_range");
    if (!r.is_array() || r.size() != 2) throw ConfigError("blob_radius_range must be [min, max]");
    s.blob_radius_min = r[0].get<int>();
    s.blob_radius_max = r[1].get<int>();
  }
  get("num_source_images", s.num_source_images);
  get("num_target_images", s.num_target_images);
}

bool NormalizationStats::any_degenerate() const {
  return std::any_of(degenerate.begin(), degenerate.end(), [](bool b) { return b; });
}

TargetSet::TargetSet(std::vector<SampleGrid> samples, std::vector<LabelGrid> hidden_labels)
    : samples_(std::move(samples)), hidden_labels_(std::move(hidden_labels)) {
  if (hidden_labels_->size() != samples_.size()) {
    throw ConfigError("hidden labels must align with target samples");
  }
}

const std::vector<LabelGrid>& TargetSet::hidden_labels(const HiddenLabelKey&) const {
  if (!hidden_labels_) throw ConfigError("target set carries no hidden labels");
  return *hidden_labels_;
}

TargetSet TargetSet::with_samples(std::vector<SampleGrid> samples) const {
  if (samples.size() != samples_.size()) {
    throw ConfigError("replacement samples must align with the target set");
  }
  TargetSet out(std::move(samples));
  out.hidden_labels_ = hidden_labels_;
  return out;
}

TargetSet TargetSet::subset(std::span<const std::size_t> indices) const {
  std::vector<SampleGrid> picked;
  picked.reserve(indices.size());
  for (auto i : indices) picked.push_back(samples_.at(i));
  TargetSet out(std::move(picked));
  if (hidden_labels_) {
    std::vector<LabelGrid> labels;
    for (auto i : indices) labels.push_back(hidden_labels_->at(i));
    out.hidden_labels_ = std::move(labels);
  }
  return out;
}

bool Blob::covers(int y, int x) const {
  const int dy = y - center_y;
  const int dx = x - center_x;
  if (shape == BlobShape::kRectangle) {
    return std::abs(dy) <= radius_y && std::abs(dx) <= radius_x;
  }
  const double ny = static_cast<double>(dy) / (radius_y + 0.5);
  const double nx = static_cast<double>(dx) / (radius_x + 0.5);
  return ny * ny + nx * nx <= 1.0;
}

std::vector<Blob> draw_blobs(const TaskSpec& spec, std::span<const double> priors,
                             std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count_dist(spec.blob_count_min, spec.blob_count_max);
  std::uniform_int_distribution<int> radius_dist(spec.blob_radius_min, spec.blob_radius_max);
  std::uniform_int_distribution<int> y_dist(0, spec.grid_height - 1);
  std::uniform_int_distribution<int> x_dist(0, spec.grid_width - 1);
  std::discrete_distribution<int> class_dist(priors.begin(), priors.end());
  std::bernoulli_distribution ellipse(0.5);

  const int count = count_dist(rng);
  std::vector<Blob> blobs(count);
  for (auto& b : blobs) {
    b.label = class_dist(rng);
    b.shape = ellipse(rng) ? BlobShape::kEllipse : BlobShape::kRectangle;
    b.center_y = y_dist(rng);
    b.center_x = x_dist(rng);
    b.radius_y = radius_dist(rng);
    b.radius_x = radius_dist(rng);
  }
  return blobs;
}

LabelGrid rasterize(const TaskSpec& spec, std::span<const Blob> blobs) {
  LabelGrid labels(static_cast<std::size_t>(spec.grid_height) * spec.grid_width, 0);
  for (const auto& b : blobs) {
    const int y0 = std::max(0, b.center_y - b.radius_y);
    const int y1 = std::min(spec.grid_height - 1, b.center_y + b.radius_y);
    const int x0 = std::max(0, b.center_x - b.radius_x);
    const int x1 = std::min(spec.grid_width - 1, b.center_x + b.radius_x);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (b.covers(y, x)) {
          labels[static_cast<std::size_t>(y) * spec.grid_width + x] =
              static_cast<std::uint8_t>(b.label);
        }
      }
    }
  }
  return labels;
}

Task generate_task(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  Task task;
  for (int i = 0; i < spec.num_source_images; ++i) {
    std::mt19937_64 rng(mix_seed(mix_seed(seed, 0), static_cast<std::uint64_t>(i)));
    const auto blobs = draw_blobs(spec, spec.class_priors_source, rng);
    auto labels = rasterize(spec, blobs);
    task.labeled.samples.push_back(
        render_features(spec, labels, spec.class_means_source, rng, image_id(Domain::kSource, i)));
    task.labeled.labels.push_back(std::move(labels));
  }
  std::vector<SampleGrid> target;
  std::vector<LabelGrid> hidden;
  for (int i = 0; i < spec.num_target_images; ++i) {
    std::mt19937_64 rng(mix_seed(mix_seed(seed, 1), static_cast<std::uint64_t>(i)));
    const auto blobs = draw_blobs(spec, spec.class_priors_target, rng);
    auto labels = rasterize(spec, blobs);
    target.push_back(
        render_features(spec, labels, spec.class_means_target, rng, image_id(Domain::kTarget, i)));
    hidden.push_back(std::move(labels));
  }
  task.target = TargetSet(std::move(target), std::move(hidden));
  return task;
}

NormalizationStats fit_zscore(std::span<const SampleGrid> samples) {
  if (samples.empty()) throw ConfigError("z-score fit needs at least one sample");
  const int dims = samples.front().channels;
  std::vector<double> sum(dims, 0.0);
  std::size_t n = 0;
  for (const auto& s : samples) {
    if (s.channels != dims) throw ConfigError("inconsistent feature_dim across samples");
    for (std::size_t p = 0; p < s.pixel_count(); ++p) {
      for (int c = 0; c < dims; ++c) sum[c] += s.features[p * dims + c];
    }
    n += s.pixel_count();
  }
  NormalizationStats stats;
  stats.mean.resize(dims);
  for (int c = 0; c < dims; ++c) stats.mean[c] = sum[c] / static_cast<double>(n);
  std::vector<double> sq(dims, 0.0);
  for (const auto& s : samples) {
    for (std::size_t p = 0; p < s.pixel_count(); ++p) {
      for (int c = 0; c < dims; ++c) {
        const double d = s.features[p * dims + c] - stats.mean[c];
        sq[c] += d * d;
      }
    }
  }
  stats.std.resize(dims);
  stats.degenerate.assign(dims, false);
  for (int c = 0; c < dims; ++c) {
    // Population std.
    const double sd = std::sqrt(sq[c] / static_cast<double>(n));
    if (sd > 0.0 && std::isfinite(sd)) {
      stats.std[c] = sd;
    } else {
      stats.std[c] = 1.0;
      stats.degenerate[c] = true;
    }
  }
  return stats;
}

SampleGrid apply_zscore(const NormalizationStats& stats, const SampleGrid& sample) {
  if (static_cast<int>(stats.mean.size()) != sample.channels) {
    throw ConfigError("normalization stats do not match feature_dim");
  }
  SampleGrid out = sample;
  const int dims = sample.channels;
  for (std::size_t k = 0; k < out.features.size(); ++k) {
    const int c = static_cast<int>(k % dims);
    out.features[k] = static_cast<float>((sample.features[k] - stats.mean[c]) / stats.std[c]);
  }
  return out;
}

SampleGrid invert_zscore(const NormalizationStats& stats, const SampleGrid& sample) {
  SampleGrid out = sample;
  const int dims = sample.channels;
  for (std::size_t k = 0; k < out.features.size(); ++k) {
    const int c = static_cast<int>(k % dims);
    out.features[k] = static_cast<float>(sample.features[k] * stats.std[c] + stats.mean[c]);
  }
  return out;
}

ZScoreResult zscore_fit_apply(const LabeledSet& train,
                              const std::vector<std::vector<SampleGrid>>& others) {
  if (train.samples.empty()) throw ConfigError("z-score fit needs a nonempty training set");
  ZScoreResult result;
  result.stats = fit_zscore(train.samples);
  result.warning = result.stats.any_degenerate();
  result.train.labels = train.labels;
  result.train.stats = result.stats;
  for (const auto& s : train.samples) {
    result.train.samples.push_back(apply_zscore(result.stats, s));
  }
  for (const auto& group : others) {
    auto& out = result.others.emplace_back();
    for (const auto& s : group) out.push_back(apply_zscore(result.stats, s));
  }
  return result;
}

Task normalize_task(const Task& task) {
  auto z = zscore_fit_apply(task.labeled, {task.target.samples()});
  return Task{std::move(z.train), task.target.with_samples(std::move(z.others.front()))};
}

std::vector<std::size_t> FoldSplit::members(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_assignment.size(); ++i) {
    if (fold_assignment[i] == fold) out.push_back(i);
  }
  return out;
}

FoldSplit split_k_folds(std::size_t n, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be >= 2");
  if (n < static_cast<std::size_t>(k)) {
    throw ConfigError("need at least " + std::to_string(k) + " samples to split into " +
                      std::to_string(k) + " folds");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, 0xF01D));
  std::shuffle(order.begin(), order.end(), rng);
  FoldSplit split;
  split.seed = seed;
  split.fold_assignment.assign(n, 0);
  for (std::size_t pos = 0; pos < n; ++pos) {
    split.fold_assignment[order[pos]] = static_cast<int>(pos % k);
  }
  return split;
}

FoldSplit split_two_folds(const TargetSet& target, std::uint64_t seed) {
  return split_k_folds(target.size(), 2, seed);
}

std::string dataset_id(const TaskSpec& spec, std::uint64_t seed) {
  const std::string key = nlohmann::json(spec).dump() + "#" + std::to_string(seed);
  return "ds-" + hex64(fnv1a(key)).substr(0, 12);
}

void DatasetStore::save(const std::filesystem::path& dir, const TaskSpec& spec,
                        std::uint64_t seed, const Task& task) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  nlohmann::json manifest;
  manifest["format"] = "tseg-dataset";
  manifest["version"] = io::kFormatVersion;
  manifest["dataset_id"] = dataset_id(spec, seed);
  manifest["spec"] = spec;
  manifest["seed"] = seed;

  auto write_pair = [&](const SampleGrid& s, const LabelGrid* labels) {
    const io::GridHeader fh{static_cast<std::uint16_t>(s.height),
                            static_cast<std::uint16_t>(s.width),
                            static_cast<std::uint16_t>(s.channels)};
    io::write_f32_grid(dir / "images" / (s.id + ".feat"), fh, s.features);
    if (labels) {
      const io::GridHeader lh{fh.height, fh.width, 1};
      io::write_u8_grid(dir / "images" / (s.id + ".lab"), lh, *labels);
    }
  };

  std::vector<std::string> source_ids;
  for (std::size_t i = 0; i < task.labeled.samples.size(); ++i) {
    write_pair(task.labeled.samples[i], &task.labeled.labels[i]);
    source_ids.push_back(task.labeled.samples[i].id);
  }
  std::vector<std::string> target_ids;
  const auto* hidden =
      task.target.has_hidden_labels() ? &task.target.hidden_labels(HiddenLabelKey{}) : nullptr;
  for (std::size_t i = 0; i < task.target.size(); ++i) {
    write_pair(task.target.samples()[i], hidden ? &(*hidden)[i] : nullptr);
    target_ids.push_back(task.target.samples()[i].id);
  }
  manifest["source_ids"] = source_ids;
  manifest["target_ids"] = target_ids;
  manifest["target_has_labels"] = hidden != nullptr;

  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write manifest in " + dir.string());
  f << manifest.dump(2) << '\n';
}

StoredDataset DatasetStore::load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("dataset manifest not found in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt dataset manifest: " + std::string(e.what()));
  }
  StoredDataset out;
  out.spec = manifest.at("spec").get<TaskSpec>();
  out.seed = manifest.at("seed").get<std::uint64_t>();
  out.dataset_id = manifest.at("dataset_id").get<std::string>();

  auto read_sample = [&](const std::string& id) {
    io::GridHeader h;
    SampleGrid s;
    s.id = id;
    s.features = io::read_f32_grid(dir / "images" / (id + ".feat"), h);
    s.height = h.height;
    s.width = h.width;
    s.channels = h.channels;
    return s;
  };
  auto read_labels = [&](const std::string& id, const SampleGrid& s) {
    io::GridHeader h;
    auto labels = io::read_u8_grid(dir / "images" / (id + ".lab"), h);
    if (h.height != s.height || h.width != s.width || h.channels != 1) {
      throw IoError("label grid shape mismatch for " + id);
    }
    for (auto l : labels) {
      if (l >= out.spec.num_classes) throw IoError("label out of range in " + id);
    }
    return labels;
  };

  for (const auto& id : manifest.at("source_ids")) {
    auto s = read_sample(id.get<std::string>());
    out.task.labeled.labels.push_back(read_labels(s.id, s));
    out.task.labeled.samples.push_back(std::move(s));
  }
  std::vector<SampleGrid> target;
  std::vector<LabelGrid> hidden;
  const bool has_labels = manifest.value("target_has_labels", false);
  for (const auto& id : manifest.at("target_ids")) {
    auto s = read_sample(id.get<std::string>());
    if (has_labels) hidden.push_back(read_labels(s.id, s));
    target.push_back(std::move(s));
  }
  out.task.target = has_labels ? TargetSet(std::move(target), std::move(hidden))
                               : TargetSet(std::move(target));
  return out;
}

}  // namespace tseg
