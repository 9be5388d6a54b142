#pragma once

// Synthetic multi-class segmentation tasks with a controllable
// source -> target shift, z-score normalization and two-fold splitting.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace tseg {

enum class Domain { kSource, kTarget };

struct TaskSpec {
  int num_classes = 4;
  int grid_height = 24;
  int grid_width = 24;
  int feature_dim = 3;
  std::vector<double> class_priors_source;
  std::vector<double> class_priors_target;
  std::vector<std::vector<double>> class_means_source;  // [class][feature]
  std::vector<std::vector<double>> class_means_target;
  double feature_noise_std = 1.0;
  // Per-image additive feature offset ("scanner" variation). 0 disables it.
  double image_offset_std = 0.0;
  int blob_count_min = 2;
  int blob_count_max = 5;
  int blob_radius_min = 2;
  int blob_radius_max = 5;
  int num_source_images = 12;
  int num_target_images = 12;

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;

  /// The shifted 4-class task used by the experiment defaults.
  static TaskSpec default_shifted();
};

void to_json(nlohmann::json& j, const TaskSpec& spec);
void from_json(const nlohmann::json& j, TaskSpec& spec);

using LabelGrid = std::vector<std::uint8_t>;

/// Row-major [y][x][feature] grid of feature vectors.
struct SampleGrid {
  std::string id;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> features;

  float at(int y, int x, int c) const {
    return features[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
};

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> std;
  // Feature dimensions whose std was zero and replaced by 1.
  std::vector<bool> degenerate;

  bool empty() const { return mean.empty(); }
  bool any_degenerate() const;
};

struct LabeledSet {
  std::vector<SampleGrid> samples;
  std::vector<LabelGrid> labels;
  NormalizationStats stats;
};

class HiddenLabelKey;

/// Unlabeled target images. Ground truth, when attached, is reachable only
/// through a HiddenLabelKey, which training code cannot construct.
class TargetSet {
 public:
  TargetSet() = default;
  explicit TargetSet(std::vector<SampleGrid> samples) : samples_(std::move(samples)) {}
  TargetSet(std::vector<SampleGrid> samples, std::vector<LabelGrid> hidden_labels);

  const std::vector<SampleGrid>& samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  bool has_hidden_labels() const { return hidden_labels_.has_value(); }

  const std::vector<LabelGrid>& hidden_labels(const HiddenLabelKey&) const;

  /// Same hidden labels, replaced features (e.g. after normalization).
  TargetSet with_samples(std::vector<SampleGrid> samples) const;
  TargetSet subset(std::span<const std::size_t> indices) const;

 private:
  std::vector<SampleGrid> samples_;
  std::optional<std::vector<LabelGrid>> hidden_labels_;
};

class HiddenLabelKey {
  HiddenLabelKey() = default;
  friend class LabelOracle;
  friend class DatasetStore;
};

struct Task {
  LabeledSet labeled;
  TargetSet target;
};

enum class BlobShape { kRectangle, kEllipse };

struct Blob {
  BlobShape shape = BlobShape::kRectangle;
  int label = 0;
  int center_y = 0;
  int center_x = 0;
  int radius_y = 1;
  int radius_x = 1;

  bool covers(int y, int x) const;
};

/// Draws the blob layout of one image: count, shapes, classes from `priors`.
std::vector<Blob> draw_blobs(const TaskSpec& spec, std::span<const double> priors,
                             std::mt19937_64& rng);

/// Paints blobs in order over background class 0.
LabelGrid rasterize(const TaskSpec& spec, std::span<const Blob> blobs);

/// Pure function of (spec, seed).
Task generate_task(const TaskSpec& spec, std::uint64_t seed);

NormalizationStats fit_zscore(std::span<const SampleGrid> samples);
SampleGrid apply_zscore(const NormalizationStats& stats, const SampleGrid& sample);
SampleGrid invert_zscore(const NormalizationStats& stats, const SampleGrid& sample);

struct ZScoreResult {
  LabeledSet train;  // normalized, stats attached
  std::vector<std::vector<SampleGrid>> others;
  NormalizationStats stats;
  bool warning = false;  // some feature had zero std
};

ZScoreResult zscore_fit_apply(const LabeledSet& train,
                              const std::vector<std::vector<SampleGrid>>& others);

/// Normalizes both halves of a task with statistics fitted on the labeled set.
Task normalize_task(const Task& task);

struct FoldSplit {
  std::vector<int> fold_assignment;
  std::uint64_t seed = 0;

  std::vector<std::size_t> members(int fold) const;
};

FoldSplit split_two_folds(const TargetSet& target, std::uint64_t seed);

/// k-way analogue of split_two_folds; sizes differ by at most one.
FoldSplit split_k_folds(std::size_t n, int k, std::uint64_t seed);

struct StoredDataset {
  TaskSpec spec;
  std::uint64_t seed = 0;
  std::string dataset_id;
  Task task;
};

std::string dataset_id(const TaskSpec& spec, std::uint64_t seed);

/// Directory persistence: manifest.json plus one .feat/.lab pair per image.
class DatasetStore {
 public:
  static void save(const std::filesystem::path& dir, const TaskSpec& spec,
                   std::uint64_t seed, const Task& task);
  static StoredDataset load(const std::filesystem::path& dir);
};

}  // namespace tseg
