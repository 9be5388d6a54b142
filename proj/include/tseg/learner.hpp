#pragma once

// Per-pixel probabilistic classifier over r x r feature patches, trained by
// mini-batch SGD on a supervised cross-entropy term plus an optional
// pseudo-label term (weight beta) and/or entropy-minimization term.
//
// Losses use natural logarithms throughout this module.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "tseg/dataspace.hpp"

namespace tseg {

enum class ClassifierKind { kSoftmaxLinear, kMlp };

struct ClassifierSpec {
  ClassifierKind kind = ClassifierKind::kMlp;
  std::vector<int> hidden_widths = {32, 32};
  int receptive_field = 3;
  int num_classes = 4;
  int feature_dim = 3;

  void validate() const;
  int input_dim() const { return receptive_field * receptive_field * feature_dim; }
  std::size_t num_params() const;
};

void to_json(nlohmann::json& j, const ClassifierSpec& spec);
void from_json(const nlohmann::json& j, ClassifierSpec& spec);

struct LayerLayout {
  std::size_t weight_offset = 0;  // out x in, row-major
  std::size_t bias_offset = 0;
  int in = 0;
  int out = 0;
};

std::vector<LayerLayout> layer_layout(const ClassifierSpec& spec);

struct ParamVector {
  std::vector<double> values;

  bool operator==(const ParamVector&) const = default;
};

struct TrainConfig {
  double learning_rate = 0.05;
  int epochs = 20;
  int batch_pixels = 64;
  std::uint64_t seed = 0;
  double beta = 1.0;
  double em_weight = 1.0;
  double init_scale = 1.0;
  // Epochs of plain supervised training before the entropy term switches on.
  int em_warmup_epochs = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

/// Row-major [pixel][class] posteriors.
struct PosteriorGrid {
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<double> probs;

  std::span<const double> pixel(std::size_t p) const {
    return {probs.data() + p * num_classes, static_cast<std::size_t>(num_classes)};
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
};

/// 1 = pixel takes part in the loss, 0 = masked out.
using MaskGrid = std::vector<std::uint8_t>;

inline constexpr double kProbabilityFloor = 1e-12;

ParamVector init_params(const ClassifierSpec& spec, std::uint64_t seed,
                        double init_scale = 1.0);

/// Border pixels see zero-padded patches.
PosteriorGrid forward(const ClassifierSpec& spec, const ParamVector& params,
                      const SampleGrid& sample);

struct LossResult {
  double loss = 0.0;
  std::vector<double> grad_logits;  // same layout as PosteriorGrid::probs
  std::size_t counted_pixels = 0;
  std::size_t clamped = 0;
};

/// Mean negative log posterior of the true class over included pixels.
LossResult supervised_loss(const PosteriorGrid& posteriors, const LabelGrid& labels,
                           const MaskGrid* include = nullptr);

/// weight x mean per-pixel entropy (nats).
LossResult entropy_loss(const PosteriorGrid& posteriors, double weight);

struct PseudoLabelTerm {
  std::span<const SampleGrid> samples;
  std::span<const LabelGrid> labels;
  std::span<const MaskGrid> include;
};

/// Unsupervised terms added to the supervised cost. Empty = supervised only.
struct Objective {
  std::span<const SampleGrid> em_samples;
  std::optional<PseudoLabelTerm> pseudo;

  static Objective supervised() { return {}; }
  static Objective entropy_min(std::span<const SampleGrid> target) { return {target, {}}; }
  static Objective pseudo_label(PseudoLabelTerm term) { return {{}, term}; }
};

/// A set of patches ready for the network. Rows are flattened r x r x D patches.
struct PixelBatch {
  int input_dim = 0;
  std::vector<double> supervised_x;
  std::vector<int> supervised_y;
  std::vector<double> pseudo_x;
  std::vector<int> pseudo_y;
  std::vector<double> em_x;

  std::size_t supervised_rows() const { return supervised_y.size(); }
  std::size_t pseudo_rows() const { return pseudo_y.size(); }
  std::size_t em_rows() const { return input_dim ? em_x.size() / input_dim : 0; }
};

void extract_patch(const SampleGrid& sample, int y, int x, int receptive_field,
                   std::span<double> out);

/// Every labeled pixel, every included pseudo-label pixel, every EM pixel.
PixelBatch full_batch(const ClassifierSpec& spec, const LabeledSet& labeled,
                      const Objective& objective);

struct ObjectiveValue {
  double total = 0.0;
  double supervised = 0.0;
  double pseudo = 0.0;
  double entropy = 0.0;
  std::vector<double> gradient;  // d total / d params
  std::size_t clamped = 0;
};

/// total = supervised + beta * pseudo + em_weight * entropy, each a mean over its rows.
ObjectiveValue evaluate_objective(const ClassifierSpec& spec, const ParamVector& params,
                                  const PixelBatch& batch, double beta, double em_weight);

/// Pseudo-label term alone, over full grids (masked pixels never enter the computation).
ObjectiveValue pseudo_label_loss(const ClassifierSpec& spec, const ParamVector& params,
                                 const PseudoLabelTerm& term);

struct TrainResult {
  ParamVector params;
  double final_loss = 0.0;
  std::size_t iterations = 0;
  std::size_t clamped = 0;
};

TrainResult train(const ClassifierSpec& spec, const ParamVector& initial,
                  const LabeledSet& labeled, const Objective& objective,
                  const TrainConfig& config);

enum class GradientCase { kSupervised, kEntropy, kCombined };

struct GradientCheckInstance {
  PixelBatch batch;
  double beta = 0.0;
  double em_weight = 0.0;
};

/// A random 4x4 labeled grid plus a 4x4 target grid with a random mask.
GradientCheckInstance make_gradient_instance(const ClassifierSpec& spec, GradientCase which,
                                             std::uint64_t seed);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Central differences (step 1e-4) against the analytic gradient, every parameter.
GradientCheckResult gradient_check(const ClassifierSpec& spec, const ParamVector& params,
                                   const GradientCheckInstance& instance, double step = 1e-4);

struct Checkpoint {
  ClassifierSpec spec;
  TrainConfig config;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  ParamVector params;  // float32-rounded after a load
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Lowest index wins ties.
int argmax(std::span<const double> values);

LabelGrid predict_labels(const PosteriorGrid& posteriors);

}  // namespace tseg
