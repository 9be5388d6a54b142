#pragma once

// Dice scoring, the method-matrix experiment, the two-fold
// induction-vs-transduction protocol, calibration studies and a paired
// permutation test. This is the only module that reads target ground truth.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tseg/calibration.hpp"
#include "tseg/dataspace.hpp"
#include "tseg/learner.hpp"
#include "tseg/selftrain.hpp"

namespace tseg {

/// Dice (percent) of one class pooled over all pixels of all listed grids.
/// 100 when the class is absent from both prediction and reference.
double dice(std::span<const LabelGrid> pred, std::span<const LabelGrid> ref, int class_id);

struct DiceReport {
  std::vector<double> per_class_dice;  // all C classes, percent
  double mean_dice = 0.0;              // over scored classes
  std::vector<double> per_sample_mean; // same averaging, one image at a time
  bool include_background = false;
};

/// Mean over classes 1..C-1 unless include_background.
DiceReport dice_report(std::span<const LabelGrid> pred, std::span<const LabelGrid> ref,
                       int num_classes, bool include_background = false);

/// Read access to the hidden target labels, for scoring only.
class LabelOracle {
 public:
  explicit LabelOracle(const TargetSet& target);

  std::size_t size() const { return labels_.size(); }
  const std::vector<LabelGrid>& labels() const { return labels_; }

  DiceReport score(std::span<const PosteriorGrid> predictions, int num_classes,
                   bool include_background = false) const;

  /// One entry per pixel: max posterior, argmax == truth, entropy in bits.
  std::vector<Prediction> pixel_predictions(std::span<const PosteriorGrid> predictions) const;

  /// Target images with their true labels, for the labeled-target upper bound.
  LabeledSet labeled_subset(std::span<const std::size_t> indices) const;

 private:
  const TargetSet& target_;
  const std::vector<LabelGrid>& labels_;
};

enum class Mode { kInductive, kTransductive };

const char* mode_name(Mode mode);

struct ProtocolRow {
  std::string method;
  std::optional<double> t;
  int seed = -1;  // -1 for ensemble rows
  Mode mode = Mode::kInductive;
  double mean_dice = 0.0;
  std::vector<double> per_class_dice;
  std::vector<double> per_sample_dice;
  double runtime_s = 0.0;
};

struct AggregateRow {
  std::string method;
  std::optional<double> t;
  Mode mode = Mode::kInductive;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample std over seeds, 0 when n == 1
};

struct SignificanceRow {
  std::string method;
  std::optional<double> t;
  std::string unit;  // "seed" or "sample"
  std::size_t n = 0;
  double mean_inductive = 0.0;
  double mean_transductive = 0.0;
  double p_value = 1.0;
};

inline constexpr const char* kSignificanceTest =
    "paired sign-flip permutation test (stand-in; exact enumeration when 2^n <= permutations)";

class ProtocolResult {
 public:
  /// Throws ConfigError when (method, t, seed, mode) is already present.
  void add(ProtocolRow row);

  /// Sorted by method, t, mode, seed.
  std::vector<ProtocolRow> rows() const;
  std::vector<AggregateRow> aggregate() const;

  std::vector<SignificanceRow> significance;

 private:
  std::vector<ProtocolRow> rows_;
};

std::vector<AggregateRow> aggregate_rows(std::span<const ProtocolRow> rows);

struct ExperimentConfig {
  ClassifierSpec classifier;
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> thresholds = {0.0, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
  bool include_oracle = true;
  int oracle_folds = 5;
  std::vector<double> ivt_thresholds = {0.7, 0.9};
  bool ivt_include_em = true;
  std::uint64_t fold_seed = 0;
  int permutations = 10000;
  std::uint64_t permutation_seed = 0;
  int calibration_bins = 10;
  int calibration_ensemble_size = 10;
  int workers = 1;
};

/// Seed of the fresh phase-2 model paired with phase-1 seed `seed`.
std::uint64_t retrain_seed(std::uint64_t seed);

using ProgressFn = std::function<void(const std::string&)>;

/// Sup, Ens(Sup), EntrMin, ST_cnn_t, ST_ens_t and their ensembles, plus the
/// flagged labeled-target upper bound. Expects a normalized task.
ProtocolResult run_method_matrix(const LabeledSet& labeled, const TargetSet& target,
                                 const ExperimentConfig& config, const ProgressFn& progress = {});

/// Two-fold protocol: every target image gets one inductive and one
/// transductive prediction per seed and method.
ProtocolResult run_induction_vs_transduction(const LabeledSet& labeled, const TargetSet& target,
                                             const ExperimentConfig& config,
                                             const ProgressFn& progress = {});

struct CalibrationSeedRow {
  std::uint64_t seed = 0;
  double ensemble_ece = 0.0;
  double member_mean_ece = 0.0;
  double ensemble_delta = 0.0;
  double member_mean_delta = 0.0;
};

struct CalibrationStudy {
  std::vector<CalibrationSeedRow> per_seed;
  CalibrationReport single;    // pooled over all individual members
  CalibrationReport ensemble;  // pooled over all per-seed ensembles
  double single_delta = 0.0;
  double ensemble_delta = 0.0;
  double single_realized_ig = 0.0;
  double ensemble_realized_ig = 0.0;
  double single_surrogate_ig = 0.0;  // mean expected_ig(s, delta_hat) over predictions
  double ensemble_surrogate_ig = 0.0;
};

/// For each seed, K supervised members and their average, scored on the target.
CalibrationStudy run_calibration_study(const LabeledSet& labeled, const TargetSet& target,
                                       const ExperimentConfig& config,
                                       const ProgressFn& progress = {});

/// Two-sided p-value of a paired sign-flip permutation test on mean(a - b).
double paired_significance(std::span<const double> a, std::span<const double> b,
                           int n_permutations = 10000, std::uint64_t seed = 0);

}  // namespace tseg
