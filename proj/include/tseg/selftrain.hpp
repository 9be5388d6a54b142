#pragma once

// Pseudo-labels with a confidence threshold, ensembles, and the two-phase
// self-training pipeline: phase 1 trains a source model (or ensemble) on the
// labeled set and labels the target; phase 2 retrains fresh models on
// labeled + pseudo-labeled target and predicts the target transductively.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tseg/dataspace.hpp"
#include "tseg/learner.hpp"

namespace tseg {

/// Maximum class posterior.
double confidence(std::span<const double> posterior);

struct PseudoLabelSet {
  std::vector<LabelGrid> labels;  // argmax for every pixel
  std::vector<MaskGrid> mask;     // 1 iff confidence > threshold
  double threshold = 0.0;
  std::string source_kind;  // "single-model" or "ensemble"
  std::vector<std::string> source_ids;
  double masked_fraction = 0.0;

  PseudoLabelTerm term(std::span<const SampleGrid> samples) const;
};

PseudoLabelSet make_pseudolabels(std::span<const PosteriorGrid> posteriors, double threshold,
                                 std::string source_kind = "single-model",
                                 std::vector<std::string> source_ids = {});

void save_pseudolabels(const std::filesystem::path& dir, const PseudoLabelSet& set,
                       std::span<const SampleGrid> samples);
PseudoLabelSet load_pseudolabels(const std::filesystem::path& dir);

struct EnsembleMember {
  ParamVector params;
  std::uint64_t seed = 0;
};

struct Ensemble {
  ClassifierSpec spec;
  std::vector<EnsembleMember> members;

  std::size_t size() const { return members.size(); }
  std::vector<std::string> member_ids() const;
};

/// One model trained from init_params(spec, seed) with config.seed = seed.
TrainResult train_member(const ClassifierSpec& spec, const LabeledSet& labeled,
                         const Objective& objective, TrainConfig config, std::uint64_t seed);

/// K = seeds.size() independent runs; seeds must be distinct.
Ensemble train_ensemble(const ClassifierSpec& spec, const LabeledSet& labeled,
                        const Objective& objective, const TrainConfig& base_config,
                        std::span<const std::uint64_t> seeds, int workers = 1);

/// Pixelwise arithmetic mean; grids must share a shape.
PosteriorGrid average_posteriors(std::span<const PosteriorGrid> grids);

PosteriorGrid ensemble_predict(const Ensemble& ensemble, const SampleGrid& sample);

std::vector<PosteriorGrid> predict_all(const ClassifierSpec& spec, const ParamVector& params,
                                       std::span<const SampleGrid> samples);
std::vector<PosteriorGrid> predict_all(const Ensemble& ensemble,
                                       std::span<const SampleGrid> samples);

struct PipelineConfig {
  std::vector<std::uint64_t> source_seeds;   // size 1 = single model, K = ensemble
  std::vector<std::uint64_t> retrain_seeds;  // size 1 = single model, K = ensemble
  double threshold = 0.0;
  TrainConfig train;  // train.beta weights the pseudo-label term
  int workers = 1;
};

struct PipelineResult {
  Ensemble phase1;
  std::vector<PosteriorGrid> phase1_target;  // inductive phase-1 predictions
  PseudoLabelSet pseudo;
  Ensemble phase2;
  std::vector<PosteriorGrid> transductive;  // phase-2 predictions on the target
};

/// Reads only target.samples().
PipelineResult self_train_pipeline(const ClassifierSpec& spec, const LabeledSet& labeled,
                                   const TargetSet& target, const PipelineConfig& config);

}  // namespace tseg
