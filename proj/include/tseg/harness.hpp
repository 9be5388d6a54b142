#pragma once

// Run configuration, experiment drivers that persist CSV/SVG/manifest
// outputs, and the text report. The CLI in tools/ is a thin shell over this.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tseg/dataspace.hpp"
#include "tseg/evaluation.hpp"

namespace tseg::harness {

enum class Experiment { kMatrix, kIndVsTransd, kIgCurves, kCalibrate };

const char* experiment_name(Experiment e);
/// Throws ConfigError for unknown names.
Experiment parse_experiment(const std::string& name);

struct IgCurveConfig {
  std::vector<double> deltas = {0.6, 0.8, 1.0, 1.2};
  int num_classes = 2;
  int grid_size = 201;
};

struct RunConfig {
  // Existing dataset directory; when empty the task is generated in memory.
  std::optional<std::filesystem::path> dataset;
  TaskSpec task = TaskSpec::default_shifted();
  std::uint64_t data_seed = 7;
  ExperimentConfig experiment;
  IgCurveConfig ig_curves;

  // Set when the classifier section names them explicitly.
  bool classifier_classes_given = false;
  bool classifier_features_given = false;

  /// Every field, defaults filled in. Feeding it back yields the same config.
  nlohmann::json resolved() const;
};

/// Throws ConfigError naming the offending field. Relative dataset paths are
/// taken relative to `base_dir`.
RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

/// Throws ConfigError("config not found: ...") when the file does not exist.
RunConfig load_config(const std::filesystem::path& path);

/// Adds `offset` to every model seed (not the data seed).
void apply_seed_offset(RunConfig& config, std::uint64_t offset);

using Log = std::function<void(const std::string&)>;

/// Writes the dataset directory and returns its id.
std::string gen_data(const RunConfig& config, const std::filesystem::path& out_dir);

struct RunSummary {
  std::string run_id;
  std::vector<std::string> artifacts;
};

/// Runs one experiment into `out_dir`. On failure a manifest with status
/// "failed" is still written before the exception propagates.
RunSummary run(Experiment experiment, const RunConfig& config,
               const std::filesystem::path& out_dir, const Log& log = {});

/// Prints the summary of a results directory. Returns 0, or 1 when nothing
/// readable was found. Unreadable files are reported on `err` and skipped.
int report(const std::filesystem::path& dir, std::ostream& out, std::ostream& err);

}  // namespace tseg::harness
