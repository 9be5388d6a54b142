#include "tseg/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "tseg/calibration.hpp"
#include "tseg/common.hpp"
#include "tseg/csv.hpp"
#include "tseg/svg.hpp"

namespace tseg::harness {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestFormat = "tseg-run";

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) {
    throw ConfigError((section.empty() ? "config" : section) + ": expected an object");
  }
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.contains(k)) {
      throw ConfigError("unknown field '" + (section.empty() ? k : section + "." + k) + "'");
    }
  }
}

// Runs fn, prefixing any parse or validation error with the section name.
template <typename Fn>
void in_section(const std::string& section, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError(section + ": " + e.what());
  } catch (const json::exception& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

json experiment_json(const ExperimentConfig& e) {
  return json{{"seeds", e.seeds},
              {"thresholds", e.thresholds},
              {"include_oracle", e.include_oracle},
              {"oracle_folds", e.oracle_folds},
              {"ivt_thresholds", e.ivt_thresholds},
              {"ivt_include_em", e.ivt_include_em},
              {"fold_seed", e.fold_seed},
              {"permutations", e.permutations},
              {"permutation_seed", e.permutation_seed},
              {"calibration_bins", e.calibration_bins},
              {"calibration_ensemble_size", e.calibration_ensemble_size}};
}

void read_experiment(const json& j, ExperimentConfig& e) {
  check_keys(j, "experiment",
             {"seeds", "thresholds", "include_oracle", "oracle_folds", "ivt_thresholds",
              "ivt_include_em", "fold_seed", "permutations", "permutation_seed",
              "calibration_bins", "calibration_ensemble_size"});
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) {
      try {
        j.at(key).get_to(field);
      } catch (const json::exception& ex) {
        throw ConfigError(std::string("field '") + key + "': " + ex.what());
      }
    }
  };
  get("seeds", e.seeds);
  get("thresholds", e.thresholds);
  get("include_oracle", e.include_oracle);
  get("oracle_folds", e.oracle_folds);
  get("ivt_thresholds", e.ivt_thresholds);
  get("ivt_include_em", e.ivt_include_em);
  get("fold_seed", e.fold_seed);
  get("permutations", e.permutations);
  get("permutation_seed", e.permutation_seed);
  get("calibration_bins", e.calibration_bins);
  get("calibration_ensemble_size", e.calibration_ensemble_size);

  if (e.seeds.empty()) throw ConfigError("field 'seeds' must not be empty");
  if (std::set(e.seeds.begin(), e.seeds.end()).size() != e.seeds.size()) {
    throw ConfigError("field 'seeds' must not repeat a seed");
  }
  for (double t : e.thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("field 'thresholds': values must lie in [0, 1]");
  }
  for (double t : e.ivt_thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) {
      throw ConfigError("field 'ivt_thresholds': values must lie in [0, 1]");
    }
  }
  if (e.oracle_folds < 2) throw ConfigError("field 'oracle_folds' must be >= 2");
  if (e.permutations < 1) throw ConfigError("field 'permutations' must be >= 1");
  if (e.calibration_bins < 1) throw ConfigError("field 'calibration_bins' must be >= 1");
  if (e.calibration_ensemble_size < 1) {
    throw ConfigError("field 'calibration_ensemble_size' must be >= 1");
  }
}

std::string hash_of(const json& j) { return hex64(fnv1a(j.dump())).substr(0, 16); }

std::string opt_t(const std::optional<double>& t) { return t ? csv::number(*t) : ""; }

std::string write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
  return path.filename().string();
}

struct LoadedData {
  TaskSpec spec;
  std::uint64_t seed = 0;
  std::string id;
  Task task;  // normalized
};

LoadedData load_data(const RunConfig& config) {
  LoadedData d;
  Task raw;
  if (config.dataset) {
    if (!fs::exists(*config.dataset / "manifest.json")) {
      throw ConfigError("dataset not found: " + config.dataset->string());
    }
    auto stored = DatasetStore::load(*config.dataset);
    d.spec = stored.spec;
    d.seed = stored.seed;
    d.id = stored.dataset_id;
    raw = std::move(stored.task);
  } else {
    d.spec = config.task;
    d.seed = config.data_seed;
    d.id = dataset_id(config.task, config.data_seed);
    raw = generate_task(config.task, config.data_seed);
  }
  d.task = normalize_task(raw);
  return d;
}

// The classifier's class count and input width follow the data.
ExperimentConfig bind_to_data(const RunConfig& config, const TaskSpec& spec) {
  ExperimentConfig e = config.experiment;
  if (config.classifier_classes_given && e.classifier.num_classes != spec.num_classes) {
    throw ConfigError("classifier.num_classes (" + std::to_string(e.classifier.num_classes) +
                      ") does not match the dataset (" + std::to_string(spec.num_classes) + ")");
  }
  if (config.classifier_features_given && e.classifier.feature_dim != spec.feature_dim) {
    throw ConfigError("classifier.feature_dim (" + std::to_string(e.classifier.feature_dim) +
                      ") does not match the dataset (" + std::to_string(spec.feature_dim) + ")");
  }
  e.classifier.num_classes = spec.num_classes;
  e.classifier.feature_dim = spec.feature_dim;
  e.classifier.validate();
  return e;
}

// ---- protocol outputs -------------------------------------------------------

csv::Table results_table(const std::vector<ProtocolRow>& rows, int num_classes) {
  csv::Table t;
  t.header = {"method", "t", "seed", "mode", "mean_dice"};
  for (int c = 0; c < num_classes; ++c) t.header.push_back("dice_c" + std::to_string(c));
  for (const auto& r : rows) {
    std::vector<std::string> row{r.method, opt_t(r.t), r.seed < 0 ? "ensemble" : std::to_string(r.seed),
                                 mode_name(r.mode), csv::number(r.mean_dice)};
    for (double d : r.per_class_dice) row.push_back(csv::number(d));
    t.rows.push_back(std::move(row));
  }
  return t;
}

csv::Table per_sample_table(const std::vector<ProtocolRow>& rows,
                            const std::vector<SampleGrid>& samples) {
  csv::Table t;
  t.header = {"method", "t", "seed", "mode", "sample_id", "mean_dice"};
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.per_sample_dice.size(); ++i) {
      t.rows.push_back({r.method, opt_t(r.t), r.seed < 0 ? "ensemble" : std::to_string(r.seed),
                        mode_name(r.mode), samples.at(i).id, csv::number(r.per_sample_dice[i])});
    }
  }
  return t;
}

csv::Table aggregate_table(const std::vector<AggregateRow>& rows) {
  csv::Table t;
  t.header = {"method", "t", "mode", "n", "mean_dice", "std_dice"};
  for (const auto& a : rows) {
    t.rows.push_back({a.method, opt_t(a.t), mode_name(a.mode), std::to_string(a.n),
                      csv::number(a.mean), csv::number(a.std)});
  }
  return t;
}

csv::Table timing_table(const std::vector<ProtocolRow>& rows) {
  csv::Table t;
  t.header = {"method", "t", "seed", "mode", "runtime_s"};
  for (const auto& r : rows) {
    t.rows.push_back({r.method, opt_t(r.t), r.seed < 0 ? "ensemble" : std::to_string(r.seed),
                      mode_name(r.mode), csv::number(r.runtime_s)});
  }
  return t;
}

csv::Table significance_table(const std::vector<SignificanceRow>& rows) {
  csv::Table t;
  t.header = {"method", "t", "unit", "n", "mean_inductive", "mean_transductive", "p_value", "test"};
  for (const auto& s : rows) {
    t.rows.push_back({s.method, opt_t(s.t), s.unit, std::to_string(s.n),
                      csv::number(s.mean_inductive), csv::number(s.mean_transductive),
                      csv::number(s.p_value), kSignificanceTest});
  }
  return t;
}

svg::LinePlot dice_vs_t_plot(const std::vector<AggregateRow>& agg,
                             const std::vector<double>& thresholds) {
  svg::LinePlot p;
  p.title = "Mean Dice vs confidence threshold t";
  p.x_label = "threshold t";
  p.y_label = "mean Dice (%)";
  double lo = 0.0, hi = 1.0;
  if (!thresholds.empty()) {
    lo = *std::min_element(thresholds.begin(), thresholds.end());
    hi = *std::max_element(thresholds.begin(), thresholds.end());
  }
  if (hi - lo < 1e-9) hi = lo + 1.0;
  p.x_lo = lo;
  p.x_hi = hi;
  std::map<std::string, svg::Series> swept;
  std::vector<std::string> order;
  for (const auto& a : agg) {
    if (a.t) {
      auto [it, fresh] = swept.try_emplace(a.method);
      if (fresh) {
        it->second.name = a.method;
        order.push_back(a.method);
      }
      it->second.points.emplace_back(*a.t, a.mean);
    }
  }
  for (const auto& name : order) {
    auto s = swept[name];
    std::sort(s.points.begin(), s.points.end());
    p.series.push_back(std::move(s));
  }
  for (const auto& a : agg) {
    if (a.t) continue;
    p.series.push_back(svg::Series{a.method, {{lo, a.mean}, {hi, a.mean}}, false, true});
  }
  return p;
}

// ---- calibration outputs ----------------------------------------------------

csv::Table reliability_table(const CalibrationReport& r) {
  csv::Table t;
  t.header = {"bin", "bin_lo", "bin_hi", "count", "mean_conf", "accuracy", "gap",
              "mean_realized_ig_bits"};
  for (std::size_t i = 0; i < r.bins.size(); ++i) {
    const auto& b = r.bins[i];
    const bool empty = b.count == 0;
    t.rows.push_back({std::to_string(i), csv::number(b.confidence_lo), csv::number(b.confidence_hi),
                      std::to_string(b.count), empty ? "" : csv::number(b.mean_confidence),
                      empty ? "" : csv::number(b.accuracy),
                      empty ? "" : csv::number(b.accuracy - b.mean_confidence),
                      empty ? "" : csv::number(b.mean_realized_ig)});
  }
  return t;
}

svg::Series reliability_series(const std::string& name, const CalibrationReport& r) {
  svg::Series s{name, {}, true, false};
  for (const auto& b : r.bins) {
    if (b.count > 0) s.points.emplace_back(b.mean_confidence, b.accuracy);
  }
  return s;
}

// ---- manifest ---------------------------------------------------------------

struct ManifestWriter {
  fs::path dir;
  json m;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void finish(const std::string& status, const std::string& error = {}) {
    m["status"] = status;
    if (!error.empty()) m["error"] = error;
    m["partial"] = status != "complete";
    m["timing"] = json{{"total_s", std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                                   start).count()}};
    write_json(dir / "manifest.json", m);
  }
};

}  // namespace

const char* experiment_name(Experiment e) {
  switch (e) {
    case Experiment::kMatrix: return "matrix";
    case Experiment::kIndVsTransd: return "ind-vs-transd";
    case Experiment::kIgCurves: return "ig-curves";
    case Experiment::kCalibrate: return "calibrate";
  }
  return "?";
}

Experiment parse_experiment(const std::string& name) {
  for (auto e : {Experiment::kMatrix, Experiment::kIndVsTransd, Experiment::kIgCurves,
                 Experiment::kCalibrate}) {
    if (name == experiment_name(e)) return e;
  }
  throw ConfigError("unknown experiment '" + name +
                    "' (expected matrix, ind-vs-transd, ig-curves or calibrate)");
}

json RunConfig::resolved() const {
  json j;
  if (dataset) {
    j["dataset"] = dataset->generic_string();
  } else {
    j["task"] = task;
    j["data_seed"] = data_seed;
  }
  j["classifier"] = experiment.classifier;
  j["train"] = experiment.train;
  j["experiment"] = experiment_json(experiment);
  j["ig_curves"] = json{{"deltas", ig_curves.deltas},
                        {"num_classes", ig_curves.num_classes},
                        {"grid_size", ig_curves.grid_size}};
  j["workers"] = experiment.workers;
  return j;
}

RunConfig parse_config(const json& j, const fs::path& base_dir) {
  check_keys(j, "", {"dataset", "task", "data_seed", "classifier", "train", "experiment",
                     "ig_curves", "workers"});
  RunConfig c;
  if (j.contains("dataset")) {
    if (j.contains("task") || j.contains("data_seed")) {
      throw ConfigError("give either 'dataset' or 'task'/'data_seed', not both");
    }
    in_section("dataset", [&] {
      fs::path p = j.at("dataset").get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      c.dataset = p;
    });
  }
  if (j.contains("task")) {
    in_section("task", [&] {
      c.task = j.at("task").get<TaskSpec>();
      c.task.validate();
    });
  }
  if (j.contains("data_seed")) {
    in_section("data_seed", [&] { c.data_seed = j.at("data_seed").get<std::uint64_t>(); });
  }
  if (j.contains("classifier")) {
    in_section("classifier", [&] {
      const auto& s = j.at("classifier");
      check_keys(s, "classifier",
                 {"kind", "hidden_widths", "receptive_field", "num_classes", "feature_dim",
                  "activation"});
      c.experiment.classifier = s.get<ClassifierSpec>();
      c.classifier_classes_given = s.contains("num_classes");
      c.classifier_features_given = s.contains("feature_dim");
    });
  }
  if (!c.classifier_classes_given) c.experiment.classifier.num_classes = c.task.num_classes;
  if (!c.classifier_features_given) c.experiment.classifier.feature_dim = c.task.feature_dim;
  in_section("classifier", [&] { c.experiment.classifier.validate(); });
  if (j.contains("train")) {
    in_section("train", [&] {
      const auto& s = j.at("train");
      check_keys(s, "train",
                 {"learning_rate", "epochs", "batch_pixels", "seed", "beta", "em_weight",
                  "init_scale", "em_warmup_epochs"});
      // Missing keys keep the experiment defaults rather than TrainConfig's.
      json merged = c.experiment.train;
      merged.update(s);
      c.experiment.train = merged.get<TrainConfig>();
      c.experiment.train.validate();
    });
  }
  if (j.contains("experiment")) {
    in_section("experiment", [&] { read_experiment(j.at("experiment"), c.experiment); });
  }
  if (j.contains("ig_curves")) {
    in_section("ig_curves", [&] {
      const auto& s = j.at("ig_curves");
      check_keys(s, "ig_curves", {"deltas", "num_classes", "grid_size"});
      if (s.contains("deltas")) s.at("deltas").get_to(c.ig_curves.deltas);
      if (s.contains("num_classes")) s.at("num_classes").get_to(c.ig_curves.num_classes);
      if (s.contains("grid_size")) s.at("grid_size").get_to(c.ig_curves.grid_size);
      if (c.ig_curves.deltas.empty()) throw ConfigError("field 'deltas' must not be empty");
      for (double d : c.ig_curves.deltas) {
        if (!(d > 0.0)) throw ConfigError("field 'deltas': values must be > 0");
      }
      if (c.ig_curves.num_classes < 2) throw ConfigError("field 'num_classes' must be >= 2");
      if (c.ig_curves.grid_size < 2) throw ConfigError("field 'grid_size' must be >= 2");
    });
  }
  if (j.contains("workers")) {
    in_section("workers", [&] {
      c.experiment.workers = j.at("workers").get<int>();
      if (c.experiment.workers < 1) throw ConfigError("must be >= 1");
    });
  }
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f || fs::is_directory(path)) throw ConfigError("config not found: " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, path.parent_path());
}

void apply_seed_offset(RunConfig& config, std::uint64_t offset) {
  for (auto& s : config.experiment.seeds) s += offset;
}

std::string gen_data(const RunConfig& config, const fs::path& out_dir) {
  if (config.dataset) throw ConfigError("gen-data needs a 'task', not a 'dataset' reference");
  config.task.validate();
  const auto task = generate_task(config.task, config.data_seed);
  DatasetStore::save(out_dir, config.task, config.data_seed, task);
  return dataset_id(config.task, config.data_seed);
}

RunSummary run(Experiment experiment, const RunConfig& config, const fs::path& out_dir,
               const Log& log) {
  fs::create_directories(out_dir);
  const json resolved = config.resolved();
  RunSummary summary;
  summary.run_id = "run-" + hash_of(json{{"experiment", experiment_name(experiment)},
                                         {"config", resolved}});
  ManifestWriter mw{out_dir, {}};
  mw.m["format"] = kManifestFormat;
  mw.m["version"] = kVersion;
  mw.m["run_id"] = summary.run_id;
  mw.m["experiment"] = experiment_name(experiment);
  mw.m["config_hash"] = hash_of(resolved);
  mw.m["config_snapshot"] = resolved;
  mw.m["seed_list"] = config.experiment.seeds;
  mw.m["dataset_ids"] = json::array();
  mw.m["artifacts"] = json::array();
  auto note = [&](const std::string& s) {
    if (log) log(s);
  };
  auto emit_csv = [&](const std::string& name, const csv::Table& t) {
    csv::write(out_dir / name, t);
    summary.artifacts.push_back(name);
    mw.m["artifacts"].push_back(name);
  };
  auto emit_svg = [&](const std::string& name, const svg::LinePlot& p) {
    svg::write((out_dir / name).string(), p);
    summary.artifacts.push_back(name);
    mw.m["artifacts"].push_back(name);
  };

  try {
    if (experiment == Experiment::kIgCurves) {
      const auto& ig = config.ig_curves;
      csv::Table curve;
      curve.header = {"s", "ig_bits", "delta", "C", "out_of_model"};
      csv::Table zeros;
      zeros.header = {"delta", "C", "s_star", "s_star_clamped", "in_range"};
      svg::LinePlot plot;
      plot.title = "Expected information gain of a pseudo-label";
      plot.x_label = "confidence s";
      plot.y_label = "IG (bits)";
      plot.h_lines = {0.0};
      for (double delta : ig.deltas) {
        const auto c = ig_curve(delta, ig.num_classes, ig.grid_size);
        svg::Series s{"delta=" + csv::number(delta), {}, false, false};
        for (const auto& [x, y] : c.points) {
          curve.rows.push_back({csv::number(x), csv::number(y), csv::number(delta),
                                std::to_string(ig.num_classes),
                                expected_ig(x, delta, ig.num_classes).out_of_model ? "1" : "0"});
          s.points.emplace_back(x, y);
        }
        plot.series.push_back(std::move(s));
        const auto z = ig_zero_crossing(delta, ig.num_classes);
        zeros.rows.push_back({csv::number(delta), std::to_string(ig.num_classes), csv::number(z.s),
                              csv::number(z.clamped), z.in_range ? "1" : "0"});
      }
      emit_csv("ig_curve.csv", curve);
      emit_csv("ig_zero_crossings.csv", zeros);
      emit_svg("ig_curves.svg", plot);
      mw.finish("complete");
      return summary;
    }

    note("loading data");
    const auto data = load_data(config);
    mw.m["dataset_ids"].push_back(data.id);
    const auto exp = bind_to_data(config, data.spec);
    const auto& labeled = data.task.labeled;
    const auto& target = data.task.target;
    const int num_classes = data.spec.num_classes;

    if (experiment == Experiment::kCalibrate) {
      const auto st = run_calibration_study(labeled, target, exp, note);
      emit_csv("reliability_single.csv", reliability_table(st.single));
      emit_csv("reliability_ensemble.csv", reliability_table(st.ensemble));
      csv::Table seeds;
      seeds.header = {"seed", "ensemble_ece", "member_mean_ece", "ensemble_delta",
                      "member_mean_delta", "ensemble_le_member"};
      for (const auto& r : st.per_seed) {
        seeds.rows.push_back({std::to_string(r.seed), csv::number(r.ensemble_ece),
                              csv::number(r.member_mean_ece), csv::number(r.ensemble_delta),
                              csv::number(r.member_mean_delta),
                              r.ensemble_ece <= r.member_mean_ece ? "1" : "0"});
      }
      emit_csv("calibration_seeds.csv", seeds);
      csv::Table sum;
      sum.header = {"model", "ece", "delta_hat", "n", "ig_zero_crossing", "realized_ig_bits",
                    "surrogate_ig_bits"};
      auto add = [&](const char* name, const CalibrationReport& r, double delta, double real,
                     double sur) {
        const auto z = ig_zero_crossing(delta, num_classes);
        sum.rows.push_back({name, csv::number(r.ece), csv::number(delta),
                            std::to_string(r.n_predictions), csv::number(z.s), csv::number(real),
                            csv::number(sur)});
      };
      add("single", st.single, st.single_delta, st.single_realized_ig, st.single_surrogate_ig);
      add("ensemble", st.ensemble, st.ensemble_delta, st.ensemble_realized_ig,
          st.ensemble_surrogate_ig);
      emit_csv("calibration_summary.csv", sum);
      svg::LinePlot plot;
      plot.title = "Reliability diagram (target pixels)";
      plot.x_label = "confidence";
      plot.y_label = "accuracy";
      const double lo = 1.0 / num_classes;
      plot.x_lo = plot.y_lo = lo;
      plot.x_hi = plot.y_hi = 1.0;
      plot.series.push_back(svg::Series{"calibrated", {{lo, lo}, {1.0, 1.0}}, false, true});
      plot.series.push_back(reliability_series("single models", st.single));
      plot.series.push_back(
          reliability_series("ensembles (K=" + std::to_string(exp.calibration_ensemble_size) + ")",
                             st.ensemble));
      emit_svg("reliability.svg", plot);
      mw.finish("complete");
      return summary;
    }

    const auto result = experiment == Experiment::kMatrix
                            ? run_method_matrix(labeled, target, exp, note)
                            : run_induction_vs_transduction(labeled, target, exp, note);
    const auto rows = result.rows();
    const auto agg = result.aggregate();
    emit_csv("results.csv", results_table(rows, num_classes));
    emit_csv("per_sample.csv", per_sample_table(rows, target.samples()));
    emit_csv("aggregate.csv", aggregate_table(agg));
    emit_csv("timing.csv", timing_table(rows));
    if (experiment == Experiment::kMatrix) {
      emit_svg("dice_vs_t.svg", dice_vs_t_plot(agg, exp.thresholds));
    } else {
      emit_csv("significance.csv", significance_table(result.significance));
      mw.m["significance_test"] = kSignificanceTest;
    }
    double total = 0.0;
    for (const auto& r : rows) total += r.runtime_s;
    mw.m["cell_runtime_s"] = total;
    mw.finish("complete");
    return summary;
  } catch (const std::exception& e) {
    mw.finish("failed", e.what());
    throw;
  }
}

// ---- report -------------------------------------------------------------------

namespace {

std::optional<csv::Table> try_read(const fs::path& dir, const std::string& name,
                                   const std::vector<std::string>& required, std::ostream& err) {
  const auto path = dir / name;
  if (!fs::exists(path)) return std::nullopt;
  try {
    auto t = csv::read(path);
    for (const auto& col : required) t.column(col);
    return t;
  } catch (const std::exception& e) {
    err << "warning: skipping " << name << ": " << e.what() << '\n';
    return std::nullopt;
  }
}

std::string pm(const std::string& mean, const std::string& sd) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%6.2f +- %5.2f", std::stod(mean), sd.empty() ? 0.0 : std::stod(sd));
  return buf;
}

std::string label_of(const std::string& method, const std::string& t) {
  if (t.empty()) return method;
  const auto open = method.find('(');
  if (open != std::string::npos && method.back() == ')') {
    return method.substr(0, method.size() - 1) + "_" + t + ")";
  }
  return method + "_" + t;
}

void print_protocol(const csv::Table& agg, const std::optional<csv::Table>& sig,
                    std::ostream& out) {
  const auto cm = agg.column("method"), ct = agg.column("t"), cmode = agg.column("mode"),
             cn = agg.column("n"), cmean = agg.column("mean_dice"), csd = agg.column("std_dice");
  // Keyed by display label, in order of first appearance.
  std::vector<std::string> order;
  std::map<std::string, std::map<std::string, std::vector<std::string>>> cells;
  for (const auto& r : agg.rows) {
    const auto label = label_of(r[cm], r[ct]);
    if (!cells.contains(label)) order.push_back(label);
    cells[label][r[cmode]] = r;
  }
  bool both_modes = false;
  for (const auto& [label, modes] : cells) {
    both_modes = both_modes || modes.size() == 2;
  }
  std::map<std::string, std::pair<std::string, std::string>> pvals;
  if (sig) {
    const auto sm = sig->column("method"), st = sig->column("t"), sp = sig->column("p_value"),
               su = sig->column("unit");
    for (const auto& r : sig->rows) pvals[label_of(r[sm], r[st])] = {r[sp], r[su]};
  }

  char line[256];
  if (both_modes) {
    std::snprintf(line, sizeof line, "%-24s %18s %18s %10s  %s\n", "Method", "Induct.", "Transd.",
                  "p", "paired over");
    out << line;
    for (const auto& label : order) {
      const auto& modes = cells[label];
      auto cell = [&](const char* mode) {
        const auto it = modes.find(mode);
        return it == modes.end() ? std::string("-") : pm(it->second[cmean], it->second[csd]);
      };
      std::string p = "", unit = "";
      if (const auto it = pvals.find(label); it != pvals.end()) {
        char pb[32];
        std::snprintf(pb, sizeof pb, "%.4g", std::stod(it->second.first));
        p = pb;
        unit = it->second.second;
      }
      std::snprintf(line, sizeof line, "%-24s %18s %18s %10s  %s\n", label.c_str(),
                    cell("inductive").c_str(), cell("transductive").c_str(), p.c_str(),
                    unit.c_str());
      out << line;
    }
    out << "p: " << kSignificanceTest << '\n';
  } else {
    std::snprintf(line, sizeof line, "%-24s %-13s %4s %18s\n", "Method", "mode", "n",
                  "mean Dice (%)");
    out << line;
    for (const auto& label : order) {
      for (const auto& [mode, r] : cells[label]) {
        std::snprintf(line, sizeof line, "%-24s %-13s %4s %18s\n", label.c_str(), mode.c_str(),
                      r[cn].c_str(), pm(r[cmean], r[csd]).c_str());
        out << line;
      }
    }
  }
}

}  // namespace

int report(const fs::path& dir, std::ostream& out, std::ostream& err) {
  if (!fs::is_directory(dir)) {
    err << "error: results directory not found: " << dir.string() << '\n';
    return 1;
  }
  bool any = false;
  if (fs::exists(dir / "manifest.json")) {
    try {
      std::ifstream f(dir / "manifest.json");
      const auto m = json::parse(f);
      out << "run " << m.at("run_id").get<std::string>() << "  experiment "
          << m.at("experiment").get<std::string>() << "  status "
          << m.value("status", std::string("?")) << '\n';
      if (m.contains("dataset_ids") && !m["dataset_ids"].empty()) {
        out << "dataset " << m["dataset_ids"][0].get<std::string>() << '\n';
      }
      out << '\n';
    } catch (const std::exception& e) {
      err << "warning: skipping manifest.json: " << e.what() << '\n';
    }
  }

  const auto agg =
      try_read(dir, "aggregate.csv", {"method", "t", "mode", "n", "mean_dice", "std_dice"}, err);
  const auto sig =
      try_read(dir, "significance.csv", {"method", "t", "unit", "p_value"}, err);
  // A table that parses but holds garbage is skipped like an unreadable one.
  auto guarded = [&](const char* name, auto&& fn) {
    std::ostringstream buf;
    try {
      fn(buf);
      out << buf.str();
      any = true;
    } catch (const std::exception& e) {
      err << "warning: skipping " << name << ": " << e.what() << '\n';
    }
  };
  if (agg) guarded("aggregate.csv", [&](std::ostream& o) { print_protocol(*agg, sig, o); });

  if (const auto cal = try_read(dir, "calibration_summary.csv",
                                {"model", "ece", "delta_hat", "ig_zero_crossing"}, err)) {
    guarded("calibration_summary.csv", [&](std::ostream& out) {
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %8s %10s %10s\n", "model", "ECE", "delta_hat", "s*");
    out << line;
    const auto cm = cal->column("model"), ce = cal->column("ece"), cd = cal->column("delta_hat"),
               cz = cal->column("ig_zero_crossing");
    for (const auto& r : cal->rows) {
      std::snprintf(line, sizeof line, "%-10s %8.4f %10.4f %10.4f\n", r[cm].c_str(),
                    std::stod(r[ce]), std::stod(r[cd]), std::stod(r[cz]));
      out << line;
    }
    });
  }
  if (const auto seeds = try_read(dir, "calibration_seeds.csv", {"ensemble_le_member"}, err)) {
    guarded("calibration_seeds.csv", [&](std::ostream& out) {
    const auto c = seeds->column("ensemble_le_member");
    std::size_t ok = 0;
    for (const auto& r : seeds->rows) ok += r[c] == "1";
    out << "ensemble ECE <= member mean ECE in " << ok << "/" << seeds->rows.size() << " seeds\n";
    });
  }

  if (const auto z = try_read(dir, "ig_zero_crossings.csv", {"delta", "s_star", "in_range"}, err)) {
    guarded("ig_zero_crossings.csv", [&](std::ostream& out) {
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %10s %9s\n", "delta", "s*", "in range");
    out << line;
    const auto cd = z->column("delta"), cs = z->column("s_star"), cr = z->column("in_range");
    for (const auto& r : z->rows) {
      std::snprintf(line, sizeof line, "%-8s %10.4f %9s\n", r[cd].c_str(), std::stod(r[cs]),
                    r[cr] == "1" ? "yes" : "no");
      out << line;
    }
    });
  }
  if (!any) {
    err << "error: no readable results in " << dir.string() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace tseg::harness
