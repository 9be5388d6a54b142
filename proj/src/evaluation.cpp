#include "tseg/evaluation.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <tuple>

#include "tseg/common.hpp"
#include "tseg/parallel.hpp"

namespace tseg {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<LabelGrid> argmax_all(std::span<const PosteriorGrid> preds) {
  std::vector<LabelGrid> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.push_back(predict_labels(p));
  return out;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Orders optional thresholds with "none" first.
auto row_key(const std::string& method, const std::optional<double>& t, Mode mode, int seed) {
  return std::make_tuple(method, t.has_value(), t.value_or(0.0), static_cast<int>(mode), seed);
}

template <typename T>
std::vector<T> pick(const std::vector<T>& all, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

// Per-seed (or per-ensemble) predictions on the full target plus timing.
struct SeedRun {
  std::vector<PosteriorGrid> posteriors;
  double runtime_s = 0.0;
};

template <typename Fn>
std::vector<SeedRun> run_seeds(std::size_t count, int workers, Fn&& fn) {
  std::vector<SeedRun> runs(count);
  parallel_for(count, workers, [&](std::size_t i) {
    const auto start = Clock::now();
    runs[i].posteriors = fn(i);
    runs[i].runtime_s = seconds_since(start);
  });
  return runs;
}

std::vector<PosteriorGrid> ensemble_of(const std::vector<SeedRun>& runs) {
  if (runs.empty()) return {};
  const std::size_t m = runs.front().posteriors.size();
  std::vector<PosteriorGrid> out;
  out.reserve(m);
  std::vector<PosteriorGrid> column(runs.size());
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t r = 0; r < runs.size(); ++r) column[r] = runs[r].posteriors[j];
    out.push_back(average_posteriors(column));
  }
  return out;
}

double total_runtime(const std::vector<SeedRun>& runs) {
  double t = 0.0;
  for (const auto& r : runs) t += r.runtime_s;
  return t;
}

class RowRecorder {
 public:
  RowRecorder(const LabelOracle& oracle, int num_classes, ProtocolResult& result)
      : oracle_(oracle), num_classes_(num_classes), result_(result) {}

  ProtocolRow record(const std::string& method, std::optional<double> t, int seed, Mode mode,
                     std::span<const PosteriorGrid> preds, double runtime) {
    const auto report = oracle_.score(preds, num_classes_);
    ProtocolRow row;
    row.method = method;
    row.t = t;
    row.seed = seed;
    row.mode = mode;
    row.mean_dice = report.mean_dice;
    row.per_class_dice = report.per_class_dice;
    row.per_sample_dice = report.per_sample_mean;
    row.runtime_s = runtime;
    result_.add(row);
    return row;
  }

  void seeds(const std::string& method, std::optional<double> t, Mode mode,
             std::span<const std::uint64_t> seeds, const std::vector<SeedRun>& runs) {
    for (std::size_t i = 0; i < runs.size(); ++i) {
      record(method, t, static_cast<int>(seeds[i]), mode, runs[i].posteriors, runs[i].runtime_s);
    }
    record("Ens(" + method + ")", t, -1, mode, ensemble_of(runs), total_runtime(runs));
  }

 private:
  const LabelOracle& oracle_;
  int num_classes_;
  ProtocolResult& result_;
};

void check_experiment(const ExperimentConfig& config, const TargetSet& target) {
  config.classifier.validate();
  config.train.validate();
  if (config.seeds.empty()) throw ConfigError("experiment needs at least one seed");
  if (!target.has_hidden_labels()) throw ConfigError("target set needs hidden labels for scoring");
  for (double t : config.thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("thresholds must lie in [0, 1]");
  }
}

}  // namespace

double dice(std::span<const LabelGrid> pred, std::span<const LabelGrid> ref, int class_id) {
  if (pred.size() != ref.size()) throw ConfigError("dice: prediction and reference counts differ");
  std::size_t p_count = 0;
  std::size_t r_count = 0;
  std::size_t overlap = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != ref[i].size()) throw ConfigError("dice: grid shape mismatch");
    for (std::size_t k = 0; k < pred[i].size(); ++k) {
      const bool p = pred[i][k] == class_id;
      const bool r = ref[i][k] == class_id;
      p_count += p;
      r_count += r;
      overlap += p && r;
    }
  }
  if (p_count + r_count == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(overlap) / static_cast<double>(p_count + r_count);
}

DiceReport dice_report(std::span<const LabelGrid> pred, std::span<const LabelGrid> ref,
                       int num_classes, bool include_background) {
  DiceReport r;
  r.include_background = include_background;
  const int first = include_background ? 0 : 1;
  for (int c = 0; c < num_classes; ++c) r.per_class_dice.push_back(dice(pred, ref, c));
  std::vector<double> scored(r.per_class_dice.begin() + first, r.per_class_dice.end());
  r.mean_dice = mean_of(scored);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double sum = 0.0;
    for (int c = first; c < num_classes; ++c) sum += dice(pred.subspan(i, 1), ref.subspan(i, 1), c);
    r.per_sample_mean.push_back(sum / (num_classes - first));
  }
  return r;
}

LabelOracle::LabelOracle(const TargetSet& target)
    : target_(target), labels_(target.hidden_labels(HiddenLabelKey{})) {}

DiceReport LabelOracle::score(std::span<const PosteriorGrid> predictions, int num_classes,
                              bool include_background) const {
  if (predictions.size() != labels_.size()) {
    throw ConfigError("predictions do not cover the target set");
  }
  const auto pred = argmax_all(predictions);
  return dice_report(pred, labels_, num_classes, include_background);
}

std::vector<Prediction> LabelOracle::pixel_predictions(
    std::span<const PosteriorGrid> predictions) const {
  if (predictions.size() != labels_.size()) {
    throw ConfigError("predictions do not cover the target set");
  }
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& grid = predictions[i];
    for (std::size_t p = 0; p < grid.pixel_count(); ++p) {
      const auto post = grid.pixel(p);
      out.push_back(Prediction{confidence(post), argmax(post) == labels_[i][p], entropy_bits(post)});
    }
  }
  return out;
}

LabeledSet LabelOracle::labeled_subset(std::span<const std::size_t> indices) const {
  LabeledSet out;
  for (auto i : indices) {
    out.samples.push_back(target_.samples().at(i));
    out.labels.push_back(labels_.at(i));
  }
  return out;
}

const char* mode_name(Mode mode) {
  return mode == Mode::kInductive ? "inductive" : "transductive";
}

void ProtocolResult::add(ProtocolRow row) {
  const auto key = row_key(row.method, row.t, row.mode, row.seed);
  for (const auto& r : rows_) {
    if (row_key(r.method, r.t, r.mode, r.seed) == key) {
      throw ConfigError("duplicate protocol row for " + row.method);
    }
  }
  rows_.push_back(std::move(row));
}

std::vector<ProtocolRow> ProtocolResult::rows() const {
  auto out = rows_;
  std::stable_sort(out.begin(), out.end(), [](const ProtocolRow& a, const ProtocolRow& b) {
    return row_key(a.method, a.t, a.mode, a.seed) < row_key(b.method, b.t, b.mode, b.seed);
  });
  return out;
}

std::vector<AggregateRow> ProtocolResult::aggregate() const {
  const auto sorted = rows();
  return aggregate_rows(sorted);
}

std::vector<AggregateRow> aggregate_rows(std::span<const ProtocolRow> rows) {
  std::map<decltype(row_key("", std::nullopt, Mode::kInductive, 0)), std::vector<double>> groups;
  std::map<decltype(row_key("", std::nullopt, Mode::kInductive, 0)), AggregateRow> heads;
  for (const auto& r : rows) {
    const auto key = row_key(r.method, r.t, r.mode, 0);
    groups[key].push_back(r.mean_dice);
    heads.try_emplace(key, AggregateRow{r.method, r.t, r.mode, 0, 0.0, 0.0});
  }
  std::vector<AggregateRow> out;
  for (auto& [key, values] : groups) {
    AggregateRow a = heads.at(key);
    a.n = values.size();
    a.mean = mean_of(values);
    if (values.size() > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - a.mean) * (v - a.mean);
      a.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    out.push_back(a);
  }
  return out;
}

std::uint64_t retrain_seed(std::uint64_t seed) { return mix_seed(seed, 0x5E1F); }

ProtocolResult run_method_matrix(const LabeledSet& labeled, const TargetSet& target,
                                 const ExperimentConfig& config, const ProgressFn& progress) {
  check_experiment(config, target);
  const auto& spec = config.classifier;
  const auto& samples = target.samples();
  const auto& seeds = config.seeds;
  const std::size_t n_seeds = seeds.size();
  const int workers = config.workers;
  auto note = [&](const std::string& msg) {
    if (progress) progress(msg);
  };

  LabelOracle oracle(target);
  ProtocolResult result;
  RowRecorder rec(oracle, spec.num_classes, result);

  note("supervised baseline");
  std::vector<ParamVector> sup_params(n_seeds);
  const auto sup = run_seeds(n_seeds, workers, [&](std::size_t i) {
    sup_params[i] = train_member(spec, labeled, Objective::supervised(), config.train, seeds[i]).params;
    return predict_all(spec, sup_params[i], samples);
  });
  rec.seeds("Sup", std::nullopt, Mode::kInductive, seeds, sup);
  const auto ens_sup = ensemble_of(sup);
  std::vector<std::string> sup_ids;
  for (auto s : seeds) sup_ids.push_back("Sup-seed-" + std::to_string(s));

  note("entropy minimization");
  const auto em = run_seeds(n_seeds, workers, [&](std::size_t i) {
    const auto p =
        train_member(spec, labeled, Objective::entropy_min(samples), config.train, seeds[i]).params;
    return predict_all(spec, p, samples);
  });
  rec.seeds("EntrMin", std::nullopt, Mode::kTransductive, seeds, em);

  for (double t : config.thresholds) {
    note("self-training, single-model pseudo-labels, t=" + std::to_string(t));
    const auto st_cnn = run_seeds(n_seeds, workers, [&](std::size_t i) {
      const auto pseudo = make_pseudolabels(sup[i].posteriors, t, "single-model", {sup_ids[i]});
      const auto p = train_member(spec, labeled, Objective::pseudo_label(pseudo.term(samples)),
                                  config.train, retrain_seed(seeds[i]))
                         .params;
      return predict_all(spec, p, samples);
    });
    rec.seeds("ST_cnn", t, Mode::kTransductive, seeds, st_cnn);

    note("self-training, ensemble pseudo-labels, t=" + std::to_string(t));
    const auto pseudo = make_pseudolabels(ens_sup, t, "ensemble", sup_ids);
    const auto st_ens = run_seeds(n_seeds, workers, [&](std::size_t i) {
      const auto p = train_member(spec, labeled, Objective::pseudo_label(pseudo.term(samples)),
                                  config.train, retrain_seed(seeds[i]))
                         .params;
      return predict_all(spec, p, samples);
    });
    rec.seeds("ST_ens", t, Mode::kTransductive, seeds, st_ens);
  }

  if (config.include_oracle) {
    note("labeled-target upper bound (oracle, uses target labels)");
    const int k = config.oracle_folds;
    const auto folds = split_k_folds(target.size(), k, config.fold_seed);
    const auto oracle_runs = run_seeds(n_seeds, workers, [&](std::size_t i) {
      std::vector<PosteriorGrid> preds(target.size());
      for (int f = 0; f < k; ++f) {
        std::vector<std::size_t> train_idx;
        for (int g = 0; g < k; ++g) {
          if (g == f) continue;
          const auto m = folds.members(g);
          train_idx.insert(train_idx.end(), m.begin(), m.end());
        }
        std::sort(train_idx.begin(), train_idx.end());
        LabeledSet combined = labeled;
        auto extra = oracle.labeled_subset(train_idx);
        combined.samples.insert(combined.samples.end(), extra.samples.begin(), extra.samples.end());
        combined.labels.insert(combined.labels.end(), extra.labels.begin(), extra.labels.end());
        const auto p =
            train_member(spec, combined, Objective::supervised(), config.train, seeds[i]).params;
        for (auto j : folds.members(f)) preds[j] = forward(spec, p, samples[j]);
      }
      return preds;
    });
    rec.seeds("Sup+Target(oracle)", std::nullopt, Mode::kInductive, seeds, oracle_runs);
  }
  return result;
}

ProtocolResult run_induction_vs_transduction(const LabeledSet& labeled, const TargetSet& target,
                                             const ExperimentConfig& config,
                                             const ProgressFn& progress) {
  check_experiment(config, target);
  if (target.size() < 2) throw ConfigError("induction-vs-transduction needs >= 2 target samples");
  const auto& spec = config.classifier;
  const auto& samples = target.samples();
  const auto& seeds = config.seeds;
  const std::size_t n_seeds = seeds.size();
  auto note = [&](const std::string& msg) {
    if (progress) progress(msg);
  };

  LabelOracle oracle(target);
  ProtocolResult result;
  RowRecorder rec(oracle, spec.num_classes, result);

  note("phase 1: supervised ensemble");
  const auto sup = run_seeds(n_seeds, config.workers, [&](std::size_t i) {
    const auto p = train_member(spec, labeled, Objective::supervised(), config.train, seeds[i]).params;
    return predict_all(spec, p, samples);
  });
  rec.seeds("Sup", std::nullopt, Mode::kInductive, seeds, sup);
  const auto ens_sup = ensemble_of(sup);
  std::vector<std::string> sup_ids;
  for (auto s : seeds) sup_ids.push_back("Sup-seed-" + std::to_string(s));

  const auto split = split_two_folds(target, config.fold_seed);
  const std::array<std::vector<std::size_t>, 2> folds{split.members(0), split.members(1)};
  std::array<std::vector<SampleGrid>, 2> fold_samples{pick(samples, folds[0]),
                                                      pick(samples, folds[1])};

  // Trains on labeled + fold f, predicts fold f transductively and the other
  // fold inductively; the same seed is used for both passes.
  using ObjectiveFor = std::function<Objective(int fold)>;
  auto two_fold = [&](const ObjectiveFor& objective_for, auto seed_of) {
    std::vector<SeedRun> transd(n_seeds);
    std::vector<SeedRun> induct(n_seeds);
    parallel_for(n_seeds, config.workers, [&](std::size_t i) {
      transd[i].posteriors.resize(samples.size());
      induct[i].posteriors.resize(samples.size());
      const auto start = Clock::now();
      for (int f = 0; f < 2; ++f) {
        const auto p =
            train_member(spec, labeled, objective_for(f), config.train, seed_of(seeds[i])).params;
        for (auto j : folds[f]) transd[i].posteriors[j] = forward(spec, p, samples[j]);
        for (auto j : folds[1 - f]) induct[i].posteriors[j] = forward(spec, p, samples[j]);
      }
      transd[i].runtime_s = induct[i].runtime_s = seconds_since(start);
    });
    return std::make_pair(std::move(induct), std::move(transd));
  };

  auto compare = [&](const std::string& method, std::optional<double> t,
                     const std::vector<SeedRun>& induct, const std::vector<SeedRun>& transd) {
    rec.seeds(method, t, Mode::kInductive, seeds, induct);
    rec.seeds(method, t, Mode::kTransductive, seeds, transd);
    // Single models: paired over seeds.
    std::vector<double> a, b;
    for (std::size_t i = 0; i < n_seeds; ++i) {
      a.push_back(oracle.score(transd[i].posteriors, spec.num_classes).mean_dice);
      b.push_back(oracle.score(induct[i].posteriors, spec.num_classes).mean_dice);
    }
    if (n_seeds >= 2) {
      result.significance.push_back(SignificanceRow{
          method, t, "seed", n_seeds, mean_of(b), mean_of(a),
          paired_significance(a, b, config.permutations, config.permutation_seed)});
    }
    // Ensembles: paired over target images.
    const auto ens_t = oracle.score(ensemble_of(transd), spec.num_classes);
    const auto ens_i = oracle.score(ensemble_of(induct), spec.num_classes);
    result.significance.push_back(SignificanceRow{
        "Ens(" + method + ")", t, "sample", samples.size(), ens_i.mean_dice, ens_t.mean_dice,
        paired_significance(ens_t.per_sample_mean, ens_i.per_sample_mean, config.permutations,
                            config.permutation_seed)});
  };

  for (double t : config.ivt_thresholds) {
    note("two-fold self-training, t=" + std::to_string(t));
    const auto pseudo = make_pseudolabels(ens_sup, t, "ensemble", sup_ids);
    std::array<std::vector<LabelGrid>, 2> fold_labels{pick(pseudo.labels, folds[0]),
                                                      pick(pseudo.labels, folds[1])};
    std::array<std::vector<MaskGrid>, 2> fold_masks{pick(pseudo.mask, folds[0]),
                                                    pick(pseudo.mask, folds[1])};
    auto [induct, transd] = two_fold(
        [&](int f) {
          return Objective::pseudo_label(
              PseudoLabelTerm{fold_samples[f], fold_labels[f], fold_masks[f]});
        },
        [](std::uint64_t s) { return retrain_seed(s); });
    compare("ST_ens", t, induct, transd);
  }

  if (config.ivt_include_em) {
    note("two-fold entropy minimization");
    auto [induct, transd] = two_fold(
        [&](int f) { return Objective::entropy_min(fold_samples[f]); },
        [](std::uint64_t s) { return s; });
    compare("EntrMin", std::nullopt, induct, transd);
  }
  return result;
}

CalibrationStudy run_calibration_study(const LabeledSet& labeled, const TargetSet& target,
                                       const ExperimentConfig& config,
                                       const ProgressFn& progress) {
  check_experiment(config, target);
  const auto& spec = config.classifier;
  const auto& samples = target.samples();
  const int k = config.calibration_ensemble_size;
  if (k < 1) throw ConfigError("calibration ensemble size must be >= 1");
  LabelOracle oracle(target);
  CalibrationStudy study;
  std::vector<Prediction> pooled_single;
  std::vector<Prediction> pooled_ensemble;

  for (auto seed : config.seeds) {
    if (progress) progress("calibration seed " + std::to_string(seed));
    std::vector<std::uint64_t> member_seeds;
    for (int m = 0; m < k; ++m) member_seeds.push_back(seed * static_cast<std::uint64_t>(k) + m);
    const auto ens = train_ensemble(spec, labeled, Objective::supervised(), config.train,
                                    member_seeds, config.workers);
    CalibrationSeedRow row;
    row.seed = seed;
    std::vector<std::vector<PosteriorGrid>> member_preds;
    for (const auto& m : ens.members) {
      member_preds.push_back(predict_all(spec, m.params, samples));
      const auto preds = oracle.pixel_predictions(member_preds.back());
      row.member_mean_ece += reliability(preds, config.calibration_bins, spec.num_classes).ece / k;
      row.member_mean_delta += empirical_delta(preds) / k;
      pooled_single.insert(pooled_single.end(), preds.begin(), preds.end());
    }
    std::vector<PosteriorGrid> ens_preds;
    std::vector<PosteriorGrid> column(k);
    for (std::size_t j = 0; j < samples.size(); ++j) {
      for (int m = 0; m < k; ++m) column[m] = member_preds[m][j];
      ens_preds.push_back(average_posteriors(column));
    }
    const auto preds = oracle.pixel_predictions(ens_preds);
    row.ensemble_ece = reliability(preds, config.calibration_bins, spec.num_classes).ece;
    row.ensemble_delta = empirical_delta(preds);
    pooled_ensemble.insert(pooled_ensemble.end(), preds.begin(), preds.end());
    study.per_seed.push_back(row);
  }

  auto surrogate = [&](const std::vector<Prediction>& preds, double delta) {
    double total = 0.0;
    for (const auto& p : preds) total += expected_ig(p.confidence, delta, spec.num_classes).bits;
    return total / static_cast<double>(preds.size());
  };
  study.single = reliability(pooled_single, config.calibration_bins, spec.num_classes);
  study.ensemble = reliability(pooled_ensemble, config.calibration_bins, spec.num_classes);
  study.single_delta = empirical_delta(pooled_single);
  study.ensemble_delta = empirical_delta(pooled_ensemble);
  study.single_realized_ig = realized_ig(pooled_single);
  study.ensemble_realized_ig = realized_ig(pooled_ensemble);
  study.single_surrogate_ig = surrogate(pooled_single, study.single_delta);
  study.ensemble_surrogate_ig = surrogate(pooled_ensemble, study.ensemble_delta);
  return study;
}

double paired_significance(std::span<const double> a, std::span<const double> b,
                           int n_permutations, std::uint64_t seed) {
  if (a.size() != b.size()) throw ConfigError("paired_significance: length mismatch");
  if (a.size() < 2) throw ConfigError("paired_significance needs at least 2 pairs");
  if (n_permutations < 1) throw ConfigError("paired_significance needs >= 1 permutation");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  double observed = 0.0;
  for (double v : d) observed += v;
  observed = std::abs(observed);
  const double tol = 1e-9 * std::max(1.0, observed);

  if (n < 63 && (std::uint64_t{1} << n) <= static_cast<std::uint64_t>(n_permutations)) {
    const std::uint64_t total = std::uint64_t{1} << n;
    std::uint64_t extreme = 0;
    for (std::uint64_t mask = 0; mask < total; ++mask) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += (mask >> i) & 1 ? -d[i] : d[i];
      extreme += std::abs(s) >= observed - tol;
    }
    return static_cast<double>(extreme) / static_cast<double>(total);
  }

  std::mt19937_64 rng(mix_seed(seed, 0x9E5));
  std::uint64_t extreme = 0;
  for (int k = 0; k < n_permutations; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (rng() & 1) ? -d[i] : d[i];
    extreme += std::abs(s) >= observed - tol;
  }
  return (static_cast<double>(extreme) + 1.0) / (static_cast<double>(n_permutations) + 1.0);
}

}  // namespace tseg
