#include "tseg/calibration.hpp"

#include <algorithm>
#include <cmath>

#include "tseg/common.hpp"

namespace tseg {
namespace {

constexpr double kRangeSlack = 1e-12;

void check_classes(int num_classes) {
  if (num_classes < 2) throw DomainError("num_classes must be >= 2");
}

}  // namespace

double entropy_bits(std::span<const double> posterior) {
  double h = 0.0;
  for (double p : posterior) {
    if (p > 0.0) h -= p * std::log2(p);
  }
  return std::max(0.0, h);
}

double surrogate_entropy(double s, int num_classes) {
  check_classes(num_classes);
  const double lo = 1.0 / num_classes;
  if (!(s >= lo - kRangeSlack && s <= 1.0 + kRangeSlack)) {
    throw DomainError("confidence " + std::to_string(s) + " outside [1/C, 1]");
  }
  s = std::clamp(s, lo, 1.0);
  const double rest = (1.0 - s) / (num_classes - 1);
  double h = 0.0;
  if (s > 0.0) h -= s * std::log2(s);
  if (rest > 0.0) h -= (num_classes - 1) * rest * std::log2(rest);
  return std::max(0.0, h);
}

IgValue expected_ig(double s, double delta, int num_classes) {
  if (!(delta > 0.0)) throw DomainError("delta must be > 0");
  const double h = surrogate_entropy(s, num_classes);
  return IgValue{(2.0 * delta * s - 1.0) * h, delta * s > 1.0};
}

ZeroCrossing ig_zero_crossing(double delta, int num_classes) {
  if (!(delta > 0.0)) throw DomainError("delta must be > 0");
  check_classes(num_classes);
  ZeroCrossing z;
  z.s = 1.0 / (2.0 * delta);
  const double lo = 1.0 / num_classes;
  z.clamped = std::clamp(z.s, lo, 1.0);
  z.in_range = z.s >= lo && z.s <= 1.0;
  return z;
}

CalibrationReport reliability(std::span<const Prediction> predictions, int bins,
                              int num_classes) {
  if (predictions.empty()) throw DomainError("reliability needs at least one prediction");
  if (bins < 1) throw DomainError("bin count must be >= 1");
  check_classes(num_classes);
  CalibrationReport r;
  r.num_classes = num_classes;
  r.n_predictions = predictions.size();
  const double lo = 1.0 / num_classes;
  const double width = (1.0 - lo) / bins;
  r.bins.resize(bins);
  for (int i = 0; i < bins; ++i) {
    r.bins[i].confidence_lo = lo + i * width;
    r.bins[i].confidence_hi = i + 1 == bins ? 1.0 : lo + (i + 1) * width;
  }
  std::vector<double> conf_sum(bins, 0.0);
  std::vector<double> correct_sum(bins, 0.0);
  std::vector<double> ig_sum(bins, 0.0);
  for (const auto& p : predictions) {
    if (!(p.confidence >= 0.0 && p.confidence <= 1.0)) {
      throw DomainError("confidence outside [0, 1]");
    }
    int i = static_cast<int>(std::floor((p.confidence - lo) / width));
    i = std::clamp(i, 0, bins - 1);
    while (i > 0 && p.confidence < r.bins[i].confidence_lo) --i;
    while (i + 1 < bins && p.confidence >= r.bins[i].confidence_hi) ++i;
    ++r.bins[i].count;
    conf_sum[i] += p.confidence;
    correct_sum[i] += p.correct ? 1.0 : 0.0;
    ig_sum[i] += p.correct ? p.entropy_bits : -p.entropy_bits;
  }
  const auto n = static_cast<double>(predictions.size());
  for (int i = 0; i < bins; ++i) {
    auto& b = r.bins[i];
    if (b.count == 0) continue;
    const auto c = static_cast<double>(b.count);
    b.mean_confidence = conf_sum[i] / c;
    b.accuracy = correct_sum[i] / c;
    b.mean_realized_ig = ig_sum[i] / c;
    r.ece += (c / n) * std::abs(b.accuracy - b.mean_confidence);
  }
  return r;
}

double empirical_delta(std::span<const Prediction> predictions) {
  if (predictions.empty()) throw DomainError("empirical_delta needs at least one prediction");
  double correct = 0.0;
  double conf = 0.0;
  for (const auto& p : predictions) {
    correct += p.correct ? 1.0 : 0.0;
    conf += p.confidence;
  }
  if (conf == 0.0) throw DomainError("mean confidence is zero");
  return correct / conf;
}

double realized_ig(std::span<const Prediction> predictions) {
  if (predictions.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : predictions) total += p.correct ? p.entropy_bits : -p.entropy_bits;
  return total / static_cast<double>(predictions.size());
}

IgCurve ig_curve(double delta, int num_classes, int grid_size) {
  if (grid_size < 2) throw DomainError("grid_size must be >= 2");
  check_classes(num_classes);
  IgCurve curve;
  curve.delta = delta;
  curve.num_classes = num_classes;
  const double lo = 1.0 / num_classes;
  curve.points.reserve(grid_size);
  for (int i = 0; i < grid_size; ++i) {
    const double s = i + 1 == grid_size ? 1.0 : lo + (1.0 - lo) * i / (grid_size - 1);
    curve.points.emplace_back(s, expected_ig(s, delta, num_classes).bits);
  }
  return curve;
}

}  // namespace tseg
