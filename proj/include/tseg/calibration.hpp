#pragma once

// Entropy, reliability diagrams, expected calibration error, and the expected
// Information Gain of turning a soft posterior with confidence s into a
// one-hot pseudo-label when confidence is miscalibrated by a factor delta:
//
//   IG(s; delta) = delta*s*H(s) - (1 - delta*s)*H(s) = (2*delta*s - 1) * H(s)
//
// with H(s) the entropy of (s, (1-s)/(C-1), ..., (1-s)/(C-1)).
// Information quantities in this module are in bits.

#include <span>
#include <utility>
#include <vector>

namespace tseg {

/// Base-2 entropy, 0 log 0 := 0.
double entropy_bits(std::span<const double> posterior);

/// Entropy (bits) of the vector (s, (1-s)/(C-1), ...). Throws DomainError
/// unless 1/C <= s <= 1.
double surrogate_entropy(double s, int num_classes);

struct IgValue {
  double bits = 0.0;
  bool out_of_model = false;  // delta * s > 1: "probability" of being correct exceeds 1
};

IgValue expected_ig(double s, double delta, int num_classes);

struct ZeroCrossing {
  double s = 0.0;        // 1 / (2 delta)
  double clamped = 0.0;  // s clamped into [1/C, 1]
  bool in_range = true;
};

/// Confidence below which the expected IG is negative.
ZeroCrossing ig_zero_crossing(double delta, int num_classes = 2);

struct Prediction {
  double confidence = 0.0;
  bool correct = false;
  double entropy_bits = 0.0;  // optional; only used by realized_ig
};

struct ReliabilityBin {
  double confidence_lo = 0.0;
  double confidence_hi = 0.0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;  // meaningful only when count > 0
  std::size_t count = 0;
  double mean_realized_ig = 0.0;
};

struct CalibrationReport {
  int num_classes = 2;
  std::vector<ReliabilityBin> bins;
  double ece = 0.0;
  std::size_t n_predictions = 0;
};

/// Equal-width bins on [1/C, 1]; bin i takes lo_i <= s < hi_i, the last bin
/// also takes s = 1. Confidences below 1/C land in the first bin.
CalibrationReport reliability(std::span<const Prediction> predictions, int bins,
                              int num_classes);

/// Overall accuracy divided by mean confidence.
double empirical_delta(std::span<const Prediction> predictions);

/// Mean of +H for correct and -H for wrong predictions: the information the
/// pseudo-labels actually injected, using each prediction's own entropy.
double realized_ig(std::span<const Prediction> predictions);

struct IgCurve {
  double delta = 1.0;
  int num_classes = 2;
  std::vector<std::pair<double, double>> points;  // (s, ig_bits)
};

IgCurve ig_curve(double delta, int num_classes, int grid_size);

}  // namespace tseg
