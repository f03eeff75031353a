#pragma once

// Calibration errors, predictive entropy, effective receptive field and the
// synthetic corruption-robustness harness.

#include <optional>
#include <string>
#include <vector>

#include "ibgc/data.hpp"
#include "ibgc/model.hpp"
#include "ibgc/ood.hpp"

namespace ibgc {

/// -sum p log p in nats, 0 log 0 = 0.
double predictive_entropy(const std::vector<double>& posterior);

struct CalibrationCurve {
  std::size_t bins = 15;
  std::vector<std::size_t> count;
  std::vector<double> accuracy;         // R(C); NaN for empty bins
  std::vector<double> mean_confidence;  // NaN for empty bins
  std::size_t total = 0;

  double lower(std::size_t b) const { return static_cast<double>(b) / static_cast<double>(bins); }
  double upper(std::size_t b) const { return static_cast<double>(b + 1) / static_cast<double>(bins); }
  double midpoint(std::size_t b) const { return (static_cast<double>(b) + 0.5) / static_cast<double>(bins); }
};

/// Equal-width bins on [0, 1]; confidence 1 falls into the top bin.
CalibrationCurve calibration_curve(const std::vector<double>& confidence, const std::vector<bool>& correct,
                                   std::size_t bins = 15);
/// Count-weighted mean of |midpoint - R| over non-empty bins.
double ece(const CalibrationCurve& curve);
/// Max of |midpoint - R| over non-empty bins.
double mce(const CalibrationCurve& curve);
/// Error rate among predictions with confidence >= c_crit, divided by
/// (1 - c_crit). Absent when no prediction reaches c_crit.
std::optional<double> oce(const std::vector<double>& confidence, const std::vector<bool>& correct,
                          double c_crit = 0.997);

/// Multi-class convention: every class posterior of every sample is one
/// (confidence, correct) pair, correct meaning "this class is the label".
void per_class_pairs(const std::vector<Prediction>& preds, const std::vector<std::size_t>& labels,
                     std::vector<double>& confidence, std::vector<bool>& correct);

struct ReceptiveField {
  std::size_t height = 0, width = 0;
  std::vector<double> sensitivity;  // [height, width]
  std::size_t peak_row = 0;
  double fwhm = 0.0;               // of the row through the peak, linear interpolation
  std::size_t support_width = 0;   // nonzero entries (> tol * max) along that row
};

/// Sensitivity(i, j) = mean over images of sum_k sum_l |d u_l / d x_{k,i,j}|,
/// u the channel column of the last feature map at its spatial center.
ReceptiveField effective_receptive_field(const FlowModel& model, const Tensor& images, double tol = 0.0);

enum class CorruptionKind { gaussian_noise, shot_noise, defocus_blur, contrast, brightness };
std::vector<CorruptionKind> all_corruptions();
std::string to_string(CorruptionKind kind);
/// Parameter of a corruption at severity 1..5.
double corruption_parameter(CorruptionKind kind, int severity);
/// Severity 0 returns the images unchanged. Results are clipped to [0, 1].
Tensor corrupt(const Tensor& images, CorruptionKind kind, int severity, Rng& rng);

struct CorruptionCell {
  CorruptionKind kind;
  int severity;
  double parameter;
  double error;
  double delta_entropy;
  double ood_auc;
};

struct CorruptionReport {
  double clean_error = 0.0;
  double clean_entropy = 0.0;
  std::vector<CorruptionCell> cells;
  std::vector<std::optional<double>> corruption_error;  // per kind: sum error / sum baseline error
  std::optional<double> mce;                            // mean of the per-kind ratios
};

/// OoD AUC uses the two-tailed statistic against `refs`, clean test images as
/// the in-distribution population.
CorruptionReport corruption_suite(const FlowModel& model, const Dataset& clean, const ScoreSet& refs,
                                  const FlowModel* baseline, std::uint64_t seed);

std::string corruption_csv(const CorruptionReport& report);

}  // namespace ibgc
