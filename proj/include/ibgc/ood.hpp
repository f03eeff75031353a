#pragma once

// Likelihood-based out-of-distribution tests calibrated on a reference set of
// training log-likelihoods.

#include <string>
#include <vector>

namespace ibgc {

/// Sorted reference log-likelihoods (nats per sample).
class ScoreSet {
 public:
  ScoreSet() = default;
  explicit ScoreSet(std::vector<double> scores);

  const std::vector<double>& scores() const { return scores_; }
  std::size_t size() const { return scores_.size(); }
  double mean() const { return mean_; }
  double median() const { return quantile(0.5); }
  /// Linear interpolation between order statistics (type 7).
  double quantile(double p) const;
  /// Mid-rank empirical CDF: (#{r < s} + #{r == s} / 2) / n.
  double cdf(double s) const;

 private:
  std::vector<double> scores_;
  double mean_ = 0.0;
};

double quantile_type7(const std::vector<double>& sorted, double p);

enum class OodTestKind { single_threshold, typicality, two_tailed };
OodTestKind parse_ood_test(const std::string& name);
std::string to_string(OodTestKind kind);

struct OodTest {
  OodTestKind kind = OodTestKind::two_tailed;
  double p = 0.05;
  /// Accepted band. single_threshold: [lower, +inf); typicality:
  /// [center - radius, center + radius]; two_tailed: [lower, upper].
  double lower = 0.0;
  double upper = 0.0;
  double center = 0.0;
  double radius = 0.0;
  bool degenerate = false;  // all reference scores equal: the band collapses
};

OodTest fit_test(const ScoreSet& refs, OodTestKind kind, double p);
bool is_ood(const OodTest& test, double score);

/// Scalar statistic swept by varying p, larger means more atypical:
/// single_threshold -s, typicality |s - mean|, two_tailed max(F(s), 1 - F(s)).
double atypicality(const ScoreSet& refs, OodTestKind kind, double score);
std::vector<double> atypicality(const ScoreSet& refs, OodTestKind kind, const std::vector<double>& scores);

struct RocPoint {
  double threshold, fpr, tpr;
};

/// ROC over all thresholds of an atypicality statistic; positives are the
/// OoD samples. Starts at (0,0), ends at (1,1).
std::vector<RocPoint> roc_curve(const std::vector<double>& in_atypicality, const std::vector<double>& ood_atypicality);
/// Trapezoid area under roc_curve in percent; ties receive half credit.
double roc_auc(const std::vector<double>& in_atypicality, const std::vector<double>& ood_atypicality);

}  // namespace ibgc
