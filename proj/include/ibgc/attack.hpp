#pragma once

// Targeted Carlini-Wagner attacks on the generative classifier, with an
// optional term that pulls the adversarial likelihood towards the typical
// training likelihood to evade OoD detection.

#include <limits>
#include <string>
#include <vector>

#include "ibgc/model.hpp"
#include "ibgc/ood.hpp"

namespace ibgc {

/// Removes the margin clamp; the attack then runs to max_steps.
inline constexpr double kInfiniteKappa = std::numeric_limits<double>::infinity();

struct AttackConfig {
  double kappa = 0.01;
  double c = 10.0;
  double d = 0.0;  // weight of (median_ref - log q(x_adv))^2
  double lr = 0.01;
  std::size_t patience = 20;
  std::size_t max_steps = 1000;
  double tolerance = 1e-6;  // absolute improvement of the best-so-far objective
  bool record_trajectory = false;

  void validate() const;
};

/// max(max_{y != t} l_y - l_t, -kappa).
double cw_class_loss(const std::vector<double>& logits, std::size_t target, double kappa);
/// Row-wise version on [N, M] logits, differentiable; returns [N].
Tensor cw_class_loss(const Tensor& logits, const std::vector<std::size_t>& targets, double kappa);

/// x_adv = (tanh(w) + 1) / 2.
Tensor box_transform(const Tensor& w);
/// atanh(2x - 1) with x clipped to [1e-6, 1 - 1e-6].
Tensor inverse_box_transform(const Tensor& x);

struct ObjectiveTerms {
  Tensor distortion;  // [N] |x_adv - x|^2
  Tensor class_loss;  // [N]
  Tensor logits;      // [N, M] class log-likelihoods log p(x_adv | y)
  Tensor log_likelihood;  // [N] marginal log q(x_adv), nats
  Tensor total;       // [N]
};

/// |x_adv - x|^2 + c * cw_class_loss(log p(x_adv | y)).
ObjectiveTerms cw_objective(const Tensor& w, const Tensor& x, const FlowModel& model,
                            const std::vector<std::size_t>& targets, const AttackConfig& cfg);
/// cw_objective + d * (median_ref - log q(x_adv))^2; d = 0 is cw_objective.
ObjectiveTerms cwd_objective(const Tensor& w, const Tensor& x, const FlowModel& model,
                             const std::vector<std::size_t>& targets, const AttackConfig& cfg, double median_ref);

struct TrajectoryPoint {
  std::size_t step = 0;
  double objective = 0.0;
  double distortion = 0.0;
  double class_loss = 0.0;
  bool success = false;
};

struct AttackResult {
  std::vector<double> x_adv;
  std::size_t target = 0;
  std::size_t predicted = 0;
  bool success = false;         // argmax posterior equals the target
  bool margin_success = false;  // additionally l_t - max_{y != t} l_y >= kappa (finite kappa)
  std::size_t steps = 0;
  bool converged = false;  // stopped by patience rather than the step cap
  double l2 = 0.0;            // |x - x_adv|_2
  double l2_per_pixel = 0.0;  // channel-wise l2 per pixel, averaged over pixels
  double target_confidence = 0.0;
  double log_likelihood = 0.0;
  double entropy = 0.0;
  double detection_one_tailed = 0.0;  // atypicality under the single threshold test
  double detection_two_tailed = 0.0;  // atypicality under the two-tailed quantile test
  std::vector<TrajectoryPoint> trajectory;
};

/// Attacks every image of `images` [N, C, H, W] towards its target. Images are
/// independent; each keeps its own Adam state and stopping rule. Returns the
/// lowest-objective successful iterate when there is one, else the last.
std::vector<AttackResult> run_attacks(const FlowModel& model, const Tensor& images,
                                      const std::vector<std::size_t>& targets, const AttackConfig& cfg,
                                      const ScoreSet& refs);
AttackResult run_attack(const FlowModel& model, const std::vector<double>& image, std::size_t target,
                        const AttackConfig& cfg, const ScoreSet& refs);

struct AttackSummary {
  double kappa = 0.0, d = 0.0, c = 0.0;
  std::size_t count = 0;
  double mean_target_confidence = 0.0;
  double mean_l2 = 0.0;
  double mean_l2_per_pixel = 0.0;
  double success_pct = 0.0;
  double margin_success_pct = 0.0;
  double auc_one_tailed = 0.0;  // attacked vs clean images, percent
  double auc_two_tailed = 0.0;
  double mean_entropy = 0.0;
};

AttackSummary summarize_attacks(const std::vector<AttackResult>& results, const AttackConfig& cfg,
                                const std::vector<double>& clean_log_likelihoods, const ScoreSet& refs);

struct AttackRun {
  AttackConfig config;
  std::vector<AttackResult> results;
  AttackSummary summary;
};

/// Runs every configuration of `grid` on the same image/target pairs.
std::vector<AttackRun> evaluate_attacks(const FlowModel& model, const Tensor& images,
                                        const std::vector<std::size_t>& targets,
                                        const std::vector<AttackConfig>& grid, const ScoreSet& refs);

/// Per-image rows followed by one summary row per configuration.
std::string attack_csv(const std::vector<AttackRun>& runs);

/// Uniformly drawn target different from `label`.
std::vector<std::size_t> random_targets(const std::vector<std::size_t>& labels, std::size_t classes,
                                        std::uint64_t seed);

}  // namespace ibgc
