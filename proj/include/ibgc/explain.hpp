#pragma once

// Explanations read directly off the latent mixture: decision-space
// projection, class similarity via expected confidence, saliency and
// class-posterior heatmaps, and a plane-constrained decision space.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ibgc/data.hpp"
#include "ibgc/model.hpp"

namespace ibgc {

struct DecisionProjection {
  double h = 0.0;  // along mu_1 -> mu_2, 0 at mu_1, delta at mu_2
  double v = 0.0;  // distance from that axis inside the affine span of the means
  double delta = 0.0;
  std::size_t span_dim = 0;
  double horizontal_half_width = 0.0;  // central 90% of a unit Gaussian
  double radial_mark = 0.0;            // chi 90% quantile with span_dim - 1 dof
};

/// `top_mus` ordered by predicted rank (at least two, usually five).
DecisionProjection project_decision_space(std::span<const double> z, const std::vector<std::vector<double>>& top_mus);

/// Unnormalized density of the top-class confidence c in [1/2, 1) for two
/// unit Gaussians at distance delta.
double confidence_density(double c, double delta);
/// Mean of that density; 1/2 as delta -> 0, 1 as delta -> infinity.
double expected_confidence(double delta);
/// Inverse of expected_confidence by bisection; target in (1/2, 1).
double delta_for_confidence(double target);

struct SimilarityEntry {
  double delta = 0.0;
  double expected_confidence = 0.5;
  double expected_uncertainty = 0.5;
  bool diagonal = false;
};

/// M x M, row-major by class.
std::vector<std::vector<SimilarityEntry>> similarity_matrix(const Tensor& means);

enum class HeatmapKind { saliency, class_posterior };

struct Heatmap {
  HeatmapKind kind = HeatmapKind::saliency;
  std::size_t label = 0;  // class for class_posterior maps
  std::size_t height = 0, width = 0;
  std::vector<double> grid;  // row-major height x width

  double sum() const;
};

/// [M][h*w]: log q(w_kl | y) = -1/2 |w^(y)_kl|^2 with w^(y) the inverse DCT
/// of z - mu_y reshaped to the final feature layout.
std::vector<std::vector<double>> pixel_log_likelihoods(std::span<const double> z, const Tensor& means,
                                                       std::array<std::size_t, 3> feature_chw);

/// -log sum_y p(y) q(w_kl | y) per feature pixel.
Heatmap saliency_heatmap(std::span<const double> z, const GmmHead& head, std::array<std::size_t, 3> feature_chw);

/// Per-pixel log posterior contributions whose exponentiated sum equals
/// p(y | x). The normalizer is spread over pixels in proportion to
/// r_kl + contrast, r being the per-pixel marginal log-likelihood scaled to [0, 1].
Heatmap class_heatmap(std::span<const double> z, const GmmHead& head, std::array<std::size_t, 3> feature_chw,
                      std::size_t y, double contrast = 0.03);

/// "row,col,value" rows.
std::string heatmap_csv(const Heatmap& map);

struct PlaneFitConfig {
  std::size_t steps = 300;
  double lr = 0.01;
  double beta = 2.0;
};

struct PlaneFitReport {
  std::vector<std::size_t> classes;
  Tensor means;   // [S, D] constrained means, in `classes` order
  Tensor center;  // [D]
  Tensor basis;   // [2, D], orthonormal rows
  std::vector<std::array<double, 2>> coords;  // per class, in the basis
  double third_singular_value = 0.0;
  double accuracy_before = 0.0;  // nearest mean among the subset, original means
  double accuracy_after = 0.0;   // same with the constrained means
  double final_loss = 0.0;
};

/// Restricts the means of `classes` to a common 2-plane (initialized from
/// their principal plane) and finetunes center, in-plane coordinates and plane
/// on frozen latents of the samples from those classes.
PlaneFitReport fit_2d_decision_space(const FlowModel& model, const Dataset& data, const std::vector<std::size_t>& classes,
                                     const PlaneFitConfig& cfg);

/// argmin_y |z - means_y| over the rows of `means`.
std::size_t nearest_mean(std::span<const double> z, const Tensor& means);

}  // namespace ibgc
